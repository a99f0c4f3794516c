use std::f64::consts::PI;

use rayon::prelude::*;

use super::{backprop_normalize, dot, normalize_rows, Batch, LossError, LossOutput};

/// Additive angular margin softmax parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcFaceConfig {
    /// Angular margin in radians, in `[0, π)`.
    pub margin: f64,
    /// Hypersphere radius.
    pub scale: f64,
}

impl ArcFaceConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.margin >= 0.0 && self.margin < PI) {
            return Err(LossError::Config(format!("ArcFace margin {} outside [0, π)", self.margin)));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(LossError::Config(format!("ArcFace scale {} must be finite and positive", self.scale)));
        }
        Ok(())
    }
}

/// Per-sample loss and `∂loss/∂cos` for every class.
fn sample_terms(cosines: &[f64], label: usize, cfg: &ArcFaceConfig) -> (f64, Vec<f64>) {
    let s = cfg.scale;
    let m = cfg.margin;
    let c = cosines[label].clamp(-1.0, 1.0);
    let theta = c.acos();
    let clamped = theta > PI - m;
    let theta = theta.min(PI - m);

    let mut logits: Vec<f64> = cosines.iter().map(|&c| s * c).collect();
    logits[label] = s * (theta + m).cos();

    let (arg_max, max) =
        logits
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, z)| if z > best.1 { (j, z) } else { best });
    let rest: f64 = logits.iter().enumerate().filter(|&(j, _)| j != arg_max).map(|(_, &z)| (z - max).exp()).sum();
    let log_norm = max + rest.ln_1p();
    let loss = (max - logits[label]) + rest.ln_1p();

    let dz_dc_target = if m == 0.0 {
        s
    } else if clamped {
        0.0
    } else {
        let sin_theta = (1.0 - c * c).max(0.0).sqrt().max(1e-12);
        s * (theta + m).sin() / sin_theta
    };
    let grad_cos = logits
        .iter()
        .enumerate()
        .map(|(j, &z)| {
            let p = (z - log_norm).exp();
            if j == label {
                (p - 1.0) * dz_dc_target
            } else {
                p * s
            }
        })
        .collect();
    (loss, grad_cos)
}

/// Mean ArcFace loss over the batch, with gradients w.r.t. the embeddings
/// and the `C x D` class weight matrix.
///
/// The target logit is `s·cos(θ_y + m)` with `θ_y` clamped to `[0, π − m]`;
/// other logits are `s·cos θ_j`. The log-sum-exp is shifted by its maximum.
pub fn arcface_loss(batch: &Batch<'_>, class_weights: &[f64], cfg: &ArcFaceConfig) -> Result<LossOutput, LossError> {
    cfg.validate()?;
    let dim = batch.dim;
    if class_weights.is_empty() || !class_weights.len().is_multiple_of(dim) {
        return Err(LossError::Shape(format!("{} class weight values for width {dim}", class_weights.len())));
    }
    let n_classes = class_weights.len() / dim;
    for (sample, &label) in batch.labels.iter().enumerate() {
        if label >= n_classes {
            return Err(LossError::LabelOutOfRange { sample, label, n_classes });
        }
    }
    let b = batch.len();
    let (u, x_norms) = normalize_rows(batch.embeddings, dim, "embedding")?;
    let (w, w_norms) = normalize_rows(class_weights, dim, "class weight")?;

    let per_sample: Vec<(f64, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|i| {
            let ui = &u[i * dim..(i + 1) * dim];
            let cosines: Vec<f64> = w.chunks_exact(dim).map(|wj| dot(ui, wj)).collect();
            sample_terms(&cosines, batch.labels[i], cfg)
        })
        .collect();

    let inv_b = 1.0 / b as f64;
    let loss = per_sample.iter().map(|(l, _)| l).sum::<f64>() * inv_b;

    let mut grad_embeddings = vec![0.0; b * dim];
    grad_embeddings.par_chunks_mut(dim).enumerate().for_each(|(i, out)| {
        let mut g = vec![0.0; dim];
        for (j, wj) in w.chunks_exact(dim).enumerate() {
            let coef = per_sample[i].1[j] * inv_b;
            for (gd, wd) in g.iter_mut().zip(wj) {
                *gd += coef * wd;
            }
        }
        backprop_normalize(&g, &u[i * dim..(i + 1) * dim], x_norms[i], out);
    });

    let mut grad_weights = vec![0.0; class_weights.len()];
    grad_weights.par_chunks_mut(dim).enumerate().for_each(|(j, out)| {
        let mut g = vec![0.0; dim];
        for (i, ui) in u.chunks_exact(dim).enumerate() {
            let coef = per_sample[i].1[j] * inv_b;
            for (gd, ud) in g.iter_mut().zip(ui) {
                *gd += coef * ud;
            }
        }
        backprop_normalize(&g, &w[j * dim..(j + 1) * dim], w_norms[j], out);
    });

    Ok(LossOutput { loss, grad_embeddings, grad_weights, n_active: b, n_selected: b })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_sample_has_vanishing_loss() {
        let emb = [1.0, 0.0];
        let weights = [1.0, 0.0, 0.0, 1.0];
        let labels = [0];
        let batch = Batch::new(&emb, 2, &labels).unwrap();
        let out = arcface_loss(&batch, &weights, &ArcFaceConfig { margin: 0.5, scale: 64.0 }).unwrap();
        let closed_form = (-64.0 * 0.5f64.cos()).exp().ln_1p();
        assert!(closed_form > 3e-25 && closed_form < 5e-25, "{closed_form}");
        assert!((out.loss - closed_form).abs() <= 1e-12 * closed_form, "{} vs {closed_form}", out.loss);
    }

    #[test]
    fn config_and_shape_errors() {
        let emb = [1.0, 0.0, 0.0, 0.0];
        let labels = [0, 1];
        let batch = Batch::new(&emb, 2, &labels).unwrap();
        let w = [1.0, 0.0, 0.0, 1.0];
        let cfg = ArcFaceConfig { margin: 0.5, scale: 64.0 };
        assert_eq!(arcface_loss(&batch, &w, &cfg), Err(LossError::Degenerate { what: "embedding", row: 1 }));
        let emb = [1.0, 0.0, 0.0, 1.0];
        let batch = Batch::new(&emb, 2, &labels).unwrap();
        assert!(matches!(arcface_loss(&batch, &w[..2], &cfg), Err(LossError::LabelOutOfRange { sample: 1, .. })));
        assert!(matches!(
            arcface_loss(&batch, &w, &ArcFaceConfig { margin: PI, scale: 1.0 }),
            Err(LossError::Config(_))
        ));
        assert!(matches!(
            arcface_loss(&batch, &w, &ArcFaceConfig { margin: 0.1, scale: 0.0 }),
            Err(LossError::Config(_))
        ));
        assert!(Batch::new(&emb, 3, &labels).is_err());
    }

    #[test]
    fn margin_beyond_pi_minus_m_is_clamped() {
        // embedding opposite its class weight: θ = π > π - m
        let emb = [-1.0, 0.0];
        let weights = [1.0, 0.0, 0.0, 1.0];
        let labels = [0];
        let batch = Batch::new(&emb, 2, &labels).unwrap();
        let out = arcface_loss(&batch, &weights, &ArcFaceConfig { margin: 0.5, scale: 2.0 }).unwrap();
        // target logit s·cos(π) = -2, other logit 0
        let expected = (1.0f64 + 2.0f64.exp()).ln();
        assert!((out.loss - expected).abs() < 1e-12);
    }
}
