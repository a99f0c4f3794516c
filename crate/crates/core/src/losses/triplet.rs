use rayon::prelude::*;

use super::{backprop_normalize, normalize_rows, Batch, LossError, LossOutput};

/// Which triplets of a batch contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mining {
    /// Every `(a, p, n)` with `label(a) = label(p) ≠ label(n)`, `a ≠ p`.
    All,
    /// Negative closer to the anchor than the positive: `d(a,n) < d(a,p)`.
    Hard,
    /// Negative further from the anchor than the positive: `d(a,n) > d(a,p)`.
    Semi,
    /// The usual semi-hard band `d(a,p) < d(a,n) < d(a,p) + m`.
    SemiHardBand,
}

impl Mining {
    pub fn name(self) -> &'static str {
        match self {
            Mining::All => "all",
            Mining::Hard => "hard",
            Mining::Semi => "semi",
            Mining::SemiHardBand => "semi-band",
        }
    }

    fn keeps(self, d_ap: f64, d_an: f64, margin: f64) -> bool {
        match self {
            Mining::All => true,
            Mining::Hard => d_an < d_ap,
            Mining::Semi => d_an > d_ap,
            Mining::SemiHardBand => d_ap < d_an && d_an < d_ap + margin,
        }
    }
}

impl std::str::FromStr for Mining {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" => Ok(Mining::All),
            "hard" => Ok(Mining::Hard),
            "semi" => Ok(Mining::Semi),
            "semi-band" | "semihard" | "semi-hard" => Ok(Mining::SemiHardBand),
            other => Err(LossError::Config(format!("unknown mining rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletConfig {
    pub margin: f64,
    pub mining: Mining,
}

impl TripletConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(LossError::Config(format!("triplet margin {} must be finite and positive", self.margin)));
        }
        Ok(())
    }
}

fn distance_matrix(unit: &[f64], dim: usize) -> Vec<f64> {
    let b = unit.len() / dim;
    let mut d = vec![0.0; b * b];
    d.par_chunks_mut(b).enumerate().for_each(|(i, row)| {
        let ui = &unit[i * dim..(i + 1) * dim];
        for (j, out) in row.iter_mut().enumerate() {
            let uj = &unit[j * dim..(j + 1) * dim];
            *out = ui.iter().zip(uj).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        }
    });
    d
}

fn anchor_triplets(a: usize, labels: &[usize], d: &[f64], cfg: &TripletConfig) -> Vec<[usize; 3]> {
    let b = labels.len();
    let mut out = Vec::new();
    for p in 0..b {
        if p == a || labels[p] != labels[a] {
            continue;
        }
        let d_ap = d[a * b + p];
        for n in 0..b {
            if labels[n] == labels[a] {
                continue;
            }
            if cfg.mining.keeps(d_ap, d[a * b + n], cfg.margin) {
                out.push([a, p, n]);
            }
        }
    }
    out
}

/// Triplets `[a, p, n]` chosen by the mining rule, in lexicographic order.
pub fn select_triplets(batch: &Batch<'_>, cfg: &TripletConfig) -> Result<Vec<[usize; 3]>, LossError> {
    cfg.validate()?;
    let (unit, _) = normalize_rows(batch.embeddings, batch.dim, "embedding")?;
    let d = distance_matrix(&unit, batch.dim);
    Ok((0..batch.len()).into_par_iter().flat_map_iter(|a| anchor_triplets(a, batch.labels, &d, cfg)).collect())
}

/// Mean hinge `max(0, d(a,p) − d(a,n) + m)` over the mined triplets.
///
/// Distances are Euclidean between L2-normalized rows. A batch without any
/// mined triplet yields zero loss and a zero gradient.
pub fn triplet_loss(batch: &Batch<'_>, cfg: &TripletConfig) -> Result<LossOutput, LossError> {
    cfg.validate()?;
    let b = batch.len();
    let dim = batch.dim;
    let (unit, norms) = normalize_rows(batch.embeddings, dim, "embedding")?;
    let d = distance_matrix(&unit, dim);

    // Row `a` of the coefficient matrix: +1 per active (a,p), −1 per active (a,n).
    let per_anchor: Vec<(f64, usize, usize, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|a| {
            let mut coef = vec![0.0; b];
            let mut sum = 0.0;
            let mut active = 0;
            let triplets = anchor_triplets(a, batch.labels, &d, cfg);
            for &[_, p, n] in &triplets {
                let h = d[a * b + p] - d[a * b + n] + cfg.margin;
                if h > 0.0 {
                    sum += h;
                    active += 1;
                    coef[p] += 1.0;
                    coef[n] -= 1.0;
                }
            }
            (sum, active, triplets.len(), coef)
        })
        .collect();

    let n_selected: usize = per_anchor.iter().map(|t| t.2).sum();
    let n_active: usize = per_anchor.iter().map(|t| t.1).sum();
    let mut grad_embeddings = vec![0.0; b * dim];
    if n_selected == 0 {
        return Ok(LossOutput { loss: 0.0, grad_embeddings, grad_weights: Vec::new(), n_active, n_selected });
    }
    let scale = 1.0 / n_selected as f64;
    let loss = per_anchor.iter().map(|t| t.0).sum::<f64>() * scale;

    grad_embeddings.par_chunks_mut(dim).enumerate().for_each(|(i, out)| {
        let ui = &unit[i * dim..(i + 1) * dim];
        let mut g = vec![0.0; dim];
        for j in 0..b {
            let s = per_anchor[i].3[j] + per_anchor[j].3[i];
            let dij = d[i * b + j];
            if s == 0.0 || dij < 1e-12 {
                continue;
            }
            let c = s * scale / dij;
            let uj = &unit[j * dim..(j + 1) * dim];
            for ((gd, x), y) in g.iter_mut().zip(ui).zip(uj) {
                *gd += c * (x - y);
            }
        }
        backprop_normalize(&g, ui, norms[i], out);
    });

    Ok(LossOutput { loss, grad_embeddings, grad_weights: Vec::new(), n_active, n_selected })
}
