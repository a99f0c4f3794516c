//! Linear projection head trained on frozen features with SGD + momentum and
//! a cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingMatrix};
use crate::losses::{arcface_loss, triplet_loss, ArcFaceConfig, Batch, LossError, TripletConfig};
use crate::rng::{seeded, shuffle};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training needs at least two identities, found {0}")]
    TooFewIdentities(usize),
    #[error("{labels} labels for {rows} feature rows")]
    Alignment { labels: usize, rows: usize },
    #[error("invalid trainer configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize, trace: Vec<EpochStats> },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossConfig {
    ArcFace(ArcFaceConfig),
    Triplet(TripletConfig),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Output width of the projection.
    pub embedding_dim: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(loss: LossConfig, lr: f64) -> Self {
        Self { loss, lr, momentum: 0.9, epochs: 100, batch_size: 128, embedding_dim: 64, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!("learning rate {} must be finite and positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.embedding_dim == 0 {
            return Err(TrainError::Config("epochs, batch size and embedding width must be at least 1".into()));
        }
        match &self.loss {
            LossConfig::ArcFace(c) => c.validate()?,
            LossConfig::Triplet(c) => c.validate()?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Batch losses averaged with batch-size weights.
    pub mean_loss: f64,
    /// ArcFace: samples seen. Triplet: triplets with a positive hinge.
    pub n_active: usize,
}

/// Learning rate of epoch `t` out of `epochs`: `lr·(1 + cos(π·t/epochs))/2`.
pub fn cosine_lr(lr: f64, t: usize, epochs: usize) -> f64 {
    lr * (1.0 + (PI * t as f64 / epochs as f64).cos()) / 2.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    /// Row-major `dim_in x dim_out`.
    pub projection: Vec<f64>,
    pub dim_in: usize,
    pub dim_out: usize,
    /// Identity names in class-index order.
    pub classes: Vec<String>,
    pub trace: Vec<EpochStats>,
}

impl TrainedHead {
    /// Projects every row and L2-normalizes the result.
    pub fn project(&self, features: &EmbeddingMatrix) -> Result<EmbeddingMatrix, TrainError> {
        if features.dim() != self.dim_in {
            return Err(TrainError::Config(format!(
                "features have width {}, head expects {}",
                features.dim(),
                self.dim_in
            )));
        }
        let x: Vec<f64> = features.data().iter().map(|&v| f64::from(v)).collect();
        let e = matmul(&x, &self.projection, self.dim_in, self.dim_out);
        let m = EmbeddingMatrix::new(e.iter().map(|&v| v as f32).collect(), self.dim_out, features.row_ids().to_vec())?;
        Ok(m.normalize()?)
    }
}

/// `(n x k) · (k x m)`.
fn matmul(a: &[f64], b: &[f64], k: usize, m: usize) -> Vec<f64> {
    let n = a.len() / k;
    let mut out = vec![0.0; n * m];
    for (row, o) in a.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        for (&av, brow) in row.iter().zip(b.chunks_exact(m)) {
            for (ov, bv) in o.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
    out
}

/// Gradient of the projection: `Xᵀ · G` for `X` (n x k) and `G` (n x m).
fn matmul_tn(x: &[f64], g: &[f64], k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for (xr, gr) in x.chunks_exact(k).zip(g.chunks_exact(m)) {
        for (&xv, orow) in xr.iter().zip(out.chunks_exact_mut(m)) {
            for (ov, gv) in orow.iter_mut().zip(gr) {
                *ov += xv * gv;
            }
        }
    }
    out
}

fn sgd_step(param: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// A parameter block whose norm exceeds its initial norm by this factor is
/// treated as blown up. Both losses normalize their inputs, so the loss stays
/// bounded however large the weights get.
pub const WEIGHT_BLOWUP_FACTOR: f64 = 1e6;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn healthy(v: &[f64], initial_norm: f64) -> bool {
    let n = norm(v);
    n.is_finite() && n <= WEIGHT_BLOWUP_FACTOR * initial_norm
}

/// Trains a linear head on `features` with one identity label per row.
///
/// Classes are indexed in sorted identity order. Each epoch shuffles the rows
/// with the seeded generator and walks them in mini-batches. Training stops
/// with [`TrainError::Diverged`] on a non-finite loss or parameter, an epoch
/// loss above ten times the first epoch's, or weights grown past
/// [`WEIGHT_BLOWUP_FACTOR`] times their initial norm.
pub fn train_head(features: &EmbeddingMatrix, labels: &[String], cfg: &TrainConfig) -> Result<TrainedHead, TrainError> {
    cfg.validate()?;
    let n = features.rows();
    if labels.len() != n {
        return Err(TrainError::Alignment { labels: labels.len(), rows: n });
    }
    let class_index: BTreeMap<&str, usize> = {
        let mut m: BTreeMap<&str, usize> = labels.iter().map(|l| (l.as_str(), 0)).collect();
        for (i, v) in m.values_mut().enumerate() {
            *v = i;
        }
        m
    };
    if class_index.len() < 2 {
        return Err(TrainError::TooFewIdentities(class_index.len()));
    }
    let classes: Vec<String> = class_index.keys().map(|s| s.to_string()).collect();
    let y: Vec<usize> = labels.iter().map(|l| class_index[l.as_str()]).collect();
    let d = features.dim();
    let e = cfg.embedding_dim;
    let x: Vec<f64> = features.data().iter().map(|&v| f64::from(v)).collect();

    let mut rng = seeded(cfg.seed);
    let init_std = 1.0 / (d as f64).sqrt();
    let mut proj: Vec<f64> = (0..d * e).map(|_| init_std * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut weights: Vec<f64> = match cfg.loss {
        LossConfig::ArcFace(_) => (0..classes.len() * e).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        LossConfig::Triplet(_) => Vec::new(),
    };
    let (proj_norm0, weights_norm0) = (norm(&proj), norm(&weights));
    let mut vel_proj = vec![0.0; proj.len()];
    let mut vel_weights = vec![0.0; weights.len()];

    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut bx = Vec::with_capacity(cfg.batch_size * d);
    let mut by = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        shuffle(&mut rng, &mut order);
        let mut weighted = 0.0;
        let mut n_active = 0;
        for chunk in order.chunks(cfg.batch_size) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.extend_from_slice(&x[i * d..(i + 1) * d]);
                by.push(y[i]);
            }
            let emb = matmul(&bx, &proj, d, e);
            if !emb.iter().all(|v| v.is_finite()) {
                return Err(TrainError::Diverged { epoch, trace });
            }
            let batch = Batch::new(&emb, e, &by)?;
            let out = match &cfg.loss {
                LossConfig::ArcFace(c) => arcface_loss(&batch, &weights, c)?,
                LossConfig::Triplet(c) => triplet_loss(&batch, c)?,
            };
            if !out.loss.is_finite() {
                return Err(TrainError::Diverged { epoch, trace });
            }
            weighted += out.loss * chunk.len() as f64;
            n_active += out.n_active;
            let grad_proj = matmul_tn(&bx, &out.grad_embeddings, d, e);
            sgd_step(&mut proj, &mut vel_proj, &grad_proj, lr, cfg.momentum);
            if !out.grad_weights.is_empty() {
                sgd_step(&mut weights, &mut vel_weights, &out.grad_weights, lr, cfg.momentum);
            }
            if !healthy(&proj, proj_norm0) || !healthy(&weights, weights_norm0) {
                return Err(TrainError::Diverged { epoch, trace });
            }
        }
        let mean_loss = weighted / n as f64;
        trace.push(EpochStats { epoch, lr, mean_loss, n_active });
        let initial = trace[0].mean_loss;
        if !mean_loss.is_finite() || (initial > 1e-12 && mean_loss > 10.0 * initial) {
            return Err(TrainError::Diverged { epoch, trace });
        }
    }
    Ok(TrainedHead { projection: proj, dim_in: d, dim_out: e, classes, trace })
}

/// Writes `epoch, lr, mean_loss, n_active` rows with a header.
pub fn write_trace<W: Write>(trace: &[EpochStats], writer: W, delimiter: u8) -> Result<(), TrainError> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
    let io = |e: csv::Error| TrainError::Io(e.into());
    w.write_record(["epoch", "lr", "mean_loss", "n_active"]).map_err(io)?;
    for s in trace {
        w.write_record([
            s.epoch.to_string(),
            format!("{:e}", s.lr),
            format!("{:e}", s.mean_loss),
            s.n_active.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
