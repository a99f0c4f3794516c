//! Local-descriptor matching: per-image ratio test, correspondence tallies,
//! threshold calibration on the reference set, and identity prediction by
//! correspondence count.
//!
//! The `WDDS` descriptor file (little-endian): magic `b"WDDS"`, `u16`
//! version, `u32` descriptor width `D`, `u64` image count, then per image a
//! `u32`-length-prefixed UTF-8 image id, `u32` descriptor count `K` and
//! `K * D` `f32` values.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::binio;
use crate::matcher::format_sig9;

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"WDDS";
pub const DESCRIPTOR_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum LocalError {
    #[error("descriptor width mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("descriptor width must be positive")]
    ZeroDim,
    #[error("descriptor data for `{image_id}` has length {len}, not a multiple of {dim}")]
    DataLength { image_id: String, len: usize, dim: usize },
    #[error("non-finite descriptor value in `{0}`")]
    NonFinite(String),
    #[error("ratio threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("threshold grid must be non-empty and strictly increasing within (0, 1]")]
    InvalidGrid,
    #[error("calibration needs at least two identities in the reference set")]
    SingleIdentity,
    #[error("{identities} identities for {references} reference images")]
    Alignment { identities: usize, references: usize },
    #[error("bad descriptor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `K x D` local descriptors of one image. `K` may be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    image_id: String,
    dim: usize,
    data: Vec<f32>,
}

impl DescriptorSet {
    pub fn new(image_id: impl Into<String>, dim: usize, data: Vec<f32>) -> Result<Self, LocalError> {
        let image_id = image_id.into();
        if dim == 0 {
            return Err(LocalError::ZeroDim);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(LocalError::DataLength { image_id, len: data.len(), dim });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(LocalError::NonFinite(image_id));
        }
        Ok(Self { image_id, dim, data })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn descriptors(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }
}

/// How correspondence counts become an identity decision.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// The single reference image with the most correspondences decides.
    #[default]
    ReferenceImage,
    /// Counts are summed per identity.
    IdentitySum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioTestConfig {
    pub threshold: f64,
    pub grid: Vec<f64>,
    pub aggregation: Aggregation,
}

/// `{0.5, 0.55, ..., 0.95}`.
pub fn default_grid() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

impl Default for RatioTestConfig {
    fn default() -> Self {
        Self { threshold: 0.8, grid: default_grid(), aggregation: Aggregation::default() }
    }
}

impl RatioTestConfig {
    pub fn validate(&self) -> Result<(), LocalError> {
        check_threshold(self.threshold)?;
        validate_grid(&self.grid)
    }
}

fn check_threshold(t: f64) -> Result<(), LocalError> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(LocalError::InvalidThreshold(t))
    }
}

pub fn validate_grid(grid: &[f64]) -> Result<(), LocalError> {
    let in_range = grid.iter().all(|&t| t > 0.0 && t <= 1.0);
    let increasing = grid.windows(2).all(|w| w[0] < w[1]);
    if grid.is_empty() || !in_range || !increasing {
        return Err(LocalError::InvalidGrid);
    }
    Ok(())
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Ratio `d1 / d2` of the two nearest descriptors of `reference` to `q`.
/// `None` when the reference has fewer than two descriptors; NaN when both
/// distances are zero.
fn nearest_ratio(q: &[f32], reference: &DescriptorSet) -> Option<f64> {
    if reference.len() < 2 {
        return None;
    }
    let (mut d1, mut d2) = (f64::INFINITY, f64::INFINITY);
    for r in reference.descriptors() {
        let d = squared_distance(q, r);
        if d < d1 {
            d2 = d1;
            d1 = d;
        } else if d < d2 {
            d2 = d;
        }
    }
    Some(d1.sqrt() / d2.sqrt())
}

/// Sorted finite ratios of every query descriptor against one reference image.
fn sorted_ratios(query: &DescriptorSet, reference: &DescriptorSet) -> Vec<f64> {
    let mut ratios: Vec<f64> =
        query.descriptors().filter_map(|q| nearest_ratio(q, reference)).filter(|r| !r.is_nan()).collect();
    ratios.sort_by(f64::total_cmp);
    ratios
}

/// Number of ratios strictly below `threshold`.
fn accepted(sorted: &[f64], threshold: f64) -> u32 {
    sorted.partition_point(|&r| r < threshold) as u32
}

/// Accepted-match counts of one query image against each reference image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrespondenceTally {
    pub query_id: String,
    /// `(reference image id, count)` in reference collection order.
    pub counts: Vec<(String, u32)>,
}

fn check_dims(query: &DescriptorSet, references: &[DescriptorSet]) -> Result<(), LocalError> {
    for r in references {
        if r.dim() != query.dim() {
            return Err(LocalError::Shape { expected: query.dim(), got: r.dim() });
        }
    }
    Ok(())
}

/// Ratio test of every query descriptor within each reference image: accept
/// iff `d1 / d2 < threshold`, where `d1 <= d2` are the two smallest
/// Euclidean distances to that image's descriptors.
pub fn pair_correspondences(
    query: &DescriptorSet,
    references: &[DescriptorSet],
    threshold: f64,
) -> Result<CorrespondenceTally, LocalError> {
    check_threshold(threshold)?;
    check_dims(query, references)?;
    let counts =
        references.iter().map(|r| (r.image_id().to_string(), accepted(&sorted_ratios(query, r), threshold))).collect();
    Ok(CorrespondenceTally { query_id: query.image_id().to_string(), counts })
}

/// [`pair_correspondences`] for many query images, in parallel.
pub fn tally_all(
    queries: &[DescriptorSet],
    references: &[DescriptorSet],
    threshold: f64,
) -> Result<Vec<CorrespondenceTally>, LocalError> {
    queries.par_iter().map(|q| pair_correspondences(q, references, threshold)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalHit {
    pub identity: String,
    pub reference_id: String,
    pub correspondences: u32,
}

/// `hit` is `None` when no reference received a single correspondence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalPrediction {
    pub query_id: String,
    pub hit: Option<LocalHit>,
}

impl LocalPrediction {
    pub fn identity(&self) -> Option<&str> {
        self.hit.as_ref().map(|h| h.identity.as_str())
    }
}

/// `identities[i]` labels the i-th entry of `tally.counts`.
pub fn predict_identity(
    tally: &CorrespondenceTally,
    identities: &[String],
    aggregation: Aggregation,
) -> Result<LocalPrediction, LocalError> {
    if identities.len() != tally.counts.len() {
        return Err(LocalError::Alignment { identities: identities.len(), references: tally.counts.len() });
    }
    let entries = || tally.counts.iter().zip(identities).map(|((id, c), ident)| (id.as_str(), *c, ident.as_str()));
    // best image: highest count, then lexicographically smallest id
    let best_image = |it: &mut dyn Iterator<Item = (&str, u32, &str)>| {
        it.filter(|e| e.1 > 0)
            .min_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)))
            .map(|(id, c, ident)| (id.to_string(), c, ident.to_string()))
    };
    let hit = match aggregation {
        Aggregation::ReferenceImage => best_image(&mut entries())
            .map(|(reference_id, correspondences, identity)| LocalHit { identity, reference_id, correspondences }),
        Aggregation::IdentitySum => {
            let mut sums: BTreeMap<&str, u32> = BTreeMap::new();
            for (_, c, ident) in entries() {
                *sums.entry(ident).or_default() += c;
            }
            let winner = sums.into_iter().filter(|e| e.1 > 0).min_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            winner.map(|(identity, total)| {
                let (reference_id, _, _) =
                    best_image(&mut entries().filter(|e| e.2 == identity)).expect("identity has a positive count");
                LocalHit { identity: identity.to_string(), reference_id, correspondences: total }
            })
        }
    };
    Ok(LocalPrediction { query_id: tally.query_id.clone(), hit })
}

/// Outcome of threshold calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub threshold: f64,
    /// Leave-one-out accuracy for every grid value, in grid order.
    pub accuracies: Vec<(f64, f64)>,
}

/// Picks the grid threshold with the best leave-one-out identification
/// accuracy inside the reference set (each image queried against all the
/// others). Ties go to the smallest threshold.
pub fn calibrate_threshold(
    references: &[DescriptorSet],
    identities: &[String],
    grid: &[f64],
    aggregation: Aggregation,
) -> Result<Calibration, LocalError> {
    validate_grid(grid)?;
    if identities.len() != references.len() {
        return Err(LocalError::Alignment { identities: identities.len(), references: references.len() });
    }
    let distinct: std::collections::BTreeSet<&String> = identities.iter().collect();
    if distinct.len() < 2 {
        return Err(LocalError::SingleIdentity);
    }
    if let Some(first) = references.first() {
        check_dims(first, references)?;
    }

    let per_query: Vec<Vec<bool>> = (0..references.len())
        .into_par_iter()
        .map(|i| {
            let others: Vec<usize> = (0..references.len()).filter(|&j| j != i).collect();
            let ratios: Vec<Vec<f64>> = others.iter().map(|&j| sorted_ratios(&references[i], &references[j])).collect();
            let other_identities: Vec<String> = others.iter().map(|&j| identities[j].clone()).collect();
            grid.iter()
                .map(|&t| {
                    let tally = CorrespondenceTally {
                        query_id: references[i].image_id().to_string(),
                        counts: others
                            .iter()
                            .zip(&ratios)
                            .map(|(&j, r)| (references[j].image_id().to_string(), accepted(r, t)))
                            .collect(),
                    };
                    let p = predict_identity(&tally, &other_identities, aggregation).expect("aligned");
                    p.identity() == Some(identities[i].as_str())
                })
                .collect()
        })
        .collect();

    let n = references.len() as f64;
    let accuracies: Vec<(f64, f64)> =
        grid.iter().enumerate().map(|(g, &t)| (t, per_query.iter().filter(|row| row[g]).count() as f64 / n)).collect();
    let mut best = accuracies[0];
    for &(t, acc) in &accuracies[1..] {
        if acc > best.1 {
            best = (t, acc);
        }
    }
    Ok(Calibration { threshold: best.0, accuracies })
}

pub fn write_descriptors<W: Write>(sets: &[DescriptorSet], dim: usize, mut w: W) -> Result<(), LocalError> {
    if dim == 0 {
        return Err(LocalError::ZeroDim);
    }
    w.write_all(DESCRIPTOR_MAGIC)?;
    w.write_all(&DESCRIPTOR_VERSION.to_le_bytes())?;
    w.write_all(&binio::u32_len(dim)?.to_le_bytes())?;
    w.write_all(&(sets.len() as u64).to_le_bytes())?;
    for s in sets {
        if s.dim() != dim {
            return Err(LocalError::Shape { expected: dim, got: s.dim() });
        }
        binio::write_str(&mut w, s.image_id())?;
        w.write_all(&binio::u32_len(s.len())?.to_le_bytes())?;
        binio::write_f32s(&mut w, &s.data)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `query_id, predicted_identity, reference_id, correspondences`
/// rows with a header; queries without any correspondence get empty fields.
pub fn write_local_predictions<W: Write>(
    predictions: &[LocalPrediction],
    writer: W,
    delimiter: u8,
) -> Result<(), LocalError> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
    let io = |e: csv::Error| LocalError::Io(e.into());
    w.write_record(["query_id", "predicted_identity", "reference_id", "correspondences"]).map_err(io)?;
    for p in predictions {
        let (ident, reference, count) = match &p.hit {
            Some(h) => (h.identity.as_str(), h.reference_id.as_str(), h.correspondences.to_string()),
            None => ("", "", String::new()),
        };
        w.write_record([p.query_id.as_str(), ident, reference, &count]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// `threshold, accuracy` per grid value plus a final `selected` row.
pub fn write_calibration<W: Write>(cal: &Calibration, writer: W, delimiter: u8) -> Result<(), LocalError> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
    let io = |e: csv::Error| LocalError::Io(e.into());
    w.write_record(["threshold", "accuracy"]).map_err(io)?;
    for (t, a) in &cal.accuracies {
        w.write_record([t.to_string(), format_sig9(*a)]).map_err(io)?;
    }
    w.write_record(["selected".to_string(), cal.threshold.to_string()]).map_err(io)?;
    w.flush()?;
    Ok(())
}

/// Returns the descriptor width and the sets.
pub fn read_descriptors<R: Read>(mut r: R) -> Result<(usize, Vec<DescriptorSet>), LocalError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DESCRIPTOR_MAGIC {
        return Err(LocalError::Format(format!("bad magic {magic:?}")));
    }
    let version = binio::read_u16(&mut r)?;
    if version != DESCRIPTOR_VERSION {
        return Err(LocalError::Format(format!("unsupported version {version}")));
    }
    let dim = binio::read_u32(&mut r)? as usize;
    if dim == 0 {
        return Err(LocalError::ZeroDim);
    }
    let count = binio::read_u64(&mut r)?;
    let mut sets = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let id = binio::read_str(&mut r).map_err(|e| LocalError::Format(e.to_string()))?;
        let k = binio::read_u32(&mut r)? as usize;
        let data = binio::read_f32s(&mut r, k * dim)?;
        sets.push(DescriptorSet::new(id, dim, data)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(LocalError::Format("trailing bytes".into()));
    }
    Ok((dim, sets))
}
