//! Identity prediction from embeddings: a reference database queried by
//! nearest-neighbour cosine similarity.

use std::collections::HashMap;
use std::io::Write;

use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingMatrix};
use crate::knn::{self, KnnError};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("{labels} labels for {rows} reference rows")]
    Alignment { labels: usize, rows: usize },
    #[error("empty identity label for reference row {0}")]
    EmptyLabel(usize),
    #[error("no predictions to evaluate")]
    EmptyInput,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Knn(#[from] KnnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Normalized reference embeddings with one identity label per row.
#[derive(Debug, Clone)]
pub struct IdentityDatabase {
    embeddings: EmbeddingMatrix,
    identities: Vec<String>,
}

impl IdentityDatabase {
    pub fn build(reference: &EmbeddingMatrix, labels: Vec<String>) -> Result<Self, MatchError> {
        if labels.len() != reference.rows() {
            return Err(MatchError::Alignment { labels: labels.len(), rows: reference.rows() });
        }
        if let Some(i) = labels.iter().position(String::is_empty) {
            return Err(MatchError::EmptyLabel(i));
        }
        Ok(Self { embeddings: reference.normalize()?, identities: labels })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn identities(&self) -> &[String] {
        &self.identities
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchPrediction {
    pub query_id: String,
    pub predicted_identity: String,
    pub best_reference_id: String,
    /// Cosine similarity to `best_reference_id`.
    pub score: f32,
}

/// Matching options. The default is plain 1-NN.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchConfig {
    /// Majority vote over the `k` nearest references instead of 1-NN.
    pub vote_k: Option<usize>,
}

pub fn match_queries(db: &IdentityDatabase, query: &EmbeddingMatrix) -> Result<Vec<MatchPrediction>, MatchError> {
    match_with(db, query, MatchConfig::default())
}

pub fn match_with(
    db: &IdentityDatabase,
    query: &EmbeddingMatrix,
    cfg: MatchConfig,
) -> Result<Vec<MatchPrediction>, MatchError> {
    let db_dim = db.embeddings.dim();
    if query.dim() != db_dim {
        return Err(KnnError::Shape { query: query.dim(), reference: db_dim }.into());
    }
    let query = if query.is_normalized() { query.clone() } else { query.normalize()? };
    let k = cfg.vote_k.unwrap_or(1).clamp(1, db.len());
    let neighbours = knn::topk(&query, &db.embeddings, k)?;
    let ref_ids = db.embeddings.row_ids();

    let predictions = (0..query.rows())
        .map(|q| {
            let (idx, score) = if k == 1 {
                neighbours.best(q)
            } else {
                vote(&db.identities, neighbours.indices(q), neighbours.scores(q))
            };
            MatchPrediction {
                query_id: query.row_ids()[q].clone(),
                predicted_identity: db.identities[idx].clone(),
                best_reference_id: ref_ids[idx].clone(),
                score,
            }
        })
        .collect();
    Ok(predictions)
}

/// Most frequent label among ranked neighbours; ties go to the label whose
/// best member ranks highest. Returns that best member.
fn vote(labels: &[String], ranked: &[usize], scores: &[f32]) -> (usize, f32) {
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (rank, &idx) in ranked.iter().enumerate() {
        counts.entry(labels[idx].as_str()).or_insert((0, rank)).0 += 1;
    }
    let (_, &(_, first_rank)) =
        counts.iter().max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1))).expect("at least one neighbour");
    (ranked[first_rank], scores[first_rank])
}

/// Fraction of predictions whose identity equals the aligned ground truth.
pub fn evaluate(predictions: &[MatchPrediction], ground_truth: &[String]) -> Result<f64, MatchError> {
    if predictions.is_empty() {
        return Err(MatchError::EmptyInput);
    }
    if predictions.len() != ground_truth.len() {
        return Err(MatchError::Alignment { labels: ground_truth.len(), rows: predictions.len() });
    }
    let correct = predictions.iter().zip(ground_truth).filter(|(p, truth)| &p.predicted_identity == *truth).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Formats with nine significant digits, like C's `%.9g`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Writes `query_id, predicted_identity, best_reference_id, score` rows with a header.
pub fn write_predictions<W: Write>(
    predictions: &[MatchPrediction],
    writer: W,
    delimiter: u8,
) -> Result<(), MatchError> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
    let io = |e: csv::Error| MatchError::Io(e.into());
    w.write_record(["query_id", "predicted_identity", "best_reference_id", "score"]).map_err(io)?;
    for p in predictions {
        let score = format_sig9(f64::from(p.score));
        w.write_record([&p.query_id, &p.predicted_identity, &p.best_reference_id, &score]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
