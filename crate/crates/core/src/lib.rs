//! Wildlife re-identification toolkit.
//!
//! Works on precomputed per-image embeddings and local descriptors:
//!
//! - [`catalog`]: image metadata, tabular ingest and dataset statistics
//! - [`split`]: closed/open/disjoint/time-aware reference-query splits
//! - [`embedding`], [`knn`]: embedding matrices and exact top-k cosine search
//! - [`matcher`]: 1-NN identity prediction and accuracy
//! - [`local`]: descriptor matching with the ratio test
//! - [`losses`], [`train`]: ArcFace / Triplet numerics and a linear-head trainer
//! - [`grid`]: grid search, aggregation and report tables
//! - [`simgen`]: deterministic synthetic data

mod binio;
pub mod catalog;
pub mod embedding;
pub mod grid;
pub mod knn;
pub mod local;
pub mod losses;
pub mod matcher;
pub mod rng;
pub mod simgen;
pub mod split;
pub mod train;

pub use catalog::{Catalog, CatalogStats, ImageRecord, Schema};
pub use embedding::EmbeddingMatrix;
pub use knn::{topk, TopK};
pub use matcher::{IdentityDatabase, MatchPrediction};
pub use split::{SplitManifest, SplitMode};
