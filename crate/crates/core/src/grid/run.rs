use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GridError, GridSpec, Setting};
use crate::catalog::Catalog;
use crate::embedding::EmbeddingMatrix;
use crate::losses::{ArcFaceConfig, Mining, TripletConfig};
use crate::matcher::{evaluate, match_queries, IdentityDatabase};
use crate::rng::derive_seed;
use crate::split::{verify, SplitManifest};
use crate::train::{train_head, LossConfig, TrainConfig, TrainError};

/// Runs independent jobs `0..n` and returns their results in index order.
pub trait Executor: Sync {
    fn map<T, F>(&self, n: usize, job: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SequentialExecutor;

impl Executor for SequentialExecutor {
    fn map<T, F>(&self, n: usize, job: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(job).collect()
    }
}

/// Work-stealing pool; `None` uses the global rayon pool.
#[derive(Debug, Clone, Default)]
pub struct RayonExecutor {
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl RayonExecutor {
    pub fn new(threads: Option<usize>) -> Result<Self, rayon::ThreadPoolBuildError> {
        let pool = match threads {
            Some(n) => Some(Arc::new(rayon::ThreadPoolBuilder::new().num_threads(n).build()?)),
            None => None,
        };
        Ok(Self { pool })
    }
}

impl Executor for RayonExecutor {
    fn map<T, F>(&self, n: usize, job: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        let run = || (0..n).into_par_iter().map(&job).collect();
        match &self.pool {
            Some(pool) => pool.install(run),
            None => run(),
        }
    }
}

/// Features, metadata and split of one dataset.
#[derive(Debug, Clone)]
pub struct GridDataset {
    pub name: String,
    pub catalog: Catalog,
    pub features: EmbeddingMatrix,
    pub manifest: SplitManifest,
}

/// Outcome of training one setting on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub setting: Setting,
    pub setting_key: String,
    /// Query top-1 accuracy; absent exactly when the run diverged.
    pub accuracy: Option<f64>,
    pub diverged: bool,
    pub diverged_epoch: Option<usize>,
    pub seed: u64,
}

impl RunRecord {
    fn check(&self) -> Result<(), String> {
        if self.accuracy.is_some() == self.diverged {
            return Err("accuracy must be present exactly when the run did not diverge".into());
        }
        if let Some(a) = self.accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(format!("accuracy {a} outside [0, 1]"));
            }
        }
        if self.setting.key() != self.setting_key {
            return Err(format!("setting key `{}` does not match its setting", self.setting_key));
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(setting: &Setting, name: &str, value: &str) -> Result<T, GridError> {
    value
        .parse()
        .map_err(|_| GridError::Setting { setting: setting.key(), message: format!("bad `{name}` value `{value}`") })
}

fn required<'a>(setting: &'a Setting, name: &str) -> Result<&'a str, GridError> {
    setting
        .get(name)
        .ok_or_else(|| GridError::Setting { setting: setting.key(), message: format!("missing `{name}` axis") })
}

/// Trainer configuration for one setting.
///
/// Recognized axes are `lr`, ArcFace `margin`/`scale` and Triplet
/// `margin`/`mining`; any other axis (a backbone name, say) is an opaque tag.
/// `train.*` keys may set `epochs`, `batch_size`, `embedding_dim` and `momentum`.
pub fn setting_train_config(
    setting: &Setting,
    fixed: &std::collections::BTreeMap<String, String>,
    seed: u64,
) -> Result<TrainConfig, GridError> {
    let lr: f64 = parse_num(setting, "lr", required(setting, "lr")?)?;
    let loss = match setting.method.as_deref() {
        Some("arcface") => LossConfig::ArcFace(ArcFaceConfig {
            margin: parse_num(setting, "margin", required(setting, "margin")?)?,
            scale: parse_num(setting, "scale", required(setting, "scale")?)?,
        }),
        Some("triplet") => LossConfig::Triplet(TripletConfig {
            margin: parse_num(setting, "margin", required(setting, "margin")?)?,
            mining: required(setting, "mining")?
                .parse::<Mining>()
                .map_err(|e| GridError::Setting { setting: setting.key(), message: e.to_string() })?,
        }),
        other => {
            return Err(GridError::Setting {
                setting: setting.key(),
                message: format!("method must be `arcface` or `triplet`, got {other:?}"),
            })
        }
    };
    let mut cfg = TrainConfig { seed, ..TrainConfig::new(loss, lr) };
    for (key, value) in fixed {
        match key.as_str() {
            "epochs" => cfg.epochs = parse_num(setting, key, value)?,
            "batch_size" => cfg.batch_size = parse_num(setting, key, value)?,
            "embedding_dim" => cfg.embedding_dim = parse_num(setting, key, value)?,
            "momentum" => cfg.momentum = parse_num(setting, key, value)?,
            _ => return Err(GridError::Spec(format!("unknown fixed key `train.{key}`"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Prepared<'a> {
    name: &'a str,
    train: EmbeddingMatrix,
    train_labels: Vec<String>,
    test: EmbeddingMatrix,
    test_labels: Vec<String>,
}

fn prepare(ds: &GridDataset) -> Result<Prepared<'_>, GridError> {
    let err = |message: String| GridError::Dataset { dataset: ds.name.clone(), message };
    let violations = verify(&ds.manifest, &ds.catalog).map_err(|e| err(e.to_string()))?;
    if let Some(v) = violations.first() {
        return Err(err(format!("invalid split ({} violations, first: {v})", violations.len())));
    }
    let rows: HashMap<&str, usize> = ds.features.row_ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let side = |ids: &[String]| -> Result<(EmbeddingMatrix, Vec<String>), GridError> {
        let mut positions = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for id in ids {
            positions.push(*rows.get(id.as_str()).ok_or_else(|| err(format!("no embedding for image `{id}`")))?);
            labels.push(ds.catalog.identity_of(id).expect("verified against catalog").to_string());
        }
        Ok((ds.features.select(&positions)?, labels))
    };
    let (train, train_labels) = side(&ds.manifest.train_ids)?;
    let (test, test_labels) = side(&ds.manifest.test_ids)?;
    Ok(Prepared { name: &ds.name, train, train_labels, test, test_labels })
}

fn run_one(setting: &Setting, cfg: &TrainConfig, ds: &Prepared<'_>) -> Result<RunRecord, GridError> {
    let mut record = RunRecord {
        dataset: ds.name.to_string(),
        setting: setting.clone(),
        setting_key: setting.key(),
        accuracy: None,
        diverged: false,
        diverged_epoch: None,
        seed: cfg.seed,
    };
    match train_head(&ds.train, &ds.train_labels, cfg) {
        Ok(head) => {
            let db = IdentityDatabase::build(&head.project(&ds.train)?, ds.train_labels.clone())?;
            let predictions = match_queries(&db, &head.project(&ds.test)?)?;
            record.accuracy = Some(evaluate(&predictions, &ds.test_labels)?);
        }
        Err(TrainError::Diverged { epoch, .. }) => {
            log::warn!("{} on {}: diverged at epoch {epoch}", record.setting_key, record.dataset);
            record.diverged = true;
            record.diverged_epoch = Some(epoch);
        }
        Err(e) => return Err(e.into()),
    }
    Ok(record)
}

/// Trains and evaluates every setting on every dataset.
///
/// All manifests and settings are checked before the first run. Records come
/// back ordered by setting, then dataset. Pairs already present in `previous`
/// (same dataset and setting key) are reused, and `on_record` sees each newly
/// finished record as soon as it completes. The run for setting `s` and
/// dataset `d` is seeded with `derive_seed(derive_seed(seed, s), d)`.
pub fn run_grid<E: Executor>(
    spec: &GridSpec,
    datasets: &[GridDataset],
    executor: &E,
    seed: u64,
    previous: &[RunRecord],
    on_record: &(dyn Fn(&RunRecord) + Sync),
) -> Result<Vec<RunRecord>, GridError> {
    let settings = spec.enumerate()?;
    let mut names = HashSet::new();
    for ds in datasets {
        if !names.insert(ds.name.as_str()) {
            return Err(GridError::Dataset { dataset: ds.name.clone(), message: "listed twice".into() });
        }
    }
    let prepared = datasets.iter().map(prepare).collect::<Result<Vec<_>, _>>()?;
    let configs = settings
        .iter()
        .enumerate()
        .map(|(s, setting)| setting_train_config(setting, &spec.fixed, derive_seed(seed, s as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    let done: HashMap<(&str, &str), &RunRecord> =
        previous.iter().map(|r| ((r.dataset.as_str(), r.setting_key.as_str()), r)).collect();
    let keys: Vec<String> = settings.iter().map(Setting::key).collect();

    let n_data = prepared.len();
    log::info!("{} settings x {} datasets = {} runs", settings.len(), n_data, settings.len() * n_data);
    let results = executor.map(settings.len() * n_data, |job| {
        let (s, d) = (job / n_data, job % n_data);
        if let Some(r) = done.get(&(prepared[d].name, keys[s].as_str())) {
            return Ok((*r).clone());
        }
        let cfg = TrainConfig { seed: derive_seed(configs[s].seed, d as u64), ..configs[s] };
        let record = run_one(&settings[s], &cfg, &prepared[d])?;
        on_record(&record);
        Ok(record)
    });
    results.into_iter().collect()
}

/// One JSON object per line.
pub fn write_records<W: Write>(records: &[RunRecord], mut w: W) -> Result<(), GridError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads line-delimited records, skipping blank lines.
pub fn read_records<R: BufRead>(r: R) -> Result<Vec<RunRecord>, GridError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunRecord =
            serde_json::from_str(&line).map_err(|e| GridError::Record { line: i + 1, message: e.to_string() })?;
        rec.check().map_err(|message| GridError::Record { line: i + 1, message })?;
        out.push(rec);
    }
    Ok(out)
}
