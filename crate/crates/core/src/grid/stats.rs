use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use super::{GridError, RunRecord};
use crate::matcher::format_sig9;

/// Name of the quantile convention, carried in exported metadata.
pub const QUANTILE_METHOD: &str = "linear interpolation between closest ranks (h = (n-1)p)";

/// Quantile `p` of ascending `sorted` values by linear interpolation
/// between the closest ranks.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateStats {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
}

impl AggregateStats {
    /// Summary of a non-empty sample; `None` when empty.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            min: v[0],
            q25: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q75: quantile(&v, 0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupBy {
    Setting,
    Dataset,
    /// Value of a named axis; `method` groups by method.
    Axis(String),
}

impl std::str::FromStr for GroupBy {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "setting" => GroupBy::Setting,
            "dataset" => GroupBy::Dataset,
            "" => return Err(GridError::Spec("empty group-by".into())),
            axis => GroupBy::Axis(axis.to_string()),
        })
    }
}

/// Statistics of one group. `stats` is `None` when every run in the group
/// diverged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStats {
    pub group: String,
    pub n_runs: usize,
    pub n_diverged: usize,
    pub stats: Option<AggregateStats>,
    /// Accuracies of the non-diverged runs, ascending.
    pub values: Vec<f64>,
}

fn group_key(r: &RunRecord, by: &GroupBy) -> String {
    match by {
        GroupBy::Setting => r.setting_key.clone(),
        GroupBy::Dataset => r.dataset.clone(),
        GroupBy::Axis(name) if name == "method" => r.setting.method.clone().unwrap_or_default(),
        GroupBy::Axis(name) => r.setting.get(name).unwrap_or_default().to_string(),
    }
}

/// Per-group summary over non-diverged records, groups in key order.
/// Diverged records are excluded and logged.
pub fn aggregate(records: &[RunRecord], by: &GroupBy) -> Vec<GroupStats> {
    let mut groups: BTreeMap<String, (usize, usize, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let g = groups.entry(group_key(r, by)).or_default();
        g.0 += 1;
        match r.accuracy {
            Some(a) if !r.diverged => g.2.push(a),
            _ => g.1 += 1,
        }
    }
    let excluded: usize = groups.values().map(|g| g.1).sum();
    if excluded > 0 {
        log::info!("excluded {excluded} diverged runs from aggregation");
    }
    groups
        .into_iter()
        .map(|(group, (n_runs, n_diverged, mut values))| {
            values.sort_by(f64::total_cmp);
            GroupStats { group, n_runs, n_diverged, stats: AggregateStats::from_values(&values), values }
        })
        .collect()
}

/// Delimited table; all-diverged groups carry `empty` and blank statistics.
pub fn write_aggregates<W: Write>(groups: &[GroupStats], writer: W, delimiter: u8) -> Result<(), GridError> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
    let io = |e: csv::Error| GridError::Io(e.into());
    w.write_record(["group", "n_runs", "n_diverged", "status", "min", "q25", "median", "q75", "max", "mean"])
        .map_err(io)?;
    for g in groups {
        let mut row = vec![g.group.clone(), g.n_runs.to_string(), g.n_diverged.to_string()];
        match &g.stats {
            Some(s) => {
                row.push("ok".into());
                row.extend([s.min, s.q25, s.median, s.q75, s.max, s.mean].map(format_sig9));
            }
            None => {
                row.push("empty".into());
                row.extend(std::iter::repeat_n(String::new(), 6));
            }
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BoxplotDoc<'a> {
    quantile_method: &'a str,
    groups: &'a [GroupStats],
}

/// Five-number summaries plus raw values as a JSON document.
pub fn boxplot_json(groups: &[GroupStats]) -> String {
    serde_json::to_string_pretty(&BoxplotDoc { quantile_method: QUANTILE_METHOD, groups })
        .expect("boxplot document serializes")
}
