use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{GridError, RunRecord};

/// Highlight given to a cell of a comparison row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    Best,
    Second,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    /// One value per method column; `None` marks an absent result.
    pub values: Vec<Option<f64>>,
}

impl ReportRow {
    /// Every cell equal to the row maximum is `Best`. When the maximum is
    /// unique, every cell equal to the largest remaining value is `Second`;
    /// tied maxima leave no second place.
    pub fn marks(&self) -> Vec<Mark> {
        let present = || self.values.iter().flatten().copied();
        let Some(best) = present().reduce(f64::max) else {
            return vec![Mark::None; self.values.len()];
        };
        let n_best = present().filter(|&v| v == best).count();
        let second = if n_best == 1 { present().filter(|&v| v < best).reduce(f64::max) } else { None };
        self.values
            .iter()
            .map(|v| match *v {
                Some(v) if v == best => Mark::Best,
                Some(v) if Some(v) == second => Mark::Second,
                _ => Mark::None,
            })
            .collect()
    }
}

/// Dataset-by-method comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub methods: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

impl ReportTable {
    pub fn new(methods: Vec<String>, rows: Vec<ReportRow>) -> Result<Self, GridError> {
        if methods.is_empty() {
            return Err(GridError::Shape("no method columns".into()));
        }
        for r in &rows {
            if r.values.len() != methods.len() {
                return Err(GridError::Shape(format!(
                    "row `{}` has {} values for {} methods",
                    r.dataset,
                    r.values.len(),
                    methods.len()
                )));
            }
            if let Some(v) = r.values.iter().flatten().find(|v| !v.is_finite()) {
                return Err(GridError::Shape(format!("row `{}` holds non-finite value {v}", r.dataset)));
            }
        }
        Ok(Self { methods, rows })
    }

    /// Reads `dataset,<method>...` with a header row. Blank or `-` cells are
    /// absent results.
    pub fn from_csv<R: Read>(reader: R, delimiter: u8) -> Result<Self, GridError> {
        let mut rdr = csv::ReaderBuilder::new().delimiter(delimiter).flexible(true).from_reader(reader);
        let header = rdr.headers().map_err(|e| GridError::Shape(e.to_string()))?.clone();
        let methods: Vec<String> = header.iter().skip(1).map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| GridError::Shape(e.to_string()))?;
            let mut fields = rec.iter().map(str::trim);
            let dataset = fields.next().unwrap_or_default().to_string();
            let values = fields
                .map(|f| match f {
                    "" | "-" => Ok(None),
                    v => v
                        .parse::<f64>()
                        .map(Some)
                        .map_err(|_| GridError::Shape(format!("data row {}: `{v}` is not a number", i + 1))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(ReportRow { dataset, values });
        }
        Self::new(methods, rows)
    }

    /// Best accuracy (in percent) per dataset and value of `column_axis`
    /// over all other settings; `method` selects the method. Diverged runs
    /// are ignored, and pairs without any usable run are absent.
    pub fn from_records(records: &[RunRecord], column_axis: &str) -> Result<Self, GridError> {
        let column = |r: &RunRecord| -> Option<String> {
            if column_axis == "method" {
                r.setting.method.clone()
            } else {
                r.setting.get(column_axis).map(str::to_string)
            }
        };
        let mut methods: Vec<String> = Vec::new();
        let mut cells: BTreeMap<String, BTreeMap<String, Option<f64>>> = BTreeMap::new();
        for r in records {
            let Some(col) = column(r) else {
                return Err(GridError::Shape(format!("record `{}` has no `{column_axis}` value", r.setting_key)));
            };
            if !methods.contains(&col) {
                methods.push(col.clone());
            }
            let slot = cells.entry(r.dataset.clone()).or_default().entry(col).or_insert(None);
            if let Some(a) = r.accuracy.filter(|_| !r.diverged) {
                let pct = 100.0 * a;
                *slot = Some(slot.map_or(pct, |s: f64| s.max(pct)));
            }
        }
        let rows = cells
            .into_iter()
            .map(|(dataset, by_method)| ReportRow {
                dataset,
                values: methods.iter().map(|m| by_method.get(m).copied().flatten()).collect(),
            })
            .collect();
        Self::new(methods, rows)
    }

    pub fn write_csv<W: Write>(&self, writer: W, delimiter: u8) -> Result<(), GridError> {
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
        let io = |e: csv::Error| GridError::Io(e.into());
        w.write_record(std::iter::once("dataset").chain(self.methods.iter().map(String::as_str))).map_err(io)?;
        for r in &self.rows {
            w.write_record(std::iter::once(r.dataset.clone()).chain(r.values.iter().map(|&v| cell(v)))).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Markdown table with the best value in bold and the second in italics.
    pub fn to_markdown(&self) -> String {
        let mut out = format!("| Dataset | {} |\n", self.methods.join(" | "));
        out.push_str(&format!("|---|{}\n", "---:|".repeat(self.methods.len())));
        for r in &self.rows {
            let cells: Vec<String> = r
                .values
                .iter()
                .zip(r.marks())
                .map(|(&v, m)| match m {
                    Mark::Best => format!("**{}**", cell(v)),
                    Mark::Second => format!("_{}_", cell(v)),
                    Mark::None => cell(v),
                })
                .collect();
            out.push_str(&format!("| {} | {} |\n", r.dataset, cells.join(" | ")));
        }
        out
    }
}
