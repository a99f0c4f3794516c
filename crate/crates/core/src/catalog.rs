//! Unified image metadata: records, catalogs, tabular ingest/emit and
//! per-dataset statistics.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("metadata schema error: column `{0}` not found in header")]
    MissingColumn(String),
    #[error("duplicate image_id `{id}` at line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("empty identity for image `{id}` at line {line}")]
    EmptyIdentity { id: String, line: usize },
    #[error("empty image_id at line {line}")]
    EmptyImageId { line: usize },
    #[error("unparseable timestamp `{value}` at line {line}")]
    BadTimestamp { value: String, line: usize },
    #[error("catalog is empty")]
    Empty,
    #[error("image `{0}` is not in the catalog")]
    UnknownImage(String),
    #[error("malformed metadata at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One image's metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: String,
    pub identity: String,
    pub dataset: String,
    /// Day-granular capture date.
    pub timestamp: Option<NaiveDate>,
    /// Locator of the embedding row or descriptor entry for this image.
    pub payload_ref: Option<String>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, identity: impl Into<String>, dataset: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            identity: identity.into(),
            dataset: dataset.into(),
            timestamp: None,
            payload_ref: None,
        }
    }

    pub fn with_timestamp(mut self, date: NaiveDate) -> Self {
        self.timestamp = Some(date);
        self
    }
}

/// Ordered, duplicate-free collection of records. Immutable once built.
#[derive(Debug, Clone)]
pub struct Catalog {
    name: String,
    records: Vec<ImageRecord>,
    index: HashMap<String, usize>,
}

impl PartialEq for Catalog {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.records == other.records
    }
}

impl Catalog {
    /// Validates uniqueness of ids and non-empty identities. Line numbers in
    /// errors are 1-based record positions.
    pub fn new(name: impl Into<String>, records: Vec<ImageRecord>) -> Result<Self, CatalogError> {
        let mut index = HashMap::with_capacity(records.len());
        for (pos, r) in records.iter().enumerate() {
            let line = pos + 1;
            if r.image_id.is_empty() {
                return Err(CatalogError::EmptyImageId { line });
            }
            if r.identity.is_empty() {
                return Err(CatalogError::EmptyIdentity { id: r.image_id.clone(), line });
            }
            if index.insert(r.image_id.clone(), pos).is_some() {
                return Err(CatalogError::DuplicateId { id: r.image_id.clone(), line });
            }
        }
        Ok(Self { name: name.into(), records, index })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.index.get(image_id).map(|&i| &self.records[i])
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.index.get(image_id).copied()
    }

    pub fn identity_of(&self, image_id: &str) -> Option<&str> {
        self.get(image_id).map(|r| r.identity.as_str())
    }

    /// Identity of every listed image, in order.
    pub fn identities_for(&self, image_ids: &[String]) -> Result<Vec<String>, CatalogError> {
        image_ids
            .iter()
            .map(|id| self.identity_of(id).map(str::to_string).ok_or_else(|| CatalogError::UnknownImage(id.clone())))
            .collect()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ImageRecord> {
        self.records.iter()
    }
}

/// Maps logical fields onto metadata column names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub image_id: String,
    pub identity: String,
    pub dataset: Option<String>,
    pub timestamp: Option<String>,
    pub payload_ref: Option<String>,
    pub delimiter: u8,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            image_id: "image_id".into(),
            identity: "identity".into(),
            dataset: Some("dataset".into()),
            timestamp: Some("timestamp".into()),
            payload_ref: Some("payload_ref".into()),
            delimiter: b',',
        }
    }
}

pub fn ingest(path: &Path, name: &str, schema: &Schema) -> Result<Catalog, CatalogError> {
    ingest_reader(File::open(path)?, name, schema)
}

/// Reads a header-prefixed delimited file. Optional columns absent from the
/// header are treated as empty; a missing dataset column falls back to `name`.
pub fn ingest_reader<R: Read>(reader: R, name: &str, schema: &Schema) -> Result<Catalog, CatalogError> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(schema.delimiter).has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| CatalogError::Malformed { line: 0, message: e.to_string() })?.clone();
    let find = |col: &str| headers.iter().position(|h| h == col);
    let id_col = find(&schema.image_id).ok_or_else(|| CatalogError::MissingColumn(schema.image_id.clone()))?;
    let identity_col = find(&schema.identity).ok_or_else(|| CatalogError::MissingColumn(schema.identity.clone()))?;
    let dataset_col = schema.dataset.as_deref().and_then(find);
    let ts_col = schema.timestamp.as_deref().and_then(find);
    let payload_col = schema.payload_ref.as_deref().and_then(find);

    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (pos, row) in rdr.records().enumerate() {
        let line = pos + 1;
        let row = row.map_err(|e| CatalogError::Malformed { line, message: e.to_string() })?;
        let field = |c: usize| row.get(c).unwrap_or("");
        let image_id = field(id_col).to_string();
        if image_id.is_empty() {
            return Err(CatalogError::EmptyImageId { line });
        }
        let identity = field(identity_col).to_string();
        if identity.is_empty() {
            return Err(CatalogError::EmptyIdentity { id: image_id, line });
        }
        if seen.insert(image_id.clone(), line).is_some() {
            return Err(CatalogError::DuplicateId { id: image_id, line });
        }
        let dataset = dataset_col.map(field).filter(|s| !s.is_empty()).unwrap_or(name).to_string();
        let timestamp = match ts_col.map(field).filter(|s| !s.is_empty()) {
            None => None,
            Some(raw) => {
                Some(parse_date(raw).ok_or_else(|| CatalogError::BadTimestamp { value: raw.to_string(), line })?)
            }
        };
        let payload_ref = payload_col.map(field).filter(|s| !s.is_empty()).map(str::to_string);
        records.push(ImageRecord { image_id, identity, dataset, timestamp, payload_ref });
    }
    Catalog::new(name, records)
}

/// Accepts `YYYY-MM-DD`, or a full ISO-8601 datetime truncated to its date.
fn parse_date(raw: &str) -> Option<NaiveDate> {
    let raw = raw.trim();
    if let Ok(d) = NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
        return Some(d);
    }
    let date_part = raw.split(['T', ' ']).next()?;
    if date_part.len() < raw.len() {
        NaiveDate::parse_from_str(date_part, "%Y-%m-%d").ok()
    } else {
        None
    }
}

/// Writes the catalog in the default schema layout so that `ingest` with
/// `Schema::default()` reproduces it.
pub fn emit<W: Write>(catalog: &Catalog, writer: W, delimiter: u8) -> Result<(), CatalogError> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
    let io = |e: csv::Error| CatalogError::Io(e.into());
    w.write_record(["image_id", "identity", "dataset", "timestamp", "payload_ref"]).map_err(io)?;
    for r in catalog.iter() {
        let ts = r.timestamp.map(|d| d.format("%Y-%m-%d").to_string()).unwrap_or_default();
        w.write_record([
            r.image_id.as_str(),
            r.identity.as_str(),
            r.dataset.as_str(),
            ts.as_str(),
            r.payload_ref.as_deref().unwrap_or(""),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogStats {
    pub n_images: usize,
    pub n_identities: usize,
    /// True iff every record carries a timestamp.
    pub has_timestamps: bool,
    pub images_per_identity: BTreeMap<String, usize>,
}

pub fn stats(catalog: &Catalog) -> Result<CatalogStats, CatalogError> {
    if catalog.is_empty() {
        return Err(CatalogError::Empty);
    }
    let mut hist = BTreeMap::new();
    for r in catalog.iter() {
        *hist.entry(r.identity.clone()).or_insert(0usize) += 1;
    }
    Ok(CatalogStats {
        n_images: catalog.len(),
        n_identities: hist.len(),
        has_timestamps: catalog.iter().all(|r| r.timestamp.is_some()),
        images_per_identity: hist,
    })
}

/// Summary lines followed by the per-identity image counts.
pub fn write_stats<W: Write>(stats: &CatalogStats, writer: W, delimiter: u8) -> Result<(), CatalogError> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).flexible(true).from_writer(writer);
    let io = |e: csv::Error| CatalogError::Io(e.into());
    w.write_record(["key", "value"]).map_err(io)?;
    w.write_record(["n_images", &stats.n_images.to_string()]).map_err(io)?;
    w.write_record(["n_identities", &stats.n_identities.to_string()]).map_err(io)?;
    w.write_record(["has_timestamps", &stats.has_timestamps.to_string()]).map_err(io)?;
    for (identity, n) in &stats.images_per_identity {
        w.write_record([format!("identity:{identity}"), n.to_string()]).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
