//! Reference/query split regimes (closed-set, open-set, disjoint-set,
//! time-aware), the leakage auditor, and the manifest text format.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use chrono::NaiveDate;
use thiserror::Error;

use crate::catalog::Catalog;
use crate::rng::{self, GENERATOR_NAME};

/// Slack for float products like `0.7 * 10` landing just above an integer.
const COUNT_EPS: f64 = 1e-9;

const MANIFEST_MAGIC: &str = "wildreid-split-manifest v1";

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("cannot split an empty catalog")]
    EmptyCatalog,
    #[error("train ratio {0} outside (0, 1)")]
    InvalidRatio(f64),
    #[error("open-set fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("time-aware split requires timestamps; image `{0}` has none")]
    MissingTimestamp(String),
    #[error("infeasible split: {0}")]
    Infeasible(String),
    #[error("manifest references unknown image `{0}`")]
    UnknownImage(String),
    #[error("malformed manifest at line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitMode {
    /// Every query identity also appears in the reference side.
    ClosedSet,
    /// A fraction of the query identities is absent from the reference side.
    OpenSet { new_identity_fraction: f64 },
    /// Reference and query identity sets do not intersect.
    DisjointSet,
    /// Each calendar day lies entirely on one side.
    TimeAware,
}

impl SplitMode {
    pub fn validate(&self) -> Result<(), SplitError> {
        if let SplitMode::OpenSet { new_identity_fraction: f } = *self {
            if !(f > 0.0 && f < 1.0) {
                return Err(SplitError::InvalidFraction(f));
            }
        }
        Ok(())
    }

    pub fn tag(&self) -> &'static str {
        match self {
            SplitMode::ClosedSet => "closed",
            SplitMode::OpenSet { .. } => "open",
            SplitMode::DisjointSet => "disjoint",
            SplitMode::TimeAware => "time-aware",
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitMode::OpenSet { new_identity_fraction } => write!(f, "open({new_identity_fraction})"),
            other => f.write_str(other.tag()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub mode: SplitMode,
    pub seed: u64,
    pub train_ratio: f64,
    pub generator: String,
    /// Reference side, in catalog order.
    pub train_ids: Vec<String>,
    /// Query side, in catalog order.
    pub test_ids: Vec<String>,
}

/// Per-identity reference count under the stratified closed-set rule.
pub fn closed_train_count(k: usize, ratio: f64) -> usize {
    let n = (ratio * k as f64 - COUNT_EPS).ceil().max(1.0) as usize;
    n.min(k)
}

fn expected_new_identities(fraction: f64, n_test_identities: usize) -> usize {
    (fraction * n_test_identities as f64 - COUNT_EPS).ceil().max(0.0) as usize
}

pub fn split(catalog: &Catalog, mode: SplitMode, train_ratio: f64, seed: u64) -> Result<SplitManifest, SplitError> {
    if catalog.is_empty() {
        return Err(SplitError::EmptyCatalog);
    }
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(SplitError::InvalidRatio(train_ratio));
    }
    mode.validate()?;
    let mut rng = rng::seeded(seed);

    let by_identity = group_by_identity(catalog);
    let mut in_train: HashSet<&str> = HashSet::with_capacity(catalog.len());

    match mode {
        SplitMode::ClosedSet => {
            for images in by_identity.values() {
                stratify(&mut rng, images, train_ratio, &mut in_train);
            }
        }
        SplitMode::OpenSet { new_identity_fraction } => {
            let mut order: Vec<&str> = by_identity.keys().copied().collect();
            rng::shuffle(&mut rng, &mut order);
            let yields_test = |id: &str| {
                let k = by_identity[id].len();
                closed_train_count(k, train_ratio) < k
            };
            let closed_total = order.iter().filter(|id| yields_test(id)).count();
            let mut chosen = None;
            let mut removed = 0;
            for n_new in 0..order.len() {
                if n_new > 0 && yields_test(order[n_new - 1]) {
                    removed += 1;
                }
                let n_test_ids = n_new + closed_total - removed;
                if n_new == expected_new_identities(new_identity_fraction, n_test_ids) {
                    chosen = Some(n_new);
                    break;
                }
            }
            let n_new = chosen.ok_or_else(|| {
                SplitError::Infeasible(format!(
                    "open-set fraction {new_identity_fraction} leaves no reference identity"
                ))
            })?;
            let new_ids: HashSet<&str> = order[..n_new].iter().copied().collect();
            for (identity, images) in &by_identity {
                if !new_ids.contains(identity) {
                    stratify(&mut rng, images, train_ratio, &mut in_train);
                }
            }
        }
        SplitMode::DisjointSet => {
            if by_identity.len() < 2 {
                return Err(SplitError::Infeasible("disjoint split needs at least two identities".into()));
            }
            let groups: Vec<Vec<&str>> = by_identity.into_values().collect();
            for group in assign_groups(&mut rng, groups, train_ratio * catalog.len() as f64) {
                in_train.extend(group);
            }
        }
        SplitMode::TimeAware => {
            let mut by_day: BTreeMap<NaiveDate, Vec<&str>> = BTreeMap::new();
            for r in catalog.iter() {
                let day = r.timestamp.ok_or_else(|| SplitError::MissingTimestamp(r.image_id.clone()))?;
                by_day.entry(day).or_default().push(&r.image_id);
            }
            if by_day.len() < 2 {
                return Err(SplitError::Infeasible("time-aware split needs at least two distinct days".into()));
            }
            let groups: Vec<Vec<&str>> = by_day.into_values().collect();
            for group in assign_groups(&mut rng, groups, train_ratio * catalog.len() as f64) {
                in_train.extend(group);
            }
        }
    }

    let (train_ids, test_ids) =
        catalog.iter().map(|r| r.image_id.clone()).partition(|id| in_train.contains(id.as_str()));
    Ok(SplitManifest { mode, seed, train_ratio, generator: GENERATOR_NAME.to_string(), train_ids, test_ids })
}

/// identity -> image ids, both in lexicographic order.
fn group_by_identity(catalog: &Catalog) -> BTreeMap<&str, Vec<&str>> {
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in catalog.iter() {
        groups.entry(&r.identity).or_default().push(&r.image_id);
    }
    for images in groups.values_mut() {
        images.sort_unstable();
    }
    groups
}

fn stratify<'a, R: rand::RngCore>(rng: &mut R, images: &[&'a str], ratio: f64, train: &mut HashSet<&'a str>) {
    let mut shuffled = images.to_vec();
    rng::shuffle(rng, &mut shuffled);
    let n = closed_train_count(shuffled.len(), ratio);
    train.extend(shuffled[..n].iter().copied());
}

/// Greedy largest-first assignment of indivisible groups to the reference
/// side: a group goes to train when doing so moves the train size closer to
/// `target`. Returns the train groups. Both sides end up non-empty.
fn assign_groups<'a, R: rand::RngCore>(rng: &mut R, mut groups: Vec<Vec<&'a str>>, target: f64) -> Vec<Vec<&'a str>> {
    debug_assert!(groups.len() >= 2);
    rng::shuffle(rng, &mut groups);
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));

    let mut train_size = 0usize;
    let mut train_flags = vec![false; groups.len()];
    for (i, g) in groups.iter().enumerate() {
        let with = (train_size + g.len()) as f64 - target;
        let without = train_size as f64 - target;
        if with.abs() < without.abs() {
            train_flags[i] = true;
            train_size += g.len();
        }
    }
    if train_flags.iter().all(|&f| f) {
        // smallest group moves to the query side
        let last = train_flags.len() - 1;
        train_flags[last] = false;
    } else if train_flags.iter().all(|&f| !f) {
        train_flags[0] = true;
    }
    groups.into_iter().zip(train_flags).filter_map(|(g, t)| t.then_some(g)).collect()
}

/// One broken split rule.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Overlap { image_ids: Vec<String> },
    Duplicated { image_ids: Vec<String> },
    Unassigned { image_ids: Vec<String> },
    UnseenQueryIdentity { identity: String },
    SharedIdentity { identity: String },
    OpenSetFraction { expected: usize, actual: usize, n_query_identities: usize },
    MissingTimestamp { image_id: String },
    SplitPeriod { day: NaiveDate },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Overlap { image_ids } => write!(f, "partition: images on both sides: {}", image_ids.join(", ")),
            Violation::Duplicated { image_ids } => {
                write!(f, "partition: images listed twice: {}", image_ids.join(", "))
            }
            Violation::Unassigned { image_ids } => {
                write!(f, "partition: images on neither side: {}", image_ids.join(", "))
            }
            Violation::UnseenQueryIdentity { identity } => {
                write!(f, "closed-set: query identity `{identity}` absent from reference")
            }
            Violation::SharedIdentity { identity } => write!(f, "disjoint-set: identity `{identity}` on both sides"),
            Violation::OpenSetFraction { expected, actual, n_query_identities } => {
                write!(f, "open-set: {actual} of {n_query_identities} query identities are new, expected {expected}")
            }
            Violation::MissingTimestamp { image_id } => write!(f, "time-aware: image `{image_id}` has no timestamp"),
            Violation::SplitPeriod { day } => write!(f, "time-aware: day {day} appears on both sides"),
        }
    }
}

/// Audits a manifest against its catalog. An empty list means every rule of
/// the manifest's mode holds.
pub fn verify(manifest: &SplitManifest, catalog: &Catalog) -> Result<Vec<Violation>, SplitError> {
    for id in manifest.train_ids.iter().chain(&manifest.test_ids) {
        if catalog.get(id).is_none() {
            return Err(SplitError::UnknownImage(id.clone()));
        }
    }
    let mut violations = Vec::new();

    let mut seen: HashMap<&str, u8> = HashMap::new();
    let mut duplicated = BTreeSet::new();
    for id in &manifest.train_ids {
        if seen.insert(id, 1).is_some() {
            duplicated.insert(id.clone());
        }
    }
    let mut overlap = BTreeSet::new();
    for id in &manifest.test_ids {
        match seen.insert(id, 2) {
            Some(1) => {
                overlap.insert(id.clone());
            }
            Some(_) => {
                duplicated.insert(id.clone());
            }
            None => {}
        }
    }
    if !overlap.is_empty() {
        violations.push(Violation::Overlap { image_ids: overlap.into_iter().collect() });
    }
    if !duplicated.is_empty() {
        violations.push(Violation::Duplicated { image_ids: duplicated.into_iter().collect() });
    }
    let unassigned: Vec<String> =
        catalog.iter().filter(|r| !seen.contains_key(r.image_id.as_str())).map(|r| r.image_id.clone()).collect();
    if !unassigned.is_empty() {
        violations.push(Violation::Unassigned { image_ids: unassigned });
    }

    let identities = |ids: &[String]| -> BTreeSet<String> {
        ids.iter().filter_map(|id| catalog.identity_of(id)).map(str::to_string).collect()
    };
    let train_identities = identities(&manifest.train_ids);
    let test_identities = identities(&manifest.test_ids);

    match manifest.mode {
        SplitMode::ClosedSet => {
            for identity in test_identities.difference(&train_identities) {
                violations.push(Violation::UnseenQueryIdentity { identity: identity.clone() });
            }
        }
        SplitMode::OpenSet { new_identity_fraction } => {
            let actual = test_identities.difference(&train_identities).count();
            let expected = expected_new_identities(new_identity_fraction, test_identities.len());
            if actual != expected {
                violations.push(Violation::OpenSetFraction {
                    expected,
                    actual,
                    n_query_identities: test_identities.len(),
                });
            }
        }
        SplitMode::DisjointSet => {
            for identity in test_identities.intersection(&train_identities) {
                violations.push(Violation::SharedIdentity { identity: identity.clone() });
            }
        }
        SplitMode::TimeAware => {
            let mut sides: BTreeMap<NaiveDate, u8> = BTreeMap::new();
            for (ids, side) in [(&manifest.train_ids, 1u8), (&manifest.test_ids, 2u8)] {
                for id in ids {
                    let record = catalog.get(id).expect("checked above");
                    match record.timestamp {
                        None => violations.push(Violation::MissingTimestamp { image_id: id.clone() }),
                        Some(day) => *sides.entry(day).or_insert(0) |= side,
                    }
                }
            }
            for (day, mask) in sides {
                if mask == 3 {
                    violations.push(Violation::SplitPeriod { day });
                }
            }
        }
    }
    Ok(violations)
}

impl SplitManifest {
    /// Serializes to the line-oriented manifest document.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MANIFEST_MAGIC);
        out.push('\n');
        out.push_str(&format!("mode: {}\n", self.mode.tag()));
        if let SplitMode::OpenSet { new_identity_fraction } = self.mode {
            out.push_str(&format!("new_identity_fraction: {new_identity_fraction}\n"));
        }
        out.push_str(&format!("seed: {}\n", self.seed));
        out.push_str(&format!("train_ratio: {}\n", self.train_ratio));
        out.push_str(&format!("generator: {}\n", self.generator));
        for (key, ids) in [("train", &self.train_ids), ("test", &self.test_ids)] {
            out.push_str(&format!("{key}: {}\n", ids.len()));
            for id in ids {
                out.push_str(id);
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, SplitError> {
        let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| SplitError::Parse {
                line: 0,
                message: format!("unexpected end of document, expected {what}"),
            })
        };
        let (line, magic) = next("header")?;
        if magic != MANIFEST_MAGIC {
            return Err(SplitError::Parse { line, message: format!("bad header `{magic}`") });
        }
        fn field<'a>(entry: (usize, &'a str), key: &str) -> Result<&'a str, SplitError> {
            let (line, text) = entry;
            text.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(": "))
                .ok_or_else(|| SplitError::Parse { line, message: format!("expected `{key}: ...`") })
        }
        fn number<T: std::str::FromStr>(line: usize, raw: &str) -> Result<T, SplitError> {
            raw.parse().map_err(|_| SplitError::Parse { line, message: format!("bad number `{raw}`") })
        }
        let entry = next("mode")?;
        let mode = match field(entry, "mode")? {
            "closed" => SplitMode::ClosedSet,
            "disjoint" => SplitMode::DisjointSet,
            "time-aware" => SplitMode::TimeAware,
            "open" => {
                let entry = next("new_identity_fraction")?;
                let f = number(entry.0, field(entry, "new_identity_fraction")?)?;
                SplitMode::OpenSet { new_identity_fraction: f }
            }
            other => return Err(SplitError::Parse { line: entry.0, message: format!("unknown mode `{other}`") }),
        };
        let entry = next("seed")?;
        let seed = number(entry.0, field(entry, "seed")?)?;
        let entry = next("train_ratio")?;
        let train_ratio = number(entry.0, field(entry, "train_ratio")?)?;
        let entry = next("generator")?;
        let generator = field(entry, "generator")?.to_string();
        let mut read_ids = |key: &str| -> Result<Vec<String>, SplitError> {
            let entry = next(key)?;
            let count: usize = number(entry.0, field(entry, key)?)?;
            (0..count).map(|_| next("image id").map(|(_, id)| id.to_string())).collect()
        };
        let train_ids = read_ids("train")?;
        let test_ids = read_ids("test")?;
        match next("end of document") {
            Ok((_, "")) => {}
            Ok((line, _)) => return Err(SplitError::Parse { line, message: "trailing content".into() }),
            Err(_) => {}
        }
        let manifest = SplitManifest { mode, seed, train_ratio, generator, train_ids, test_ids };
        manifest.mode.validate()?;
        Ok(manifest)
    }
}
