//! Quadruple dataset ingestion: vocabulary construction, timestamp
//! discretization, reciprocal query augmentation, and the prepared-dataset
//! manifest.
//!
//! Input files are the de-facto tab-separated format: one fact per line,
//! `subject<TAB>predicate<TAB>object<TAB>timestamp`, with an optional fifth
//! end-date column that is ignored. Ids are assigned densely in first
//! appearance order (train, then valid, then test), so two loads of the same
//! files produce identical id maps.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One timestamped fact over integer-id vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quadruple {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
    pub timestamp: usize,
}

/// A link-prediction query `(subject, predicate, ?, timestamp)` with its
/// known answer. Subject queries are represented via reciprocal predicates,
/// so `predicate` ranges over `[0, 2 * relation_count)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub subject: usize,
    pub predicate: usize,
    pub timestamp: usize,
    pub answer: usize,
}

impl Query {
    /// True when this query predicts the original subject via a reciprocal
    /// predicate.
    pub fn is_reciprocal(&self, base_relations: usize) -> bool {
        self.predicate >= base_relations
    }
}

/// Timeline discretization rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// Timestamps are integers; distinct values are densely re-indexed in
    /// ascending order.
    Index,
    /// Timestamps are integer minute offsets; one index per `step` minutes.
    Minutes(u32),
    /// Timestamps are `YYYY-MM-DD` dates; one index per `step` days.
    Days(u32),
    /// Timestamps are dates or bare years; one index per `step` years.
    /// Interval data is reduced to its start year.
    Years(u32),
}

impl Granularity {
    /// Parse a human label such as `"24 hours"`, `"15 mins"`, `"1 year"` or
    /// `"index"`.
    pub fn parse(label: &str) -> Result<Self> {
        let norm = label.trim().to_lowercase();
        if norm == "index" || norm == "ordinal" {
            return Ok(Self::Index);
        }
        let (num, unit) = match norm.split_once(' ') {
            Some((n, u)) => (n.parse::<u32>().ok(), u),
            None => {
                // Bare unit like "daily" / "year", or compact "15min".
                let digits: String = norm.chars().take_while(|c| c.is_ascii_digit()).collect();
                if digits.is_empty() {
                    (Some(1), norm.as_str())
                } else {
                    (digits.parse::<u32>().ok(), &norm[digits.len()..])
                }
            }
        };
        let num = match num {
            Some(n) if n > 0 => n,
            _ => return Err(Error::UnknownGranularity(label.to_string())),
        };
        let unit = unit.trim();
        match unit {
            "min" | "mins" | "minute" | "minutes" | "m" => Ok(Self::Minutes(num)),
            "hour" | "hours" | "h" | "hourly" => {
                if num % 24 == 0 {
                    Ok(Self::Days(num / 24))
                } else {
                    Ok(Self::Minutes(num * 60))
                }
            }
            "day" | "days" | "daily" | "d" => Ok(Self::Days(num)),
            "year" | "years" | "yearly" | "y" => Ok(Self::Years(num)),
            _ => Err(Error::UnknownGranularity(label.to_string())),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Index => "index".to_string(),
            Self::Minutes(n) => format!("{} mins", n),
            Self::Days(n) if *n == 1 => "24 hours".to_string(),
            Self::Days(n) => format!("{} days", n),
            Self::Years(n) if *n == 1 => "1 year".to_string(),
            Self::Years(n) => format!("{} years", n),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Whether dataset files carry integer ids or names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FileFormat {
    /// Detect per column: all-integer subject/predicate/object columns are
    /// treated as ids.
    #[default]
    Auto,
    Ids,
    Names,
}

/// Dense id spaces for entities, base relations and discretized timestamps.
///
/// The reciprocal predicate of base relation `r` has id `r + relation_count`.
/// Special token roles (CLS, MASK, PAD) are not part of these id spaces;
/// they live in the model's token table.
#[derive(Debug, Clone)]
pub struct Vocabularies {
    entity_names: Vec<String>,
    entity_ids: HashMap<String, usize>,
    relation_names: Vec<String>,
    relation_ids: HashMap<String, usize>,
    time_labels: Vec<String>,
    pub granularity: Granularity,
    /// Index of the bucket holding unparseable/missing timestamps, if any.
    pub unknown_time: Option<usize>,
}

impl Vocabularies {
    /// Assemble vocabularies directly from name lists (synthetic data,
    /// tests). Ids are the list positions.
    pub fn from_names(
        entity_names: Vec<String>,
        relation_names: Vec<String>,
        time_labels: Vec<String>,
        granularity: Granularity,
    ) -> Self {
        let entity_ids = entity_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let relation_ids = relation_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self {
            entity_names,
            entity_ids,
            relation_names,
            relation_ids,
            time_labels,
            granularity,
            unknown_time: None,
        }
    }

    pub fn entity_count(&self) -> usize {
        self.entity_names.len()
    }

    /// Base relation count, before reciprocal doubling.
    pub fn relation_count(&self) -> usize {
        self.relation_names.len()
    }

    pub fn time_count(&self) -> usize {
        self.time_labels.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_ids.get(name).copied()
    }

    pub fn entity_name(&self, id: usize) -> &str {
        &self.entity_names[id]
    }

    pub fn relation_name(&self, id: usize) -> &str {
        &self.relation_names[id]
    }

    /// Name of a possibly reciprocal predicate.
    pub fn predicate_name(&self, id: usize) -> String {
        let base = self.relation_count();
        if id < base {
            self.relation_names[id].clone()
        } else {
            format!("{}^-1", self.relation_names[id - base])
        }
    }

    pub fn time_label(&self, id: usize) -> &str {
        &self.time_labels[id]
    }

    /// Map a raw timestamp string from a query to its index, if known.
    pub fn time_id(&self, label: &str) -> Option<usize> {
        self.time_labels.iter().position(|l| l == label.trim())
    }

    /// Write `name<TAB>id` vocabulary files beside the manifest.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        write_vocab_file(&dir.join("entities.tsv"), &self.entity_names)?;
        write_vocab_file(&dir.join("relations.tsv"), &self.relation_names)?;
        write_vocab_file(&dir.join("times.tsv"), &self.time_labels)?;
        Ok(())
    }
}

fn write_vocab_file(path: &Path, names: &[String]) -> Result<()> {
    let mut out = String::new();
    for (id, name) in names.iter().enumerate() {
        out.push_str(name);
        out.push('\t');
        out.push_str(&id.to_string());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read back a `name<TAB>id` vocabulary file as an id-ordered name list.
pub fn read_vocab_file(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, id) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: "expected name<TAB>id".to_string(),
        })?;
        let id: usize = id.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: format!("bad id {id:?}"),
        })?;
        entries.push((id, name.to_string()));
    }
    entries.sort_by_key(|(id, _)| *id);
    Ok(entries.into_iter().map(|(_, name)| name).collect())
}

/// The three splits of a loaded dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Quadruple>,
    pub valid: Vec<Quadruple>,
    pub test: Vec<Quadruple>,
    pub granularity: Granularity,
}

impl DatasetSplit {
    pub fn split(&self, which: SplitKind) -> &[Quadruple] {
        match which {
            SplitKind::Train => &self.train,
            SplitKind::Valid => &self.valid,
            SplitKind::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &Quadruple> {
        self.train.iter().chain(self.valid.iter()).chain(self.test.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Valid,
    Test,
}

impl SplitKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Valid => "valid",
            Self::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "train" => Ok(Self::Train),
            "valid" | "validation" | "dev" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// A fully loaded dataset: splits plus vocabularies plus the content hash of
/// the source files.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub splits: DatasetSplit,
    pub vocabs: Vocabularies,
    pub content_hash: String,
}

/// Summary written beside the vocabulary files by `prepare`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub dataset: String,
    pub granularity: String,
    pub entity_count: usize,
    pub relation_count: usize,
    pub time_count: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub content_hash: String,
}

impl DatasetManifest {
    pub fn from_dataset(name: &str, ds: &Dataset) -> Self {
        Self {
            dataset: name.to_string(),
            granularity: ds.splits.granularity.label(),
            entity_count: ds.vocabs.entity_count(),
            relation_count: ds.vocabs.relation_count(),
            time_count: ds.vocabs.time_count(),
            train_size: ds.splits.train.len(),
            valid_size: ds.splits.valid.len(),
            test_size: ds.splits.test.len(),
            content_hash: ds.content_hash.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad manifest: {e}")))
    }
}

// ----------------------------------------------------------------------
// Loading
// ----------------------------------------------------------------------

struct RawRecord {
    subject: String,
    predicate: String,
    object: String,
    timestamp: String,
}

fn read_split_file(path: &Path) -> Result<Vec<RawRecord>> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected at least 4 tab-separated fields, got {}", fields.len()),
            });
        }
        records.push(RawRecord {
            subject: fields[0].trim().to_string(),
            predicate: fields[1].trim().to_string(),
            object: fields[2].trim().to_string(),
            timestamp: fields[3].trim().to_string(),
        });
    }
    Ok(records)
}

fn locate_split(dir: &Path, split: &str) -> Result<PathBuf> {
    for candidate in [format!("{split}.txt"), format!("{split}.tsv"), split.to_string()] {
        let path = dir.join(&candidate);
        if path.is_file() {
            return Ok(path);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no {split} file under {}", dir.display()),
    )))
}

/// Interned string table preserving first-appearance order.
#[derive(Default)]
struct Interner {
    names: Vec<String>,
    ids: HashMap<String, usize>,
    numeric: bool,
}

impl Interner {
    fn new(numeric: bool) -> Self {
        Self {
            names: Vec::new(),
            ids: HashMap::new(),
            numeric,
        }
    }

    fn intern(&mut self, name: &str) -> Result<usize> {
        if self.numeric {
            let id: usize = name.parse().map_err(|_| Error::Config(format!(
                "expected an integer id, got {name:?} (use names format?)"
            )))?;
            while self.names.len() <= id {
                let next = self.names.len().to_string();
                self.ids.insert(next.clone(), self.names.len());
                self.names.push(next);
            }
            return Ok(id);
        }
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }
}

/// Raw timestamp interpretations before discretization.
#[derive(Debug, Clone, Copy, PartialEq)]
enum TimeValue {
    Known(i64),
    Unknown,
}

fn parse_year(s: &str) -> Option<i64> {
    // Leading signed integer; rejects placeholder years like "####".
    let s = s.trim();
    let (sign, rest) = match s.strip_prefix('-') {
        Some(r) => (-1i64, r),
        None => (1i64, s),
    };
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        return None;
    }
    digits.parse::<i64>().ok().map(|y| sign * y)
}

/// Days since 1970-01-01 for a proleptic Gregorian `YYYY-MM-DD` date.
fn parse_date_days(s: &str) -> Option<i64> {
    let mut parts = s.trim().splitn(3, '-');
    let (y, m, d) = match (parts.next(), parts.next(), parts.next()) {
        (Some(y), Some(m), Some(d)) if !y.is_empty() => (y, m, d),
        _ => return None,
    };
    let year: i64 = y.parse().ok()?;
    let month: u32 = m.parse().ok()?;
    let day: u32 = d.parse().ok()?;
    if !(1..=12).contains(&month) || !(1..=31).contains(&day) {
        return None;
    }
    Some(civil_to_days(year, month, day))
}

/// Howard Hinnant's civil-from-days algorithm, inverted.
fn civil_to_days(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = (y - era * 400) as i64;
    let mp = ((m + 9) % 12) as i64;
    let doy = (153 * mp + 2) / 5 + d as i64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146097 + doe - 719468
}

fn parse_time_value(raw: &str, granularity: Granularity) -> TimeValue {
    let parsed = match granularity {
        Granularity::Index | Granularity::Minutes(_) => raw.trim().parse::<i64>().ok(),
        Granularity::Days(_) => parse_date_days(raw),
        Granularity::Years(_) => parse_year(raw),
    };
    match parsed {
        Some(v) => TimeValue::Known(v),
        None => TimeValue::Unknown,
    }
}

fn detect_granularity(records: &[Vec<RawRecord>]) -> Result<Granularity> {
    for split in records {
        for rec in split {
            let t = rec.timestamp.trim();
            if t.is_empty() {
                continue;
            }
            if t.parse::<i64>().is_ok() {
                return Ok(Granularity::Index);
            }
            if parse_date_days(t).is_some() {
                return Ok(Granularity::Days(1));
            }
            if parse_year(t).is_some() {
                return Ok(Granularity::Years(1));
            }
        }
    }
    // No timestamps at all; treat as a flat index set.
    Ok(Granularity::Index)
}

fn detect_numeric_ids(records: &[Vec<RawRecord>]) -> bool {
    let mut saw_any = false;
    for split in records {
        for rec in split {
            saw_any = true;
            let ok = rec.subject.parse::<usize>().is_ok()
                && rec.predicate.parse::<usize>().is_ok()
                && rec.object.parse::<usize>().is_ok();
            if !ok {
                return false;
            }
        }
    }
    saw_any
}

/// Load a dataset directory containing `train`, `valid` and `test` files.
///
/// Vocabularies are built from the union of all three splits; timestamps are
/// discretized as `(value - min_value) / step` under the declared
/// granularity, with unparseable timestamps mapped to a dedicated trailing
/// "unknown" index.
pub fn load_dataset(
    dir: &Path,
    format: FileFormat,
    granularity: Option<Granularity>,
) -> Result<Dataset> {
    let paths: Vec<PathBuf> = ["train", "valid", "test"]
        .iter()
        .map(|s| locate_split(dir, s))
        .collect::<Result<_>>()?;

    let mut hasher = Sha256::new();
    for path in &paths {
        hasher.update(fs::read(path)?);
    }
    let content_hash = hex_string(&hasher.finalize());

    let records: Vec<Vec<RawRecord>> = paths
        .iter()
        .map(|p| read_split_file(p))
        .collect::<Result<_>>()?;

    let granularity = match granularity {
        Some(g) => g,
        None => detect_granularity(&records)?,
    };

    let numeric = match format {
        FileFormat::Ids => true,
        FileFormat::Names => false,
        FileFormat::Auto => detect_numeric_ids(&records),
    };

    let mut entities = Interner::new(numeric);
    let mut relations = Interner::new(numeric);

    // First pass: intern names and parse raw time values.
    let mut parsed: Vec<Vec<(usize, usize, usize, TimeValue)>> = Vec::with_capacity(3);
    let mut min_time: Option<i64> = None;
    let mut has_unknown = false;
    for split in &records {
        let mut out = Vec::with_capacity(split.len());
        for rec in split {
            let s = entities.intern(&rec.subject)?;
            let p = relations.intern(&rec.predicate)?;
            let o = entities.intern(&rec.object)?;
            let t = parse_time_value(&rec.timestamp, granularity);
            match t {
                TimeValue::Known(v) => {
                    min_time = Some(min_time.map_or(v, |m| m.min(v)));
                }
                TimeValue::Unknown => has_unknown = true,
            }
            out.push((s, p, o, t));
        }
        parsed.push(out);
    }

    // Second pass: discretize.
    let step: i64 = match granularity {
        Granularity::Index => 1,
        Granularity::Minutes(n) | Granularity::Days(n) | Granularity::Years(n) => n as i64,
    };
    // Index granularity remaps distinct integer values densely by value
    // order; the other granularities map linearly from the minimum.
    let index_values: Option<Vec<i64>> = match granularity {
        Granularity::Index => {
            let mut values: Vec<i64> = parsed
                .iter()
                .flatten()
                .filter_map(|(_, _, _, t)| match t {
                    TimeValue::Known(v) => Some(*v),
                    TimeValue::Unknown => None,
                })
                .collect();
            values.sort_unstable();
            values.dedup();
            Some(values)
        }
        _ => None,
    };
    let index_of: Box<dyn Fn(i64) -> usize> = match &index_values {
        Some(values) => {
            let values = values.clone();
            Box::new(move |v| values.binary_search(&v).expect("value seen in first pass"))
        }
        None => {
            let min = min_time.unwrap_or(0);
            Box::new(move |v| ((v - min) / step) as usize)
        }
    };

    let mut max_index = 0usize;
    let mut time_index = |t: TimeValue| -> Option<usize> {
        match t {
            TimeValue::Known(v) => {
                let idx = index_of(v);
                max_index = max_index.max(idx);
                Some(idx)
            }
            TimeValue::Unknown => None,
        }
    };

    let mut discretized: Vec<Vec<(usize, usize, usize, Option<usize>)>> = Vec::with_capacity(3);
    for split in parsed {
        discretized.push(
            split
                .into_iter()
                .map(|(s, p, o, t)| (s, p, o, time_index(t)))
                .collect(),
        );
    }

    let known_times = if discretized.iter().all(|s| s.is_empty()) {
        0
    } else {
        max_index + 1
    };
    let unknown_time = has_unknown.then_some(known_times);
    let time_count = known_times + usize::from(has_unknown);

    let mut time_labels: Vec<String> = match &index_values {
        Some(values) => values.iter().map(|v| v.to_string()).collect(),
        None => (0..known_times)
            .map(|i| time_label_for(i, granularity, min_time.unwrap_or(0), step))
            .collect(),
    };
    if has_unknown {
        time_labels.push("unknown".to_string());
    }

    let finish = |split: Vec<(usize, usize, usize, Option<usize>)>| -> Vec<Quadruple> {
        split
            .into_iter()
            .map(|(s, p, o, t)| Quadruple {
                subject: s,
                predicate: p,
                object: o,
                timestamp: t.unwrap_or(known_times),
            })
            .collect()
    };

    let mut it = discretized.into_iter();
    let splits = DatasetSplit {
        train: finish(it.next().unwrap()),
        valid: finish(it.next().unwrap()),
        test: finish(it.next().unwrap()),
        granularity,
    };

    let vocabs = Vocabularies {
        entity_ids: entities.ids,
        entity_names: entities.names,
        relation_ids: relations.ids,
        relation_names: relations.names,
        time_labels,
        granularity,
        unknown_time,
    };
    debug_assert_eq!(vocabs.time_count(), time_count);

    Ok(Dataset {
        splits,
        vocabs,
        content_hash,
    })
}

fn time_label_for(index: usize, granularity: Granularity, min: i64, step: i64) -> String {
    match granularity {
        Granularity::Index => index.to_string(),
        Granularity::Minutes(_) => (min + index as i64 * step).to_string(),
        Granularity::Days(_) => days_to_date_string(min + index as i64 * step),
        Granularity::Years(_) => (min + index as i64 * step).to_string(),
    }
}

fn days_to_date_string(days: i64) -> String {
    // Inverse of civil_to_days.
    let z = days + 719468;
    let era = if z >= 0 { z } else { z - 146096 } / 146097;
    let doe = z - era * 146097;
    let yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if m <= 2 { y + 1 } else { y };
    format!("{:04}-{:02}-{:02}", y, m, d)
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

// ----------------------------------------------------------------------
// Reciprocal augmentation
// ----------------------------------------------------------------------

/// Expand each quadruple into two queries: object prediction
/// `(s, p, ?, t) -> o` and subject prediction `(o, p + |R|, ?, t) -> s`.
///
/// Rejects input whose predicates already lie outside the base relation
/// range, so augmenting twice is an error rather than a silent id collision.
pub fn augment_reciprocal(quads: &[Quadruple], vocabs: &Vocabularies) -> Result<Vec<Query>> {
    let base = vocabs.relation_count();
    let mut out = Vec::with_capacity(quads.len() * 2);
    for q in quads {
        if q.predicate >= base {
            return Err(Error::IndexOutOfRange {
                what: "base relation",
                index: q.predicate,
                limit: base,
            });
        }
        out.push(Query {
            subject: q.subject,
            predicate: q.predicate,
            timestamp: q.timestamp,
            answer: q.object,
        });
        out.push(Query {
            subject: q.object,
            predicate: q.predicate + base,
            timestamp: q.timestamp,
            answer: q.subject,
        });
    }
    Ok(out)
}
