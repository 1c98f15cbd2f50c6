//! Customs transaction records: CSV ingestion, temporal splitting, label
//! masking and out-of-sample ratio bookkeeping.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_COLUMNS: [&str; 11] = [
    "txn_id",
    "date",
    "importer_id",
    "hs_code",
    "declared_value",
    "quantity",
    "gross_weight",
    "tariff_rate",
    "paid_tax",
    "illicit",
    "raised_revenue",
];

/// One import declaration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub txn_id: String,
    pub date: NaiveDate,
    pub importer_id: String,
    pub hs_code: String,
    pub declared_value: f64,
    pub quantity: f64,
    pub gross_weight: f64,
    pub tariff_rate: f64,
    pub paid_tax: f64,
    pub illicit: Option<bool>,
    pub raised_revenue: Option<f64>,
}

impl TransactionRecord {
    /// Checks the per-record invariants. Returns a human readable reason on failure.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.txn_id.is_empty() {
            return Err("empty txn_id".into());
        }
        if self.importer_id.is_empty() || self.hs_code.is_empty() {
            return Err("importer_id and hs_code are required".into());
        }
        if !(self.declared_value >= 0.0 && self.declared_value.is_finite()) {
            return Err(format!("declared_value must be >= 0, got {}", self.declared_value));
        }
        if !(self.quantity > 0.0 && self.quantity.is_finite()) {
            return Err(format!("quantity must be > 0, got {}", self.quantity));
        }
        if !(self.gross_weight > 0.0 && self.gross_weight.is_finite()) {
            return Err(format!("gross_weight must be > 0, got {}", self.gross_weight));
        }
        if !(0.0..=1.0).contains(&self.tariff_rate) {
            return Err(format!("tariff_rate must lie in [0,1], got {}", self.tariff_rate));
        }
        if !(self.paid_tax >= 0.0 && self.paid_tax.is_finite()) {
            return Err(format!("paid_tax must be >= 0, got {}", self.paid_tax));
        }
        match (self.illicit, self.raised_revenue) {
            (None, None) => Ok(()),
            (Some(_), None) => Err("illicit is set but raised_revenue is missing".into()),
            (None, Some(_)) => Err("raised_revenue is set but illicit is missing".into()),
            (Some(_), Some(r)) if !(r >= 0.0 && r.is_finite()) => {
                Err(format!("raised_revenue must be >= 0, got {r}"))
            }
            (Some(false), Some(r)) if r != 0.0 => {
                Err(format!("licit record must have raised_revenue 0, got {r}"))
            }
            _ => Ok(()),
        }
    }

    pub fn has_truth(&self) -> bool {
        self.illicit.is_some()
    }

    pub fn key(&self, key: KeyKind) -> &str {
        match key {
            KeyKind::Importer => &self.importer_id,
            KeyKind::HsCode => &self.hs_code,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelState {
    Labeled,
    Unlabeled,
}

/// Categorical key that defines a kind of virtual node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyKind {
    Importer,
    HsCode,
}

impl std::str::FromStr for KeyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "importer" | "importer_id" => Ok(KeyKind::Importer),
            "hs" | "hs_code" => Ok(KeyKind::HsCode),
            other => Err(Error::InvalidArgument(format!("unknown key kind `{other}`"))),
        }
    }
}

/// Records plus per-record split and label tags. Derived datasets are new values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<TransactionRecord>,
    splits: Vec<Split>,
    labels: Vec<LabelState>,
}

impl Dataset {
    /// Validates records and tags all of them as train. Records carrying
    /// ground truth start out labeled.
    pub fn new(records: Vec<TransactionRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate().map_err(|message| Error::InvalidRow { row: i + 1, message })?;
            if !seen.insert(r.txn_id.as_str()) {
                return Err(Error::DuplicateId { txn_id: r.txn_id.clone(), row: i + 1 });
            }
        }
        let labels = records
            .iter()
            .map(|r| if r.has_truth() { LabelState::Labeled } else { LabelState::Unlabeled })
            .collect();
        let splits = vec![Split::Train; records.len()];
        Ok(Self { records, splits, labels })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TransactionRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &TransactionRecord {
        &self.records[i]
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn label_state(&self, i: usize) -> LabelState {
        self.labels[i]
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.labels[i] == LabelState::Labeled
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Train records currently carrying a usable label.
    pub fn labeled_train(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == Split::Train && self.labels[i] == LabelState::Labeled)
            .collect()
    }

    pub fn unlabeled_train(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == Split::Train && self.labels[i] == LabelState::Unlabeled)
            .collect()
    }

    /// Replaces the split and label tags. Used by deserialization helpers and tests.
    pub fn with_tags(mut self, splits: Vec<Split>, labels: Vec<LabelState>) -> Result<Self> {
        if splits.len() != self.len() || labels.len() != self.len() {
            return Err(Error::Shape("tag vectors must match record count".into()));
        }
        self.splits = splits;
        self.labels = labels;
        Ok(self)
    }

    /// New dataset holding only the given records (tags carried over).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn parse_f64(field: &str, name: &str, row: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::InvalidRow {
        row,
        message: format!("cannot parse {name} `{field}` as a number"),
    })
}

fn parse_illicit(field: &str, row: usize) -> Result<Option<bool>> {
    match field.trim() {
        "" => Ok(None),
        "1" | "true" | "True" | "TRUE" => Ok(Some(true)),
        "0" | "false" | "False" | "FALSE" => Ok(Some(false)),
        other => Err(Error::InvalidRow { row, message: format!("cannot parse illicit `{other}`") }),
    }
}

/// Parses the customs CSV format. Row numbers in errors are 1-based data rows.
pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut col = [0usize; 11];
    for (slot, name) in col.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let get = |c: usize| row.get(col[c]).unwrap_or("");
        let date = NaiveDate::parse_from_str(get(1), "%Y-%m-%d").map_err(|_| Error::InvalidRow {
            row: row_no,
            message: format!("cannot parse date `{}`", get(1)),
        })?;
        let raised = get(10);
        let rec = TransactionRecord {
            txn_id: get(0).to_string(),
            date,
            importer_id: get(2).to_string(),
            hs_code: get(3).to_string(),
            declared_value: parse_f64(get(4), "declared_value", row_no)?,
            quantity: parse_f64(get(5), "quantity", row_no)?,
            gross_weight: parse_f64(get(6), "gross_weight", row_no)?,
            tariff_rate: parse_f64(get(7), "tariff_rate", row_no)?,
            paid_tax: parse_f64(get(8), "paid_tax", row_no)?,
            illicit: parse_illicit(get(9), row_no)?,
            raised_revenue: if raised.is_empty() {
                None
            } else {
                Some(parse_f64(raised, "raised_revenue", row_no)?)
            },
        };
        records.push(rec);
    }
    Dataset::new(records)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file))
}

pub fn write_csv<W: Write>(d: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_COLUMNS)?;
    for r in d.records() {
        w.write_record([
            r.txn_id.clone(),
            r.date.format("%Y-%m-%d").to_string(),
            r.importer_id.clone(),
            r.hs_code.clone(),
            r.declared_value.to_string(),
            r.quantity.to_string(),
            r.gross_weight.to_string(),
            r.tariff_rate.to_string(),
            r.paid_tax.to_string(),
            r.illicit.map(|b| if b { "1" } else { "0" }.to_string()).unwrap_or_default(),
            r.raised_revenue.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn save_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(d, std::io::BufWriter::new(file))
}

/// Half-up rounding of a nonnegative count.
pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Tags records dated on or after `test_from` as test. The rest are ordered by
/// (date, txn_id) and the latest `valid_fraction` of them become validation.
pub fn temporal_split(d: &Dataset, test_from: NaiveDate, valid_fraction: f64) -> Result<Dataset> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "valid_fraction must lie in (0,1), got {valid_fraction}"
        )));
    }
    let mut splits = vec![Split::Train; d.len()];
    let mut rest = Vec::new();
    for (i, r) in d.records.iter().enumerate() {
        if r.date >= test_from {
            splits[i] = Split::Test;
        } else {
            rest.push(i);
        }
    }
    if rest.len() == d.len() {
        return Err(Error::EmptySplit("test"));
    }
    rest.sort_by(|&a, &b| {
        let (ra, rb) = (&d.records[a], &d.records[b]);
        ra.date.cmp(&rb.date).then_with(|| ra.txn_id.cmp(&rb.txn_id))
    });
    let n_valid = round_half_up(valid_fraction * rest.len() as f64);
    if n_valid == 0 {
        return Err(Error::EmptySplit("valid"));
    }
    if n_valid >= rest.len() {
        return Err(Error::EmptySplit("train"));
    }
    for &i in &rest[rest.len() - n_valid..] {
        splits[i] = Split::Valid;
    }
    let labels = d
        .records
        .iter()
        .zip(&splits)
        .map(|(r, s)| match s {
            Split::Test => LabelState::Unlabeled,
            _ if r.has_truth() => LabelState::Labeled,
            _ => LabelState::Unlabeled,
        })
        .collect();
    Ok(Dataset { records: d.records.clone(), splits, labels })
}

/// Keeps the labels of exactly `round(rate * |train|)` train records chosen by
/// seeded sampling without replacement. Validation stays fully labeled and
/// test tags are never touched.
pub fn mask_labels(d: &Dataset, inspection_rate: f64, seed: u64) -> Result<Dataset> {
    if !(inspection_rate > 0.0 && inspection_rate <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "inspection_rate must lie in (0,1], got {inspection_rate}"
        )));
    }
    let train = d.indices_in(Split::Train);
    for &i in train.iter().chain(d.indices_in(Split::Valid).iter()) {
        if !d.records[i].has_truth() {
            return Err(Error::InvalidRow {
                row: i + 1,
                message: "train/valid record lacks ground truth".into(),
            });
        }
    }
    let k = round_half_up(inspection_rate * train.len() as f64).min(train.len());
    if k == 0 {
        return Err(Error::EmptySplit("labeled train"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = d.labels.clone();
    for &i in &train {
        labels[i] = LabelState::Unlabeled;
    }
    for pos in sample(&mut rng, train.len(), k) {
        labels[train[pos]] = LabelState::Labeled;
    }
    for (i, s) in d.splits.iter().enumerate() {
        if *s == Split::Valid {
            labels[i] = LabelState::Labeled;
        }
    }
    Ok(Dataset { records: d.records.clone(), splits: d.splits.clone(), labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OsrSummary {
    pub seen_count: usize,
    pub unseen_count: usize,
    pub osr: f64,
}

/// OSR from explicit key sets: the share of unique test keys absent from `seen`.
pub fn osr_from_keys<'a>(
    test_keys: impl IntoIterator<Item = &'a str>,
    seen: &HashSet<&str>,
) -> Result<OsrSummary> {
    let unique: BTreeSet<&str> = test_keys.into_iter().collect();
    if unique.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let seen_count = unique.iter().filter(|k| seen.contains(*k)).count();
    let unseen_count = unique.len() - seen_count;
    Ok(OsrSummary { seen_count, unseen_count, osr: unseen_count as f64 / unique.len() as f64 })
}

fn labeled_train_keys(d: &Dataset, key: KeyKind) -> HashSet<&str> {
    d.labeled_train().into_iter().map(|i| d.records[i].key(key)).collect()
}

/// OSR of `test` against the labeled train records of `train`.
pub fn compute_osr(train: &Dataset, test: &Dataset, key: KeyKind) -> Result<OsrSummary> {
    let seen = labeled_train_keys(train, key);
    let test_idx = test.indices_in(Split::Test);
    osr_from_keys(test_idx.iter().map(|&i| test.records[i].key(key)), &seen)
}

/// OSR of a dataset's own test split against its labeled train records.
pub fn dataset_osr(d: &Dataset, key: KeyKind) -> Result<OsrSummary> {
    compute_osr(d, d, key)
}

/// Relabels train so that `round((1 - target) * |test keys|)` test key values
/// are seen: every train record of a chosen key is labeled, all others are
/// unlabeled.
pub fn select_osr_subset(d: &Dataset, key: KeyKind, target_osr: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&target_osr) {
        return Err(Error::UnreachableOsr { target: target_osr, reason: "outside [0,1]".into() });
    }
    let train = d.indices_in(Split::Train);
    let test_keys: BTreeSet<&str> =
        d.indices_in(Split::Test).into_iter().map(|i| d.records[i].key(key)).collect();
    if test_keys.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let train_keys: HashSet<&str> = train.iter().map(|&i| d.records[i].key(key)).collect();
    let eligible: Vec<&str> = test_keys.iter().copied().filter(|k| train_keys.contains(k)).collect();
    let n_seen = round_half_up((1.0 - target_osr) * test_keys.len() as f64);
    if n_seen > eligible.len() {
        return Err(Error::UnreachableOsr {
            target: target_osr,
            reason: format!(
                "{n_seen} seen keys needed but only {} test keys occur in train",
                eligible.len()
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: HashSet<&str> =
        sample(&mut rng, eligible.len(), n_seen).into_iter().map(|i| eligible[i]).collect();
    let mut labels = d.labels.clone();
    for &i in &train {
        let r = &d.records[i];
        labels[i] = if chosen.contains(r.key(key)) && r.has_truth() {
            LabelState::Labeled
        } else {
            LabelState::Unlabeled
        };
    }
    if !labels.iter().zip(&d.splits).any(|(l, s)| *s == Split::Train && *l == LabelState::Labeled) {
        return Err(Error::UnreachableOsr {
            target: target_osr,
            reason: "no labeled train records remain".into(),
        });
    }
    Ok(Dataset { records: d.records.clone(), splits: d.splits.clone(), labels })
}

/// Index of each distinct key value in first-appearance order.
pub fn key_index(d: &Dataset, key: KeyKind) -> HashMap<&str, usize> {
    let mut map = HashMap::new();
    for r in d.records() {
        let n = map.len();
        map.entry(r.key(key)).or_insert(n);
    }
    map
}
