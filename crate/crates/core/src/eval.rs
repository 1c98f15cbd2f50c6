//! Ranking, top-n% metrics, reports and embedding export.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{osr_from_keys, Dataset, KeyKind, OsrSummary, Split};
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Inspection fractions reported by default.
pub const DEFAULT_FRACTIONS: [f64; 5] = [0.01, 0.02, 0.05, 0.1, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankKey {
    /// Predicted fraud probability.
    #[default]
    Cls,
    /// Predicted raised revenue.
    Rev,
    /// Probability times the clamped revenue prediction.
    Combined,
}

impl std::str::FromStr for RankKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(RankKey::Cls),
            "rev" => Ok(RankKey::Rev),
            "combined" => Ok(RankKey::Combined),
            other => Err(Error::InvalidArgument(format!("unknown ranking key `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTransaction {
    pub txn_id: String,
    pub y_cls: f64,
    /// Predicted raised revenue in currency units.
    pub y_rev: f64,
    pub illicit: Option<bool>,
    pub raised_revenue: Option<f64>,
}

impl ScoredTransaction {
    fn key(&self, key: RankKey) -> f64 {
        match key {
            RankKey::Cls => self.y_cls,
            RankKey::Rev => self.y_rev,
            RankKey::Combined => self.y_cls * self.y_rev.max(0.0),
        }
    }
}

/// Descending by key, ties by ascending txn_id.
pub fn rank(scored: &[ScoredTransaction], key: RankKey) -> Vec<ScoredTransaction> {
    let mut out = scored.to_vec();
    out.sort_by(|a, b| b.key(key).total_cmp(&a.key(key)).then_with(|| a.txn_id.cmp(&b.txn_id)));
    out
}

/// Number of inspected items for a budget fraction.
pub fn inspected_count(n_items: usize, fraction: f64) -> usize {
    if n_items == 0 || fraction <= 0.0 {
        return 0;
    }
    // guard against 0.05 * 100 landing a hair above 5
    let raw = fraction * n_items as f64;
    let k = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() };
    (k as usize).clamp(1, n_items)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("inspection fraction must lie in (0,1], got {fraction}")));
    }
    Ok(())
}

fn truth(t: &ScoredTransaction) -> Result<bool> {
    t.illicit.ok_or_else(|| Error::InvalidArgument(format!("`{}` has no ground truth", t.txn_id)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// Set when the list holds no positives; recall is then reported as 0.
    pub no_positives: bool,
}

pub fn precision_recall_at(ranked: &[ScoredTransaction], fraction: f64) -> Result<PrecisionRecall> {
    check_fraction(fraction)?;
    if ranked.is_empty() {
        return Err(Error::InvalidArgument("nothing to rank".into()));
    }
    let k = inspected_count(ranked.len(), fraction);
    let mut positives = 0usize;
    let mut hits = 0usize;
    for (i, t) in ranked.iter().enumerate() {
        if truth(t)? {
            positives += 1;
            if i < k {
                hits += 1;
            }
        }
    }
    Ok(PrecisionRecall {
        precision: hits as f64 / k as f64,
        recall: if positives == 0 { 0.0 } else { hits as f64 / positives as f64 },
        no_positives: positives == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevenueAt {
    pub ratio: f64,
    /// Set when no fraud revenue exists in the list; the ratio is then 0.
    pub no_revenue: bool,
}

/// Share of all fraud revenue that the top-k inspections recover.
pub fn revenue_at(ranked: &[ScoredTransaction], fraction: f64) -> Result<RevenueAt> {
    check_fraction(fraction)?;
    if ranked.is_empty() {
        return Err(Error::InvalidArgument("nothing to rank".into()));
    }
    let k = inspected_count(ranked.len(), fraction);
    let mut total = 0.0;
    let mut caught = 0.0;
    for (i, t) in ranked.iter().enumerate() {
        if truth(t)? {
            let s = t.raised_revenue.unwrap_or(0.0);
            total += s;
            if i < k {
                caught += s;
            }
        }
    }
    Ok(if total > 0.0 {
        RevenueAt { ratio: caught / total, no_revenue: false }
    } else {
        RevenueAt { ratio: 0.0, no_revenue: true }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsAt {
    pub fraction: f64,
    pub inspected: usize,
    pub precision: f64,
    pub recall: f64,
    pub revenue: f64,
    pub no_positives: bool,
    pub no_revenue: bool,
}

pub fn metrics_at(scored: &[ScoredTransaction], key: RankKey, fractions: &[f64]) -> Result<Vec<MetricsAt>> {
    let ranked = rank(scored, key);
    fractions
        .iter()
        .map(|&f| {
            let pr = precision_recall_at(&ranked, f)?;
            let rev = revenue_at(&ranked, f)?;
            Ok(MetricsAt {
                fraction: f,
                inspected: inspected_count(ranked.len(), f),
                precision: pr.precision,
                recall: pr.recall,
                revenue: rev.ratio,
                no_positives: pr.no_positives,
                no_revenue: rev.no_revenue,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyOsr {
    pub key: KeyKind,
    #[serde(flatten)]
    pub summary: OsrSummary,
}

/// Identifies the run a report belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub variant: String,
    pub seed: u64,
    pub config_digest: String,
    pub ranking_key: RankKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub variant: String,
    pub seed: u64,
    pub config_digest: String,
    pub ranking_key: RankKey,
    pub n_items: usize,
    pub metrics: Vec<MetricsAt>,
    pub osr: Vec<KeyOsr>,
}

impl EvalReport {
    pub fn new(meta: &ReportMeta, scored: &[ScoredTransaction], fractions: &[f64]) -> Result<Self> {
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            variant: meta.variant.clone(),
            seed: meta.seed,
            config_digest: meta.config_digest.clone(),
            ranking_key: meta.ranking_key,
            n_items: scored.len(),
            metrics: metrics_at(scored, meta.ranking_key, fractions)?,
            osr: Vec::new(),
        })
    }

    pub fn at(&self, fraction: f64) -> Option<&MetricsAt> {
        self.metrics.iter().find(|m| (m.fraction - fraction).abs() < 1e-12)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(s)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported report schema {}", r.schema_version)));
        }
        Ok(r)
    }
}

pub const CSV_HEADER: [&str; 9] =
    ["schema_version", "variant", "seed", "ranking_key", "fraction", "inspected", "precision", "recall", "revenue"];

/// One row per report and inspection fraction.
pub fn write_reports_csv<W: Write>(reports: &[EvalReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in reports {
        let key = serde_json::to_value(r.ranking_key)?;
        for m in &r.metrics {
            out.write_record([
                r.schema_version.to_string(),
                r.variant.clone(),
                r.seed.to_string(),
                key.as_str().unwrap_or_default().to_string(),
                m.fraction.to_string(),
                m.inspected.to_string(),
                m.precision.to_string(),
                m.recall.to_string(),
                m.revenue.to_string(),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Test records whose key value never occurs among labeled train records.
pub fn unseen_test_records(d: &Dataset, key: KeyKind) -> Vec<usize> {
    let seen: HashSet<&str> = d.labeled_train().into_iter().map(|i| d.record(i).key(key)).collect();
    d.indices_in(Split::Test).into_iter().filter(|&i| !seen.contains(d.record(i).key(key))).collect()
}

/// Metrics restricted to test transactions with an unseen key. The report
/// carries the OSR of the whole test split for that key.
pub fn inductive_eval(
    d: &Dataset,
    scored_test: &[ScoredTransaction],
    key: KeyKind,
    meta: &ReportMeta,
    fractions: &[f64],
) -> Result<EvalReport> {
    let unseen: HashSet<&str> = unseen_test_records(d, key).into_iter().map(|i| d.record(i).txn_id.as_str()).collect();
    let subset: Vec<ScoredTransaction> =
        scored_test.iter().filter(|t| unseen.contains(t.txn_id.as_str())).cloned().collect();
    if subset.is_empty() {
        return Err(Error::EmptySplit("unseen-key test subset"));
    }
    let seen_keys: HashSet<&str> = d.labeled_train().into_iter().map(|i| d.record(i).key(key)).collect();
    let osr = osr_from_keys(d.indices_in(Split::Test).into_iter().map(|i| d.record(i).key(key)), &seen_keys)?;
    let mut report = EvalReport::new(meta, &subset, fractions)?;
    report.osr.push(KeyOsr { key, summary: osr });
    Ok(report)
}

/// Writes one row per node: the embedding followed by a label column
/// (`illicit`, `licit` or `unlabeled`).
pub fn write_embeddings_csv<W: Write>(rows: &[(Vec<f64>, &'static str)], w: W) -> Result<()> {
    let width = rows.first().map_or(0, |r| r.0.len());
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..width).map(|i| format!("e{i}")).collect();
    header.push("label".into());
    out.write_record(&header)?;
    for (emb, label) in rows {
        if emb.len() != width {
            return Err(Error::Shape("ragged embedding rows".into()));
        }
        let mut rec: Vec<String> = emb.iter().map(|v| format!("{v:e}")).collect();
        rec.push((*label).to_string());
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(id: &str, s: f64, y: bool, rev: f64) -> ScoredTransaction {
        ScoredTransaction { txn_id: id.into(), y_cls: s, y_rev: rev, illicit: Some(y), raised_revenue: Some(if y { rev } else { 0.0 }) }
    }

    #[test]
    fn rank_orders_and_breaks_ties() {
        let v = vec![st("c", 0.1, false, 0.0), st("b", 0.9, true, 1.0), st("a", 0.8, false, 0.0), st("0", 0.8, true, 1.0)];
        let ids: Vec<_> = rank(&v, RankKey::Cls).into_iter().map(|t| t.txn_id).collect();
        assert_eq!(ids, ["b", "0", "a", "c"]);
    }

    #[test]
    fn combined_clamps_negative_revenue() {
        let mut a = st("a", 0.9, true, -5.0);
        a.raised_revenue = Some(1.0);
        let b = st("b", 0.1, true, 1.0);
        let ids: Vec<_> = rank(&[a, b], RankKey::Combined).into_iter().map(|t| t.txn_id).collect();
        assert_eq!(ids, ["b", "a"]);
    }

    #[test]
    fn precision_recall_worked_example() {
        let v = vec![st("a", 0.9, true, 1.0), st("b", 0.8, false, 0.0), st("c", 0.1, true, 1.0), st("d", 0.05, false, 0.0)];
        let pr = precision_recall_at(&rank(&v, RankKey::Cls), 0.5).unwrap();
        assert_eq!((pr.precision, pr.recall), (0.5, 0.5));
    }

    #[test]
    fn revenue_worked_example() {
        let v = vec![st("a", 0.9, true, 10.0), st("b", 0.5, true, 5.0), st("c", 0.7, false, 0.0)];
        let r = revenue_at(&rank(&v, RankKey::Cls), 1.0 / 3.0).unwrap();
        assert!((r.ratio - 10.0 / 15.0).abs() < 1e-15);
        assert_eq!(revenue_at(&rank(&v, RankKey::Cls), 1.0).unwrap().ratio, 1.0);
    }

    #[test]
    fn flags_when_no_positives() {
        let v = vec![st("a", 0.9, false, 0.0)];
        let pr = precision_recall_at(&v, 0.5).unwrap();
        assert!(pr.no_positives && pr.recall == 0.0);
        assert!(revenue_at(&v, 0.5).unwrap().no_revenue);
    }

    #[test]
    fn inspected_count_is_ceiling() {
        assert_eq!(inspected_count(100, 0.05), 5);
        assert_eq!(inspected_count(101, 0.05), 6);
        assert_eq!(inspected_count(3, 0.01), 1);
        assert_eq!(inspected_count(10, 1.0), 10);
    }

    #[test]
    fn rejects_bad_fraction_and_missing_truth() {
        let v = vec![st("a", 0.9, false, 0.0)];
        assert!(precision_recall_at(&v, 0.0).is_err());
        let mut u = v.clone();
        u[0].illicit = None;
        assert!(precision_recall_at(&u, 0.5).is_err());
    }

    #[test]
    fn report_json_and_csv() {
        let v = vec![st("a", 0.9, true, 10.0), st("b", 0.5, false, 0.0)];
        let r = EvalReport::new(
            &ReportMeta { variant: "full".into(), seed: 3, config_digest: "abc".into(), ranking_key: RankKey::Cls },
            &v,
            &[0.5, 1.0],
        ).unwrap();
        let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let mut buf = Vec::new();
        write_reports_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("1,full,3,cls,0.5,1,1,1,1"));
    }

    #[test]
    fn embeddings_csv_shape() {
        let rows: Vec<(Vec<f64>, &'static str)> = (0..4).map(|i| (vec![i as f64; 3], "unlabeled")).collect();
        let mut buf = Vec::new();
        write_embeddings_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().all(|l| l.split(',').count() == 4));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn revenue_monotone_in_budget(scores in proptest::collection::vec((0.0f64..1.0, any::<bool>(), 0.0f64..100.0), 1..60)) {
                let v: Vec<_> = scores.iter().enumerate().map(|(i, &(s, y, r))| st(&format!("{i:03}"), s, y, r)).collect();
                let ranked = rank(&v, RankKey::Cls);
                let mut last = 0.0;
                for f in [0.01, 0.05, 0.1, 0.3, 0.6, 1.0] {
                    let r = revenue_at(&ranked, f).unwrap().ratio;
                    prop_assert!(r + 1e-15 >= last);
                    prop_assert!((0.0..=1.0).contains(&r));
                    last = r;
                }
            }

            #[test]
            fn rank_is_a_permutation(scores in proptest::collection::vec(0.0f64..1.0, 0..40)) {
                let v: Vec<_> = scores.iter().enumerate().map(|(i, &s)| st(&format!("{i:03}"), s, false, 0.0)).collect();
                let mut ids: Vec<_> = rank(&v, RankKey::Cls).into_iter().map(|t| t.txn_id).collect();
                ids.sort();
                let mut orig: Vec<_> = v.into_iter().map(|t| t.txn_id).collect();
                orig.sort();
                prop_assert_eq!(ids, orig);
            }
        }
    }
}
