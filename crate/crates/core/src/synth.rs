//! Seeded generator of customs declarations with planted importer and
//! HS-code level fraud structure.
//!
//! Each importer carries a latent risk that both raises its illicit rate and
//! shifts its declared unit prices downward relative to the HS-code norm.
//! Row-level models see the shifted price mixed with the HS price level;
//! aggregating an importer's and an HS-code's other declarations separates
//! the two, which is the signal message passing can exploit.

use chrono::{Duration, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TransactionRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_transactions: usize,
    pub n_importers: usize,
    pub n_hs_codes: usize,
    pub base_illicit_rate: f64,
    pub importer_effect: f64,
    pub hs_effect: f64,
    pub feature_noise: f64,
    /// Standard deviation of the per-HS-code log unit price.
    pub price_spread: f64,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_transactions: 50_000,
            n_importers: 2_000,
            n_hs_codes: 300,
            base_illicit_rate: 0.0412,
            importer_effect: 1.5,
            hs_effect: 0.5,
            feature_noise: 0.3,
            price_spread: 1.0,
            start_date: NaiveDate::from_ymd_opt(2016, 1, 1).unwrap(),
            end_date: NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_transactions == 0 || self.n_importers == 0 || self.n_hs_codes == 0 {
            return Err(Error::Config("counts must be positive".into()));
        }
        if self.n_hs_codes > 899_999 {
            return Err(Error::Config("at most 899999 HS codes fit the 6-digit format".into()));
        }
        if !(0.0..1.0).contains(&self.base_illicit_rate) {
            return Err(Error::Config(format!(
                "base_illicit_rate must lie in [0,1), got {}",
                self.base_illicit_rate
            )));
        }
        for (name, v) in [
            ("importer_effect", self.importer_effect),
            ("hs_effect", self.hs_effect),
            ("feature_noise", self.feature_noise),
            ("price_spread", self.price_spread),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.start_date >= self.end_date {
            return Err(Error::Config("start_date must precede end_date".into()));
        }
        Ok(())
    }
}

/// Shift of an importer's log unit price per unit of latent risk, per unit of
/// `importer_effect`.
const PRICE_SHIFT: f64 = 0.3;
/// Weight of the standardized log unit value in the illicit logit.
const ROW_WEIGHT: f64 = 0.5;
const UNDERVALUATION: (f64, f64) = (0.1, 0.5);

/// Generated data together with the planted latent risks.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub importer_risk: Vec<f64>,
    pub hs_risk: Vec<f64>,
    /// Intercept chosen so the expected illicit rate equals the configured one.
    pub intercept: f64,
}

pub fn importer_name(i: usize) -> String {
    format!("IMP{i:06}")
}

pub fn hs_name(c: usize) -> String {
    format!("{:06}", 100_000 + c)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn round_to(x: f64, digits: i32) -> f64 {
    let p = 10f64.powi(digits);
    (x * p).round() / p
}

/// Intercept `b` with `mean(sigmoid(b + eta)) == rate`, by bisection.
fn calibrate_intercept(eta: &[f64], rate: f64) -> f64 {
    let mean_at = |b: f64| eta.iter().map(|e| sigmoid(b + e)).sum::<f64>() / eta.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    Ok(generate_detailed(cfg)?.dataset)
}

pub fn generate_detailed(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = StandardNormal;
    let activity = LogNormal::new(0.0, 1.0).expect("valid lognormal");

    let importer_risk: Vec<f64> = (0..cfg.n_importers).map(|_| normal.sample(&mut rng)).collect();
    let importer_weight: Vec<f64> = (0..cfg.n_importers).map(|_| activity.sample(&mut rng)).collect();

    let hs_risk: Vec<f64> = (0..cfg.n_hs_codes).map(|_| normal.sample(&mut rng)).collect();
    let hs_weight: Vec<f64> = (0..cfg.n_hs_codes).map(|_| activity.sample(&mut rng)).collect();
    let hs_log_price: Vec<f64> =
        (0..cfg.n_hs_codes).map(|_| {
            let z: f64 = normal.sample(&mut rng);
            4.0 + cfg.price_spread * z
        }).collect();
    let hs_log_kg: Vec<f64> = (0..cfg.n_hs_codes).map(|_| normal.sample(&mut rng)).collect();
    let hs_tariff: Vec<f64> =
        (0..cfg.n_hs_codes).map(|_| round_to(rng.random_range(0.02..0.3), 3)).collect();

    let pick_importer = WeightedIndex::new(&importer_weight).expect("positive weights");
    let pick_hs = WeightedIndex::new(&hs_weight).expect("positive weights");
    let span_days = (cfg.end_date - cfg.start_date).num_days();
    let noise = Normal::new(0.0, cfg.feature_noise.max(0.0)).expect("valid noise");
    let qty_dist = LogNormal::new(2.0, 1.0).expect("valid lognormal");

    struct Draft {
        offset_days: i64,
        importer: usize,
        hs: usize,
        quantity: f64,
        declared_value: f64,
        gross_weight: f64,
        log_unit: f64,
        eta_partial: f64,
    }

    let mut drafts = Vec::with_capacity(cfg.n_transactions);
    for _ in 0..cfg.n_transactions {
        let importer = pick_importer.sample(&mut rng);
        let hs = pick_hs.sample(&mut rng);
        let offset_days = rng.random_range(0..span_days);
        let quantity: f64 = qty_dist.sample(&mut rng);
        let quantity = quantity.round().max(1.0);
        let shift = -PRICE_SHIFT * cfg.importer_effect * importer_risk[importer];
        let log_unit_price = hs_log_price[hs] + shift + noise.sample(&mut rng);
        let declared_value = round_to(quantity * log_unit_price.exp(), 2).max(0.01);
        let kg_noise: f64 = normal.sample(&mut rng);
        let gross_weight = round_to(quantity * (hs_log_kg[hs] + 0.3 * kg_noise).exp(), 2).max(0.01);
        let eta_partial = cfg.importer_effect * importer_risk[importer]
            + cfg.hs_effect * hs_risk[hs]
            + noise.sample(&mut rng);
        drafts.push(Draft {
            offset_days,
            importer,
            hs,
            quantity,
            declared_value,
            gross_weight,
            log_unit: (declared_value / quantity).ln(),
            eta_partial,
        });
    }

    let n = drafts.len() as f64;
    let mean = drafts.iter().map(|d| d.log_unit).sum::<f64>() / n;
    let var = drafts.iter().map(|d| (d.log_unit - mean).powi(2)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    let eta: Vec<f64> =
        drafts.iter().map(|d| d.eta_partial - ROW_WEIGHT * (d.log_unit - mean) / sd).collect();
    let intercept = if cfg.base_illicit_rate > 0.0 {
        calibrate_intercept(&eta, cfg.base_illicit_rate)
    } else {
        f64::NEG_INFINITY
    };

    let mut order: Vec<usize> = (0..drafts.len()).collect();
    order.sort_by_key(|&i| drafts[i].offset_days);

    let mut illicit_draws = Vec::with_capacity(drafts.len());
    for e in &eta {
        let p = sigmoid(intercept + e);
        let u: f64 = rng.random();
        let illicit = u < p;
        let factor = rng.random_range(UNDERVALUATION.0..UNDERVALUATION.1);
        illicit_draws.push((illicit, factor));
    }

    let mut records = Vec::with_capacity(drafts.len());
    for (rank, &i) in order.iter().enumerate() {
        let d = &drafts[i];
        let tariff = hs_tariff[d.hs];
        let (illicit, factor) = illicit_draws[i];
        let raised = if illicit {
            let true_value = d.declared_value / (1.0 - factor);
            tariff * (true_value - d.declared_value)
        } else {
            0.0
        };
        records.push(TransactionRecord {
            txn_id: format!("T{rank:08}"),
            date: cfg.start_date + Duration::days(d.offset_days),
            importer_id: importer_name(d.importer),
            hs_code: hs_name(d.hs),
            declared_value: d.declared_value,
            quantity: d.quantity,
            gross_weight: d.gross_weight,
            tariff_rate: tariff,
            paid_tax: round_to(tariff * d.declared_value, 2),
            illicit: Some(illicit),
            raised_revenue: Some(raised),
        });
    }

    Ok(SynthOutput { dataset: Dataset::new(records)?, importer_risk, hs_risk, intercept })
}
