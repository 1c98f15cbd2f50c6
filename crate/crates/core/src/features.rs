//! Numeric feature engineering shared by the tree ensemble and the raw-feature
//! ablation.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TransactionRecord};
use crate::error::{Error, Result};

pub const FEATURE_NAMES: [&str; 8] = [
    "log_declared_value",
    "log_quantity",
    "log_gross_weight",
    "log_unit_value",
    "log_value_per_kg",
    "tariff_rate",
    "log_paid_tax",
    "tax_ratio",
];

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl NumericMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!("{rows}x{cols} matrix needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn select_rows(&self, idx: &[usize]) -> NumericMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        NumericMatrix { rows: idx.len(), cols: self.cols, data }
    }
}

pub fn record_features(r: &TransactionRecord) -> [f64; 8] {
    let unit = r.declared_value / r.quantity;
    let per_kg = r.declared_value / r.gross_weight;
    let ratio = if r.declared_value > 0.0 { r.paid_tax / r.declared_value } else { 0.0 };
    [
        r.declared_value.ln_1p(),
        r.quantity.ln(),
        r.gross_weight.ln(),
        unit.ln_1p(),
        per_kg.ln_1p(),
        r.tariff_rate,
        r.paid_tax.ln_1p(),
        ratio,
    ]
}

pub fn engineered_features(d: &Dataset) -> NumericMatrix {
    let mut data = Vec::with_capacity(d.len() * FEATURE_NAMES.len());
    for r in d.records() {
        data.extend_from_slice(&record_features(r));
    }
    NumericMatrix { rows: d.len(), cols: FEATURE_NAMES.len(), data }
}

/// Per-column mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on the given rows; constant columns get unit scale.
    pub fn fit(m: &NumericMatrix, rows: &[usize]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; m.cols()];
        for &i in rows {
            for (acc, v) in mean.iter_mut().zip(m.row(i)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; m.cols()];
        for &i in rows {
            for ((acc, v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
                *acc += (v - mu).powi(2);
            }
        }
        let std = var.into_iter().map(|v| if v > 0.0 { (v / n).sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}
