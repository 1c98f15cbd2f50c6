//! Fixtures and independent reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use chrono::NaiveDate;
use fraudgraph::data::{Dataset, TransactionRecord};
use fraudgraph::features::NumericMatrix;
use fraudgraph::gnn::{Aggregator, ModelParams};
use fraudgraph::graph::{build_graph, GraphVariant, NodeFeatures, NodeKind, NodeRef, TransactionGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn record(id: usize, day: i64, importer: usize, hs: usize, illicit: Option<bool>, revenue: f64) -> TransactionRecord {
    TransactionRecord {
        txn_id: format!("t{id:05}"),
        date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Duration::days(day),
        importer_id: format!("imp{importer}"),
        hs_code: format!("hs{hs}"),
        declared_value: 100.0 + id as f64,
        quantity: 1.0 + (id % 7) as f64,
        gross_weight: 5.0 + (id % 11) as f64,
        tariff_rate: 0.1,
        paid_tax: 10.0,
        illicit,
        raised_revenue: illicit.map(|b| if b { revenue } else { 0.0 }),
    }
}

/// Random bipartite fixture with dense node features. Every importer and HS
/// code index below the given counts is used at least once when
/// `n_txn >= max(n_imp, n_hs)`.
pub fn random_graph(n_txn: usize, n_imp: usize, n_hs: usize, width: usize, seed: u64) -> (Dataset, TransactionGraph) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<TransactionRecord> = (0..n_txn)
        .map(|i| {
            let imp = if i < n_imp { i } else { rng.random_range(0..n_imp) };
            let hs = if i < n_hs { i } else { rng.random_range(0..n_hs) };
            let illicit = rng.random_bool(0.4);
            record(i, i as i64, imp, hs, Some(illicit), rng.random_range(1.0..50.0))
        })
        .collect();
    let d = Dataset::new(records).unwrap();
    let rows: Vec<Vec<f64>> = (0..n_txn).map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let feats = NodeFeatures::Dense(NumericMatrix::from_rows(&rows).unwrap());
    let g = build_graph(&d, Arc::new(feats), GraphVariant::Full).unwrap();
    (d, g)
}

/// Model with every tensor drawn uniformly from [-0.8, 0.8].
pub fn random_params(agg: Aggregator, width: usize, hidden: usize, layers: usize, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(agg, width, hidden, layers, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    p.for_each_tensor_mut(|_, t| t.data.iter_mut().for_each(|x| *x = rng.random_range(-0.8..0.8)));
    p
}

// --- dense full-graph forward ---------------------------------------------

fn matvec(x: &[f64], m: &fraudgraph::gnn::Tensor) -> Vec<f64> {
    let (rows, cols) = (m.shape[0], m.shape[1]);
    assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for (o, w) in out.iter_mut().zip(&m.data[i * cols..(i + 1) * cols]) {
            *o += xi * w;
        }
    }
    out
}

/// Embeddings of every node after each layer, computed over whole
/// neighbourhoods. Layer k refreshes virtual nodes when k is odd and
/// transactions when k is even; the other side passes only its own message.
pub fn dense_forward(p: &ModelParams, g: &TransactionGraph) -> Vec<std::collections::HashMap<NodeRef, Vec<f64>>> {
    let nodes: Vec<NodeRef> = g.all_nodes().collect();
    let mut cur: std::collections::HashMap<NodeRef, Vec<f64>> = nodes
        .iter()
        .map(|&n| {
            let v = match n.kind {
                NodeKind::Txn => match g.features() {
                    NodeFeatures::Dense(m) => m.row(g.txn_record(n.id)).to_vec(),
                    NodeFeatures::MultiHot(m) => m.dense_row(g.txn_record(n.id)),
                },
                _ => vec![0.0; g.feature_width()],
            };
            (n, v)
        })
        .collect();
    let mut out = vec![cur.clone()];
    for (k, layer) in p.layers.iter().enumerate().map(|(i, l)| (i + 1, l)) {
        let refresh_virtual = k % 2 == 1;
        let mut next = std::collections::HashMap::new();
        for &m in &nodes {
            let active = m.kind.is_virtual() == refresh_virtual;
            let mut pool: Vec<(NodeRef, &fraudgraph::gnn::Tensor)> = vec![(m, &layer.w2)];
            if active {
                for nb in g.neighbors(m).unwrap() {
                    let edge_kind = if m.kind.is_virtual() { m.kind } else { nb.kind };
                    let w = match (p.aggregator, edge_kind) {
                        (Aggregator::RelationTyped, NodeKind::Importer) => &layer.w2_importer,
                        (Aggregator::RelationTyped, NodeKind::HsCode) => &layer.w2_hs,
                        _ => &layer.w2,
                    };
                    pool.push((nb, w));
                }
            }
            let weights: Vec<f64> = if p.aggregator == Aggregator::Attention && pool.len() > 1 {
                let d = layer.w2.shape[1];
                let target = matvec(&cur[&m], &layer.w1);
                let logits: Vec<f64> = pool
                    .iter()
                    .map(|(j, _)| {
                        let src = matvec(&cur[j], &layer.w1);
                        let z: f64 = (0..d).map(|i| layer.attn.data[i] * src[i] + layer.attn.data[d + i] * target[i]).sum();
                        if z > 0.0 { z } else { p.leaky_slope * z }
                    })
                    .collect();
                let denom: f64 = logits.iter().map(|l| l.exp()).sum();
                logits.iter().map(|l| l.exp() / denom).collect()
            } else {
                vec![1.0 / pool.len() as f64; pool.len()]
            };
            let mut h = vec![0.0; layer.w2.shape[1]];
            for ((j, w), a) in pool.iter().zip(&weights) {
                for (o, v) in h.iter_mut().zip(matvec(&cur[j], w)) {
                    *o += a * v;
                }
            }
            next.insert(m, h.into_iter().map(|v| v.max(0.0)).collect::<Vec<f64>>());
        }
        out.push(next.clone());
        cur = next;
    }
    out
}

// --- finite differences ---------------------------------------------------

/// Fraction of parameters whose analytic gradient agrees with a central
/// difference within `tol` relative error, `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_agreement(
    params: &ModelParams,
    analytic: &ModelParams,
    h: f64,
    tol: f64,
    floor: f64,
    mut loss: impl FnMut(&ModelParams) -> f64,
) -> (usize, usize, f64) {
    let base = params.flatten();
    let grad = analytic.flatten();
    let mut probe = params.clone();
    let mut ok = 0;
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] = base[i] + h;
        probe.assign_flat(&x).unwrap();
        let up = loss(&probe);
        x[i] = base[i] - h;
        probe.assign_flat(&x).unwrap();
        let down = loss(&probe);
        let numeric = (up - down) / (2.0 * h);
        let a = grad[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
        if rel < tol {
            ok += 1;
        } else if std::env::var_os("FD_VERBOSE").is_some() {
            eprintln!("param {i}: analytic {a:e} numeric {numeric:e}");
        }
    }
    (ok, base.len(), worst)
}
