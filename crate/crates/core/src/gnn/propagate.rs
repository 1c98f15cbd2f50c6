//! Forward and reverse-mode passes over one sampled tree.
//!
//! Layer `k` (1-based) updates virtual nodes when `k` is odd and transactions
//! when `k` is even. A node whose kind is not updated at a layer still passes
//! through that layer's transform with a self-only pool, so widths stay
//! consistent from the input width to the hidden width.

use crate::error::{Error, Result};
use crate::graph::{NodeFeatures, NodeKind, SampledSubgraph, TransactionGraph};

use super::params::{Aggregator, LayerParams, ModelParams, Tensor};

/// Whether nodes of `kind` aggregate from their neighbors at layer `k`.
pub fn is_active(kind: NodeKind, k: usize) -> bool {
    kind.is_virtual() == (k % 2 == 1)
}

#[inline]
fn leaky(z: f64, slope: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        slope * z
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// A layer input: raw features at layer 1, hidden embeddings afterwards.
#[derive(Clone, Copy)]
enum Input<'a> {
    Zero,
    Sparse(&'a [u32]),
    Dense(&'a [f64]),
}

/// `out = x · m`.
fn project(x: Input<'_>, m: &Tensor, out: &mut [f64]) {
    out.fill(0.0);
    match x {
        Input::Zero => {}
        Input::Sparse(idx) => {
            for &i in idx {
                axpy(1.0, m.row(i as usize), out);
            }
        }
        Input::Dense(v) => {
            for (i, &xi) in v.iter().enumerate() {
                if xi != 0.0 {
                    axpy(xi, m.row(i), out);
                }
            }
        }
    }
}

/// Accumulates `dm += xᵀ g` and, when requested, `dx += g · mᵀ`.
fn project_back(x: Input<'_>, m: &Tensor, dm: &mut Tensor, g: &[f64], dx: Option<&mut [f64]>) {
    match x {
        Input::Zero => {}
        Input::Sparse(idx) => {
            for &i in idx {
                axpy(1.0, g, dm.row_mut(i as usize));
            }
        }
        Input::Dense(v) => {
            for (i, &xi) in v.iter().enumerate() {
                if xi != 0.0 {
                    axpy(xi, g, dm.row_mut(i));
                }
            }
        }
    }
    if let Some(dx) = dx {
        for (i, dxi) in dx.iter_mut().enumerate() {
            *dxi += dot(m.row(i), g);
        }
    }
}

/// Which transform a pool member goes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    SelfNode,
    ImporterEdge,
    HsEdge,
}

fn transform(params: &ModelParams, k: usize, role: Role) -> &Tensor {
    let l = &params.layers[k - 1];
    match (params.aggregator, role) {
        (Aggregator::RelationTyped, Role::ImporterEdge) => &l.w2_importer,
        (Aggregator::RelationTyped, Role::HsEdge) => &l.w2_hs,
        _ => &l.w2,
    }
}

fn transform_mut(grads: &mut ModelParams, aggregator: Aggregator, k: usize, role: Role) -> &mut Tensor {
    let l = &mut grads.layers[k - 1];
    match (aggregator, role) {
        (Aggregator::RelationTyped, Role::ImporterEdge) => &mut l.w2_importer,
        (Aggregator::RelationTyped, Role::HsEdge) => &mut l.w2_hs,
        _ => &mut l.w2,
    }
}

/// Recorded values of one node update.
#[derive(Debug, Clone)]
struct Step {
    slot: usize,
    /// Pool slots, self first.
    pool: Vec<usize>,
    roles: Vec<Role>,
    alpha: Vec<f64>,
    /// Pre-activation attention logits; empty for non-attention steps.
    z: Vec<f64>,
    /// `x_j · M1`, flattened; empty for non-attention steps.
    a: Vec<f64>,
    /// `x_j · M2`, flattened.
    b: Vec<f64>,
    h: Vec<f64>,
}

#[derive(Debug, Clone)]
struct SlotInfo {
    kind: NodeKind,
    /// Dataset record for transaction slots.
    record: Option<usize>,
    children: std::ops::Range<usize>,
}

/// Everything the backward pass needs from a forward pass over one tree.
#[derive(Debug, Clone)]
pub struct TreeTrace {
    hidden: usize,
    n_layers: usize,
    slots: Vec<SlotInfo>,
    /// Highest layer each slot needs; `None` when the slot is not used.
    need: Vec<Option<usize>>,
    /// `emb[k - 1]` holds layer-`k` outputs, `slots × hidden`.
    emb: Vec<Vec<f64>>,
    steps: Vec<Vec<Step>>,
}

/// Highest layer each slot of the tree must compute for the root to reach
/// layer `n_layers`.
fn needed_layers(sub: &SampledSubgraph, n_layers: usize) -> Vec<Option<usize>> {
    let mut need = vec![None; sub.slots.len()];
    need[0] = Some(n_layers);
    for s in 0..sub.slots.len() {
        let Some(l) = need[s] else { continue };
        let kind = sub.slots[s].node.kind;
        let top_active = (1..=l).rev().find(|&k| is_active(kind, k));
        if let Some(ka) = top_active {
            for c in sub.children(s) {
                need[c] = Some(ka - 1);
            }
        }
    }
    need
}

impl TreeTrace {
    pub fn root_embedding(&self) -> &[f64] {
        &self.emb[self.n_layers - 1][..self.hidden]
    }

    /// Output of `slot` at layer `k >= 1`, if it was computed.
    pub fn embedding(&self, slot: usize, k: usize) -> Option<&[f64]> {
        if k == 0 || k > self.n_layers || self.need.get(slot).copied().flatten()? < k {
            return None;
        }
        Some(&self.emb[k - 1][slot * self.hidden..(slot + 1) * self.hidden])
    }

    /// Attention weights of every update at layer `k`, keyed by slot.
    pub fn weights(&self, k: usize) -> Vec<(usize, Vec<f64>)> {
        self.steps[k - 1].iter().map(|s| (s.slot, s.alpha.clone())).collect()
    }

    fn input<'a>(&'a self, features: &'a NodeFeatures, k: usize, slot: usize) -> Input<'a> {
        if k == 1 {
            match self.slots[slot].record {
                None => Input::Zero,
                Some(r) => match features {
                    NodeFeatures::MultiHot(m) => Input::Sparse(m.row(r)),
                    NodeFeatures::Dense(m) => Input::Dense(m.row(r)),
                },
            }
        } else {
            Input::Dense(&self.emb[k - 2][slot * self.hidden..(slot + 1) * self.hidden])
        }
    }

    /// Accumulates parameter gradients of `d_root · s_root` into `grads`.
    pub fn backward(&self, params: &ModelParams, graph: &TransactionGraph, d_root: &[f64], grads: &mut ModelParams) {
        let d = self.hidden;
        let features = graph.features();
        let slope = params.leaky_slope;
        let agg = params.aggregator;
        let mut demb: Vec<Vec<f64>> = self.emb.iter().map(|e| vec![0.0; e.len()]).collect();
        demb[self.n_layers - 1][..d].copy_from_slice(d_root);
        let mut dh = vec![0.0; d];
        let mut db = vec![0.0; d];
        let mut da = vec![0.0; d];
        for k in (1..=self.n_layers).rev() {
            let (lower, upper) = demb.split_at_mut(k - 1);
            let dout_layer = &upper[0];
            let mut dx_layer = if k >= 2 { Some(&mut lower[k - 2]) } else { None };
            for step in &self.steps[k - 1] {
                let dout = &dout_layer[step.slot * d..(step.slot + 1) * d];
                if dout.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for ((g, &o), &h) in dh.iter_mut().zip(dout).zip(&step.h) {
                    *g = if h > 0.0 { o } else { 0.0 };
                }
                let p = step.pool.len();
                for (j, &slot) in step.pool.iter().enumerate() {
                    db.iter_mut().zip(&dh).for_each(|(o, &g)| *o = step.alpha[j] * g);
                    let x = self.input(features, k, slot);
                    let m = transform(params, k, step.roles[j]);
                    let dm = transform_mut(grads, agg, k, step.roles[j]);
                    let dx = dx_layer.as_mut().map(|l| &mut l[slot * d..(slot + 1) * d]);
                    project_back(x, m, dm, &db, dx);
                }
                if step.z.is_empty() || p < 2 {
                    continue;
                }
                let dalpha: Vec<f64> = (0..p).map(|j| dot(&dh, &step.b[j * d..(j + 1) * d])).collect();
                let mean: f64 = step.alpha.iter().zip(&dalpha).map(|(a, g)| a * g).sum();
                let dz: Vec<f64> = (0..p)
                    .map(|j| {
                        let de = step.alpha[j] * (dalpha[j] - mean);
                        if step.z[j] >= 0.0 {
                            de
                        } else {
                            de * slope
                        }
                    })
                    .collect();
                let dz_sum: f64 = dz.iter().sum();
                let attn = &params.layers[k - 1].attn.data;
                let (r_a, r_b) = attn.split_at(d);
                {
                    let gattn = &mut grads.layers[k - 1].attn.data;
                    let (g_a, g_b) = gattn.split_at_mut(d);
                    for (&z, a) in dz.iter().zip(step.a.chunks_exact(d)).take(p) {
                        axpy(z, a, g_a);
                    }
                    axpy(dz_sum, &step.a[..d], g_b);
                }
                for (j, &slot) in step.pool.iter().enumerate() {
                    da.iter_mut().zip(r_a).for_each(|(o, &r)| *o = dz[j] * r);
                    if j == 0 {
                        axpy(dz_sum, r_b, &mut da);
                    }
                    let x = self.input(features, k, slot);
                    let m1 = &params.layers[k - 1].w1;
                    let dm1 = &mut grads.layers[k - 1].w1;
                    let dx = dx_layer.as_mut().map(|l| &mut l[slot * d..(slot + 1) * d]);
                    project_back(x, m1, dm1, &da, dx);
                }
            }
        }
    }
}

/// Runs every needed layer over `sub` and records the trace.
pub fn forward_tree(params: &ModelParams, graph: &TransactionGraph, sub: &SampledSubgraph) -> Result<TreeTrace> {
    if params.input_width() != graph.feature_width() {
        return Err(Error::Shape(format!(
            "model expects input width {}, graph features have {}",
            params.input_width(),
            graph.feature_width()
        )));
    }
    let n_layers = params.n_layers();
    let d = params.hidden();
    let slots: Vec<SlotInfo> = sub
        .slots
        .iter()
        .enumerate()
        .map(|(i, s)| SlotInfo {
            kind: s.node.kind,
            record: (s.node.kind == NodeKind::Txn).then(|| graph.txn_record(s.node.id)),
            children: sub.children(i),
        })
        .collect();
    let need = needed_layers(sub, n_layers);
    let mut trace = TreeTrace {
        hidden: d,
        n_layers,
        slots,
        need,
        emb: vec![vec![0.0; sub.slots.len() * d]; n_layers],
        steps: vec![Vec::new(); n_layers],
    };
    let features = graph.features();
    let attention = params.aggregator == Aggregator::Attention;
    let slope = params.leaky_slope;
    for k in 1..=n_layers {
        let mut steps = Vec::new();
        for slot in 0..trace.slots.len() {
            if trace.need[slot].is_none_or(|l| l < k) {
                continue;
            }
            let info = &trace.slots[slot];
            let mut pool = vec![slot];
            let mut roles = vec![Role::SelfNode];
            if is_active(info.kind, k) {
                for c in info.children.clone() {
                    pool.push(c);
                    let edge = if info.kind.is_virtual() { info.kind } else { trace.slots[c].kind };
                    roles.push(if edge == NodeKind::Importer { Role::ImporterEdge } else { Role::HsEdge });
                }
            }
            let p = pool.len();
            let mut b = vec![0.0; p * d];
            for (j, &s) in pool.iter().enumerate() {
                project(trace.input(features, k, s), transform(params, k, roles[j]), &mut b[j * d..(j + 1) * d]);
            }
            let (alpha, z, a) = if attention && p > 1 {
                let layer = &params.layers[k - 1];
                let mut a = vec![0.0; p * d];
                for (j, &s) in pool.iter().enumerate() {
                    project(trace.input(features, k, s), &layer.w1, &mut a[j * d..(j + 1) * d]);
                }
                let (r_a, r_b) = layer.attn.data.split_at(d);
                let target = dot(r_b, &a[..d]);
                let z: Vec<f64> = (0..p).map(|j| dot(r_a, &a[j * d..(j + 1) * d]) + target).collect();
                (leaky_softmax(&z, slope), z, a)
            } else {
                (vec![1.0 / p as f64; p], Vec::new(), Vec::new())
            };
            let mut h = vec![0.0; d];
            for j in 0..p {
                axpy(alpha[j], &b[j * d..(j + 1) * d], &mut h);
            }
            let out = &mut trace.emb[k - 1][slot * d..(slot + 1) * d];
            for (o, &v) in out.iter_mut().zip(&h) {
                *o = v.max(0.0);
            }
            steps.push(Step { slot, pool, roles, alpha, z, a, b, h });
        }
        trace.steps[k - 1] = steps;
    }
    Ok(trace)
}

fn leaky_softmax(z: &[f64], slope: f64) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|&v| leaky(v, slope)).collect();
    let mx = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = e.iter().map(|v| (v - mx).exp()).collect();
    let sum: f64 = ex.iter().sum();
    ex.into_iter().map(|v| v / sum).collect()
}

/// Attention weights of one layer over the pool `[target, neighbors...]`.
pub fn attention_scores(layer: &LayerParams, slope: f64, target: &[f64], neighbors: &[&[f64]]) -> Result<Vec<f64>> {
    if layer.w1.shape.len() != 2 || layer.w1.shape[0] != target.len() || neighbors.iter().any(|n| n.len() != target.len()) {
        return Err(Error::Shape(format!("attention input width {} vs projection {:?}", target.len(), layer.w1.shape)));
    }
    if target.iter().chain(neighbors.iter().flat_map(|n| n.iter())).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("attention input".into()));
    }
    let d = layer.w1.shape[1];
    let mut proj = vec![0.0; d];
    project(Input::Dense(target), &layer.w1, &mut proj);
    let (r_a, r_b) = layer.attn.data.split_at(d);
    let t = dot(r_b, &proj);
    let mut z = Vec::with_capacity(neighbors.len() + 1);
    for x in std::iter::once(target).chain(neighbors.iter().copied()) {
        project(Input::Dense(x), &layer.w1, &mut proj);
        z.push(dot(r_a, &proj) + t);
    }
    Ok(leaky_softmax(&z, slope))
}

/// Classification and revenue head outputs for one embedding.
pub fn heads(params: &ModelParams, s: &[f64]) -> Result<(f64, f64)> {
    if s.len() != params.head_cls.len() {
        return Err(Error::Shape(format!("embedding width {} vs head width {}", s.len(), params.head_cls.len())));
    }
    let logit = dot(&params.head_cls.data, s) + params.bias_cls.data[0];
    let rev = dot(&params.head_rev.data, s) + params.bias_rev.data[0];
    Ok((sigmoid(logit), rev))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
