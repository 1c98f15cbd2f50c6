//! Training configuration, losses, negative sampling, the optimizer and the
//! pretraining and fine-tuning loops.

use std::collections::HashSet;

use chrono::NaiveDate;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::KeyKind;
use crate::error::{Error, Result};
use crate::eval::{RankKey, DEFAULT_FRACTIONS};
use crate::gbdt::GbdtParams;
use crate::gnn::{forward_tree, Aggregator, ModelParams, TreeTrace};
use crate::graph::{mix_seed, sample_subgraph, GraphVariant, NodeKind, NodeRef, TransactionGraph};

/// Model variants: the full method and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// No pretraining.
    Semi,
    /// No pretraining; the pretraining loss is added to every fine-tuning step.
    Joint,
    /// Standardized raw numeric features instead of tree cross features.
    Only,
    /// A single virtual-key kind.
    Sparse,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::Semi, Variant::Joint, Variant::Only, Variant::Sparse];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Semi => "semi",
            Variant::Joint => "joint",
            Variant::Only => "only",
            Variant::Sparse => "sparse",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate of the pretraining stage; `learning_rate` when absent.
    pub pretrain_learning_rate: Option<f64>,
    /// Weight of the revenue loss.
    pub alpha: f64,
    /// L2 weight on every parameter.
    pub lambda_reg: f64,
    /// Negatives per pretraining anchor.
    pub negatives: usize,
    /// Cap on positives per pretraining anchor; neighbors beyond it are subsampled.
    pub max_positives: usize,
    /// Cap on pretraining anchors per epoch; all nodes when absent.
    pub pretrain_anchors_per_epoch: Option<usize>,
    pub fanouts: Vec<usize>,
    pub hidden: usize,
    pub n_layers: usize,
    pub aggregator: Aggregator,
    pub seed: u64,
    pub pretrain_graph: GraphVariant,
    pub finetune_graph: GraphVariant,
    pub ranking_key: RankKey,
    pub patience: usize,
    /// Inspection fraction whose validation recall drives early stopping.
    pub early_stop_fraction: f64,
    /// Slow-weight sync interval; 0 disables lookahead.
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    /// Key kind kept by the sparse variant.
    pub sparse_key: KeyKind,
    pub gbdt: GbdtParams,
    pub eval_fractions: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            pretrain_epochs: 20,
            finetune_epochs: 50,
            batch_size: 512,
            learning_rate: 0.005,
            pretrain_learning_rate: None,
            alpha: 10.0,
            lambda_reg: 1e-4,
            negatives: 5,
            max_positives: 2,
            pretrain_anchors_per_epoch: None,
            fanouts: vec![25, 10],
            hidden: 32,
            n_layers: 2,
            aggregator: Aggregator::Attention,
            seed: 0,
            pretrain_graph: GraphVariant::Full,
            finetune_graph: GraphVariant::Full,
            ranking_key: RankKey::Cls,
            patience: 5,
            early_stop_fraction: 0.05,
            lookahead_k: 6,
            lookahead_alpha: 0.5,
            sparse_key: KeyKind::Importer,
            gbdt: GbdtParams::default(),
            eval_fractions: DEFAULT_FRACTIONS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.hidden == 0 || self.n_layers == 0 {
            return bad("batch_size, hidden and n_layers must be positive");
        }
        if self.fanouts.len() != self.n_layers || self.fanouts.contains(&0) {
            return bad("fanouts must hold one positive entry per layer");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.pretrain_learning_rate.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
            return bad("pretrain_learning_rate must be positive");
        }
        if !(self.alpha >= 0.0 && self.lambda_reg >= 0.0) {
            return bad("alpha and lambda_reg must be non-negative");
        }
        if self.max_positives == 0 {
            return bad("max_positives must be positive");
        }
        if !(0.0..=1.0).contains(&self.lookahead_alpha) {
            return bad("lookahead_alpha must lie in [0,1]");
        }
        if !(self.early_stop_fraction > 0.0 && self.early_stop_fraction <= 1.0) {
            return bad("early_stop_fraction must lie in (0,1]");
        }
        if self.eval_fractions.is_empty() || self.eval_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad("eval_fractions must be non-empty fractions in (0,1]");
        }
        if self.finetune_graph == GraphVariant::UnlabeledOnly {
            return bad("fine-tuning needs labeled transactions; finetune_graph cannot be unlabeled_only");
        }
        if self.gbdt.n_trees == 0 {
            return bad("gbdt.n_trees must be positive");
        }
        Ok(())
    }

    /// Virtual-key kinds of the graphs this config builds.
    pub fn graph_keys(&self) -> Vec<KeyKind> {
        if self.variant == Variant::Sparse {
            vec![self.sparse_key]
        } else {
            vec![KeyKind::Importer, KeyKind::HsCode]
        }
    }
}

/// How the raw dataset is split and masked before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// First test date; the last 365 days of data when absent.
    pub test_from: Option<NaiveDate>,
    pub valid_fraction: f64,
    pub inspection_rate: f64,
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inspection_rate > 0.0 && self.inspection_rate <= 1.0) {
            return Err(Error::Config(format!("inspection_rate {} outside (0,1]", self.inspection_rate)));
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(Error::Config(format!("valid_fraction {} outside (0,1)", self.valid_fraction)));
        }
        Ok(())
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_from: None, valid_fraction: 0.2, inspection_rate: 0.05 }
    }
}

/// Everything a training run reads from its config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SplitConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.data.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        digest_json(self)
    }
}

/// Hex SHA-256 of the JSON form of `v`.
pub fn digest_json<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

// --- losses ---------------------------------------------------------------

/// `log σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::gnn::sigmoid(x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Value and embedding gradients of the neighbor-contrast loss for one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainGrad {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub d_positives: Vec<Vec<f64>>,
    pub d_negatives: Vec<Vec<f64>>,
}

/// `-(1/P) Σ log σ(u·v) - (1/R) Σ log σ(-u·n)`.
pub fn pretrain_loss(anchor: &[f64], positives: &[&[f64]], negatives: &[&[f64]]) -> Result<PretrainGrad> {
    if positives.is_empty() {
        return Err(Error::InvalidArgument("anchor has no neighbors".into()));
    }
    let width = anchor.len();
    if positives.iter().chain(negatives).any(|v| v.len() != width) {
        return Err(Error::Shape("embedding widths differ".into()));
    }
    let mut loss = 0.0;
    let mut d_anchor = vec![0.0; width];
    let p = positives.len() as f64;
    let mut d_positives = Vec::with_capacity(positives.len());
    for v in positives {
        let x = dot(anchor, v);
        loss -= log_sigmoid(x) / p;
        // d/dx of -log σ(x) is σ(x) - 1
        let g = (sigmoid(x) - 1.0) / p;
        d_anchor.iter_mut().zip(*v).for_each(|(a, &b)| *a += g * b);
        d_positives.push(anchor.iter().map(|&a| g * a).collect());
    }
    let r = negatives.len().max(1) as f64;
    let mut d_negatives = Vec::with_capacity(negatives.len());
    for v in negatives {
        let x = dot(anchor, v);
        loss -= log_sigmoid(-x) / r;
        let g = sigmoid(x) / r;
        d_anchor.iter_mut().zip(*v).for_each(|(a, &b)| *a += g * b);
        d_negatives.push(anchor.iter().map(|&a| g * a).collect());
    }
    Ok(PretrainGrad { loss, d_anchor, d_positives, d_negatives })
}

/// Value of the dual-task loss and its gradients with respect to the head
/// outputs. The L2 term's parameter gradient is `2 λ Θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneGrad {
    pub loss: f64,
    pub bce: f64,
    pub mse: f64,
    pub reg: f64,
    pub d_logit: Vec<f64>,
    pub d_rev: Vec<f64>,
}

/// `BCE + alpha * MSE + lambda * ||Θ||²`, both data terms averaged over the batch.
pub fn finetune_loss(
    logits: &[f64],
    revs: &[f64],
    labels: &[f64],
    rev_targets: &[f64],
    params: &ModelParams,
    alpha: f64,
    lambda: f64,
) -> Result<FinetuneGrad> {
    let n = logits.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty labeled batch".into()));
    }
    if revs.len() != n || labels.len() != n || rev_targets.len() != n {
        return Err(Error::Shape("prediction and target lengths differ".into()));
    }
    let nf = n as f64;
    let mut bce = 0.0;
    let mut mse = 0.0;
    let mut d_logit = Vec::with_capacity(n);
    let mut d_rev = Vec::with_capacity(n);
    for i in 0..n {
        let (z, y) = (logits[i], labels[i]);
        bce -= y * log_sigmoid(z) + (1.0 - y) * log_sigmoid(-z);
        d_logit.push((sigmoid(z) - y) / nf);
        let e = revs[i] - rev_targets[i];
        mse += e * e;
        d_rev.push(alpha * 2.0 * e / nf);
    }
    bce /= nf;
    mse /= nf;
    let reg = lambda * params.sum_squares();
    Ok(FinetuneGrad { loss: bce + alpha * mse + reg, bce, mse, reg, d_logit, d_rev })
}

// --- negative sampling ----------------------------------------------------

fn kind_tag(kind: NodeKind) -> u64 {
    match kind {
        NodeKind::Txn => 0,
        NodeKind::Importer => 1,
        NodeKind::HsCode => 2,
    }
}

/// Draws `r` distinct nodes uniformly from the anchor's opposite side of the
/// graph, excluding the anchor's neighbors.
pub fn sample_negatives(g: &TransactionGraph, anchor: NodeRef, r: usize, seed: u64) -> Result<Vec<NodeRef>> {
    if !g.contains(anchor) {
        return Err(Error::UnknownNode(anchor.to_string()));
    }
    if r == 0 {
        return Ok(Vec::new());
    }
    let n_imp = g.n_importers() as u32;
    // pool positions: transactions, or importers followed by HS codes
    let (total, mut excluded): (usize, Vec<u32>) = match anchor.kind {
        NodeKind::Txn => (
            g.n_importers() + g.n_hs(),
            g.txn_keys(anchor.id).map(|v| if v.kind == NodeKind::Importer { v.id } else { n_imp + v.id }).collect(),
        ),
        _ => (g.n_txn(), g.virtual_members(anchor).to_vec()),
    };
    excluded.sort_unstable();
    let available = total - excluded.len();
    if available < r {
        return Err(Error::PoolExhausted { needed: r, available });
    }
    let to_node = |pos: u32| match anchor.kind {
        NodeKind::Txn if pos < n_imp => NodeRef::importer(pos),
        NodeKind::Txn => NodeRef::hs(pos - n_imp),
        _ => NodeRef::txn(pos),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, (kind_tag(anchor.kind) << 32) | anchor.id as u64));
    if excluded.len() * 2 <= total {
        let mut chosen: Vec<u32> = Vec::with_capacity(r);
        let mut seen: HashSet<u32> = HashSet::with_capacity(r);
        while chosen.len() < r {
            let pos = rng.random_range(0..total as u32);
            if excluded.binary_search(&pos).is_err() && seen.insert(pos) {
                chosen.push(pos);
            }
        }
        Ok(chosen.into_iter().map(to_node).collect())
    } else {
        let allowed: Vec<u32> = (0..total as u32).filter(|p| excluded.binary_search(p).is_err()).collect();
        Ok(sample(&mut rng, allowed.len(), r).into_iter().map(|i| to_node(allowed[i])).collect())
    }
}

// --- optimizer ------------------------------------------------------------

/// Adam with optional lookahead slow weights.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub step: u64,
    m: ModelParams,
    v: ModelParams,
    slow: Option<ModelParams>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, lookahead_k: usize, lookahead_alpha: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lookahead_k,
            lookahead_alpha,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            slow: (lookahead_k > 0).then(|| params.clone()),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}` at optimizer step {}", self.step + 1)));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data[i] / c1;
                let vhat = v.data[i] / c2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        if let Some(slow) = self.slow.as_mut() {
            if self.step.is_multiple_of(self.lookahead_k as u64) {
                let a = self.lookahead_alpha;
                slow.zip_mut(params, |s, f| {
                    for (x, y) in s.data.iter_mut().zip(&f.data) {
                        *x += a * (y - *x);
                    }
                });
                *params = slow.clone();
            }
        }
        if let Some(name) = params.first_non_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}` after optimizer step {}", self.step)));
        }
        Ok(())
    }
}

// --- training loops -------------------------------------------------------

/// Forward pass for one root over a freshly sampled tree.
pub fn embed(
    params: &ModelParams,
    g: &TransactionGraph,
    root: NodeRef,
    fanouts: &[usize],
    seed: u64,
    history_cutoff: Option<NaiveDate>,
) -> Result<TreeTrace> {
    let sub = sample_subgraph(g, root, fanouts, seed, history_cutoff)?;
    forward_tree(params, g, &sub)
}

/// Positive neighbors of a pretraining anchor, at most `cap`, in graph order.
fn positives(g: &TransactionGraph, anchor: NodeRef, cap: usize, seed: u64) -> Result<Vec<NodeRef>> {
    let all = g.neighbors(anchor)?;
    if all.len() <= cap {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0x9051, (kind_tag(anchor.kind) << 32) | anchor.id as u64));
    let mut idx = sample(&mut rng, all.len(), cap).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| all[i]).collect())
}

/// Mean pretraining loss over `anchors`; gradients are accumulated into `grads`
/// scaled by `weight / anchors.len()`.
pub fn pretrain_batch(
    params: &ModelParams,
    g: &TransactionGraph,
    anchors: &[NodeRef],
    cfg: &TrainConfig,
    seed: u64,
    weight: f64,
    grads: &mut ModelParams,
) -> Result<f64> {
    let scale = weight / anchors.len().max(1) as f64;
    let mut total = 0.0;
    for &u in anchors {
        let pos = positives(g, u, cfg.max_positives, seed)?;
        let neg = sample_negatives(g, u, cfg.negatives, seed)?;
        let tu = embed(params, g, u, &cfg.fanouts, seed, None)?;
        let tp: Vec<TreeTrace> = pos.iter().map(|&v| embed(params, g, v, &cfg.fanouts, seed, None)).collect::<Result<_>>()?;
        let tn: Vec<TreeTrace> = neg.iter().map(|&v| embed(params, g, v, &cfg.fanouts, seed, None)).collect::<Result<_>>()?;
        let pe: Vec<&[f64]> = tp.iter().map(TreeTrace::root_embedding).collect();
        let ne: Vec<&[f64]> = tn.iter().map(TreeTrace::root_embedding).collect();
        let lg = pretrain_loss(tu.root_embedding(), &pe, &ne)?;
        total += lg.loss;
        let sc = |v: &[f64]| v.iter().map(|x| x * scale).collect::<Vec<f64>>();
        tu.backward(params, g, &sc(&lg.d_anchor), grads);
        for (t, d) in tp.iter().zip(&lg.d_positives) {
            t.backward(params, g, &sc(d), grads);
        }
        for (t, d) in tn.iter().zip(&lg.d_negatives) {
            t.backward(params, g, &sc(d), grads);
        }
    }
    Ok(total / anchors.len().max(1) as f64)
}

/// A labeled fine-tuning root with its targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledRoot {
    pub txn: u32,
    pub label: f64,
    /// Standardized log revenue.
    pub rev_target: f64,
}

/// Dual-task loss over one batch; gradients (data terms and L2) are added to `grads`.
pub fn finetune_batch(
    params: &ModelParams,
    g: &TransactionGraph,
    batch: &[LabeledRoot],
    cfg: &TrainConfig,
    seed: u64,
    grads: &mut ModelParams,
) -> Result<FinetuneGrad> {
    let traces: Vec<TreeTrace> = batch
        .iter()
        .map(|r| embed(params, g, NodeRef::txn(r.txn), &cfg.fanouts, seed, None))
        .collect::<Result<_>>()?;
    let mut logits = Vec::with_capacity(batch.len());
    let mut revs = Vec::with_capacity(batch.len());
    for t in &traces {
        let s = t.root_embedding();
        logits.push(dot(&params.head_cls.data, s) + params.bias_cls.data[0]);
        revs.push(dot(&params.head_rev.data, s) + params.bias_rev.data[0]);
    }
    let labels: Vec<f64> = batch.iter().map(|r| r.label).collect();
    let targets: Vec<f64> = batch.iter().map(|r| r.rev_target).collect();
    let fg = finetune_loss(&logits, &revs, &labels, &targets, params, cfg.alpha, cfg.lambda_reg)?;
    for (i, t) in traces.iter().enumerate() {
        let s = t.root_embedding();
        let (gl, gr) = (fg.d_logit[i], fg.d_rev[i]);
        grads.head_cls.data.iter_mut().zip(s).for_each(|(o, &x)| *o += gl * x);
        grads.bias_cls.data[0] += gl;
        grads.head_rev.data.iter_mut().zip(s).for_each(|(o, &x)| *o += gr * x);
        grads.bias_rev.data[0] += gr;
        let ds: Vec<f64> = params.head_cls.data.iter().zip(&params.head_rev.data).map(|(c, r)| gl * c + gr * r).collect();
        t.backward(params, g, &ds, grads);
    }
    if cfg.lambda_reg > 0.0 {
        grads.add_scaled(params, 2.0 * cfg.lambda_reg);
    }
    Ok(fg)
}

/// Loss of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    /// Validation metric used for early stopping, when evaluated.
    pub valid_recall: Option<f64>,
}

pub(crate) fn stage_seed(seed: u64, stage: u64, epoch: usize) -> u64 {
    mix_seed(mix_seed(seed, stage), epoch as u64)
}

/// Pretraining epochs over every node of `g` (or a seeded sample of them).
pub fn pretrain(params: &mut ModelParams, g: &TransactionGraph, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    let mut opt = OptimizerState::new(params, cfg.lookahead_k, cfg.lookahead_alpha);
    let nodes: Vec<NodeRef> = g.all_nodes().collect();
    let mut logs = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let seed = stage_seed(cfg.seed, 1, epoch);
        let mut order = nodes.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        if let Some(cap) = cfg.pretrain_anchors_per_epoch {
            order.truncate(cap);
        }
        let mut sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = params.zeros_like();
            let loss = pretrain_batch(params, g, batch, cfg, mix_seed(seed, b as u64), 1.0, &mut grads)?;
            opt.step(params, &grads, cfg.pretrain_learning_rate.unwrap_or(cfg.learning_rate))?;
            sum += loss * batch.len() as f64;
        }
        let loss = sum / order.len().max(1) as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss diverged at epoch {epoch}")));
        }
        if let Some(prev) = logs.last().filter(|_| epoch < 5).map(|l: &EpochLog| l.loss) {
            if loss > prev {
                log::warn!("pretraining loss rose at epoch {epoch}: {prev:.5} -> {loss:.5}");
            }
        }
        log::info!("pretrain epoch {epoch}: loss {loss:.5}");
        logs.push(EpochLog { stage: "pretrain".into(), epoch, loss, valid_recall: None });
    }
    Ok(logs)
}

/// Fine-tuning with early stopping. `validate` returns the validation metric
/// for the current parameters; the best parameters are restored at the end.
pub fn finetune(
    params: &mut ModelParams,
    g: &TransactionGraph,
    roots: &[LabeledRoot],
    cfg: &TrainConfig,
    joint: Option<&TransactionGraph>,
    mut validate: impl FnMut(&ModelParams) -> Result<f64>,
) -> Result<(Vec<EpochLog>, usize)> {
    if roots.is_empty() {
        return Err(Error::EmptySplit("labeled fine-tuning roots"));
    }
    let mut opt = OptimizerState::new(params, cfg.lookahead_k, cfg.lookahead_alpha);
    let joint_nodes: Vec<NodeRef> = joint.map(|jg| jg.all_nodes().collect()).unwrap_or_default();
    let mut joint_cursor = 0usize;
    let mut logs = Vec::with_capacity(cfg.finetune_epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0usize;
    for epoch in 0..cfg.finetune_epochs {
        let seed = stage_seed(cfg.seed, 2, epoch);
        let mut order = roots.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut anchors = joint_nodes.clone();
        anchors.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x101));
        let mut sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let bseed = mix_seed(seed, b as u64);
            let mut grads = params.zeros_like();
            let fg = finetune_batch(params, g, batch, cfg, bseed, &mut grads)?;
            let mut loss = fg.loss;
            if let Some(jg) = joint {
                let n = cfg.batch_size.min(anchors.len());
                let start = joint_cursor % anchors.len().max(1);
                let pick: Vec<NodeRef> = anchors.iter().cycle().skip(start).take(n).copied().collect();
                joint_cursor += n;
                loss += pretrain_batch(params, jg, &pick, cfg, bseed ^ 0x707, 1.0, &mut grads)?;
            }
            opt.step(params, &grads, cfg.learning_rate)?;
            sum += loss * batch.len() as f64;
        }
        let loss = sum / order.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("fine-tuning loss diverged at epoch {epoch}")));
        }
        let metric = validate(params)?;
        log::info!("finetune epoch {epoch}: loss {loss:.5} valid {metric:.4}");
        logs.push(EpochLog { stage: "finetune".into(), epoch, loss, valid_recall: Some(metric) });
        if best.as_ref().is_none_or(|(m, _, _)| metric > *m) {
            best = Some((metric, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, p)) => {
            *params = p;
            e
        }
        None => 0,
    };
    Ok((logs, best_epoch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_single_positive_is_ln2() {
        let g = pretrain_loss(&[1.0, 0.0], &[&[0.0, 1.0]], &[]).unwrap();
        assert!((g.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_embeddings_give_near_zero_loss() {
        let g = pretrain_loss(&[30.0], &[&[30.0]], &[&[-30.0]]).unwrap();
        assert!(g.loss < 1e-300 || g.loss < 1e-12);
    }

    #[test]
    fn isolated_anchor_is_an_error() {
        assert!(pretrain_loss(&[1.0], &[], &[]).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert_eq!(log_sigmoid(800.0), 0.0);
    }

    #[test]
    fn chance_predictions_cost_ln2() {
        let p = ModelParams::init(Aggregator::Mean, 2, 2, 1, 0).unwrap();
        let g = finetune_loss(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], &p, 0.0, 0.0).unwrap();
        assert!((g.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(finetune_loss(&[], &[], &[], &[], &p, 0.0, 0.0).is_err());
    }

    #[test]
    fn regularizer_is_sum_of_squares() {
        let p = ModelParams::init(Aggregator::Attention, 3, 2, 2, 5).unwrap();
        let g = finetune_loss(&[0.0], &[0.0], &[0.5], &[0.0], &p, 0.0, 0.1).unwrap();
        let direct: f64 = p.flatten().iter().map(|v| v * v).sum::<f64>() * 0.1;
        assert!((g.reg - direct).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = ModelParams::init(Aggregator::Mean, 1, 1, 1, 0).unwrap();
        let before = p.flatten();
        let mut grads = p.zeros_like();
        grads.assign_flat(&vec![1.0; p.param_count()]).unwrap();
        let mut opt = OptimizerState::new(&p, 0, 0.5);
        opt.step(&mut p, &grads, 0.1).unwrap();
        // bias-corrected moments are g and g², so the step is lr * g / (|g| + eps)
        let expect = 0.1 / (1.0 + 1e-8);
        for (a, b) in before.iter().zip(p.flatten()) {
            assert!((a - b - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = ModelParams::init(Aggregator::Attention, 3, 2, 2, 0).unwrap();
        let before = p.clone();
        let mut opt = OptimizerState::new(&p, 6, 0.5);
        for _ in 0..7 {
            opt.step(&mut p, &before.zeros_like(), 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn lookahead_interpolates_every_k_steps() {
        let mut p = ModelParams::init(Aggregator::Mean, 1, 1, 1, 0).unwrap();
        let start = p.flatten();
        let mut grads = p.zeros_like();
        grads.assign_flat(&vec![1.0; p.param_count()]).unwrap();
        let mut opt = OptimizerState::new(&p, 2, 0.5);
        opt.step(&mut p, &grads, 0.1).unwrap();
        let fast1 = p.flatten();
        opt.step(&mut p, &grads, 0.1).unwrap();
        // two equal Adam steps of ~0.1, then halfway back to the start
        for ((s, f1), now) in start.iter().zip(&fast1).zip(p.flatten()) {
            let fast2 = f1 - (s - f1);
            assert!((now - (s + 0.5 * (fast2 - s))).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = ModelParams::init(Aggregator::Mean, 1, 1, 1, 0).unwrap();
        let mut grads = p.zeros_like();
        grads.bias_cls.data[0] = f64::NAN;
        let mut opt = OptimizerState::new(&p, 0, 0.5);
        assert!(matches!(opt.step(&mut p, &grads, 0.1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
        assert!(ExperimentConfig::from_toml("[train]\nbatch_size = 0\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nbogus = 1\n").is_err());
        let c = ExperimentConfig::from_toml("[train]\nvariant = \"sparse\"\nsparse_key = \"hs_code\"\n").unwrap();
        assert_eq!(c.train.graph_keys(), vec![KeyKind::HsCode]);
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("graph".parse::<Variant>().is_err());
    }
}
