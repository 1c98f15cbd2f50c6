//! Gradient-boosted decision trees on logistic loss with exact greedy
//! second-order split search, used both as a baseline scorer and as the
//! cross-feature extractor: every root-to-leaf path of every tree becomes one
//! coordinate of a multi-hot vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::NumericMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbdtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 regularization on leaf values.
    pub lambda: f64,
    pub min_child_weight: f64,
    pub min_split_gain: f64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 4,
            learning_rate: 0.3,
            lambda: 1.0,
            min_child_weight: 1.0,
            min_split_gain: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64, leaf_index: usize },
}

/// Node array with the root at position 0. Leaf indices are global across the
/// owning ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
    pub n_leaves: usize,
}

impl DecisionTree {
    /// A root-only tree.
    pub fn stub(value: f64, leaf_index: usize) -> Self {
        Self { nodes: vec![TreeNode::Leaf { value, leaf_index }], n_leaves: 1 }
    }

    /// Routes a row to its leaf: `value < threshold` goes left, `>=` goes
    /// right, NaN goes left.
    pub fn route(&self, row: &[f64]) -> (usize, f64) {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                TreeNode::Leaf { value, leaf_index } => return (leaf_index, value),
                TreeNode::Split { feature, threshold, left, right } => {
                    let v = row[feature];
                    at = if v.is_nan() || v < threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, at: usize) -> usize {
            match t.nodes[at] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    pub fn min_leaf_index(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Leaf { leaf_index, .. } => Some(*leaf_index),
                _ => None,
            })
            .min()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeEnsemble {
    pub trees: Vec<DecisionTree>,
    pub learning_rate: f64,
    /// Initial margin (log-odds).
    pub base_score: f64,
    pub n_features: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl TreeEnsemble {
    pub fn empty(n_features: usize, base_score: f64, learning_rate: f64) -> Self {
        Self { trees: Vec::new(), learning_rate, base_score, n_features }
    }

    /// Total number of leaves `W`.
    pub fn total_leaves(&self) -> usize {
        self.trees.iter().map(|t| t.n_leaves).sum()
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Appends a tree whose leaves are numbered locally from 0; they are
    /// shifted past all existing leaves.
    pub fn push_tree(&mut self, mut tree: DecisionTree) {
        let offset = self.total_leaves();
        for n in &mut tree.nodes {
            if let TreeNode::Leaf { leaf_index, .. } = n {
                *leaf_index += offset;
            }
        }
        self.trees.push(tree);
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.n_features {
            return Err(Error::Shape(format!(
                "row has {} features, ensemble expects {}",
                row.len(),
                self.n_features
            )));
        }
        Ok(())
    }

    pub fn leaf_indices(&self, row: &[f64]) -> Result<Vec<usize>> {
        self.check_row(row)?;
        Ok(self.trees.iter().map(|t| t.route(row).0).collect())
    }

    pub fn margin(&self, row: &[f64]) -> Result<f64> {
        self.check_row(row)?;
        let sum: f64 = self.trees.iter().map(|t| t.route(row).1).sum();
        Ok(self.base_score + self.learning_rate * sum)
    }

    /// Fraud probability of a row.
    pub fn score(&self, row: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.margin(row)?))
    }

    pub fn encode_multihot(&self, m: &NumericMatrix) -> Result<CrossFeatureMatrix> {
        if m.cols() != self.n_features && m.rows() > 0 {
            return Err(Error::Shape(format!(
                "matrix has {} features, ensemble expects {}",
                m.cols(),
                self.n_features
            )));
        }
        let t = self.n_trees();
        let mut indices = Vec::with_capacity(m.rows() * t);
        for i in 0..m.rows() {
            let row = m.row(i);
            indices.extend(self.trees.iter().map(|tree| tree.route(row).0 as u32));
        }
        Ok(CrossFeatureMatrix { width: self.total_leaves(), per_row: t, indices })
    }
}

/// Sparse multi-hot rows: each row stores exactly one active leaf per tree.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFeatureMatrix {
    width: usize,
    per_row: usize,
    indices: Vec<u32>,
}

impl CrossFeatureMatrix {
    pub fn from_parts(width: usize, per_row: usize, indices: Vec<u32>) -> Result<Self> {
        if per_row == 0 && !indices.is_empty() || per_row > 0 && !indices.len().is_multiple_of(per_row) {
            return Err(Error::Shape("index count not a multiple of per-row count".into()));
        }
        if indices.iter().any(|&i| i as usize >= width) {
            return Err(Error::Shape("leaf index out of range".into()));
        }
        Ok(Self { width, per_row, indices })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn active_per_row(&self) -> usize {
        self.per_row
    }

    pub fn rows(&self) -> usize {
        self.indices.len().checked_div(self.per_row).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.per_row..(i + 1) * self.per_row]
    }

    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.width];
        for &j in self.row(i) {
            v[j as usize] += 1.0;
        }
        v
    }

    pub fn heap_bytes(&self) -> usize {
        self.indices.capacity() * std::mem::size_of::<u32>()
    }
}

/// Second-order structure score `G^2 / (H + lambda)`.
fn structure_score(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64) -> f64 {
    0.5 * (structure_score(gl, hl, lambda) + structure_score(gr, hr, lambda)
        - structure_score(gl + gr, hl + hr, lambda))
}

pub fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    -g / (h + lambda)
}

/// Whether `gain` beats `best` by more than floating-point noise. Candidates
/// are visited by ascending feature then threshold, so near-equal gains keep
/// the earliest candidate.
pub fn improves(gain: f64, best: f64) -> bool {
    gain > best + 1e-12 * best.abs().max(1.0)
}

#[derive(Debug, Clone, Copy)]
struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

struct Builder<'a> {
    x: &'a NumericMatrix,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbdtParams,
    nodes: Vec<TreeNode>,
    n_leaves: usize,
}

impl Builder<'_> {
    fn best_split(&self, rows: &[usize], g_sum: f64, h_sum: f64) -> Option<BestSplit> {
        let lambda = self.params.lambda;
        let mut best: Option<BestSplit> = None;
        let mut scratch: Vec<(f64, f64, f64)> = Vec::with_capacity(rows.len());
        for f in 0..self.x.cols() {
            scratch.clear();
            let (mut gl, mut hl) = (0.0, 0.0);
            for &i in rows {
                let v = self.x.get(i, f);
                if v.is_nan() {
                    gl += self.grad[i];
                    hl += self.hess[i];
                } else {
                    scratch.push((v, self.grad[i], self.hess[i]));
                }
            }
            scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
            for k in 0..scratch.len().saturating_sub(1) {
                gl += scratch[k].1;
                hl += scratch[k].2;
                let (lo, hi) = (scratch[k].0, scratch[k + 1].0);
                if lo == hi {
                    continue;
                }
                let (gr, hr) = (g_sum - gl, h_sum - hl);
                if hl < self.params.min_child_weight || hr < self.params.min_child_weight {
                    continue;
                }
                let gain = split_gain(gl, hl, gr, hr, lambda);
                if gain <= self.params.min_split_gain {
                    continue;
                }
                if best.is_none_or(|b| improves(gain, b.gain)) {
                    best = Some(BestSplit { feature: f, threshold: midpoint(lo, hi), gain });
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let g_sum: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h_sum: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        let split = if depth < self.params.max_depth { self.best_split(&rows, g_sum, h_sum) } else { None };
        let at = self.nodes.len();
        match split {
            None => {
                self.nodes.push(TreeNode::Leaf {
                    value: leaf_weight(g_sum, h_sum, self.params.lambda),
                    leaf_index: self.n_leaves,
                });
                self.n_leaves += 1;
            }
            Some(s) => {
                self.nodes.push(TreeNode::Split { feature: s.feature, threshold: s.threshold, left: 0, right: 0 });
                let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| {
                    let v = self.x.get(i, s.feature);
                    v.is_nan() || v < s.threshold
                });
                let left = self.grow(left_rows, depth + 1);
                let right = self.grow(right_rows, depth + 1);
                self.nodes[at] = TreeNode::Split { feature: s.feature, threshold: s.threshold, left, right };
            }
        }
        at
    }
}

/// Threshold strictly above `lo` and at most `hi`.
pub fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid > lo {
        mid
    } else {
        hi
    }
}

/// Logistic-loss gradient and hessian at margin `m` for label `y`.
pub fn logistic_grad_hess(m: f64, y: f64) -> (f64, f64) {
    let p = sigmoid(m);
    (p - y, p * (1.0 - p))
}

/// Base margin: log-odds of the positive rate.
pub fn base_margin(labels: &[f64]) -> f64 {
    let p = labels.iter().sum::<f64>() / labels.len() as f64;
    (p / (1.0 - p)).ln()
}

/// Fits one tree to fixed gradients/hessians. Leaves are numbered from 0.
pub fn fit_tree(x: &NumericMatrix, grad: &[f64], hess: &[f64], params: &GbdtParams) -> DecisionTree {
    let mut b = Builder { x, grad, hess, params, nodes: Vec::new(), n_leaves: 0 };
    b.grow((0..x.rows()).collect(), 0);
    DecisionTree { nodes: b.nodes, n_leaves: b.n_leaves }
}

pub fn fit_gbdt(x: &NumericMatrix, labels: &[f64], params: &GbdtParams) -> Result<TreeEnsemble> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::InvalidArgument("empty feature matrix".into()));
    }
    if labels.len() != x.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    if x.rows() < 2 {
        return Err(Error::InvalidArgument("need at least 2 rows".into()));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::InvalidArgument("labels contain a single class".into()));
    }
    if params.learning_rate <= 0.0 || params.lambda < 0.0 {
        return Err(Error::Config("learning_rate must be > 0 and lambda >= 0".into()));
    }
    let mut ens = TreeEnsemble::empty(x.cols(), base_margin(labels), params.learning_rate);
    let mut margins = vec![ens.base_score; x.rows()];
    let mut grad = vec![0.0; x.rows()];
    let mut hess = vec![0.0; x.rows()];
    for _ in 0..params.n_trees {
        for i in 0..x.rows() {
            (grad[i], hess[i]) = logistic_grad_hess(margins[i], labels[i]);
        }
        let tree = fit_tree(x, &grad, &hess, params);
        for (i, m) in margins.iter_mut().enumerate() {
            *m += params.learning_rate * tree.route(x.row(i)).1;
        }
        ens.push_tree(tree);
    }
    Ok(ens)
}

// --- serialization ---------------------------------------------------------

pub const ENSEMBLE_FORMAT: &str = "fraudgraph-gbdt";
pub const ENSEMBLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum NodeDoc {
    Split { feature: usize, threshold: String, left: usize, right: usize },
    Leaf { value: String, leaf_index: usize },
}

#[derive(Serialize, Deserialize)]
struct TreeDoc {
    n_leaves: usize,
    nodes: Vec<NodeDoc>,
}

#[derive(Serialize, Deserialize)]
struct EnsembleDoc {
    format: String,
    version: u32,
    n_features: usize,
    learning_rate: String,
    base_score: String,
    total_leaves: usize,
    trees: Vec<TreeDoc>,
}

fn parse_exact(s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Checkpoint(format!("bad decimal `{s}`")))
}

impl TreeEnsemble {
    /// Versioned JSON with every float written as a round-trip decimal string.
    pub fn to_json(&self) -> Result<String> {
        let doc = EnsembleDoc {
            format: ENSEMBLE_FORMAT.into(),
            version: ENSEMBLE_VERSION,
            n_features: self.n_features,
            learning_rate: self.learning_rate.to_string(),
            base_score: self.base_score.to_string(),
            total_leaves: self.total_leaves(),
            trees: self
                .trees
                .iter()
                .map(|t| TreeDoc {
                    n_leaves: t.n_leaves,
                    nodes: t
                        .nodes
                        .iter()
                        .map(|n| match *n {
                            TreeNode::Split { feature, threshold, left, right } => {
                                NodeDoc::Split { feature, threshold: threshold.to_string(), left, right }
                            }
                            TreeNode::Leaf { value, leaf_index } => {
                                NodeDoc::Leaf { value: value.to_string(), leaf_index }
                            }
                        })
                        .collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: EnsembleDoc =
            serde_json::from_str(s).map_err(|e| Error::Checkpoint(format!("ensemble: {e}")))?;
        if doc.format != ENSEMBLE_FORMAT || doc.version != ENSEMBLE_VERSION {
            return Err(Error::Checkpoint(format!("unsupported ensemble {} v{}", doc.format, doc.version)));
        }
        let mut trees = Vec::with_capacity(doc.trees.len());
        for t in doc.trees {
            let n = t.nodes.len();
            let mut nodes = Vec::with_capacity(n);
            for node in t.nodes {
                nodes.push(match node {
                    NodeDoc::Split { feature, threshold, left, right } => {
                        if feature >= doc.n_features || left >= n || right >= n {
                            return Err(Error::Checkpoint("split references out of range".into()));
                        }
                        TreeNode::Split { feature, threshold: parse_exact(&threshold)?, left, right }
                    }
                    NodeDoc::Leaf { value, leaf_index } => {
                        if leaf_index >= doc.total_leaves {
                            return Err(Error::Checkpoint("leaf index out of range".into()));
                        }
                        TreeNode::Leaf { value: parse_exact(&value)?, leaf_index }
                    }
                });
            }
            if nodes.is_empty() {
                return Err(Error::Checkpoint("empty tree".into()));
            }
            trees.push(DecisionTree { nodes, n_leaves: t.n_leaves });
        }
        let ens = TreeEnsemble {
            trees,
            learning_rate: parse_exact(&doc.learning_rate)?,
            base_score: parse_exact(&doc.base_score)?,
            n_features: doc.n_features,
        };
        if ens.total_leaves() != doc.total_leaves {
            return Err(Error::Checkpoint("leaf count mismatch".into()));
        }
        Ok(ens)
    }
}
