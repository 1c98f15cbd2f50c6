use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense f64 tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(|_| dist.sample(rng)).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a 2-d tensor.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// Softmax attention over the pool.
    Attention,
    /// Uniform weights over the pool.
    Mean,
    /// Uniform weights with one transform per edge kind plus a self transform.
    RelationTyped,
}

impl std::str::FromStr for Aggregator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" | "gat" => Ok(Aggregator::Attention),
            "mean" | "sage" => Ok(Aggregator::Mean),
            "relation_typed" | "rgcn" => Ok(Aggregator::RelationTyped),
            other => Err(Error::InvalidArgument(format!("unknown aggregator `{other}`"))),
        }
    }
}

/// One propagation layer. Matrices map a row vector from input to output
/// space (`out = x · M`), so they are stored `[d_in, d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Attention projection; empty unless the aggregator is `Attention`.
    pub w1: Tensor,
    /// Message transform (the self transform for `RelationTyped`).
    pub w2: Tensor,
    /// Importer-edge transform; empty unless `RelationTyped`.
    pub w2_importer: Tensor,
    /// HS-edge transform; empty unless `RelationTyped`.
    pub w2_hs: Tensor,
    /// Attention vector `[r_neighbor ; r_target]`, length `2 * d_out`.
    pub attn: Tensor,
}

impl LayerParams {
    pub fn d_in(&self) -> usize {
        self.w2.shape[0]
    }

    pub fn d_out(&self) -> usize {
        self.w2.shape[1]
    }
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub aggregator: Aggregator,
    pub leaky_slope: f64,
    pub layers: Vec<LayerParams>,
    pub head_cls: Tensor,
    pub bias_cls: Tensor,
    pub head_rev: Tensor,
    pub bias_rev: Tensor,
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

impl ModelParams {
    /// Glorot-uniform layers and heads, zero biases.
    pub fn init(aggregator: Aggregator, input_width: usize, hidden: usize, n_layers: usize, seed: u64) -> Result<Self> {
        if input_width == 0 || hidden == 0 || n_layers == 0 {
            return Err(Error::Config("input width, hidden width and layer count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let d_in = if k == 0 { input_width } else { hidden };
            let shape = [d_in, hidden];
            let (w1, attn) = if aggregator == Aggregator::Attention {
                (Tensor::glorot(&shape, d_in, hidden, &mut rng), Tensor::glorot(&[2 * hidden], 2 * hidden, 1, &mut rng))
            } else {
                (Tensor::zeros(&[0, hidden]), Tensor::zeros(&[0]))
            };
            let w2 = Tensor::glorot(&shape, d_in, hidden, &mut rng);
            let (w2_importer, w2_hs) = if aggregator == Aggregator::RelationTyped {
                (Tensor::glorot(&shape, d_in, hidden, &mut rng), Tensor::glorot(&shape, d_in, hidden, &mut rng))
            } else {
                (Tensor::zeros(&[0, hidden]), Tensor::zeros(&[0, hidden]))
            };
            layers.push(LayerParams { w1, w2, w2_importer, w2_hs, attn });
        }
        let mut params = Self {
            aggregator,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            layers,
            head_cls: Tensor::zeros(&[hidden]),
            bias_cls: Tensor::zeros(&[1]),
            head_rev: Tensor::zeros(&[hidden]),
            bias_rev: Tensor::zeros(&[1]),
        };
        params.reset_heads(seed ^ 0x5EED_4EAD);
        Ok(params)
    }

    /// Fresh Glorot head weights and zero biases.
    pub fn reset_heads(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.hidden();
        self.head_cls = Tensor::glorot(&[d], d, 1, &mut rng);
        self.head_rev = Tensor::glorot(&[d], d, 1, &mut rng);
        self.bias_cls.fill(0.0);
        self.bias_rev.fill(0.0);
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, LayerParams::d_out)
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, LayerParams::d_in)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|_, t| t.fill(0.0));
        z
    }

    /// Tensors in a fixed order: layers first, then heads.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::with_capacity(5 * self.layers.len() + 4);
        for (k, l) in self.layers.iter().enumerate() {
            v.push((format!("layer{k}.w1"), &l.w1));
            v.push((format!("layer{k}.w2"), &l.w2));
            v.push((format!("layer{k}.w2_importer"), &l.w2_importer));
            v.push((format!("layer{k}.w2_hs"), &l.w2_hs));
            v.push((format!("layer{k}.attn"), &l.attn));
        }
        v.push(("head_cls.weight".into(), &self.head_cls));
        v.push(("head_cls.bias".into(), &self.bias_cls));
        v.push(("head_rev.weight".into(), &self.head_rev));
        v.push(("head_rev.bias".into(), &self.bias_rev));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::with_capacity(5 * self.layers.len() + 4);
        for (k, l) in self.layers.iter_mut().enumerate() {
            v.push((format!("layer{k}.w1"), &mut l.w1));
            v.push((format!("layer{k}.w2"), &mut l.w2));
            v.push((format!("layer{k}.w2_importer"), &mut l.w2_importer));
            v.push((format!("layer{k}.w2_hs"), &mut l.w2_hs));
            v.push((format!("layer{k}.attn"), &mut l.attn));
        }
        v.push(("head_cls.weight".into(), &mut self.head_cls));
        v.push(("head_cls.bias".into(), &mut self.bias_cls));
        v.push(("head_rev.weight".into(), &mut self.head_rev));
        v.push(("head_rev.bias".into(), &mut self.bias_rev));
        v
    }

    /// Number of leading tensors in `tensors()` that belong to propagation
    /// layers; the rest are heads.
    pub fn layer_tensor_count(&self) -> usize {
        5 * self.layers.len()
    }

    pub fn for_each_tensor(&self, mut f: impl FnMut(String, &Tensor)) {
        for (name, t) in self.tensors() {
            f(name, t);
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        for (name, t) in self.tensors_mut() {
            f(name, t);
        }
    }

    /// Pairs matching tensors of `self` and `other` (same architecture).
    pub fn zip_mut(&mut self, other: &ModelParams, mut f: impl FnMut(&mut Tensor, &Tensor)) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            f(a, b);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    pub fn sum_squares(&self) -> f64 {
        let mut s = 0.0;
        self.for_each_tensor(|_, t| s += t.sum_squares());
        s
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        self.for_each_tensor(|_, t| v.extend_from_slice(&t.data));
        v
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!("{} values for {} parameters", flat.len(), self.param_count())));
        }
        let mut at = 0;
        self.for_each_tensor_mut(|_, t| {
            let n = t.len();
            t.data.copy_from_slice(&flat[at..at + n]);
            at += n;
        });
        Ok(())
    }

    /// Adds `scale * other` tensor-wise.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        self.zip_mut(other, |a, b| {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        });
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_tensor(|_, t| ok &= t.data.iter().all(|v| v.is_finite()));
        ok
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut found = None;
        self.for_each_tensor(|name, t| {
            if found.is_none() && t.data.iter().any(|v| !v.is_finite()) {
                found = Some(name);
            }
        });
        found
    }

    /// Zeroes the head tensors (used to freeze heads during pretraining).
    pub fn clear_heads(&mut self) {
        self.head_cls.fill(0.0);
        self.bias_cls.fill(0.0);
        self.head_rev.fill(0.0);
        self.bias_rev.fill(0.0);
    }
}
