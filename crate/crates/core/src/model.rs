//! Dense embedding network, SGD with momentum, and checkpoints.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassifierHead;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in × out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedNet {
    pub layers: Vec<Dense>,
}

/// Layer inputs retained by [`EmbedNet::forward`]; `acts[k]` feeds layer `k`
/// and the last entry is the embedding.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    acts: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl EmbedNet {
    /// ReLU on every hidden layer, identity on the output. Weights are
    /// uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid network dims {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-bound..bound)),
                    bias: Array1::zeros(w[1]),
                    activation: if k == last { Activation::Identity } else { Activation::Relu },
                }
            })
            .collect();
        Ok(EmbedNet { layers })
    }

    /// Single linear layer computing the identity map.
    pub fn identity(dim: usize) -> Self {
        EmbedNet {
            layers: vec![Dense {
                weight: Array2::eye(dim),
                bias: Array1::zeros(dim),
                activation: Activation::Identity,
            }],
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weight.nrows()];
        dims.extend(self.layers.iter().map(|l| l.weight.ncols()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(batch.to_owned());
        for layer in &self.layers {
            let mut out = acts.last().expect("input pushed").dot(&layer.weight);
            out += &layer.bias;
            if layer.activation == Activation::Relu {
                out.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(out);
        }
        let emb = acts.last().expect("at least one layer").clone();
        if emb.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("non-finite embedding".into()));
        }
        Ok((emb, ForwardCache { acts }))
    }

    /// Embeddings only.
    pub fn embed(&self, batch: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.forward(batch).map(|(e, _)| e)
    }

    /// Parameter gradients for every layer, in order.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> Vec<DenseGrads> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_out.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                // subgradient 0 at exactly 0
                upstream.zip_mut_with(&cache.acts[k + 1], |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let input = &cache.acts[k];
            grads.push(DenseGrads {
                weight: input.t().dot(&upstream),
                bias: upstream.sum_axis(Axis(0)),
            });
            if k > 0 {
                upstream = upstream.dot(&layer.weight.t());
            }
        }
        grads.reverse();
        grads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Milestone {
    pub iter: usize,
    pub divisor: f64,
}

/// Defaults are the desk-scale schedule: 20,000 iterations with the rate
/// divided by 10 at 8,000 and 16,000.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<Milestone>,
    pub total_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-5,
            lr_milestones: vec![
                Milestone { iter: 8_000, divisor: 10.0 },
                Milestone { iter: 16_000, divisor: 10.0 },
            ],
            total_iters: 20_000,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(format!("optimizer: {what}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(m) = self.lr_milestones.iter().find(|m| !(m.divisor > 0.0)) {
            return bad(format!("milestone divisor {} must be positive", m.divisor));
        }
        Ok(())
    }

    /// Learning rate after every milestone at or before `iter` has applied.
    pub fn lr_at(&self, iter: usize) -> f64 {
        self.lr_milestones
            .iter()
            .filter(|m| iter >= m.iter)
            .fold(self.lr, |lr, m| lr / m.divisor)
    }
}

/// `v <- momentum*v + grad + wd*param; param <- param - lr*v`.
pub fn sgd_update(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, wd: f64) {
    debug_assert!(param.len() == grad.len() && grad.len() == velocity.len());
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

/// Embedding network plus classifier head, trained jointly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedModel {
    pub net: EmbedNet,
    pub head: ClassifierHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<DenseGrads>,
    pub anchors: Array2<f64>,
}

/// Momentum buffers, one per parameter tensor in model order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn for_model(model: &EmbedModel) -> Self {
        let mut velocity: Vec<Vec<f64>> = model
            .net
            .layers
            .iter()
            .flat_map(|l| [vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]])
            .collect();
        velocity.push(vec![0.0; model.head.anchors.len()]);
        SgdState { velocity }
    }
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

impl EmbedModel {
    /// One optimizer step at `iter`; anchors are renormalized afterwards.
    pub fn sgd_step(&mut self, grads: &ModelGrads, state: &mut SgdState, cfg: &SgdConfig, iter: usize) {
        let lr = cfg.lr_at(iter);
        let (mu, wd) = (cfg.momentum, cfg.weight_decay);
        let mut slot = 0;
        for (layer, g) in self.net.layers.iter_mut().zip(&grads.layers) {
            sgd_update(slice_mut(&mut layer.weight), slice(&g.weight), &mut state.velocity[slot], lr, mu, wd);
            sgd_update(slice_mut(&mut layer.bias), slice(&g.bias), &mut state.velocity[slot + 1], lr, mu, wd);
            slot += 2;
        }
        sgd_update(
            slice_mut(&mut self.head.anchors),
            slice(&grads.anchors),
            &mut state.velocity[slot],
            lr,
            mu,
            wd,
        );
        self.head.renormalize();
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dims: Vec<usize>,
    pub iteration: usize,
    pub model: EmbedModel,
    pub optimizer: SgdState,
}

impl Checkpoint {
    pub fn new(model: EmbedModel, optimizer: SgdState, iteration: usize) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            dims: model.net.dims(),
            iteration,
            model,
            optimizer,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.dims != ck.model.net.dims() {
            return Err(Error::InvalidInput("checkpoint dims disagree with parameters".into()));
        }
        Ok(ck)
    }
}
