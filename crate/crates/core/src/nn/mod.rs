//! Building blocks of the segmentation network.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; a forward pass runs inside
//! a [`Ctx`] that lazily places each parameter on the tape the first time it
//! is used, so a backward pass yields gradients for exactly the parameters
//! the forward touched.

mod decoder;
mod layers;
mod mobilevit;
mod mv2;
mod spec;
mod transformer;

pub use decoder::{DecoderAblation, DecoderBlock};
pub use layers::{BatchNorm2d, Conv2d, ConvBnAct, ConvTranspose2d, LayerNorm, Linear};
pub use mobilevit::MobileVitBlock;
pub use mv2::{Mv2Block, Stem};
pub use spec::{DecoderBlockSpec, MobileVitSpec, Mv2Spec, StemSpec, StemStage};
pub use transformer::{MultiHeadAttention, TransformerLayer};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Grads, Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether weight decay applies (conv and linear weights only).
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Named trainable parameters plus non-trainable buffers, in construction order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    /// Appends a parameter outside any layer (optimizer tests, custom heads).
    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    decay: p.decay,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    tensor: b.tensor.cast(),
                })
                .collect(),
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Copies gradients for every bound parameter into its tensor's grad slot.
    pub fn absorb_grads(&mut self, bindings: &[(ParamId, Var)], grads: &Grads) {
        for &(id, var) in bindings {
            let g = grads.wrt::<T>(var);
            self.params[id.0].tensor.grad = Some(g.into_data());
        }
    }

    /// Folds batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats], momentum: f64) {
        for s in stats {
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            let m = self.buffers[s.running_mean.0].tensor.data_mut();
            for (r, &b) in m.iter_mut().zip(&s.mean) {
                *r = T::from_f64((1.0 - momentum) * r.to_f64() + momentum * b);
            }
            let v = self.buffers[s.running_var.0].tensor.data_mut();
            for (r, &b) in v.iter_mut().zip(&s.var) {
                *r = T::from_f64((1.0 - momentum) * r.to_f64() + momentum * b * unbias);
            }
        }
    }
}

/// Batch statistics observed by one training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    /// Values per channel (`N·H·W`).
    pub count: usize,
}

/// Forward-pass context: the tape, read-only parameters and mode flags.
pub struct Ctx<'a, T: Scalar = f32> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    training: bool,
    bound: Vec<Option<Var>>,
    stats: Vec<BatchStats>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, training: bool) -> Self {
        Self {
            tape,
            store,
            training,
            bound: vec![None; store.params.len()],
            stats: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Tape variable for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.store.params[id.0].tensor.clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Routes a parameter to an existing tape value (e.g. a gradcheck input).
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn buffer_f64(&self, id: BufferId) -> Vec<f64> {
        self.store.buffers[id.0].tensor.to_f64_vec()
    }

    pub(crate) fn record_stats(&mut self, s: BatchStats) {
        self.stats.push(s);
    }

    /// Parameters used so far, in first-use order.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        let mut b: Vec<(ParamId, Var)> = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        b.sort_by_key(|&(_, v)| v);
        b
    }

    pub fn take_batch_stats(&mut self) -> Vec<BatchStats> {
        std::mem::take(&mut self.stats)
    }
}

/// Registers parameters under a dotted name prefix with deterministic init.
pub struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = self.path(name);
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn push(&mut self, name: &str, tensor: Tensor<T>, decay: bool) -> ParamId {
        let name = self.path(name);
        debug_assert!(
            self.store.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.store.params.push(Param {
            name,
            tensor,
            decay,
        });
        ParamId(self.store.params.len() - 1)
    }

    /// Kaiming-uniform weights: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn kaiming_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(self.rng.random_range(-bound..bound)))
            .collect();
        self.push(name, Tensor::from_parts(shape.to_vec(), data), true)
    }

    /// Normal(0, σ) truncated to ±2σ by resampling.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let rng = &mut *self.rng;
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * std {
                    break T::from_f64(v);
                }
            })
            .collect();
        self.push(name, Tensor::from_parts(shape.to_vec(), data), true)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.push(name, Tensor::zeros(shape), false)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.push(name, Tensor::ones(shape), false)
    }

    pub fn buffer(&mut self, name: &str, tensor: Tensor<T>) -> BufferId {
        let name = self.path(name);
        self.store.buffers.push(Buffer { name, tensor });
        BufferId(self.store.buffers.len() - 1)
    }
}
