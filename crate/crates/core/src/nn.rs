//! Dense layers, activations, the proposal feature attention block and SGD,
//! all with hand-written gradients.
//!
//! Layers do not cache activations themselves: `forward` returns what
//! `backward` needs, so a trained network can be shared immutably between
//! inference threads. Parameter gradients are accumulated into a
//! zero-initialized copy of the module (`zeros_like`).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default MLP width inside [`Pfam`].
pub const DEFAULT_PFAM_HIDDEN: usize = 64;

/// Read-only view of one named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

/// Ordered access to every parameter tensor of a module.
///
/// `tensors` and `tensors_mut` must list tensors in the same order.
pub trait Parameters<T> {
    fn tensors(&self) -> Vec<Tensor<'_, T>>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn zero_grad(&mut self)
    where
        T: Real,
    {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

pub(crate) fn prefix_tensors<'a, T>(prefix: &str, tensors: Vec<Tensor<'a, T>>) -> Vec<Tensor<'a, T>> {
    tensors
        .into_iter()
        .map(|t| Tensor {
            name: format!("{prefix}.{}", t.name),
            ..t
        })
        .collect()
}

/// Fully connected layer `y = W x + b` with `W` stored `out x in` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    /// Glorot-uniform weights in `+-sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| T::lit(rng.gen_range(-limit..=limit)))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim, self.out_dim)
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> usize {
        self.in_dim * self.out_dim
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &xi)| acc + w * xi))
            .collect()
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &[T], grad_out: &[T], grads: &mut Dense<T>) -> Vec<T> {
        debug_assert_eq!(grad_out.len(), self.out_dim);
        let mut grad_in = vec![T::zero(); self.in_dim];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            grads.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grads.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                grad_in[i] += g * row[i];
            }
        }
        grad_in
    }
}

impl<T: Real> Parameters<T> for Dense<T> {
    fn tensors(&self) -> Vec<Tensor<'_, T>> {
        vec![
            Tensor {
                name: "weight".into(),
                shape: vec![self.out_dim, self.in_dim],
                data: &self.weight,
            },
            Tensor {
                name: "bias".into(),
                shape: vec![self.out_dim],
                data: &self.bias,
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Deterministic Glorot-uniform layer of shape `(out_dim, in_dim)`.
pub fn init_params<T: Real>(shape: (usize, usize), seed: u64) -> Dense<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dense::init(shape.1, shape.0, &mut rng)
}

/// NaN passes through unchanged so corrupt inputs surface in the loss.
pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v < T::zero() { T::zero() } else { v }).collect()
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward<T: Real>(pre: &[T], grad_out: &[T]) -> Vec<T> {
    pre.iter()
        .zip(grad_out)
        .map(|(&p, &g)| if p > T::zero() { g } else { T::zero() })
        .collect()
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradient through the logistic function given its output `s`.
#[inline]
pub fn sigmoid_backward<T: Real>(s: T, grad_out: T) -> T {
    grad_out * s * (T::one() - s)
}

/// Two-way softmax, computed from the logit difference.
#[inline]
pub fn softmax2<T: Real>(z: [T; 2]) -> [T; 2] {
    let p1 = sigmoid(z[1] - z[0]);
    [T::one() - p1, p1]
}

/// Gradient through [`softmax2`] given its output.
#[inline]
pub fn softmax2_backward<T: Real>(p: [T; 2], grad_out: [T; 2]) -> [T; 2] {
    let dot = p[0] * grad_out[0] + p[1] * grad_out[1];
    [p[0] * (grad_out[0] - dot), p[1] * (grad_out[1] - dot)]
}

/// Feature gating `f_out = f_in * sigmoid(fc2(relu(fc1(f_in))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfam<T> {
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
}

/// Intermediate values of one [`Pfam::forward`] call.
#[derive(Debug, Clone)]
pub struct PfamCache<T> {
    pub hidden_pre: Vec<T>,
    pub hidden: Vec<T>,
    pub gate: Vec<T>,
}

impl<T: Real> Pfam<T> {
    pub fn init(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Dense::init(dim, hidden, rng),
            fc2: Dense::init(hidden, dim, rng),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Dense::zeros(dim, hidden),
            fc2: Dense::zeros(hidden, dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.fc1.in_dim, self.fc1.out_dim)
    }

    pub fn dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn macs(&self) -> usize {
        self.fc1.macs() + self.fc2.macs()
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, PfamCache<T>) {
        let hidden_pre = self.fc1.forward(x);
        let hidden = relu(&hidden_pre);
        let gate: Vec<T> = self.fc2.forward(&hidden).into_iter().map(sigmoid).collect();
        let out = x.iter().zip(&gate).map(|(&a, &s)| a * s).collect();
        (
            out,
            PfamCache {
                hidden_pre,
                hidden,
                gate,
            },
        )
    }

    /// Product rule: the direct path `g * gate` plus the gate path through
    /// the MLP, `g * x * gate * (1 - gate)`.
    pub fn backward(&self, x: &[T], cache: &PfamCache<T>, grad_out: &[T], grads: &mut Pfam<T>) -> Vec<T> {
        let grad_gate_pre: Vec<T> = grad_out
            .iter()
            .zip(x)
            .zip(&cache.gate)
            .map(|((&g, &xi), &s)| sigmoid_backward(s, g * xi))
            .collect();
        let grad_hidden = self.fc2.backward(&cache.hidden, &grad_gate_pre, &mut grads.fc2);
        let grad_hidden_pre = relu_backward(&cache.hidden_pre, &grad_hidden);
        let grad_mlp = self.fc1.backward(x, &grad_hidden_pre, &mut grads.fc1);
        grad_out
            .iter()
            .zip(&cache.gate)
            .zip(grad_mlp)
            .map(|((&g, &s), m)| g * s + m)
            .collect()
    }
}

impl<T: Real> Parameters<T> for Pfam<T> {
    fn tensors(&self) -> Vec<Tensor<'_, T>> {
        let mut v = prefix_tensors("fc1", self.fc1.tensors());
        v.extend(prefix_tensors("fc2", self.fc2.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.fc1.tensors_mut();
        v.extend(self.fc2.tensors_mut());
        v
    }
}

/// SGD hyper-parameters. Defaults: lr 0.0025, momentum 0.9, weight decay
/// 1e-4, 500 warmup iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.0025,
            momentum: 0.9,
            weight_decay: 0.0001,
            warmup_iters: 500,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Linear warmup: `lr * min(1, (iter + 1) / warmup_iters)`.
    pub fn effective_lr(&self, iter: usize) -> f64 {
        if self.warmup_iters == 0 {
            return self.lr;
        }
        self.lr * ((iter + 1) as f64 / self.warmup_iters as f64).min(1.0)
    }
}

/// One momentum step on a flat parameter slice; weight decay is folded into
/// the velocity.
pub fn sgd_step<T: Real>(params: &mut [T], grads: &[T], velocity: &mut [T], cfg: &SgdConfig, iter: usize) {
    let lr = T::lit(cfg.effective_lr(iter));
    let mom = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mom * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

/// Momentum state for a whole module.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn step<M: Parameters<T>>(&mut self, params: &mut M, grads: &M, iter: usize) {
        let grads = grads.tensors();
        let mut params = params.tensors_mut();
        assert_eq!(params.len(), grads.len(), "parameter/gradient layout mismatch");
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(&grads).zip(&mut self.velocity) {
            sgd_step(p, g.data, v, &self.config, iter);
        }
    }
}
