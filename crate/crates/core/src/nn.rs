//! Minimal dense-layer toolkit with explicit backward passes.
//!
//! Layers keep their weights as plain `ndarray` matrices. A gradient buffer
//! for a network is simply another instance of the same network type built
//! with [`ParamVisit::zeros_like`], so optimizers can walk parameters and
//! gradients in lockstep.

use ndarray::{Array1, Array2, Axis, Zip};
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::seed::Rng;

/// Walks every parameter tensor in a fixed order.
pub trait ParamVisit {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut(&mut |_, p| p.fill(0.0));
        z
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.len());
        n
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, p| out.extend_from_slice(p));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |_, p| {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        });
    }

    /// SHA-256 over parameter names and little-endian values.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |name, p| {
            h.update(name.as_bytes());
            h.update((p.len() as u64).to_le_bytes());
            for v in p {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[fan_in, fan_out]`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// Gaussian init with standard deviation `gain / sqrt(fan_in)`.
    pub fn init(fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || {
            std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        Self {
            w,
            b: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Returns the gradient with respect to `x`; accumulates weight gradients
    /// into `grads` when given.
    pub fn backward(&self, x: &Array2<f64>, g: &Array2<f64>, grads: Option<&mut Linear>) -> Array2<f64> {
        if let Some(gr) = grads {
            gr.w += &x.t().dot(g);
            gr.b += &g.sum_axis(Axis(0));
        }
        g.dot(&self.w.t())
    }

    /// Weight gradients only.
    pub fn backward_params(&self, x: &Array2<f64>, g: &Array2<f64>, grads: &mut Linear) {
        grads.w += &x.t().dot(g);
        grads.b += &g.sum_axis(Axis(0));
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.w"), self.w.as_slice().expect("contiguous"));
        f(&format!("{prefix}.b"), self.b.as_slice().expect("contiguous"));
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.w"), self.w.as_slice_mut().expect("contiguous"));
        f(&format!("{prefix}.b"), self.b.as_slice_mut().expect("contiguous"));
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v * sigmoid(v))
}

/// `g * silu'(x)`
pub fn silu_backward(x: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    Zip::from(&mut out).and(x).and(g).for_each(|o, &xv, &gv| {
        let s = sigmoid(xv);
        *o = gv * s * (1.0 + xv * (1.0 - s));
    });
    out
}

/// Sinusoidal timestep features: `[sin(t w_k), cos(t w_k)]` for `freqs`
/// geometrically spaced frequencies.
pub fn timestep_features(ts: &[usize], freqs: usize) -> Array2<f64> {
    let mut out = Array2::zeros((ts.len(), 2 * freqs));
    let log_base = (10_000f64).ln();
    for (r, &t) in ts.iter().enumerate() {
        for k in 0..freqs {
            let w = (-log_base * k as f64 / freqs as f64).exp();
            let a = t as f64 * w;
            out[[r, k]] = a.sin();
            out[[r, freqs + k]] = a.cos();
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, num_params: usize) -> Self {
        Self {
            cfg,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place from `grads`; both are flat views of equal length.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.lr * c.weight_decay * params[i];
            params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }

    /// Convenience wrapper for networks implementing [`ParamVisit`].
    pub fn step_model<M: ParamVisit>(&mut self, model: &mut M, grads: &M) {
        let mut flat = model.flat_params();
        let g = grads.flat_params();
        self.update(&mut flat, &g);
        model.load_flat(&flat);
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= k);
    }
    norm
}
