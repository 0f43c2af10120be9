//! Parameterized layers and weight initialization.

use super::Tensor;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One standard normal draw via Box-Muller; deterministic given the rng state.
pub fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normal_fill(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || sample_normal(rng) * std)
}

pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub pad: usize,
    pub stride: usize,
}

impl Conv2d {
    /// He-style init scaled by fan-in; bias starts at zero.
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, pad: usize) -> Conv2d {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Conv2d {
            w: Tensor::param(normal_fill(rng, &[cout, cin, k, k], std)),
            b: Tensor::param(ArrayD::zeros(IxDyn(&[cout]))),
            pad,
            stride: 1,
        }
    }

    /// All-zero weights and bias: the layer's output is identically zero, so
    /// a residual branch ending in it starts as an exact no-op.
    pub fn new_zeroed(cin: usize, cout: usize, k: usize, pad: usize) -> Conv2d {
        Conv2d {
            w: Tensor::param(ArrayD::zeros(IxDyn(&[cout, cin, k, k]))),
            b: Tensor::param(ArrayD::zeros(IxDyn(&[cout]))),
            pad,
            stride: 1,
        }
    }

    pub fn strided(mut self, stride: usize) -> Conv2d {
        self.stride = stride;
        self
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.w, Some(&self.b), self.pad, self.stride)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.w.clone(), self.b.clone()]
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> Linear {
        let std = (1.0 / din as f64).sqrt();
        Linear {
            w: Tensor::param(normal_fill(rng, &[din, dout], std)),
            b: Tensor::param(ArrayD::zeros(IxDyn(&[dout]))),
        }
    }

    pub fn new_zeroed(din: usize, dout: usize) -> Linear {
        Linear {
            w: Tensor::param(ArrayD::zeros(IxDyn(&[din, dout]))),
            b: Tensor::param(ArrayD::zeros(IxDyn(&[dout]))),
        }
    }

    /// Applies along the last axis of an input of any rank >= 2.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let shape = x.shape();
        let din = *shape.last().expect("linear: rank >= 1");
        let dout = self.w.shape()[1];
        let rows = x.numel() / din;
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(dout);
        x.reshape(&[rows, din])
            .matmul(&self.w)
            .reshape(&out_shape)
            .add_bias_last(&self.b)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.w.clone(), self.b.clone()]
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(c: usize, groups: usize) -> GroupNorm {
        assert!(groups >= 1 && c % groups == 0, "group_norm: groups must divide C");
        GroupNorm {
            gamma: Tensor::param(ArrayD::from_elem(IxDyn(&[c]), 1.0)),
            beta: Tensor::param(ArrayD::zeros(IxDyn(&[c]))),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.group_norm(&self.gamma, &self.beta, self.groups, self.eps)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.gamma.clone(), self.beta.clone()]
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(d: usize) -> LayerNorm {
        LayerNorm {
            gamma: Tensor::param(ArrayD::from_elem(IxDyn(&[d]), 1.0)),
            beta: Tensor::param(ArrayD::zeros(IxDyn(&[d]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.gamma.clone(), self.beta.clone()]
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn new(rng: &mut ChaCha8Rng, vocab: usize, d: usize) -> Embedding {
        Embedding { table: Tensor::param(normal_fill(rng, &[vocab, d], 0.02)) }
    }

    pub fn forward(&self, ids: &[usize]) -> Tensor {
        Tensor::embedding(&self.table, ids)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.table.clone()]
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.table"), self.table.clone()));
    }
}
