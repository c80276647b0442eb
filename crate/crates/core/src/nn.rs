//! Parameterized layers. Each layer knows its parameter names and how to
//! initialize them; the values live in a [`ParameterStore`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Bound, ParameterStore};
use crate::tensor::Tensor;

/// Uniform on `±sqrt(3·gain/fan_in)`: variance `gain/fan_in`.
pub fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = (3.0 * gain / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("init shape")
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Gain for layers followed by a ReLU.
pub const RELU_GAIN: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self { name: name.into(), in_dim, out_dim }
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng, gain: f64) -> Result<()> {
        store.insert(self.weight(), fan_in_uniform(rng, &[self.in_dim, self.out_dim], self.in_dim, gain))?;
        store.insert(self.bias(), Tensor::zeros(&[self.out_dim]))
    }

    /// `x [.., in] → [.., out]`.
    pub fn forward<'t>(&self, p: &Bound<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p.param(&self.weight())?)?.add(p.param(&self.bias())?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Transposed convolution (upsampling) when set.
    pub transpose: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { name: name.into(), in_ch, out_ch, kernel, stride, pad, transpose: false }
    }

    pub fn transposed(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { transpose: true, ..Self::new(name, in_ch, out_ch, kernel, stride, pad) }
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn weight_shape(&self) -> [usize; 4] {
        let k = self.kernel;
        if self.transpose {
            [self.in_ch, self.out_ch, k, k]
        } else {
            [self.out_ch, self.in_ch, k, k]
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng, gain: f64) -> Result<()> {
        let k2 = self.kernel * self.kernel;
        let fan_in = if self.transpose {
            (self.in_ch * k2 / (self.stride * self.stride)).max(1)
        } else {
            self.in_ch * k2
        };
        store.insert(self.weight(), fan_in_uniform(rng, &self.weight_shape(), fan_in, gain))?;
        store.insert(self.bias(), Tensor::zeros(&[self.out_ch, 1, 1]))
    }

    /// `x [B,in,H,W] → [B,out,H',W']`.
    pub fn forward<'t>(&self, p: &Bound<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let w = p.param(&self.weight())?;
        let y = if self.transpose {
            x.conv_transpose2d(w, self.stride, self.pad)?
        } else {
            x.conv2d(w, self.stride, self.pad)?
        };
        y.add(p.param(&self.bias())?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        store.insert(format!("{}.gain", self.name), Tensor::ones(&[self.dim]))?;
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.dim]))
    }

    /// Normalizes the last axis.
    pub fn forward<'t>(&self, p: &Bound<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let axis = x.shape().len() - 1;
        x.layer_norm(axis, p.param(&format!("{}.gain", self.name))?, p.param(&format!("{}.bias", self.name))?)
    }
}
