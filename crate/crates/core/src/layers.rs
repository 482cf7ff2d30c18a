//! Trainable layers: convolution, transposed convolution and fully connected.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::{Error, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Walks named parameter tensors in a fixed order. Optimizer state,
/// gradient collection and checkpoints all rely on this order being stable.
pub trait Parameters<T: Element> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

/// Uniform in ±√(6/(fan_in+fan_out)), deterministic in `seed`.
pub fn glorot_uniform<T: Element>(shape: &[usize], fan_in: usize, fan_out: usize, seed: u64) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::Config(format!("layer with shape {shape:?} has zero fan-in")));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound))))
}

/// How a layer's tensors enter the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

fn bind<'a, T: Element>(tape: &mut Tape<'a, T>, t: &'a Tensor<T>, how: Binding) -> Var {
    match how {
        Binding::Trainable => tape.param(t),
        Binding::Frozen => tape.constant_ref(t),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    /// `out_c × in_c × kh × kw`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Element> Conv2d<T> {
    pub fn init(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize, seed: u64) -> Result<Self> {
        let area = kernel * kernel;
        Ok(Self {
            weight: glorot_uniform(&[out_c, in_c, kernel, kernel], in_c * area, out_c * area, seed)?,
            bias: Tensor::zeros(&[out_c]),
            stride,
            pad,
        })
    }

    /// Stride 1 with `(k-1)/2` padding, so odd kernels keep the spatial size.
    pub fn same(in_c: usize, out_c: usize, kernel: usize, seed: u64) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("same-padded convolution needs an odd kernel, got {kernel}")));
        }
        Self::init(in_c, out_c, kernel, 1, (kernel - 1) / 2, seed)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var, how: Binding) -> Result<Var, TensorError> {
        let w = bind(tape, &self.weight, how);
        let b = bind(tape, &self.bias, how);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

impl<T: Element> Parameters<T> for Conv2d<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<T>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d<T> {
    /// `in_c × out_c × kh × kw`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Element> ConvTranspose2d<T> {
    pub fn init(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize, seed: u64) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("transposed convolution stride must be positive".into()));
        }
        let area = kernel * kernel;
        Ok(Self {
            weight: glorot_uniform(&[in_c, out_c, kernel, kernel], in_c * area, out_c * area, seed)?,
            bias: Tensor::zeros(&[out_c]),
            stride,
            pad,
        })
    }

    /// Exact ×`factor` upsampling: kernel `2·factor`, padding `factor/2`.
    pub fn upsampling(in_c: usize, out_c: usize, factor: usize, seed: u64) -> Result<Self> {
        if factor < 2 || factor % 2 != 0 {
            return Err(Error::Config(format!("upsampling factor must be even and ≥ 2, got {factor}")));
        }
        Self::init(in_c, out_c, 2 * factor, factor, factor / 2, seed)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var, how: Binding) -> Result<Var, TensorError> {
        let w = bind(tape, &self.weight, how);
        let b = bind(tape, &self.bias, how);
        tape.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

impl<T: Element> Parameters<T> for ConvTranspose2d<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<T>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `out × in`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    pub fn init(in_n: usize, out_n: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            weight: glorot_uniform(&[out_n, in_n], in_n, out_n, seed)?,
            bias: Tensor::zeros(&[out_n]),
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Zeroes weights and bias, making the layer output identically zero.
    pub fn zero(&mut self) {
        self.weight.data_mut().fill(T::ZERO);
        self.bias.data_mut().fill(T::ZERO);
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var, how: Binding) -> Result<Var, TensorError> {
        let w = bind(tape, &self.weight, how);
        let b = bind(tape, &self.bias, how);
        tape.linear(x, w, b)
    }
}

impl<T: Element> Parameters<T> for Linear<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<T>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T: Element, P: Parameters<T>> Parameters<T> for Vec<P> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor<T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&format!("{prefix}{i}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&format!("{prefix}{i}"), f);
        }
    }
}
