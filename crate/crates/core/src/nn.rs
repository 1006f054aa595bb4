//! Parameter containers and the basic layers shared by every model part.

use std::hash::{DefaultHasher, Hash, Hasher};

use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NamedParams<T> = Vec<(String, Tensor<T>)>;

/// Anything that owns parameter leaves.
///
/// Frozen weights and running-statistics buffers are reported too, as
/// leaves that do not require a gradient, so checkpoints see everything.
pub trait Module<T: Scalar> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>);

    fn named_params(&self) -> NamedParams<T> {
        let mut out = Vec::new();
        self.visit_params("", &mut out);
        out
    }

    fn trainable_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, p)| p.requires_grad())
            .map(|(_, p)| p.numel())
            .sum()
    }

    fn zero_grad(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Order-sensitive hash of parameter names and value bits.
pub fn fingerprint<T: Scalar>(params: &NamedParams<T>) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, p) in params {
        name.hash(&mut h);
        p.shape().hash(&mut h);
        for v in p.data().iter() {
            v.as_f64().to_bits().hash(&mut h);
        }
    }
    h.finish()
}

pub(crate) fn init_normal<T: Scalar>(rng: &mut Rng, shape: &[usize], std: f64, trainable: bool) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::leaf(rng.normal(n, 0.0, std), shape, trainable).expect("init shape")
}

pub(crate) fn init_const<T: Scalar>(shape: &[usize], value: f64, trainable: bool) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::leaf(vec![T::lit(value); n], shape, trainable).expect("init shape")
}

/// `y = x·W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(rng: &mut Rng, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            weight: init_normal(rng, &[in_dim, out_dim], 0.02, true),
            bias: bias.then(|| init_const(&[out_dim], 0.0, true)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// LeCun-normal init (`std = 1/sqrt(fan_in)`), zero bias.
    pub fn new(rng: &mut Rng, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let std = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Self::with_std(rng, in_ch, out_ch, kernel, stride, padding, std, true)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std(
        rng: &mut Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: f64,
        trainable: bool,
    ) -> Self {
        Self {
            weight: init_normal(rng, &[out_ch, in_ch, kernel, kernel], std, trainable),
            bias: Some(init_const(&[out_ch], 0.0, trainable)),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

/// Last-axis layer normalization with elementwise affine.
#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            weight: init_const(&[dim], 1.0, true),
            bias: init_const(&[dim], 0.0, true),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(Some(&self.weight), Some(&self.bias), T::lit(self.eps))
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}
