//! The trainable model of one experiment: optional input normalization,
//! tokenizer, ViT body and, with TokenProp, a reconstruction decoder.

use anyhow::Result;
use toklab::nn::join;
use toklab::{Decoder, Module, NamedParams, Rng, Scalar, Tensor, TokenEncoder, TokenSet, Tokenizer, Vit};

use crate::config::{ExperimentConfig, InputNormKind};

const NORM_EPS: f64 = 1e-5;
const RUNNING_MOMENTUM: f64 = 0.1;

/// Standard normalization applied to the image before the patch stem.
///
/// * `layer`: per image over channels and pixels.
/// * `instance`: per image and channel over pixels.
/// * `batch`: per channel over the batch and pixels; evaluation uses running
///   statistics updated during training.
///
/// All three carry a per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct InputNorm<T: Scalar> {
    pub kind: InputNormKind,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> InputNorm<T> {
    pub fn new(kind: InputNormKind, channels: usize) -> Self {
        let shape = [1, channels, 1, 1];
        let leaf = |v: f64, grad: bool| Tensor::leaf(vec![T::lit(v); channels], &shape, grad).expect("norm shape");
        Self {
            kind,
            weight: leaf(1.0, true),
            bias: leaf(0.0, true),
            running_mean: leaf(0.0, false),
            running_var: leaf(1.0, false),
        }
    }

    fn standardize(x: &Tensor<T>, mean: &Tensor<T>, var: &Tensor<T>) -> toklab::Result<Tensor<T>> {
        x.sub(mean)?.div(&var.add_scalar(T::lit(NORM_EPS)).sqrt())
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> toklab::Result<Tensor<T>> {
        let s = x.shape().to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let y = match self.kind {
            InputNormKind::None => return Ok(x.clone()),
            InputNormKind::Layer => {
                let flat = x.reshape(&[n, c * hw])?;
                let (m, v) = (flat.mean_axis(1, true)?, flat.var_axis(1, true)?);
                Self::standardize(&flat, &m, &v)?.reshape(&s)?
            }
            InputNormKind::Instance => {
                let flat = x.reshape(&[n, c, hw])?;
                let (m, v) = (flat.mean_axis(2, true)?, flat.var_axis(2, true)?);
                Self::standardize(&flat, &m, &v)?.reshape(&s)?
            }
            InputNormKind::Batch if training => {
                let flat = x.permute(&[1, 0, 2, 3])?.reshape(&[c, n * hw])?;
                let (m, v) = (flat.mean_axis(1, true)?, flat.var_axis(1, true)?);
                let unbiased = (n * hw) as f64 / ((n * hw).max(2) - 1) as f64;
                let (mv, vv) = (m.to_vec(), v.to_vec());
                self.running_mean.update_data(|r| {
                    for (r, b) in r.iter_mut().zip(&mv) {
                        *r = T::lit((1.0 - RUNNING_MOMENTUM) * r.as_f64() + RUNNING_MOMENTUM * b.as_f64());
                    }
                })?;
                self.running_var.update_data(|r| {
                    for (r, b) in r.iter_mut().zip(&vv) {
                        *r = T::lit((1.0 - RUNNING_MOMENTUM) * r.as_f64() + RUNNING_MOMENTUM * b.as_f64() * unbiased);
                    }
                })?;
                let m = m.reshape(&[1, c, 1, 1])?;
                let v = v.reshape(&[1, c, 1, 1])?;
                Self::standardize(x, &m, &v)?
            }
            InputNormKind::Batch => Self::standardize(x, &self.running_mean.detach(), &self.running_var.detach())?,
        };
        y.mul(&self.weight)?.add(&self.bias)
    }
}

impl<T: Scalar> Module<T> for InputNorm<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        match self.kind {
            InputNormKind::None => {}
            InputNormKind::Batch => {
                out.push((join(prefix, "weight"), self.weight.clone()));
                out.push((join(prefix, "bias"), self.bias.clone()));
                out.push((join(prefix, "running_mean"), self.running_mean.clone()));
                out.push((join(prefix, "running_var"), self.running_var.clone()));
            }
            _ => {
                out.push((join(prefix, "weight"), self.weight.clone()));
                out.push((join(prefix, "bias"), self.bias.clone()));
            }
        }
    }
}

pub struct Model<T: Scalar> {
    pub norm: InputNorm<T>,
    pub tokenizer: Tokenizer<T>,
    pub vit: Vit<T>,
    pub decoder: Option<Decoder<T>>,
}

pub struct Output<T: Scalar> {
    pub logits: Tensor<T>,
    pub tokens: TokenSet<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &ExperimentConfig, rng: &Rng) -> Result<Self> {
        let tokenizer = Tokenizer::new(&mut rng.fork(1), cfg.tokenizer_config())?;
        let vit = Vit::new(&mut rng.fork(2), cfg.vit_config())?;
        let decoder = if cfg.tokenprop {
            Some(Decoder::new(&mut rng.fork(3), cfg.embed_dim, cfg.decoder_config())?)
        } else {
            None
        };
        Ok(Self {
            norm: InputNorm::new(cfg.norm, 3),
            tokenizer,
            vit,
            decoder,
        })
    }

    pub fn encode(&self, x: &Tensor<T>, training: bool) -> Result<TokenSet<T>> {
        Ok(self.tokenizer.encode(&self.norm.forward(x, training)?)?)
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Output<T>> {
        let tokens = self.encode(x, training)?;
        let logits = self.vit.forward(&tokens)?;
        Ok(Output { logits, tokens })
    }

    /// The input normalization and tokenizer in evaluation mode.
    pub fn encoder(&self) -> Encoder<'_, T> {
        Encoder(self)
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.norm.visit_params(&join(prefix, "norm"), out);
        self.tokenizer.visit_params(&join(prefix, "tokenizer"), out);
        self.vit.visit_params(&join(prefix, "vit"), out);
        if let Some(d) = &self.decoder {
            d.visit_params(&join(prefix, "decoder"), out);
        }
    }
}

pub struct Encoder<'a, T: Scalar>(&'a Model<T>);

impl<T: Scalar> Module<T> for Encoder<'_, T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.0.norm.visit_params(&join(prefix, "norm"), out);
        self.0.tokenizer.visit_params(&join(prefix, "tokenizer"), out);
    }
}

impl<T: Scalar> TokenEncoder<T> for Encoder<'_, T> {
    fn encode(&self, image: &Tensor<T>) -> toklab::Result<TokenSet<T>> {
        self.0.tokenizer.encode(&self.0.norm.forward(image, false)?)
    }

    fn token_dim(&self) -> usize {
        self.0.tokenizer.token_dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input() -> Tensor<f64> {
        let v: Vec<f64> = Rng::new(0).normal(2 * 3 * 16, 1.0, 2.0);
        Tensor::from_vec(v, &[2, 3, 4, 4]).unwrap()
    }

    fn stats(v: &[f64]) -> (f64, f64) {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64)
    }

    #[test]
    fn instance_norm_standardizes_each_plane() {
        let y = InputNorm::new(InputNormKind::Instance, 3).forward(&input(), true).unwrap().to_vec();
        for plane in y.chunks(16) {
            let (m, v) = stats(plane);
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-4, "{m} {v}");
        }
    }

    #[test]
    fn layer_norm_standardizes_each_image() {
        let y = InputNorm::new(InputNormKind::Layer, 3).forward(&input(), true).unwrap().to_vec();
        for img in y.chunks(48) {
            let (m, v) = stats(img);
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_tracks_running_statistics() {
        let norm = InputNorm::<f64>::new(InputNormKind::Batch, 3);
        let x = input();
        let y = norm.forward(&x, true).unwrap().to_vec();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| y[(n * 3 + c) * 16..][..16].to_vec()).collect();
            let (m, v) = stats(&vals);
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-4);
        }
        let rm = norm.running_mean.to_vec();
        assert!(rm.iter().all(|m| *m != 0.0));
        // evaluation reads the running statistics only
        let before = norm.running_mean.to_vec();
        norm.forward(&x, false).unwrap();
        assert_eq!(norm.running_mean.to_vec(), before);
        assert!(!norm.running_mean.requires_grad());
    }
}
