//! Multi-head self-attention over token sequences, plus an inference-only
//! pixel-wise attention used as the quadratic-cost reference.

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Module, NamedParams};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T: Scalar> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(rng: &mut Rng, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid("attention", format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(rng, dim, 3 * dim, true),
            proj: Linear::new(rng, dim, dim, true),
            heads,
        })
    }

    fn dim(&self) -> usize {
        self.proj.weight.dim(0)
    }

    /// Query/key/value tensors of shape `[N, heads, T, head_dim]`.
    fn split_heads(&self, x: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
        if x.rank() != 3 || x.dim(2) != self.dim() {
            return Err(Error::shape("attention", x.shape(), &[self.dim()]));
        }
        let (n, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape(&[n, t, 3, self.heads, hd])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| qkv.narrow(0, i, 1)?.reshape(&[n, self.heads, t, hd]);
        Ok([part(0)?, part(1)?, part(2)?])
    }

    /// Row-stochastic attention matrices `[N, heads, T, T]`.
    pub fn attention_weights(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [q, k, _] = self.split_heads(x)?;
        let hd = q.dim(3);
        q.matmul_t(&k)?.softmax(-1, T::one() / T::count(hd).sqrt())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        let [q, k, v] = self.split_heads(x)?;
        let hd = q.dim(3);
        let attn = q.matmul_t(&k)?.softmax(-1, T::one() / T::count(hd).sqrt())?;
        let ctx = attn.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[n, t, d])?;
        self.proj.forward(&ctx)
    }
}

impl<T: Scalar> Module<T> for MultiHeadAttention<T> {
    fn visit_params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.qkv.visit_params(&join(prefix, "qkv"), out);
        self.proj.visit_params(&join(prefix, "proj"), out);
    }
}

/// Single-head attention where every pixel of `[N, C, H, W]` attends to
/// every other pixel; identity projections, output same shape as input.
///
/// Inference only. Queries are processed in blocks so memory stays
/// `O(block·HW)` while time is `O(C·(HW)²)`.
pub fn pixel_attention<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::shape("pixel_attention", x.shape(), &[0, 0, 0, 0]));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let p = h * w;
    let block = 256.min(p);
    let scale = T::one() / T::count(c).sqrt();
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * p];
    let mut scores = vec![T::zero(); block * p];
    for b in 0..n {
        let img = &xd[b * c * p..(b + 1) * c * p]; // [C, P]
        let dst = &mut out[b * c * p..(b + 1) * c * p];
        for q0 in (0..p).step_by(block) {
            let bq = block.min(p - q0);
            let s = &mut scores[..bq * p];
            // scores[q, k] = Σ_c x[c, q0 + q] x[c, k]
            T::gemm(bq, c, p, scale, &img[q0..], 1, p as isize, img, p as isize, 1, T::zero(), s, p as isize, 1);
            for row in s.chunks_mut(p) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|v| *v *= inv);
            }
            // out[c, q0 + q] = Σ_k x[c, k] scores[q, k]
            T::gemm(c, p, bq, T::one(), img, p as isize, 1, s, 1, p as isize, T::zero(), &mut dst[q0..], p as isize, 1);
        }
    }
    drop(xd);
    Tensor::from_vec(out, x.shape())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_are_row_stochastic() {
        let mut rng = Rng::new(1);
        let mha = MultiHeadAttention::<f64>::new(&mut rng, 8, 2).unwrap();
        let x = Tensor::from_vec(rng.normal(2 * 5 * 8, 0.0, 1.0), &[2, 5, 8]).unwrap();
        let a = mha.attention_weights(&x).unwrap();
        assert_eq!(a.shape(), &[2, 2, 5, 5]);
        for s in a.sum_axis(-1, false).unwrap().to_vec() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(mha.forward(&x).unwrap().shape(), &[2, 5, 8]);
    }

    #[test]
    fn heads_must_divide_dim() {
        assert!(MultiHeadAttention::<f64>::new(&mut Rng::new(0), 10, 4).is_err());
    }

    #[test]
    fn pixel_attention_matches_dense_reference() {
        let mut rng = Rng::new(2);
        let (c, h, w) = (3, 4, 5);
        let x = Tensor::<f64>::from_vec(rng.normal(c * h * w, 0.0, 1.0), &[1, c, h, w]).unwrap();
        let y = pixel_attention(&x).unwrap().to_vec();
        let xd = x.to_vec();
        let p = h * w;
        let scale = 1.0 / (c as f64).sqrt();
        for q in 0..p {
            let s: Vec<f64> = (0..p)
                .map(|k| (0..c).map(|ch| xd[ch * p + q] * xd[ch * p + k]).sum::<f64>() * scale)
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for ch in 0..c {
                let expect: f64 = (0..p).map(|k| xd[ch * p + k] * e[k] / z).sum();
                assert!((y[ch * p + q] - expect).abs() < 1e-12);
            }
        }
    }
}
