//! Neural-network building blocks on top of the primitive ops.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::{normalize_axis, split_at_axis};
use crate::tensor::Tensor;

/// Source taps for half-pixel bilinear sampling along one axis.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

fn resize_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap { lo, hi, w_hi: pos - lo as f64 }
        })
        .collect()
}

impl<T: Scalar> Tensor<T> {
    /// `exp(scale·x_k) / Σ_i exp(scale·x_i)` along `axis`, stabilized by
    /// subtracting the running maximum.
    pub fn softmax(&self, axis: isize, scale: T) -> Result<Tensor<T>> {
        let ax = normalize_axis(axis, self.rank())
            .ok_or_else(|| Error::invalid("softmax", format!("axis {axis} for shape {:?}", self.shape())))?;
        if !self.all_finite() || !scale.is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let (outer, extent, inner) = split_at_axis(self.shape(), ax);
        let mut out = vec![T::zero(); self.numel()];
        {
            let d = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * extent + k) * inner + i;
                    let mut max = T::neg_infinity();
                    for k in 0..extent {
                        max = max.max(scale * d[at(k)]);
                    }
                    let mut sum = T::zero();
                    for k in 0..extent {
                        let e = (scale * d[at(k)] - max).exp();
                        out[at(k)] = e;
                        sum += e;
                    }
                    for k in 0..extent {
                        out[at(k)] /= sum;
                    }
                }
            }
        }
        let y = out.clone();
        Ok(Tensor::from_op(out, self.shape().to_vec(), "softmax", vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * extent + k) * inner + i;
                    let dot: T = (0..extent).map(|k| g[at(k)] * y[at(k)]).sum();
                    for k in 0..extent {
                        gx[at(k)] = scale * y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Mean negative log-likelihood of integer `labels` under `[N, K]` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        if self.rank() != 2 || self.dim(0) != labels.len() {
            return Err(Error::shape("cross_entropy", self.shape(), &[labels.len()]));
        }
        let (n, k) = (self.dim(0), self.dim(1));
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} with {k} classes")));
        }
        if !self.all_finite() {
            return Err(Error::NonFinite { op: "cross_entropy" });
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        {
            let d = self.data();
            for (r, &label) in labels.iter().enumerate() {
                let row = &d[r * k..(r + 1) * k];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                loss += lse - row[label];
                for j in 0..k {
                    probs[r * k + j] = (row[j] - lse).exp();
                }
            }
        }
        let inv_n = T::one() / T::count(n);
        let labels = labels.to_vec();
        Ok(Tensor::from_op(vec![loss * inv_n], Vec::new(), "cross_entropy", vec![self.clone()], move |g, _| {
            let mut gx = probs.clone();
            for (r, &label) in labels.iter().enumerate() {
                gx[r * k + label] -= T::one();
            }
            gx.iter_mut().for_each(|v| *v *= g[0] * inv_n);
            vec![Some(gx)]
        }))
    }

    /// Normalizes over the last axis, then applies optional affine terms
    /// of the last-axis extent.
    pub fn layer_norm(&self, weight: Option<&Tensor<T>>, bias: Option<&Tensor<T>>, eps: T) -> Result<Tensor<T>> {
        let mean = self.mean_axis(-1, true)?;
        let centered = self.sub(&mean)?;
        let var = centered.square().mean_axis(-1, true)?;
        let mut y = centered.div(&var.add_scalar(eps).sqrt())?;
        if let Some(w) = weight {
            y = y.mul(w)?;
        }
        if let Some(b) = bias {
            y = y.add(b)?;
        }
        Ok(y)
    }

    /// Bilinear resize of `[N, C, H, W]` with half-pixel centers (no corner
    /// alignment), edge-clamped.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        if self.rank() != 4 || out_h == 0 || out_w == 0 || self.dim(2) == 0 || self.dim(3) == 0 {
            return Err(Error::shape("bilinear_resize", self.shape(), &[out_h, out_w]));
        }
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        if (h, w) == (out_h, out_w) {
            return self.reshape(self.shape());
        }
        let ty = resize_taps(h, out_h);
        let tx = resize_taps(w, out_w);
        let planes = n * c;
        let mut out = vec![T::zero(); planes * out_h * out_w];
        {
            let d = self.data();
            for pl in 0..planes {
                let src = &d[pl * h * w..(pl + 1) * h * w];
                let dst = &mut out[pl * out_h * out_w..(pl + 1) * out_h * out_w];
                for (oy, a) in ty.iter().enumerate() {
                    let (wy1, wy0) = (T::lit(a.w_hi), T::lit(1.0 - a.w_hi));
                    for (ox, b) in tx.iter().enumerate() {
                        let (wx1, wx0) = (T::lit(b.w_hi), T::lit(1.0 - b.w_hi));
                        dst[oy * out_w + ox] = wy0 * (wx0 * src[a.lo * w + b.lo] + wx1 * src[a.lo * w + b.hi])
                            + wy1 * (wx0 * src[a.hi * w + b.lo] + wx1 * src[a.hi * w + b.hi]);
                    }
                }
            }
        }
        Ok(Tensor::from_op(out, vec![n, c, out_h, out_w], "bilinear_resize", vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); planes * h * w];
            for pl in 0..planes {
                let gsrc = &g[pl * out_h * out_w..(pl + 1) * out_h * out_w];
                let gdst = &mut gx[pl * h * w..(pl + 1) * h * w];
                for (oy, a) in ty.iter().enumerate() {
                    let (wy1, wy0) = (T::lit(a.w_hi), T::lit(1.0 - a.w_hi));
                    for (ox, b) in tx.iter().enumerate() {
                        let (wx1, wx0) = (T::lit(b.w_hi), T::lit(1.0 - b.w_hi));
                        let gv = gsrc[oy * out_w + ox];
                        gdst[a.lo * w + b.lo] += gv * wy0 * wx0;
                        gdst[a.lo * w + b.hi] += gv * wy0 * wx1;
                        gdst[a.hi * w + b.lo] += gv * wy1 * wx0;
                        gdst[a.hi * w + b.hi] += gv * wy1 * wx1;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `[N, C·r², H, W] → [N, C, H·r, W·r]` with
    /// `out[n, c, h·r + i, w·r + j] = in[n, c·r² + i·r + j, h, w]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<T>> {
        if self.rank() != 4 || r == 0 || self.dim(1) % (r * r) != 0 {
            return Err(Error::invalid("pixel_shuffle", format!("factor {r} for shape {:?}", self.shape())));
        }
        let (n, cr, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let c = cr / (r * r);
        self.reshape(&[n, c, r, r, h, w])?
            .permute(&[0, 1, 4, 2, 5, 3])?
            .reshape(&[n, c, h * r, w * r])
    }

    /// Inverse of [`pixel_shuffle`](Self::pixel_shuffle).
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor<T>> {
        if self.rank() != 4 || r == 0 || self.dim(2) % r != 0 || self.dim(3) % r != 0 {
            return Err(Error::invalid("pixel_unshuffle", format!("factor {r} for shape {:?}", self.shape())));
        }
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        self.reshape(&[n, c, h / r, r, w / r, r])?
            .permute(&[0, 1, 3, 5, 2, 4])?
            .reshape(&[n, c * r * r, h / r, w / r])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::<f64>::from_vec(vec![0.0, 3f64.ln()], &[2]).unwrap();
        let y = x.softmax(0, 1.0).unwrap().to_vec();
        assert!((y[0] - 0.25).abs() < 1e-15 && (y[1] - 0.75).abs() < 1e-15);

        let eq = Tensor::<f64>::full(&[4], 2.5).softmax(0, 1.0).unwrap();
        assert!(eq.to_vec().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let z = Tensor::<f64>::from_vec(vec![-3.0, 7.0, 1.0], &[3]).unwrap();
        let u = z.softmax(0, 0.0).unwrap();
        assert!(u.to_vec().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::<f64>::from_vec(vec![0.0, f64::NAN], &[2]).unwrap();
        assert!(matches!(x.softmax(0, 1.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_along_middle_axis() {
        let x = Tensor::<f64>::from_vec((0..12).map(|v| v as f64 * 0.7).collect(), &[2, 3, 2]).unwrap();
        let y = x.softmax(1, 0.5).unwrap();
        let s = y.sum_axis(1, false).unwrap();
        assert!(s.to_vec().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let logits = Tensor::<f64>::zeros(&[3, 10]);
        let ce = logits.cross_entropy(&[0, 4, 9]).unwrap().item();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
        assert!(logits.cross_entropy(&[0, 4, 10]).is_err());
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let x = Tensor::<f64>::full(&[2, 5], 3.25);
        let y = x.layer_norm(None, None, 1e-5).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixel_shuffle_interleave_matches_index_formula() {
        let (c, r, h, w) = (1, 2, 2, 2);
        let x = Tensor::<f64>::from_vec((0..16).map(f64::from).collect(), &[1, 4, 2, 2]).unwrap();
        let y = x.pixel_shuffle(r).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let yd = y.to_vec();
        for ch in 0..c {
            for hh in 0..h {
                for ww in 0..w {
                    for i in 0..r {
                        for j in 0..r {
                            let src = ((ch * r * r + i * r + j) * h + hh) * w + ww;
                            let dst = (ch * h * r + hh * r + i) * w * r + ww * r + j;
                            assert_eq!(yd[dst], src as f64);
                        }
                    }
                }
            }
        }
        assert_eq!(yd[..4], [0.0, 4.0, 1.0, 5.0]);
        assert_eq!(y.pixel_unshuffle(2).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 3], 0.7);
        let y = x.bilinear_resize(7, 5).unwrap();
        assert!(y.to_vec().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let z = Tensor::<f64>::from_vec((0..9).map(f64::from).collect(), &[1, 1, 3, 3]).unwrap();
        assert_eq!(z.bilinear_resize(3, 3).unwrap().to_vec(), z.to_vec());
    }

    #[test]
    fn bilinear_upsample_2x_matches_half_pixel_rule() {
        // 1-D ramp [0, 1] upsampled to 4: positions -0.25, 0.25, 0.75, 1.25 clamp to [0, 1]
        let x = Tensor::<f64>::from_vec(vec![0.0, 1.0], &[1, 1, 1, 2]).unwrap();
        let y = x.bilinear_resize(1, 4).unwrap().to_vec();
        assert_eq!(y, vec![0.0, 0.25, 0.75, 1.0]);
    }
}
