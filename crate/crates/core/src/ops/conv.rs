//! 2-D convolution as im2col + GEMM.
//!
//! This is cross-correlation: the kernel is not flipped.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Visits (column-matrix offset, image offset) for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let p = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for oy in 0..self.oh {
                        let y = (oy * self.stride + ki) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let x = (ox * self.stride + kj) as isize - self.pad as isize;
                            if x < 0 || x >= self.w as isize {
                                continue;
                            }
                            f(row * p + oy * self.ow + ox, (c * self.h + y as usize) * self.w + x as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_tap(|ci, ii| cols[ci] = img[ii]);
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        self.for_each_tap(|ci, ii| img[ii] += cols[ci]);
    }
}

impl<T: Scalar> Tensor<T> {
    /// `input [N,C,H,W] ⋆ weight [O,C,KH,KW] (+ bias [O])` with symmetric
    /// zero padding. Output extent is `(H + 2·pad − KH) / stride + 1`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        if self.rank() != 4 || weight.rank() != 4 || self.dim(1) != weight.dim(1) {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (o, kh, kw) = (weight.dim(0), weight.dim(2), weight.dim(3));
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(Error::shape("conv2d", weight.shape(), b.shape()));
            }
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        }
        let g = Geometry {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let (rows, p) = (g.rows(), g.cols());
        let img_len = c * h * w;
        let mut out = vec![T::zero(); n * o * p];
        {
            let xd = self.data();
            let wd = weight.data();
            let mut cols = vec![T::zero(); if g.pointwise() { 0 } else { rows * p }];
            for i in 0..n {
                let img = &xd[i * img_len..(i + 1) * img_len];
                let src: &[T] = if g.pointwise() {
                    img
                } else {
                    g.im2col(img, &mut cols);
                    &cols
                };
                let dst = &mut out[i * o * p..(i + 1) * o * p];
                T::gemm(o, rows, p, T::one(), &wd, rows as isize, 1, src, p as isize, 1, T::zero(), dst, p as isize, 1);
            }
            if let Some(b) = bias {
                let bd = b.data();
                for (chunk, &bv) in out.chunks_mut(p).zip(bd.iter().cycle()) {
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        let (px, pw) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(out, vec![n, o, g.oh, g.ow], "conv2d", parents, move |gout, needs| {
            let xd = px.data();
            let wd = pw.data();
            let mut gx = needs[0].then(|| vec![T::zero(); xd.len()]);
            let mut gw = needs[1].then(|| vec![T::zero(); wd.len()]);
            let mut cols = vec![T::zero(); rows * p];
            for i in 0..n {
                let gi = &gout[i * o * p..(i + 1) * o * p];
                let img = &xd[i * img_len..(i + 1) * img_len];
                if let Some(gw) = gw.as_mut() {
                    let src: &[T] = if g.pointwise() {
                        img
                    } else {
                        g.im2col(img, &mut cols);
                        &cols
                    };
                    // dW += G · colsᵀ
                    T::gemm(o, p, rows, T::one(), gi, p as isize, 1, src, 1, p as isize, T::one(), gw, rows as isize, 1);
                }
                if let Some(gx) = gx.as_mut() {
                    let gimg = &mut gx[i * img_len..(i + 1) * img_len];
                    if g.pointwise() {
                        T::gemm(rows, o, p, T::one(), &wd, 1, rows as isize, gi, p as isize, 1, T::one(), gimg, p as isize, 1);
                    } else {
                        // dcols = Wᵀ · G, then scatter back
                        T::gemm(rows, o, p, T::one(), &wd, 1, rows as isize, gi, p as isize, 1, T::zero(), &mut cols, p as isize, 1);
                        g.col2im_add(&cols, gimg);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![T::zero(); o];
                    for (idx, chunk) in gout.chunks(p).enumerate() {
                        gb[idx % o] += chunk.iter().copied().sum::<T>();
                    }
                    gb
                }));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_over_ones_sums_to_nine() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn identity_pointwise_kernel() {
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = Tensor::<f64>::from_vec(data.clone(), &[2, 2, 3, 3]).unwrap();
        let w = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1]).unwrap();
        assert_eq!(x.conv2d(&w, None, 1, 0).unwrap().to_vec(), data);
    }

    #[test]
    fn output_extent_formula() {
        let x = Tensor::<f64>::zeros(&[1, 3, 7, 9]);
        let w = Tensor::<f64>::zeros(&[4, 3, 3, 3]);
        let y = x.conv2d(&w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 5]);
    }

    #[test]
    fn no_kernel_flip() {
        // asymmetric kernel picks out the top-left neighbour
        let x = Tensor::<f64>::from_vec((1..=9).map(f64::from).collect(), &[1, 1, 3, 3]).unwrap();
        let mut k = vec![0.0; 9];
        k[0] = 1.0;
        let w = Tensor::<f64>::from_vec(k, &[1, 1, 3, 3]).unwrap();
        let y = x.conv2d(&w, None, 1, 1).unwrap().to_vec();
        assert_eq!(y, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
    }

    #[test]
    fn channel_mismatch_names_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        let msg = x.conv2d(&w, None, 1, 0).unwrap_err().to_string();
        assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 2, 3, 3]"));
    }

    #[test]
    fn bias_gradient_counts_positions() {
        let x = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
        let w = Tensor::<f64>::param(vec![0.0; 2 * 9], &[2, 1, 3, 3]).unwrap();
        let b = Tensor::<f64>::param(vec![0.5, -0.5], &[2]).unwrap();
        x.conv2d(&w, Some(&b), 1, 1).unwrap().sum_all().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![18.0, 18.0]);
    }
}
