use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::{normalize_axis, split_at_axis};
use crate::tensor::Tensor;

impl<T: Scalar> Tensor<T> {
    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], Vec::new(), "sum_all", vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::count(self.numel().max(1));
        self.sum_all().mul_scalar(T::one() / n)
    }

    pub fn sum_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor<T>> {
        let ax = normalize_axis(axis, self.rank())
            .ok_or_else(|| Error::invalid("sum_axis", format!("axis {axis} for shape {:?}", self.shape())))?;
        let (outer, extent, inner) = split_at_axis(self.shape(), ax);
        let mut out = vec![T::zero(); outer * inner];
        {
            let d = self.data();
            for o in 0..outer {
                for k in 0..extent {
                    let src = &d[(o * extent + k) * inner..][..inner];
                    let dst = &mut out[o * inner..][..inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
                }
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[ax] = 1;
        } else {
            shape.remove(ax);
        }
        Ok(Tensor::from_op(out, shape, "sum_axis", vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); outer * extent * inner];
            for o in 0..outer {
                for k in 0..extent {
                    gx[(o * extent + k) * inner..][..inner].copy_from_slice(&g[o * inner..][..inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor<T>> {
        let ax = normalize_axis(axis, self.rank())
            .ok_or_else(|| Error::invalid("mean_axis", format!("axis {axis} for shape {:?}", self.shape())))?;
        let n = T::count(self.dim(ax).max(1));
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(T::one() / n))
    }

    /// Population (biased) variance along `axis`.
    pub fn var_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor<T>> {
        let mean = self.mean_axis(axis, true)?;
        self.sub(&mean)?.square().mean_axis(axis, keepdim)
    }

    /// Index of the maximum along `axis`; ties resolve to the lowest index.
    pub fn argmax_axis(&self, axis: isize) -> Result<Vec<usize>> {
        let ax = normalize_axis(axis, self.rank())
            .ok_or_else(|| Error::invalid("argmax_axis", format!("axis {axis} for shape {:?}", self.shape())))?;
        let (outer, extent, inner) = split_at_axis(self.shape(), ax);
        let d = self.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = d[o * extent * inner + i];
                for k in 1..extent {
                    let v = d[(o * extent + k) * inner + i];
                    if v > best_v {
                        best = k;
                        best_v = v;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }
}
