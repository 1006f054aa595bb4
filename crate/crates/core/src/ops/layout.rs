//! Data-movement ops: reshape, permute, concat, narrow, index_select.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::{normalize_axis, numel, split_at_axis, strides};
use crate::tensor::Tensor;

/// Source offset for every destination element of a permutation.
fn permute_offsets(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_src_strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let total = numel(shape);
    let mut offsets = Vec::with_capacity(total);
    let rank = out_shape.len();
    if rank == 0 {
        return vec![0; total];
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        offsets.push(src);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            src += out_src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= out_src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    offsets
}

impl<T: Scalar> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let offsets = permute_offsets(self.shape(), perm);
        let out: Vec<T> = {
            let d = self.data();
            offsets.iter().map(|&o| d[o]).collect()
        };
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.dim(p)).collect();
        Ok(Tensor::from_op(out, out_shape, "permute", vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for (gi, &o) in g.iter().zip(&offsets) {
                gx[o] = *gi;
            }
            vec![Some(gx)]
        }))
    }

    pub fn transpose(&self, a: isize, b: isize) -> Result<Tensor<T>> {
        let rank = self.rank();
        let (Some(a), Some(b)) = (normalize_axis(a, rank), normalize_axis(b, rank)) else {
            return Err(Error::invalid("transpose", format!("axes ({a}, {b}) for rank {rank}")));
        };
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: isize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no tensors given"))?;
        let rank = first.rank();
        let ax = normalize_axis(axis, rank)
            .ok_or_else(|| Error::invalid("concat", format!("axis {axis} for rank {rank}")))?;
        for p in parts {
            let same_rank = p.rank() == rank;
            if !same_rank || (0..rank).any(|i| i != ax && p.dim(i) != first.dim(i)) {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[ax] = parts.iter().map(|p| p.dim(ax)).sum();
        let (outer, _, inner) = split_at_axis(first.shape(), ax);
        let widths: Vec<usize> = parts.iter().map(|p| p.dim(ax) * inner).collect();
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        {
            let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (g, &w) in guards.iter().zip(&widths) {
                    out.extend_from_slice(&g[o * w..(o + 1) * w]);
                }
            }
        }
        Ok(Tensor::from_op(out, out_shape, "concat", parts.to_vec(), move |g, needs| {
            let mut start = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&w, &need)| {
                    let r = need.then(|| {
                        let mut gp = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * row + start..o * row + start + w]);
                        }
                        gp
                    });
                    start += w;
                    r
                })
                .collect()
        }))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: isize, start: usize, len: usize) -> Result<Tensor<T>> {
        let ax = normalize_axis(axis, self.rank())
            .ok_or_else(|| Error::invalid("narrow", format!("axis {axis} for shape {:?}", self.shape())))?;
        if start + len > self.dim(ax) {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} exceeds extent {} of {:?}", start + len, self.dim(ax), self.shape()),
            ));
        }
        let (outer, extent, inner) = split_at_axis(self.shape(), ax);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                out.extend_from_slice(&d[(o * extent + start) * inner..(o * extent + start + len) * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[ax] = len;
        Ok(Tensor::from_op(out, shape, "narrow", vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); outer * extent * inner];
            for o in 0..outer {
                gx[(o * extent + start) * inner..(o * extent + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Gathers entries along `axis` at `indices` (repeats allowed; the
    /// backward pass scatter-adds).
    pub fn index_select(&self, axis: isize, indices: &[usize]) -> Result<Tensor<T>> {
        let ax = normalize_axis(axis, self.rank())
            .ok_or_else(|| Error::invalid("index_select", format!("axis {axis} for shape {:?}", self.shape())))?;
        let (outer, extent, inner) = split_at_axis(self.shape(), ax);
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return Err(Error::invalid("index_select", format!("index {bad} out of range {extent}")));
        }
        let idx = indices.to_vec();
        let k = idx.len();
        let mut out = Vec::with_capacity(outer * k * inner);
        {
            let d = self.data();
            for o in 0..outer {
                for &i in &idx {
                    out.extend_from_slice(&d[(o * extent + i) * inner..(o * extent + i + 1) * inner]);
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[ax] = k;
        Ok(Tensor::from_op(out, shape, "index_select", vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); outer * extent * inner];
            for o in 0..outer {
                for (j, &i) in idx.iter().enumerate() {
                    let src = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
                    gx[(o * extent + i) * inner..(o * extent + i + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += *b);
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn transpose_2d() {
        let x = Tensor::<f64>::from_vec((0..6).map(f64::from).collect(), &[2, 3]).unwrap();
        let y = x.transpose(0, 1).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let a = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::<f64>::param(vec![5.0, 6.0], &[2, 1]).unwrap();
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.narrow(1, 2, 1).unwrap().to_vec(), b.to_vec());
        c.narrow(1, 1, 2).unwrap().sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn index_select_scatter_adds_repeats() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let y = x.index_select(0, &[2, 0, 2]).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 1.0, 3.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 2.0]);
        assert!(x.index_select(0, &[3]).is_err());
    }

    #[test]
    fn reshape_rejects_wrong_count() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(x.reshape(&[4]).is_err());
    }

    proptest! {
        #[test]
        fn reshape_round_trip_is_identity(dims in proptest::collection::vec(1usize..4, 1..4), seed in 0u64..1000) {
            let n = numel(&dims);
            let data: Vec<f64> = (0..n).map(|i| (i as f64 + seed as f64).sin()).collect();
            let x = Tensor::<f64>::from_vec(data.clone(), &dims).unwrap();
            let y = x.reshape(&[n]).unwrap().reshape(&dims).unwrap();
            prop_assert_eq!(y.to_vec(), data);
            prop_assert_eq!(y.shape(), &dims[..]);
        }

        #[test]
        fn permute_then_inverse_is_identity(dims in proptest::collection::vec(1usize..4, 3)) {
            let n = numel(&dims);
            let data: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let x = Tensor::<f64>::from_vec(data.clone(), &dims).unwrap();
            let y = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
            prop_assert_eq!(y.to_vec(), data);
        }
    }
}
