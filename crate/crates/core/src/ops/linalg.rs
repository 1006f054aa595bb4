use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::numel;
use crate::tensor::Tensor;

struct MatmulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    /// `b` is stored as `[.., n, k]` and used transposed.
    b_transposed: bool,
}

impl MatmulPlan {
    fn b_strides(&self) -> (isize, isize) {
        if self.b_transposed {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }
}

fn plan<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    b_transposed: bool,
) -> Result<(MatmulPlan, Vec<usize>)> {
    let bad = || Error::shape(op, a.shape(), b.shape());
    if a.rank() < 2 || b.rank() < 2 {
        return Err(bad());
    }
    let (ra, rb) = (a.rank(), b.rank());
    let (m, k) = (a.dim(ra - 2), a.dim(ra - 1));
    let (kb, n) = if b_transposed {
        (b.dim(rb - 1), b.dim(rb - 2))
    } else {
        (b.dim(rb - 2), b.dim(rb - 1))
    };
    if k != kb {
        return Err(bad());
    }
    let a_batch = &a.shape()[..ra - 2];
    let b_batch = &b.shape()[..rb - 2];
    let batch_shape = match (a_batch.is_empty(), b_batch.is_empty()) {
        (_, true) => a_batch.to_vec(),
        (true, false) => b_batch.to_vec(),
        (false, false) if a_batch == b_batch => a_batch.to_vec(),
        _ => return Err(bad()),
    };
    let mut out_shape = batch_shape.clone();
    out_shape.extend([m, n]);
    Ok((
        MatmulPlan {
            batch: numel(&batch_shape),
            m,
            k,
            n,
            a_batched: !a_batch.is_empty(),
            b_batched: !b_batch.is_empty(),
            b_transposed,
        },
        out_shape,
    ))
}

fn matmul_impl<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    b_transposed: bool,
) -> Result<Tensor<T>> {
    let (p, out_shape) = plan(op, a, b, b_transposed)?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![T::zero(); p.batch * m * n];
    {
        let (ad, bd) = (a.data(), b.data());
        let (rsb, csb) = p.b_strides();
        for i in 0..p.batch {
            let ao = if p.a_batched { i * m * k } else { 0 };
            let bo = if p.b_batched { i * k * n } else { 0 };
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &ad[ao..],
                k as isize,
                1,
                &bd[bo..],
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
    }
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(out, out_shape, op, vec![a.clone(), b.clone()], move |g, needs| {
        let (ad, bd) = (pa.data(), pb.data());
        let (rsb, csb) = p.b_strides();
        let mut ga = needs[0].then(|| vec![T::zero(); ad.len()]);
        let mut gb = needs[1].then(|| vec![T::zero(); bd.len()]);
        for i in 0..p.batch {
            let ao = if p.a_batched { i * m * k } else { 0 };
            let bo = if p.b_batched { i * k * n } else { 0 };
            let gi = &g[i * m * n..(i + 1) * m * n];
            if let Some(ga) = ga.as_mut() {
                // dA = G · Bᵀ, accumulated when A is shared across the batch
                T::gemm(m, n, k, T::one(), gi, n as isize, 1, &bd[bo..], csb, rsb, T::one(), &mut ga[ao..ao + m * k], k as isize, 1);
            }
            if let Some(gb) = gb.as_mut() {
                // dB = Aᵀ · G, written in B's storage layout
                let (rso, cso) = if p.b_transposed { (1, k as isize) } else { (n as isize, 1) };
                T::gemm(k, m, n, T::one(), &ad[ao..], 1, k as isize, gi, n as isize, 1, T::one(), &mut gb[bo..bo + k * n], rso, cso);
            }
        }
        vec![ga, gb]
    }))
}

impl<T: Scalar> Tensor<T> {
    /// Batched matrix product `[.., m, k] · [.., k, n]`. Batch dims must be
    /// equal, or one operand may be a plain matrix shared across the batch.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        matmul_impl("matmul", self, rhs, false)
    }

    /// `self · rhsᵀ` over the last two axes, without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        matmul_impl("matmul_t", self, rhs, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_product_and_grads() {
        let a = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::<f64>::param(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
        c.sum_all().backward().unwrap();
        // dA = 1·Bᵀ row sums, dB = Aᵀ·1
        assert_eq!(a.grad().unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn transposed_rhs_matches_explicit_transpose() {
        let a = Tensor::<f64>::param((0..12).map(|v| v as f64 * 0.3).collect(), &[2, 2, 3]).unwrap();
        let b = Tensor::<f64>::param((0..24).map(|v| (v as f64).cos()).collect(), &[2, 4, 3]).unwrap();
        let c1 = a.matmul_t(&b).unwrap();
        let c2 = a.matmul(&b.transpose(-1, -2).unwrap()).unwrap();
        assert_eq!(c1.shape(), &[2, 2, 4]);
        for (x, y) in c1.to_vec().iter().zip(c2.to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
        c1.sum_all().backward().unwrap();
        let gb1 = b.grad().unwrap();
        b.zero_grad();
        c2.sum_all().backward().unwrap();
        for (x, y) in gb1.iter().zip(b.grad().unwrap()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_rhs_accumulates_over_batch() {
        let a = Tensor::<f64>::from_vec(vec![1.0; 6], &[3, 1, 2]).unwrap();
        let w = Tensor::<f64>::param(vec![1.0, 2.0], &[2, 1]).unwrap();
        let y = a.matmul(&w).unwrap();
        assert_eq!(y.shape(), &[3, 1, 1]);
        y.sum_all().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn inner_mismatch_is_an_error() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(a.matmul(&b).is_err());
    }
}
