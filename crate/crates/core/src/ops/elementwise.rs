//! Elementwise unary and broadcasting binary ops.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::{broadcast_shape, broadcast_strides, for_each_broadcast};
use crate::tensor::Tensor;

type BinFn<T> = fn(T, T) -> T;

fn binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: BinFn<T>,
    // partial derivatives w.r.t. a and b, given (a, b)
    dfa: BinFn<T>,
    dfb: BinFn<T>,
) -> Result<Tensor<T>> {
    let out_shape =
        broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(op, a.shape(), b.shape()))?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let data = {
        let (ad, bd) = (a.data(), b.data());
        if a.shape() == b.shape() {
            ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![T::zero(); crate::shape::numel(&out_shape)];
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(ad[i], bd[j]));
            out
        }
    };
    let (pa, pb) = (a.clone(), b.clone());
    let shape_for_bw = out_shape.clone();
    Ok(Tensor::from_op(
        data,
        out_shape,
        op,
        vec![a.clone(), b.clone()],
        move |g, needs| {
            let (ad, bd) = (pa.data(), pb.data());
            let mut ga = needs[0].then(|| vec![T::zero(); ad.len()]);
            let mut gb = needs[1].then(|| vec![T::zero(); bd.len()]);
            for_each_broadcast(&shape_for_bw, &sa, &sb, |o, i, j| {
                let (x, y) = (ad[i], bd[j]);
                if let Some(ga) = ga.as_mut() {
                    ga[i] += g[o] * dfa(x, y);
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] += g[o] * dfb(x, y);
                }
            });
            vec![ga, gb]
        },
    ))
}

/// Unary op whose derivative may use both input and output.
fn unary<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + Send + Sync + 'static,
) -> Tensor<T> {
    let out: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    let saved_out = out.clone();
    let px = x.clone();
    Tensor::from_op(out, x.shape().to_vec(), op, vec![x.clone()], move |g, _| {
        let xd = px.data();
        let gx = g
            .iter()
            .zip(xd.iter())
            .zip(&saved_out)
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(gx)]
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary("add", self, rhs, |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary("sub", self, rhs, |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary("mul", self, rhs, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary(
            "div",
            self,
            rhs,
            |a, b| a / b,
            |_, b| T::one() / b,
            |a, b| -a / (b * b),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        unary("neg", self, |v| -v, |_, _| -T::one())
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        unary("add_scalar", self, move |v| v + s, |_, _| T::one())
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        unary("mul_scalar", self, move |v| v * s, move |_, _| s)
    }

    pub fn square(&self) -> Tensor<T> {
        unary("square", self, |v| v * v, |x, _| x + x)
    }

    /// Square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&self) -> Tensor<T> {
        unary("sqrt", self, |v| v.sqrt(), |_, y| {
            if y > T::zero() {
                T::lit(0.5) / y
            } else {
                T::zero()
            }
        })
    }

    pub fn exp(&self) -> Tensor<T> {
        unary("exp", self, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        unary("ln", self, |v| v.ln(), |x, _| T::one() / x)
    }

    /// Absolute value with subgradient 0 at the origin.
    pub fn abs(&self) -> Tensor<T> {
        unary("abs", self, |v| v.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        unary("relu", self, |v| v.max(T::zero()), |x, _| {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn tanh(&self) -> Tensor<T> {
        unary("tanh", self, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&self, floor: T) -> Tensor<T> {
        unary("clamp_min", self, move |v| v.max(floor), move |x, _| {
            if x > floor {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::lit(GELU_C);
        let a = T::lit(GELU_A);
        let half = T::lit(0.5);
        unary(
            "gelu",
            self,
            move |x| half * x * (T::one() + (c * (x + a * x * x * x)).tanh()),
            move |x, _| {
                let inner = c * (x + a * x * x * x);
                let t = inner.tanh();
                let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
                half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor<f64> {
        Tensor::param(v.to_vec(), s).unwrap()
    }

    #[test]
    fn broadcast_add_and_reduced_grad() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(&[10.0, 20.0, 30.0], &[3]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        c.sum_all().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = t(&[1.0; 6], &[2, 3]);
        let b = t(&[1.0; 2], &[2]);
        let err = a.mul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn div_grad() {
        let a = t(&[3.0], &[1]);
        let b = t(&[2.0], &[1]);
        a.div(&b).unwrap().sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.5]);
        assert_eq!(b.grad().unwrap(), vec![-0.75]);
    }

    #[test]
    fn sqrt_at_zero_has_finite_grad() {
        let a = t(&[0.0, 4.0], &[2]);
        a.sqrt().sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0, 0.25]);
    }

    #[test]
    fn gelu_reference_values() {
        let x = t(&[0.0, 1.0, -1.0], &[3]);
        let y = x.gelu().to_vec();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 0.841_191_990_607_477).abs() < 1e-12);
        assert!((y[2] + 0.158_808_009_392_523).abs() < 1e-12);
    }
}
