//! Central-difference gradient checking.
//!
//! The error for one coordinate is `|analytic − numeric| / max(1, |analytic|, |numeric|)`
//! and a check reports the maximum over all checked coordinates.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone)]
pub struct GradChecker {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per leaf.
    pub max_coords_per_leaf: Option<usize>,
    pub seed: u64,
}

impl Default for GradChecker {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_leaf: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(leaf index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
}

fn eval_scalar<T: Scalar>(f: &impl Fn() -> Result<Tensor<T>>) -> Result<f64> {
    let y = f()?;
    if y.numel() != 1 {
        return Err(Error::invalid("grad_check", format!("function must be scalar, got {:?}", y.shape())));
    }
    let v = y.item().as_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

impl GradChecker {
    pub fn with_eps(eps: f64) -> Self {
        Self {
            eps,
            ..Self::default()
        }
    }

    /// Compares the tape gradient of scalar `f` with central differences for
    /// each tracked leaf. Leaves are perturbed in place and restored. Leaves
    /// that do not require a gradient are skipped; `None` when none do.
    pub fn check<T: Scalar>(
        &self,
        f: impl Fn() -> Result<Tensor<T>>,
        leaves: &[Tensor<T>],
    ) -> Result<Option<GradReport>> {
        if leaves.iter().any(|l| !l.is_leaf()) {
            return Err(Error::invalid("grad_check", "can only perturb leaf tensors"));
        }
        let tracked: Vec<(usize, &Tensor<T>)> =
            leaves.iter().enumerate().filter(|(_, l)| l.requires_grad()).collect();
        if tracked.is_empty() {
            return Ok(None);
        }
        for (_, l) in &tracked {
            l.zero_grad();
        }
        let y = f()?;
        if y.numel() != 1 || !y.all_finite() {
            return Err(Error::invalid("grad_check", "function must return a finite scalar"));
        }
        y.backward()?;
        drop(y);

        let mut rng = Rng::new(self.seed);
        let mut report = GradReport {
            max_rel_error: 0.0,
            coords_checked: 0,
            worst: (0, 0),
        };
        let eps = T::lit(self.eps);
        for (li, leaf) in tracked {
            let analytic = leaf.grad().unwrap_or_else(|| vec![T::zero(); leaf.numel()]);
            leaf.zero_grad();
            let mut coords: Vec<usize> = (0..leaf.numel()).collect();
            if let Some(k) = self.max_coords_per_leaf {
                if k < coords.len() {
                    rng.shuffle(&mut coords);
                    coords.truncate(k);
                    coords.sort_unstable();
                }
            }
            for i in coords {
                let orig = leaf.data()[i];
                leaf.update_data(|d| d[i] = orig + eps)?;
                let plus = no_grad(|| eval_scalar(&f));
                leaf.update_data(|d| d[i] = orig - eps)?;
                let minus = no_grad(|| eval_scalar(&f));
                leaf.update_data(|d| d[i] = orig)?;
                let numeric = (plus? - minus?) / (2.0 * self.eps);
                let a = analytic[i].as_f64();
                let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
                report.coords_checked += 1;
                if err > report.max_rel_error || report.coords_checked == 1 {
                    report.max_rel_error = err;
                    report.worst = (li, i);
                }
            }
        }
        Ok(Some(report))
    }
}

/// Maximum relative error of the gradient of scalar `f` w.r.t. leaf `x`;
/// `None` when `x` does not require a gradient.
pub fn grad_check<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    eps: f64,
) -> Result<Option<f64>> {
    let report = GradChecker::with_eps(eps).check(|| f(x), std::slice::from_ref(x))?;
    Ok(report.map(|r| r.max_rel_error))
}
