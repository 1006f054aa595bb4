//! SGD with momentum and AdamW over named parameter leaves.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::NamedParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    AdamW,
}

impl fmt::Display for OptimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimKind::Sgd => "sgd",
            OptimKind::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimKind::Sgd),
            "adamw" => Ok(OptimKind::AdamW),
            _ => Err(Error::invalid("optim", format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimKind::AdamW,
            lr: 1e-3,
            momentum: 0.9,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: None,
        }
    }
}

impl OptimConfig {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimKind::Sgd,
            lr,
            momentum,
            weight_decay,
            ..Self::default()
        }
    }

    pub fn adamw(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            kind: OptimKind::AdamW,
            lr,
            betas,
            weight_decay,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("optim", msg));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas ({b1}, {b2}) outside [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("weight decay must be non-negative and eps positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad clip {c} must be positive"));
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base` over `warmup` steps, then cosine decay to
/// `min_lr` at `total`.
pub fn warmup_cosine(base: f64, min_lr: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    min_lr + 0.5 * (base - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub updated: usize,
}

#[derive(Debug)]
pub struct Optimizer<T: Scalar> {
    pub cfg: OptimConfig,
    params: NamedParams<T>,
    /// First-moment / momentum buffers, allocated on first update.
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(params: NamedParams<T>, cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        let n = params.len();
        Ok(Self {
            cfg,
            params,
            m: vec![None; n],
            v: vec![None; n],
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn params(&self) -> &NamedParams<T> {
        &self.params
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// Applies one update to every trainable parameter holding a gradient.
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self) -> Result<StepInfo> {
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.params.len());
        let mut sq = 0.0f64;
        for (name, p) in &self.params {
            let g = if p.requires_grad() { p.grad() } else { None };
            if let Some(g) = &g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGrad(name.clone()));
                }
                sq += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
            grads.push(g);
        }
        let norm = sq.sqrt();
        let clip = match self.cfg.grad_clip {
            Some(max) if norm > max => T::lit(max / (norm + 1e-6)),
            _ => T::one(),
        };
        self.steps += 1;
        let mut updated = 0;
        for (i, g) in grads.into_iter().enumerate() {
            let Some(mut g) = g else { continue };
            if clip != T::one() {
                g.iter_mut().for_each(|v| *v *= clip);
            }
            let p = self.params[i].1.clone();
            match self.cfg.kind {
                OptimKind::Sgd => self.sgd_update(i, &p, g)?,
                OptimKind::AdamW => self.adamw_update(i, &p, g)?,
            }
            updated += 1;
        }
        Ok(StepInfo {
            grad_norm: norm,
            updated,
        })
    }

    fn sgd_update(&mut self, i: usize, p: &Tensor<T>, mut g: Vec<T>) -> Result<()> {
        let lr = T::lit(self.cfg.lr);
        let wd = T::lit(self.cfg.weight_decay);
        let mu = T::lit(self.cfg.momentum);
        if wd != T::zero() {
            g.iter_mut().zip(p.data().iter()).for_each(|(g, &w)| *g += wd * w);
        }
        let dir = if self.cfg.momentum > 0.0 {
            match &mut self.m[i] {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, &g)| *b = mu * *b + g),
                slot @ None => *slot = Some(g.clone()),
            }
            self.m[i].as_deref().expect("momentum buffer")
        } else {
            &g
        };
        p.update_data(|w| w.iter_mut().zip(dir).for_each(|(w, &d)| *w -= lr * d))
    }

    fn adamw_update(&mut self, i: usize, p: &Tensor<T>, g: Vec<T>) -> Result<()> {
        let c = &self.cfg;
        let (b1, b2) = (T::lit(c.betas.0), T::lit(c.betas.1));
        let lr = T::lit(c.lr);
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let t = self.steps as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let eps = T::lit(c.eps);
        let n = g.len();
        let m = self.m[i].get_or_insert_with(|| vec![T::zero(); n]);
        let v = self.v[i].get_or_insert_with(|| vec![T::zero(); n]);
        p.update_data(|w| {
            for k in 0..n {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                w[k] = w[k] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        })
    }

    /// Moment buffers and the step counter as named tensors, for checkpoints.
    pub fn state(&self) -> NamedParams<T> {
        let mut out = vec![("step".to_string(), Tensor::scalar(T::lit(self.steps as f64)))];
        for (i, (name, p)) in self.params.iter().enumerate() {
            for (tag, buf) in [("m", &self.m[i]), ("v", &self.v[i])] {
                if let Some(b) = buf {
                    out.push((format!("{tag}.{name}"), Tensor::from_vec(b.clone(), p.shape()).expect("state shape")));
                }
            }
        }
        out
    }

    /// Restores buffers written by [`state`](Self::state).
    pub fn load_state(&mut self, state: &NamedParams<T>) -> Result<()> {
        let step = state
            .iter()
            .find(|(n, _)| n == "step")
            .ok_or_else(|| Error::Format("optimizer state lacks `step`".into()))?;
        self.steps = step.1.item().as_f64() as u64;
        for (i, (name, p)) in self.params.iter().enumerate() {
            for (tag, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("{tag}.{name}");
                *slot = match state.iter().find(|(n, _)| *n == key) {
                    Some((_, t)) if t.shape() == p.shape() => Some(t.to_vec()),
                    Some((_, t)) => return Err(Error::shape("load_state", t.shape(), p.shape())),
                    None => None,
                };
            }
        }
        Ok(())
    }
}
