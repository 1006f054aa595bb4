//! Token diagnostics: reconstruction error of a decoder trained on frozen
//! tokens, and mean pairwise token cosine similarity.

use crate::error::{Error, Result};
use crate::nn::{fingerprint, Module};
use crate::optim::{OptimConfig, Optimizer};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Tensor};
use crate::tokenizer::{TokenEncoder, TokenSet};
use crate::tokenprop::{rec_loss, rec_target, Decoder, DecoderConfig, RecLoss};

/// Mean cosine similarity over unordered token pairs, averaged over the
/// batch. Zero-norm tokens count as similarity 0.
pub fn token_similarity<T: Scalar>(tokens: &TokenSet<T>) -> Result<f64> {
    let (b, n, d) = (tokens.batch(), tokens.len(), tokens.dim());
    if n < 2 {
        return Err(Error::invalid("token_similarity", format!("need at least 2 tokens, got {n}")));
    }
    let data = tokens.tokens.data();
    let mut total = 0.0;
    for s in 0..b {
        let rows: Vec<&[T]> = (0..n).map(|i| &data[(s * n + i) * d..][..d]).collect();
        let norms: Vec<f64> = rows
            .iter()
            .map(|r| r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
            .collect();
        let mut acc = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                if norms[i] > 0.0 && norms[j] > 0.0 {
                    let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    acc += dot / (norms[i] * norms[j]);
                }
            }
        }
        total += acc / (n * (n - 1) / 2) as f64;
    }
    Ok(total / b.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub decoder: DecoderConfig,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            betas: (0.5, 0.999),
            decoder: DecoderConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub tokenizer_id: String,
    /// Mean L2 reconstruction error on the held-out images.
    pub recon_error: f64,
    pub token_similarity: f64,
    pub epochs_trained: usize,
    pub seed: u64,
    /// Mean training loss per epoch.
    pub train_curve: Vec<f64>,
}

/// Encodes `images` in batches without recording gradients.
pub fn encode_all<T: Scalar, E: TokenEncoder<T> + ?Sized>(
    encoder: &E,
    images: &Tensor<T>,
    batch: usize,
) -> Result<TokenSet<T>> {
    let n = images.dim(0);
    if n == 0 {
        return Err(Error::invalid("encode_all", "empty image set"));
    }
    no_grad(|| {
        let mut parts = Vec::new();
        let mut grid = (0, 0);
        for start in (0..n).step_by(batch.max(1)) {
            let len = batch.max(1).min(n - start);
            let set = encoder.encode(&images.narrow(0, start, len)?)?;
            grid = set.grid;
            parts.push(set.tokens);
        }
        TokenSet::new(Tensor::concat(&parts, 0)?, grid)
    })
}

fn select<T: Scalar>(set: &TokenSet<T>, idx: &[usize]) -> Result<TokenSet<T>> {
    TokenSet::new(set.tokens.index_select(0, idx)?, set.grid)
}

/// Trains a fresh decoder with L2 loss on tokens of `train` and reports its
/// error on `val`. The encoder is only read.
pub fn estimate_accessibility<T: Scalar, E: TokenEncoder<T> + ?Sized>(
    encoder: &E,
    tokenizer_id: &str,
    train: &Tensor<T>,
    val: &Tensor<T>,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let before = fingerprint(&encoder.named_params());
    let scale = cfg.decoder.output_scale;
    let bs = cfg.batch_size.max(1);
    let train_tokens = encode_all(encoder, train, bs)?;
    let val_tokens = encode_all(encoder, val, bs)?;
    let train_target = rec_target(train, scale)?;
    let val_target = rec_target(val, scale)?;

    let rng = Rng::new(cfg.seed);
    let decoder = Decoder::new(&mut rng.fork(0), encoder.token_dim(), cfg.decoder.clone())?;
    let mut opt = Optimizer::new(decoder.named_params(), OptimConfig::adamw(cfg.lr, cfg.betas, 0.0))?;

    let n = train.dim(0);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.fork(1 + epoch as u64).shuffle(&mut order);
        let mut sum = 0.0;
        for idx in order.chunks(bs) {
            opt.zero_grad();
            let pred = decoder.forward(&select(&train_tokens, idx)?)?;
            let loss = rec_loss(&pred, &train_target.index_select(0, idx)?, RecLoss::L2)?;
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(Error::invalid(
                    "estimate_accessibility",
                    format!("non-finite probe loss at epoch {epoch} for `{tokenizer_id}`"),
                ));
            }
            loss.backward()?;
            opt.step()?;
            sum += value * idx.len() as f64;
        }
        curve.push(sum / n as f64);
    }

    let m = val.dim(0);
    let recon_error = no_grad(|| -> Result<f64> {
        let mut sum = 0.0;
        for start in (0..m).step_by(bs) {
            let len = bs.min(m - start);
            let idx: Vec<usize> = (start..start + len).collect();
            let pred = decoder.forward(&select(&val_tokens, &idx)?)?;
            let loss = rec_loss(&pred, &val_target.narrow(0, start, len)?, RecLoss::L2)?;
            sum += loss.item().as_f64() * len as f64;
        }
        Ok(sum / m as f64)
    })?;
    let similarity = token_similarity(&val_tokens)?;

    if fingerprint(&encoder.named_params()) != before {
        return Err(Error::invalid("estimate_accessibility", "probed tokenizer was modified"));
    }
    Ok(ProbeReport {
        tokenizer_id: tokenizer_id.to_string(),
        recon_error,
        token_similarity: similarity,
        epochs_trained: cfg.epochs,
        seed: cfg.seed,
        train_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_orthogonal_tokens() {
        let same = TokenSet::new(Tensor::<f64>::from_vec(vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0], &[1, 3, 2]).unwrap(), (1, 3)).unwrap();
        assert!((token_similarity(&same).unwrap() - 1.0).abs() < 1e-12);
        let orth = TokenSet::new(Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 3.0], &[1, 2, 2]).unwrap(), (1, 2)).unwrap();
        assert_eq!(token_similarity(&orth).unwrap(), 0.0);
        let zero = TokenSet::new(Tensor::<f64>::from_vec(vec![0.0, 0.0, 1.0, 1.0], &[1, 2, 2]).unwrap(), (1, 2)).unwrap();
        assert_eq!(token_similarity(&zero).unwrap(), 0.0);
    }

    #[test]
    fn single_token_is_rejected() {
        let one = TokenSet::new(Tensor::<f64>::ones(&[2, 1, 3]), (1, 1)).unwrap();
        assert!(token_similarity(&one).is_err());
    }
}
