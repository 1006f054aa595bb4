//! Inference wall time of MoTo against pixel-wise self-attention over a
//! ladder of square input sizes.

use std::time::Instant;

use anyhow::Result;
use toklab::attention::pixel_attention;
use toklab::{no_grad, Moto, MotoConfig, Rng, Tensor};

pub const LADDER: [usize; 4] = [16, 32, 64, 128];
pub const CHANNELS: usize = 16;
pub const TRIALS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub size: usize,
    pub moto_ms: f64,
    pub attention_ms: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_ms(trials: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(samples))
}

/// Median forward time of both operators on a `[1, 16, s, s]` f32 input,
/// after one warm-up call.
pub fn measure(sizes: &[usize], trials: usize, seed: u64) -> Result<Vec<TimingRow>> {
    let mut rng = Rng::new(seed);
    let moto = Moto::<f32>::new(&mut rng, CHANNELS, MotoConfig::default())?;
    sizes
        .iter()
        .map(|&s| {
            let x = Tensor::<f32>::from_vec(rng.normal(CHANNELS * s * s, 0.0, 1.0), &[1, CHANNELS, s, s])?;
            let moto_ms = time_ms(trials, || no_grad(|| moto.forward(&x).map(drop).map_err(Into::into)))?;
            let attention_ms = time_ms(trials, || pixel_attention(&x).map(drop).map_err(Into::into))?;
            Ok(TimingRow {
                size: s,
                moto_ms,
                attention_ms,
            })
        })
        .collect()
}

/// Consecutive time ratios; each ladder step has 4x the pixels.
pub fn ratios(rows: &[TimingRow]) -> (Vec<f64>, Vec<f64>) {
    rows.windows(2)
        .map(|w| (w[1].moto_ms / w[0].moto_ms, w[1].attention_ms / w[0].attention_ms))
        .unzip()
}
