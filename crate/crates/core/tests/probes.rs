use proptest::prelude::*;
use toklab::nn::fingerprint;
use toklab::probes::{estimate_accessibility, token_similarity, ProbeConfig};
use toklab::{DecoderConfig, Module, PixelTokens, Rng, Tensor64, TokenSet, Tokenizer, TokenizerConfig, Variant};

fn brute_force(tokens: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..tokens.len() {
        for j in 0..tokens.len() {
            if i < j {
                let dot: f64 = tokens[i].iter().zip(&tokens[j]).map(|(a, b)| a * b).sum();
                let ni = tokens[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                let nj = tokens[j].iter().map(|a| a * a).sum::<f64>().sqrt();
                total += dot / (ni * nj);
                pairs += 1;
            }
        }
    }
    total / pairs as f64
}

#[test]
fn similarity_matches_brute_force() {
    let mut rng = Rng::new(0);
    let v: Vec<f64> = rng.normal(4 * 7, 0.0, 1.0);
    let set = TokenSet::new(Tensor64::from_vec(v.clone(), &[1, 4, 7]).unwrap(), (2, 2)).unwrap();
    let rows: Vec<Vec<f64>> = v.chunks(7).map(<[f64]>::to_vec).collect();
    assert!((token_similarity(&set).unwrap() - brute_force(&rows)).abs() < 1e-10);
}

proptest! {
    #[test]
    fn similarity_ignores_positive_rescaling(seed in any::<u64>(), scales in prop::collection::vec(0.01f64..100.0, 6)) {
        let mut rng = Rng::new(seed);
        let v: Vec<f64> = rng.normal(6 * 5, 0.0, 1.0);
        let scaled: Vec<f64> = v.iter().enumerate().map(|(i, x)| x * scales[i / 5]).collect();
        let a = token_similarity(&TokenSet::new(Tensor64::from_vec(v, &[1, 6, 5]).unwrap(), (2, 3)).unwrap()).unwrap();
        let b = token_similarity(&TokenSet::new(Tensor64::from_vec(scaled, &[1, 6, 5]).unwrap(), (2, 3)).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }
}

/// Smooth two-blob images in [0, 1].
fn images(seed: u64, n: usize, size: usize) -> Tensor64 {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n * 3 * size * size);
    for _ in 0..n {
        let cx = rng.next_f64() * size as f64;
        let cy = rng.next_f64() * size as f64;
        let col: Vec<f64> = rng.uniform(3, 0.2, 1.0);
        for c in col {
            for y in 0..size {
                for x in 0..size {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    out.push(c * (-d2 / (size as f64)).exp());
                }
            }
        }
    }
    Tensor64::from_vec(out, &[n, 3, size, size]).unwrap()
}

fn probe_cfg() -> ProbeConfig {
    ProbeConfig {
        epochs: 10,
        batch_size: 16,
        decoder: DecoderConfig {
            base_channels: 64,
            multiplier: 1,
            output_scale: 64,
        },
        seed: 3,
        ..ProbeConfig::default()
    }
}

#[test]
fn lossless_tokens_reconstruct_best() {
    let (train, val) = (images(1, 48, 16), images(2, 16, 16));
    let cfg = probe_cfg();
    let identity = estimate_accessibility(&PixelTokens { patch: 4, channels: 3 }, "pixels", &train, &val, &cfg).unwrap();
    let lossy_cfg = TokenizerConfig {
        variant: Variant::Frozen,
        patch_size: 4,
        embed_dim: 1,
        image_size: 16,
        ..TokenizerConfig::default()
    };
    let lossy = Tokenizer::<f64>::new(&mut Rng::new(4), lossy_cfg).unwrap();
    let lossy = estimate_accessibility(&lossy, "frozen-d1", &train, &val, &cfg).unwrap();
    assert!(identity.recon_error < lossy.recon_error, "{} vs {}", identity.recon_error, lossy.recon_error);
    assert!(identity.recon_error >= 0.0);
    assert_eq!(identity.epochs_trained, 10);
}

#[test]
fn probe_is_deterministic_and_read_only() {
    let (train, val) = (images(5, 32, 16), images(6, 8, 16));
    let tcfg = TokenizerConfig {
        patch_size: 4,
        embed_dim: 8,
        image_size: 16,
        ..TokenizerConfig::default()
    };
    let tok = Tokenizer::<f64>::new(&mut Rng::new(7), tcfg).unwrap();
    let before = fingerprint(&tok.named_params());
    let a = estimate_accessibility(&tok, "patchify", &train, &val, &probe_cfg()).unwrap();
    let b = estimate_accessibility(&tok, "patchify", &train, &val, &probe_cfg()).unwrap();
    assert_eq!(fingerprint(&tok.named_params()), before);
    assert_eq!(a, b);
    assert!(tok.named_params().iter().all(|(_, p)| p.grad().is_none()));
    // training loss per epoch never goes up
    for w in a.train_curve.windows(2) {
        assert!(w[1] <= w[0], "{:?}", a.train_curve);
    }
}
