use toklab::tokenprop::{rec_loss, tokenprop_loss, Decoder, DecoderConfig, LossWeights, RecLoss};
use toklab::{Module, Rng, Tensor64, TokenEncoder, TokenSet, Tokenizer, TokenizerConfig, Vit, VitConfig};

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_vec(rng.normal(shape.iter().product(), 0.0, 1.0), shape).unwrap()
}

fn tiny_decoder() -> DecoderConfig {
    DecoderConfig {
        base_channels: 16,
        multiplier: 1,
        output_scale: 64,
    }
}

#[test]
fn default_decoder_emits_64px_rgb() {
    let mut rng = Rng::new(0);
    let dec = Decoder::<f64>::new(&mut rng, 8, DecoderConfig::default()).unwrap();
    let set = TokenSet::new(randn(&mut rng, &[1, 16, 8]), (4, 4)).unwrap();
    assert_eq!(dec.forward(&set).unwrap().shape(), &[1, 3, 64, 64]);
}

#[test]
fn fourteen_grid_is_resized_to_sixteen() {
    let mut rng = Rng::new(1);
    let dec = Decoder::<f64>::new(&mut rng, 6, tiny_decoder()).unwrap();
    let set = TokenSet::new(randn(&mut rng, &[1, 196, 6]), (14, 14)).unwrap();
    assert_eq!(dec.forward(&set).unwrap().shape(), &[1, 3, 64, 64]);
}

#[test]
fn larger_scales_add_stages() {
    let mut rng = Rng::new(2);
    let cfg = DecoderConfig {
        output_scale: 128,
        ..tiny_decoder()
    };
    let dec = Decoder::<f64>::new(&mut rng, 4, cfg).unwrap();
    let set = TokenSet::new(randn(&mut rng, &[1, 4, 4]), (2, 2)).unwrap();
    assert_eq!(dec.forward(&set).unwrap().shape(), &[1, 3, 128, 128]);
}

#[test]
fn zero_tokens_and_biases_give_black_image() {
    let dec = Decoder::<f64>::new(&mut Rng::new(3), 8, tiny_decoder()).unwrap();
    let set = TokenSet::new(Tensor64::zeros(&[2, 16, 8]), (4, 4)).unwrap();
    assert!(dec.forward(&set).unwrap().to_vec().iter().all(|v| *v == 0.0));
}

#[test]
fn conv_weights_grow_quadratically_with_width() {
    let conv_weights = |m: usize| -> usize {
        let cfg = DecoderConfig {
            base_channels: 256,
            multiplier: m,
            output_scale: 64,
        };
        Decoder::<f64>::new(&mut Rng::new(0), 4, cfg)
            .unwrap()
            .named_params()
            .iter()
            .filter(|(n, p)| n.ends_with("weight") && p.rank() == 4 && p.dim(2) == 3)
            .map(|(_, p)| p.numel())
            .sum()
    };
    let ratio = conv_weights(2) as f64 / conv_weights(1) as f64;
    assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
}

#[test]
fn rec_loss_matches_scalar_loop() {
    let mut rng = Rng::new(4);
    let a = randn(&mut rng, &[2, 3, 4, 5]);
    let b = randn(&mut rng, &[2, 3, 4, 5]);
    let (av, bv) = (a.to_vec(), b.to_vec());
    let n = av.len() as f64;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for i in 0..av.len() {
        l1 += (av[i] - bv[i]).abs();
        l2 += (av[i] - bv[i]) * (av[i] - bv[i]);
    }
    assert!((rec_loss(&a, &b, RecLoss::L1).unwrap().item() - l1 / n).abs() < 1e-10);
    assert!((rec_loss(&a, &b, RecLoss::L2).unwrap().item() - l2 / n).abs() < 1e-10);
}

struct Model {
    tok: Tokenizer<f64>,
    vit: Vit<f64>,
    dec: Decoder<f64>,
}

fn model(seed: u64) -> Model {
    let mut rng = Rng::new(seed);
    let tcfg = TokenizerConfig {
        patch_size: 4,
        embed_dim: 8,
        image_size: 16,
        ..TokenizerConfig::default()
    };
    let vcfg = VitConfig {
        depth: 1,
        heads: 2,
        embed_dim: 8,
        mlp_ratio: 2,
        num_classes: 3,
        ..VitConfig::default()
    };
    Model {
        tok: Tokenizer::new(&mut rng, tcfg).unwrap(),
        vit: Vit::new(&mut rng, vcfg).unwrap(),
        dec: Decoder::new(&mut rng, 8, tiny_decoder()).unwrap(),
    }
}

fn image(seed: u64) -> Tensor64 {
    let mut rng = Rng::new(seed);
    Tensor64::from_vec(rng.uniform(2 * 3 * 256, 0.0, 1.0), &[2, 3, 16, 16]).unwrap()
}

fn losses(m: &Model, x: &Tensor64, lambda: f64) -> toklab::tokenprop::TokenPropLoss<f64> {
    let t = m.tok.encode(x).unwrap();
    let logits = m.vit.forward(&t).unwrap();
    let recon = m.dec.forward(&t).unwrap();
    let w = LossWeights {
        lambda,
        kind: RecLoss::L2,
    };
    tokenprop_loss(&logits, &[0, 2], &recon, x, w).unwrap()
}

#[test]
fn total_combines_task_and_weighted_rec() {
    let m = model(5);
    let x = image(6);
    let l0 = losses(&m, &x, 0.0);
    assert_eq!(l0.total.item(), l0.task.item());
    let l1 = losses(&m, &x, 1.0);
    assert!((l1.total.item() - (l1.task.item() + l1.rec.item())).abs() < 1e-12);
    // d total / d lambda equals rec at fixed parameters
    let h = 1e-3;
    let slope = (losses(&m, &x, 0.2 + h).total.item() - losses(&m, &x, 0.2 - h).total.item()) / (2.0 * h);
    assert!((slope - l1.rec.item()).abs() < 1e-9);
    let neg = LossWeights {
        lambda: -1.0,
        kind: RecLoss::L1,
    };
    let t = m.tok.encode(&x).unwrap();
    assert!(tokenprop_loss(&m.vit.forward(&t).unwrap(), &[0, 1], &m.dec.forward(&t).unwrap(), &x, neg).is_err());
}

#[test]
fn reconstruction_term_changes_tokenizer_gradient() {
    let x = image(7);
    let grad = |lambda: f64| {
        let m = model(8);
        losses(&m, &x, lambda).total.backward().unwrap();
        m.tok.named_params().iter().flat_map(|(_, p)| p.grad().unwrap()).collect::<Vec<f64>>()
    };
    let (g0, g1) = (grad(0.0), grad(0.5));
    let diff = g0.iter().zip(&g1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-8, "max diff {diff}");
}

#[test]
fn reconstruction_gradient_skips_the_body() {
    let m = model(9);
    let x = image(10);
    // task term zeroed: optimize only the reconstruction path
    losses(&m, &x, 1.0).rec.backward().unwrap();
    for (name, p) in m.vit.named_params() {
        let g = p.grad().unwrap_or_default();
        assert!(g.iter().all(|v| *v == 0.0), "body param {name} got gradient");
    }
    let nonzero = |params: toklab::NamedParams<f64>| {
        params
            .iter()
            .any(|(_, p)| p.grad().map(|g| g.iter().any(|v| *v != 0.0)).unwrap_or(false))
    };
    assert!(nonzero(m.tok.named_params()));
    assert!(nonzero(m.dec.named_params()));
}
