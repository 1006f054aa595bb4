//! Catalog of finite-difference gradient checks covering every
//! differentiable op and the composed model paths.
//!
//! Each case builds its leaves from a seed and returns a closure producing a
//! tensor; the runner contracts that tensor with fixed random weights so the
//! checked scalar depends on every output element.

use crate::error::Result;
use crate::gradcheck::{GradChecker, GradReport};
use crate::moto::{spatial_modulation, Moto, MotoConfig, Partition, SemanticLayout};
use crate::nn::Module;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokenizer::{replicate_pad, TokenEncoder, TokenSet, Tokenizer, TokenizerConfig, Variant};
use crate::tokenprop::{tokenprop_loss, Decoder, DecoderConfig, LossWeights, RecLoss};
use crate::vit::{Vit, VitConfig};

type T64 = Tensor<f64>;
type Build = fn(&mut Rng) -> Result<(Vec<T64>, Box<dyn Fn() -> Result<T64>>)>;

#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    /// Composed model path rather than a single op.
    pub composed: bool,
    /// Coordinates sampled per leaf; `None` checks all of them.
    pub max_coords: Option<usize>,
    build: Build,
}

impl std::fmt::Debug for GradCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradCase").field("name", &self.name).finish()
    }
}

impl GradCase {
    /// Runs the case for one seed with central differences of step `eps`.
    pub fn run(&self, seed: u64, eps: f64) -> Result<GradReport> {
        let mut rng = Rng::new(seed);
        let (leaves, f) = (self.build)(&mut rng)?;
        let shape = f()?.shape().to_vec();
        let n = shape.iter().product();
        let w = T64::from_vec(rng.normal(n, 0.0, 1.0), &shape)?;
        let checker = GradChecker {
            eps,
            max_coords_per_leaf: self.max_coords,
            seed,
        };
        let report = checker.check(|| Ok(f()?.mul(&w)?.sum_all()), &leaves)?;
        Ok(report.expect("every case has a tracked leaf"))
    }
}

fn p(rng: &mut Rng, shape: &[usize]) -> T64 {
    let n = shape.iter().product();
    T64::param(rng.normal(n, 0.0, 1.0), shape).expect("shape")
}

fn pos(rng: &mut Rng, shape: &[usize]) -> T64 {
    let n = shape.iter().product();
    T64::param(rng.uniform(n, 0.5, 2.0), shape).expect("shape")
}

type Cased = Result<(Vec<T64>, Box<dyn Fn() -> Result<T64>>)>;

fn unary(rng: &mut Rng, positive: bool, f: fn(&T64) -> Result<T64>) -> Cased {
    let x = if positive { pos(rng, &[3, 4]) } else { p(rng, &[3, 4]) };
    let xc = x.clone();
    Ok((vec![x], Box::new(move || f(&xc))))
}

fn binary(rng: &mut Rng, f: fn(&T64, &T64) -> Result<T64>) -> Cased {
    let a = p(rng, &[2, 3, 4]);
    let b = pos(rng, &[3, 1]);
    let (ac, bc) = (a.clone(), b.clone());
    Ok((vec![a, b], Box::new(move || f(&ac, &bc))))
}

fn with_params<M: Module<f64>>(m: &M, extra: &[T64]) -> Vec<T64> {
    let mut v: Vec<T64> = extra.to_vec();
    v.extend(m.named_params().into_iter().map(|(_, t)| t));
    v
}

/// Randomizes MoTo's modulation parameters so every term is exercised.
fn perturb_moto(rng: &mut Rng, m: &Moto<f64>) -> Result<()> {
    m.alpha.set_data(&rng.normal(m.alpha.numel(), 0.0, 0.5))?;
    m.beta.set_data(&rng.normal(m.beta.numel(), 1.0, 0.5))?;
    m.u.set_data(&rng.normal(m.u.numel(), 0.0, 1.0))
}

fn moto_case(rng: &mut Rng, partition: Partition) -> Cased {
    let cfg = MotoConfig {
        entities: 2,
        kq_dim: 4,
        partition,
        ..MotoConfig::default()
    };
    let m = Moto::new(rng, 2, cfg)?;
    perturb_moto(rng, &m)?;
    let x = p(rng, &[1, 2, 4, 4]);
    let leaves = with_params(&m, std::slice::from_ref(&x));
    Ok((leaves, Box::new(move || m.forward(&x))))
}

fn tokenizer_case(rng: &mut Rng, variant: Variant, moto: bool) -> Cased {
    let cfg = TokenizerConfig {
        variant,
        patch_size: 4,
        embed_dim: 8,
        image_size: 8,
        in_channels: 3,
        inter_heads: 2,
        moto: moto.then(|| MotoConfig {
            entities: 2,
            kq_dim: 4,
            ..MotoConfig::default()
        }),
    };
    let t = Tokenizer::new(rng, cfg)?;
    if let Some(m) = &t.moto {
        perturb_moto(rng, m)?;
    }
    let x = p(rng, &[2, 3, 8, 8]);
    let leaves = with_params(&t, std::slice::from_ref(&x));
    Ok((leaves, Box::new(move || Ok(t.encode(&x)?.tokens))))
}

fn vit_case(rng: &mut Rng, moto_blocks: Vec<usize>) -> Cased {
    let cfg = VitConfig {
        depth: 1,
        heads: 2,
        embed_dim: 8,
        mlp_ratio: 2,
        num_classes: 3,
        moto_blocks,
        moto: MotoConfig {
            entities: 2,
            kq_dim: 4,
            ..MotoConfig::default()
        },
        ..VitConfig::default()
    };
    let v = Vit::new(rng, cfg)?;
    for (_, m) in &v.motos {
        perturb_moto(rng, m)?;
    }
    let x = p(rng, &[2, 4, 8]);
    let leaves = with_params(&v, std::slice::from_ref(&x));
    Ok((leaves, Box::new(move || v.forward(&TokenSet::new(x.clone(), (2, 2))?))))
}

fn decoder_case(rng: &mut Rng) -> Cased {
    let cfg = DecoderConfig {
        base_channels: 16,
        multiplier: 1,
        output_scale: 64,
    };
    let d = Decoder::new(rng, 8, cfg)?;
    let x = p(rng, &[1, 4, 8]);
    let leaves = with_params(&d, std::slice::from_ref(&x));
    Ok((leaves, Box::new(move || d.forward(&TokenSet::new(x.clone(), (2, 2))?))))
}

fn tokenprop_case(rng: &mut Rng) -> Cased {
    let tcfg = TokenizerConfig {
        patch_size: 4,
        embed_dim: 8,
        image_size: 8,
        ..TokenizerConfig::default()
    };
    let tok = Tokenizer::new(rng, tcfg)?;
    let vit = Vit::new(
        rng,
        VitConfig {
            depth: 1,
            heads: 2,
            embed_dim: 8,
            mlp_ratio: 2,
            num_classes: 3,
            ..VitConfig::default()
        },
    )?;
    let dec = Decoder::new(
        rng,
        8,
        DecoderConfig {
            base_channels: 16,
            multiplier: 1,
            output_scale: 64,
        },
    )?;
    let x = T64::from_vec(rng.uniform(2 * 3 * 64, 0.0, 1.0), &[2, 3, 8, 8])?;
    let mut leaves = with_params(&tok, &[]);
    leaves.extend(with_params(&vit, &[]));
    leaves.extend(with_params(&dec, &[]));
    let weights = LossWeights {
        lambda: 0.5,
        kind: RecLoss::L2,
    };
    Ok((
        leaves,
        Box::new(move || {
            let tokens = tok.encode(&x)?;
            let logits = vit.forward(&tokens)?;
            let recon = dec.forward(&tokens)?;
            Ok(tokenprop_loss(&logits, &[0, 2], &recon, &x, weights)?.total)
        }),
    ))
}

const fn op(name: &'static str, build: Build) -> GradCase {
    GradCase {
        name,
        composed: false,
        max_coords: None,
        build,
    }
}

const fn path(name: &'static str, max_coords: usize, build: Build) -> GradCase {
    GradCase {
        name,
        composed: true,
        max_coords: Some(max_coords),
        build,
    }
}

pub fn cases() -> Vec<GradCase> {
    vec![
        op("add", |r| binary(r, |a, b| a.add(b))),
        op("sub", |r| binary(r, |a, b| a.sub(b))),
        op("mul", |r| binary(r, |a, b| a.mul(b))),
        op("div", |r| binary(r, |a, b| a.div(b))),
        op("neg", |r| unary(r, false, |x| Ok(x.neg()))),
        op("add_scalar", |r| unary(r, false, |x| Ok(x.add_scalar(0.3)))),
        op("mul_scalar", |r| unary(r, false, |x| Ok(x.mul_scalar(-1.7)))),
        op("square", |r| unary(r, false, |x| Ok(x.square()))),
        op("sqrt", |r| unary(r, true, |x| Ok(x.sqrt()))),
        op("exp", |r| unary(r, false, |x| Ok(x.exp()))),
        op("ln", |r| unary(r, true, |x| Ok(x.ln()))),
        op("abs", |r| unary(r, false, |x| Ok(x.abs()))),
        op("relu", |r| unary(r, false, |x| Ok(x.relu()))),
        op("tanh", |r| unary(r, false, |x| Ok(x.tanh()))),
        op("clamp_min", |r| unary(r, false, |x| Ok(x.clamp_min(0.1)))),
        op("gelu", |r| unary(r, false, |x| Ok(x.gelu()))),
        op("sum_all", |r| unary(r, false, |x| Ok(x.sum_all()))),
        op("mean_all", |r| unary(r, false, |x| Ok(x.mean_all()))),
        op("sum_axis", |r| unary(r, false, |x| x.sum_axis(0, false))),
        op("mean_axis", |r| unary(r, false, |x| x.mean_axis(-1, true))),
        op("var_axis", |r| unary(r, false, |x| x.var_axis(1, false))),
        op("reshape", |r| unary(r, false, |x| x.reshape(&[2, 6]))),
        op("permute", |r| {
            let x = p(r, &[2, 3, 4]);
            let xc = x.clone();
            Ok((vec![x], Box::new(move || xc.permute(&[2, 0, 1]))))
        }),
        op("transpose", |r| unary(r, false, |x| x.transpose(0, 1))),
        op("concat", |r| binary(r, |a, b| T64::concat(&[a.reshape(&[6, 4])?, b.reshape(&[1, 3])?.index_select(1, &[0, 1, 2, 0])?], 0))),
        op("narrow", |r| unary(r, false, |x| x.narrow(1, 1, 2))),
        op("index_select", |r| unary(r, false, |x| x.index_select(1, &[3, 0, 3, 1]))),
        op("matmul", |r| {
            let a = p(r, &[2, 3, 4]);
            let b = p(r, &[4, 5]);
            let (ac, bc) = (a.clone(), b.clone());
            Ok((vec![a, b], Box::new(move || ac.matmul(&bc))))
        }),
        op("matmul_batched", |r| {
            let a = p(r, &[2, 3, 4]);
            let b = p(r, &[2, 4, 2]);
            let (ac, bc) = (a.clone(), b.clone());
            Ok((vec![a, b], Box::new(move || ac.matmul(&bc))))
        }),
        op("matmul_t", |r| {
            let a = p(r, &[2, 3, 4]);
            let b = p(r, &[2, 5, 4]);
            let (ac, bc) = (a.clone(), b.clone());
            Ok((vec![a, b], Box::new(move || ac.matmul_t(&bc))))
        }),
        op("conv2d", |r| {
            let x = p(r, &[2, 2, 5, 5]);
            let w = p(r, &[3, 2, 3, 3]);
            let b = p(r, &[3]);
            let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
            Ok((vec![x, w, b], Box::new(move || xc.conv2d(&wc, Some(&bc), 2, 1))))
        }),
        op("conv2d_pointwise", |r| {
            let x = p(r, &[1, 3, 3, 4]);
            let w = p(r, &[2, 3, 1, 1]);
            let (xc, wc) = (x.clone(), w.clone());
            Ok((vec![x, w], Box::new(move || xc.conv2d(&wc, None, 1, 0))))
        }),
        op("softmax", |r| unary(r, false, |x| x.softmax(-1, 0.7))),
        op("cross_entropy", |r| unary(r, false, |x| x.cross_entropy(&[1, 3, 0]))),
        op("layer_norm", |r| {
            let x = p(r, &[3, 5]);
            let w = p(r, &[5]);
            let b = p(r, &[5]);
            let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
            Ok((vec![x, w, b], Box::new(move || xc.layer_norm(Some(&wc), Some(&bc), 1e-6))))
        }),
        op("bilinear_up", |r| {
            let x = p(r, &[1, 2, 3, 3]);
            let xc = x.clone();
            Ok((vec![x], Box::new(move || xc.bilinear_resize(7, 5))))
        }),
        op("bilinear_down", |r| {
            let x = p(r, &[1, 2, 6, 6]);
            let xc = x.clone();
            Ok((vec![x], Box::new(move || xc.bilinear_resize(4, 3))))
        }),
        op("pixel_shuffle", |r| {
            let x = p(r, &[1, 8, 2, 3]);
            let xc = x.clone();
            Ok((vec![x], Box::new(move || xc.pixel_shuffle(2))))
        }),
        op("pixel_unshuffle", |r| {
            let x = p(r, &[1, 2, 4, 6]);
            let xc = x.clone();
            Ok((vec![x], Box::new(move || xc.pixel_unshuffle(2))))
        }),
        op("replicate_pad", |r| {
            let x = p(r, &[1, 2, 3, 3]);
            let xc = x.clone();
            Ok((vec![x], Box::new(move || replicate_pad(&xc, 2))))
        }),
        op("spatial_modulation", |r| {
            let x = p(r, &[2, 3, 3, 3]);
            let z = p(r, &[2, 2, 3, 3]);
            let a = p(r, &[2, 3]);
            let b = p(r, &[2, 3]);
            let (xc, zc, ac, bc) = (x.clone(), z.clone(), a.clone(), b.clone());
            Ok((
                vec![x, z, a, b],
                Box::new(move || {
                    let layout = SemanticLayout { probs: zc.softmax(1, 1.0)? };
                    spatial_modulation(&xc, &layout, &ac, &bc, 1e-5)
                }),
            ))
        }),
        path("moto_forward", 16, |r| moto_case(r, Partition::Soft)),
        path("moto_hard", 16, |r| moto_case(r, Partition::Hard)),
        path("tokenizer_patchify", 12, |r| tokenizer_case(r, Variant::Patchify, false)),
        path("tokenizer_intra", 12, |r| tokenizer_case(r, Variant::Intra, false)),
        path("tokenizer_intra_local", 12, |r| tokenizer_case(r, Variant::IntraLocal, false)),
        path("tokenizer_intra_local_inter", 12, |r| tokenizer_case(r, Variant::IntraLocalInter, false)),
        path("tokenizer_frozen", 12, |r| tokenizer_case(r, Variant::Frozen, false)),
        path("tokenizer_moto", 12, |r| tokenizer_case(r, Variant::Patchify, true)),
        path("vit_depth1", 12, |r| vit_case(r, Vec::new())),
        path("vit_moto_block", 12, |r| vit_case(r, vec![0])),
        path("decoder", 8, decoder_case),
        path("tokenprop_objective", 6, tokenprop_case),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = cases().iter().map(|c| c.name).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
