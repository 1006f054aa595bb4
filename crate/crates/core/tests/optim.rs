use toklab::optim::{OptimConfig, Optimizer};
use toklab::{Error, Rng, Tensor64};

fn param(values: &[f64]) -> Tensor64 {
    Tensor64::param(values.to_vec(), &[values.len()]).unwrap()
}

/// Sets `p.grad = g` through the tape.
fn set_grad(p: &Tensor64, g: &[f64]) {
    p.zero_grad();
    let w = Tensor64::from_vec(g.to_vec(), &[g.len()]).unwrap();
    p.mul(&w).unwrap().sum_all().backward().unwrap();
}

#[test]
fn plain_sgd_is_gradient_descent() {
    let p = param(&[1.0, -2.0, 0.5]);
    let mut opt = Optimizer::new(vec![("p".into(), p.clone())], OptimConfig::sgd(0.1, 0.0, 0.0)).unwrap();
    set_grad(&p, &[0.5, 1.0, -3.0]);
    opt.step().unwrap();
    let want = [1.0 - 0.05, -2.0 - 0.1, 0.5 + 0.3];
    for (a, b) in p.to_vec().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn sgd_weight_decay_alone_shrinks() {
    let p = param(&[2.0, -4.0]);
    let mut opt = Optimizer::new(vec![("p".into(), p.clone())], OptimConfig::sgd(0.1, 0.0, 0.01)).unwrap();
    set_grad(&p, &[0.0, 0.0]);
    opt.step().unwrap();
    assert_eq!(p.to_vec(), vec![2.0 * (1.0 - 0.1 * 0.01), -4.0 * (1.0 - 0.1 * 0.01)]);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let p = param(&[0.3]);
    let mut opt = Optimizer::new(vec![("p".into(), p.clone())], OptimConfig::adamw(1e-3, (0.9, 0.999), 0.0)).unwrap();
    set_grad(&p, &[1.0]);
    opt.step().unwrap();
    // m̂ = 1, v̂ = 1 → update = lr · 1 / (1 + eps)
    let want = 0.3 - 1e-3 / (1.0 + 1e-8);
    assert!((p.item() - want).abs() < 1e-15);
}

#[test]
fn adamw_decay_is_decoupled() {
    let p = param(&[2.0]);
    let mut opt = Optimizer::new(vec![("p".into(), p.clone())], OptimConfig::adamw(0.1, (0.9, 0.999), 0.5)).unwrap();
    set_grad(&p, &[0.0]);
    opt.step().unwrap();
    assert!((p.item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
}

#[test]
fn identical_inputs_give_identical_trajectories() {
    let run = |cfg: OptimConfig| {
        let mut rng = Rng::new(1);
        let p = Tensor64::param(rng.normal(6, 0.0, 1.0), &[6]).unwrap();
        let mut opt = Optimizer::new(vec![("p".into(), p.clone())], cfg).unwrap();
        for step in 0..5 {
            let g: Vec<f64> = Rng::new(step).normal(6, 0.0, 1.0);
            set_grad(&p, &g);
            opt.step().unwrap();
        }
        p.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    for cfg in [OptimConfig::sgd(0.1, 0.9, 1e-4), OptimConfig::default()] {
        assert_eq!(run(cfg.clone()), run(cfg));
    }
}

#[test]
fn frozen_parameters_are_untouched() {
    let frozen = Tensor64::leaf(vec![1.0, 2.0], &[2], false).unwrap();
    let live = param(&[1.0, 2.0]);
    let params = vec![("frozen".into(), frozen.clone()), ("live".into(), live.clone())];
    let mut opt = Optimizer::new(params, OptimConfig::default()).unwrap();
    for _ in 0..3 {
        live.add(&frozen).unwrap().square().sum_all().backward().unwrap();
        let info = opt.step().unwrap();
        assert_eq!(info.updated, 1);
        opt.zero_grad();
    }
    assert_eq!(frozen.to_vec(), vec![1.0, 2.0]);
    assert_ne!(live.to_vec(), vec![1.0, 2.0]);
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let a = param(&[1.0]);
    let b = param(&[0.0]);
    let mut opt = Optimizer::new(vec![("a".into(), a.clone()), ("blocks.0.w".into(), b.clone())], OptimConfig::default()).unwrap();
    set_grad(&a, &[1.0]);
    // d ln(b)/db at 0 is infinite
    b.ln().sum_all().backward().unwrap();
    match opt.step() {
        Err(Error::NonFiniteGrad(name)) => assert_eq!(name, "blocks.0.w"),
        other => panic!("expected NonFiniteGrad, got {other:?}"),
    }
    assert_eq!(a.item(), 1.0);
}

#[test]
fn state_round_trip_resumes_exactly() {
    let grads: Vec<Vec<f64>> = (0..6).map(|s| Rng::new(100 + s).normal(3, 0.0, 1.0)).collect();
    for cfg in [OptimConfig::sgd(0.05, 0.9, 1e-3), OptimConfig::adamw(1e-2, (0.9, 0.99), 0.05)] {
        let straight = param(&[0.1, 0.2, 0.3]);
        let mut opt = Optimizer::new(vec![("p".into(), straight.clone())], cfg.clone()).unwrap();
        for g in &grads {
            set_grad(&straight, g);
            opt.step().unwrap();
        }

        let resumed = param(&[0.1, 0.2, 0.3]);
        let mut first = Optimizer::new(vec![("p".into(), resumed.clone())], cfg.clone()).unwrap();
        for g in &grads[..3] {
            set_grad(&resumed, g);
            first.step().unwrap();
        }
        let state = first.state();
        let mut second = Optimizer::new(vec![("p".into(), resumed.clone())], cfg).unwrap();
        second.load_state(&state).unwrap();
        assert_eq!(second.steps(), 3);
        for g in &grads[3..] {
            set_grad(&resumed, g);
            second.step().unwrap();
        }
        assert_eq!(straight.to_vec(), resumed.to_vec());
    }
}
