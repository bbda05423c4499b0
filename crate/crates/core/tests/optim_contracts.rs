use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use saqlab_core::data::{batches, make_synthetic, Batch, SyntheticKind};
use saqlab_core::netlib::{build_model, mlp_spec, BitwidthConfig, Mode, Model, ModelOptions, PerturbTarget, Perturbation};
use saqlab_core::optim::{
    asaq_epsilon, compute_epsilon_hat, momentum_update, survival_rate, Method, OptimConfig, OptimState,
};
use saqlab_core::quantizer::{quantize_w_scalar, QuantSpec};
use saqlab_core::tensor::l2_norm;

fn small_net(seed: u64) -> (Model, BitwidthConfig, Batch) {
    let spec = mlp_spec(2, &[8], 4, false).unwrap();
    let model = build_model(spec, &QuantSpec::default(), ModelOptions::default(), seed).unwrap();
    let cfg = model.uniform_config(2);
    let batch = make_synthetic(SyntheticKind::Gaussians, 16, 4, 0.5, seed).unwrap().as_batch();
    (model, cfg, batch)
}

fn config(method: Method, rho: f64) -> OptimConfig {
    OptimConfig {
        method,
        rho,
        ..OptimConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn epsilon_norm_equals_rho(g in prop::collection::vec(-10.0f64..10.0, 1..64), rho in 1e-3f64..5.0) {
        prop_assume!(l2_norm(&g) > 1e-12);
        let e = compute_epsilon_hat(&g, rho);
        prop_assert!((l2_norm(&e.eps) - rho).abs() <= 1e-9);
        prop_assert!((e.norm - rho).abs() <= 1e-9);
    }

    #[test]
    fn asaq_normalized_perturbation_has_norm_rho(
        g in prop::collection::vec(-10.0f64..10.0, 1..64),
        q in prop::collection::vec(-2.0f64..2.0, 64),
        rho in 1e-3f64..5.0,
    ) {
        prop_assume!(l2_norm(&g) > 1e-9);
        let q = &q[..g.len()];
        let e = asaq_epsilon(&g, q, rho, 0.01).unwrap();
        let normalized: Vec<f64> = e.eps.iter().zip(q).map(|(e, q)| e / (q.abs() + 0.01)).collect();
        prop_assert!((l2_norm(&normalized) - rho).abs() <= 1e-9);
    }

    #[test]
    fn asaq_with_isotropic_scale_is_saq_at_scaled_radius(
        g in prop::collection::vec(-10.0f64..10.0, 1..64),
        mag in 0.0f64..2.0,
        signs in prop::collection::vec(any::<bool>(), 64),
        rho in 1e-3f64..5.0,
    ) {
        prop_assume!(l2_norm(&g) > 1e-9);
        let q: Vec<f64> = signs[..g.len()].iter().map(|&s| if s { mag } else { -mag }).collect();
        let c = mag + 0.01;
        let a = asaq_epsilon(&g, &q, rho, 0.01).unwrap();
        let s = compute_epsilon_hat(&g, rho * c);
        for (x, y) in a.eps.iter().zip(&s.eps) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn asaq_normalized_perturbation_is_scale_invariant(
        w in prop::collection::vec(-2.0f64..2.0, 1..32),
        g in prop::collection::vec(-5.0f64..5.0, 32),
        alpha in 0.2f64..2.0,
        c in 0.1f64..10.0,
        bits in 2u8..=5,
    ) {
        let g = &g[..w.len()];
        prop_assume!(l2_norm(g) > 1e-9);
        let xi = 0.01;
        let normalized = |w: &[f64], g: &[f64], alpha: f64, xi: f64| -> Vec<f64> {
            let q: Vec<f64> = w.iter().map(|&v| quantize_w_scalar(v, bits, alpha)).collect();
            let e = asaq_epsilon(g, &q, 0.3, xi).unwrap();
            e.eps.iter().zip(&q).map(|(e, q)| e / (q.abs() + xi)).collect()
        };
        let base = normalized(&w, g, alpha, xi);
        let ws: Vec<f64> = w.iter().map(|v| v * c).collect();
        let gs: Vec<f64> = g.iter().map(|v| v / c).collect();
        let scaled = normalized(&ws, &gs, alpha * c, xi * c);
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
        }
    }
}

#[test]
fn asaq_unit_scale_is_exactly_saq() {
    let g = [0.3, -1.2, 2.5, 0.0];
    let q = [0.99, -0.99, 0.99, 0.99];
    assert_eq!(asaq_epsilon(&g, &q, 0.2, 0.01).unwrap().eps, compute_epsilon_hat(&g, 0.2).eps);
}

#[test]
fn sam_epsilon_from_model_has_norm_rho() {
    for seed in 0..10 {
        let (model, cfg, batch) = small_net(seed);
        let (_, pass) = model.loss_and_grads(&batch, &cfg, Mode::Train, None).unwrap();
        let g = saqlab_core::optim::weight_grads(&model, &pass).unwrap();
        assert!((l2_norm(&compute_epsilon_hat(&g, 0.05).eps) - 0.05).abs() < 1e-9);
        let gq = pass.flat_qweight_grads().unwrap();
        assert!((l2_norm(&compute_epsilon_hat(&gq, 0.05).eps) - 0.05).abs() < 1e-9);
    }
}

#[test]
fn saq_with_zero_radius_is_sgd_bit_for_bit() {
    for method in [Method::Saq, Method::Asaq, Method::Sam] {
        let (mut a, cfg, _) = small_net(3);
        let mut b = a.clone();
        let data = make_synthetic(SyntheticKind::Gaussians, 64, 4, 0.5, 3).unwrap();
        let mut sa = OptimState::new(config(Method::Sgd, 0.0), &a).unwrap();
        let mut sb = OptimState::new(config(method, 0.0), &b).unwrap();
        for epoch in 0..3 {
            for batch in batches(&data, 16, epoch, false).unwrap() {
                sa.step(&mut a, &batch, &cfg, 0.05).unwrap();
                sb.step(&mut b, &batch, &cfg, 0.05).unwrap();
            }
        }
        assert_eq!(a, b, "{method:?} with rho 0 diverged from sgd");
        assert_eq!(sa.velocity, sb.velocity);
    }
}

#[test]
fn two_passes_per_microbatch() {
    let (mut model, cfg, batch) = small_net(1);
    for (method, per_micro) in [(Method::Sgd, 1), (Method::Sam, 2), (Method::Saq, 2), (Method::Asaq, 2)] {
        let mut st = OptimState::new(
            OptimConfig {
                microbatch: 4,
                ..config(method, 0.1)
            },
            &model,
        )
        .unwrap();
        st.step(&mut model, &batch, &cfg, 0.01).unwrap();
        assert_eq!(st.passes, per_micro * 4, "{method:?}");
        assert!(model.perturbation().is_none());
    }
}

#[test]
fn update_is_fixed_order_average_of_microbatch_gradients() {
    let (mut model, cfg, batch) = small_net(5);
    let before = model.clone();
    let (lr, rho) = (0.1, 0.05);
    let mut st = OptimState::new(
        OptimConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            microbatch: 5,
            ..config(Method::Saq, rho)
        },
        &model,
    )
    .unwrap();
    st.step(&mut model, &batch, &cfg, lr).unwrap();

    let mut avg: Vec<Vec<f64>> = before.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
    for mb in batch.chunks(5).unwrap() {
        let w = mb.len() as f64 / batch.len() as f64;
        let (_, clean) = before.loss_and_grads(&mb, &cfg, Mode::Train, None).unwrap();
        let eps = compute_epsilon_hat(&clean.flat_qweight_grads().unwrap(), rho).eps;
        let p = Perturbation {
            target: PerturbTarget::Quantized,
            eps,
        };
        let (_, pert) = before.loss_and_grads(&mb, &cfg, Mode::Train, Some(&p)).unwrap();
        for (acc, g) in avg.iter_mut().zip(pert.param_grads().unwrap()) {
            acc.iter_mut().zip(g.data()).for_each(|(a, v)| *a += w * v);
        }
    }
    for ((p0, p1), g) in before.params().iter().zip(model.params()).zip(&avg) {
        for ((a, b), g) in p0.value.data().iter().zip(p1.value.data()).zip(g) {
            assert!((a - lr * g - b).abs() <= 1e-15 * (1.0 + b.abs()), "{}", p0.name);
        }
    }
    // Quantized weights at step end carry no leftover perturbation.
    let (_, pass) = model.loss_and_grads(&batch, &cfg, Mode::Train, None).unwrap();
    assert_eq!(pass.flat_qweights(), model.quantized_weights(&cfg, None).unwrap());
}

#[test]
fn epsilon_hat_beats_random_directions() {
    let rho = 0.05;
    let nets = 40;
    let mut wins = 0;
    for seed in 0..nets {
        let (model, cfg, batch) = small_net(100 + seed);
        let (_, clean) = model.loss_and_grads(&batch, &cfg, Mode::Train, None).unwrap();
        let loss_at = |eps: Vec<f64>| {
            let p = Perturbation {
                target: PerturbTarget::Quantized,
                eps,
            };
            model.loss_and_grads(&batch, &cfg, Mode::Train, Some(&p)).unwrap().0
        };
        let best = loss_at(compute_epsilon_hat(&clean.flat_qweight_grads().unwrap(), rho).eps);
        let n = model.quantized_weight_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beaten = (0..100).all(|_| {
            let d: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let dn = l2_norm(&d);
            best >= loss_at(d.iter().map(|v| rho * v / dn).collect())
        });
        wins += beaten as u64;
    }
    assert!(wins as f64 >= 0.95 * nets as f64, "{wins}/{nets} nets");
}

#[test]
fn sam_penalty_is_larger_along_the_stiff_axis() {
    let diag = [1.0, 10.0];
    let loss = |w: &[f64]| 0.5 * (diag[0] * w[0] * w[0] + diag[1] * w[1] * w[1]);
    let sharpness = |w: [f64; 2]| {
        let g = [diag[0] * w[0], diag[1] * w[1]];
        let e = compute_epsilon_hat(&g, 0.1).eps;
        loss(&[w[0] + e[0], w[1] + e[1]]) - loss(&w)
    };
    let (flat, stiff) = (sharpness([1.0, 0.0]), sharpness([0.0, 1.0]));
    assert!((flat - 0.105).abs() < 1e-12 && (stiff - 1.05).abs() < 1e-12);
    assert!(flat < stiff);
}

/// Two wells: a sharp one at −1 (curvature 100) and a flat one at +1
/// (curvature 2), joined where the parabolas meet. The step size 0.019 keeps
/// plain gradient descent stable in both wells.
fn double_well_grad(x: f64) -> f64 {
    let (sharp, flat) = (50.0 * (x + 1.0).powi(2), (x - 1.0).powi(2));
    if sharp < flat {
        100.0 * (x + 1.0)
    } else {
        2.0 * (x - 1.0)
    }
}

fn settle(x0: f64, rho: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut x, mut v) = ([x0], [0.0]);
    for _ in 0..2000 {
        let noise: f64 = 0.05 * rng.sample::<f64, _>(StandardNormal);
        let g = double_well_grad(x[0]) + noise;
        let eps = compute_epsilon_hat(&[g], rho).eps[0];
        let g = if rho > 0.0 { double_well_grad(x[0] + eps) + noise } else { g };
        momentum_update(&mut x, &[g], &mut v, 0.019, 0.0, 0.0);
    }
    x[0]
}

#[test]
fn sharpness_aware_steps_prefer_the_flat_well() {
    let mut flat_sgd = 0;
    let mut flat_saq = 0;
    for seed in 0..100u64 {
        let x0 = ChaCha8Rng::seed_from_u64(seed).random_range(-2.0..2.0);
        flat_sgd += ((settle(x0, 0.0, seed) - 1.0).abs() < 0.1) as u32;
        flat_saq += ((settle(x0, 0.04, seed) - 1.0).abs() < 0.1) as u32;
    }
    assert!(flat_saq > flat_sgd, "saq {flat_saq} vs sgd {flat_sgd}");
    assert!(flat_sgd < 100);
}

#[test]
fn sgd_loss_decreases_on_separable_data() {
    let data = make_synthetic(SyntheticKind::Gaussians, 256, 4, 0.1, 7).unwrap();
    let spec = mlp_spec(2, &[16], 4, false).unwrap();
    let mut model = build_model(spec, &QuantSpec::default(), ModelOptions::default(), 7).unwrap();
    let cfg = model.uniform_config(4);
    let mut st = OptimState::new(config(Method::Sgd, 0.0), &model).unwrap();
    let initial = model.evaluate(&data, &cfg, 256).unwrap().0;
    let mut step = 0;
    'outer: for epoch in 0.. {
        for batch in batches(&data, 32, epoch, false).unwrap() {
            st.step(&mut model, &batch, &cfg, 0.05).unwrap();
            step += 1;
            if step == 200 {
                break 'outer;
            }
        }
    }
    let last = model.evaluate(&data, &cfg, 256).unwrap().0;
    assert!(last < initial, "{initial} -> {last}");
}

#[test]
fn zero_gradient_leaves_parameters_to_decay_only() {
    let mut w = [0.5, -2.0];
    let mut v = [0.0, 0.0];
    momentum_update(&mut w, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.01);
    assert_eq!(w, [0.5 - 0.1 * 0.01 * 0.5, -2.0 + 0.1 * 0.01 * 2.0]);
}

#[test]
fn naive_perturbation_rarely_changes_two_bit_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let d: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let dn = l2_norm(&d);
    let eps: Vec<f64> = d.iter().map(|v| 0.01 * v / dn).collect();
    assert!(survival_rate(&w, &eps, 2, 1.0).unwrap() >= 0.97);
    // Per-element displacement ρ on every weight is still under a cell width.
    let uniform = vec![0.01; n];
    assert!(survival_rate(&w, &uniform, 2, 1.0).unwrap() >= 0.97);
    let large: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 2.0 } else { -2.0 }).collect();
    assert!(survival_rate(&w, &large, 2, 1.0).unwrap() < 0.7);
}

#[test]
fn naive_diag_on_model_reports_high_survival() {
    let (model, cfg, batch) = small_net(2);
    let s = saqlab_core::optim::naive_sam_quant_diag(&model, &batch, &cfg, 0.01).unwrap();
    assert!(s >= 0.9, "survival {s}");
}
