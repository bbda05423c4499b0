use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saqlab_core::data::{make_synthetic, SyntheticKind};
use saqlab_core::netlib::{
    build_model, miniconv_spec, mlp_spec, BitwidthConfig, Mode, Model, ModelOptions, ParamRole, PerturbTarget,
    Perturbation,
};
use saqlab_core::optim::{Method, OptimConfig, OptimState};
use saqlab_core::quantizer::QuantSpec;
use saqlab_core::tensor::{dot, l2_norm};
use saqlab_core::{Error, Tensor};

fn miniconv(seed: u64) -> Model {
    let spec = miniconv_spec(&[1, 8, 8], 4, true).unwrap();
    build_model(spec, &QuantSpec::default(), ModelOptions::default(), seed).unwrap()
}

fn logits(model: &Model, x: &Tensor, cfg: &BitwidthConfig, mode: Mode) -> Vec<f64> {
    let pass = model.forward(x, cfg, mode).unwrap();
    pass.tape.value(pass.logits).data().to_vec()
}

/// A few training steps so running statistics and weights are non-trivial.
fn trained_miniconv(cfg: &BitwidthConfig) -> Model {
    let mut model = miniconv(1);
    let data = make_synthetic(SyntheticKind::Templates, 64, 4, 0.5, 1).unwrap();
    let mut st = OptimState::new(OptimConfig { method: Method::Sgd, ..OptimConfig::default() }, &model).unwrap();
    for batch in data.as_batch().chunks(16).unwrap() {
        st.step(&mut model, &batch, cfg, 0.05).unwrap();
    }
    model
}

#[test]
fn mlp_parameter_count_and_build_determinism() {
    let spec = mlp_spec(784, &[64], 10, true).unwrap();
    let a = build_model(spec.clone(), &QuantSpec::default(), ModelOptions::default(), 4).unwrap();
    assert_eq!(a.weight_param_count(), 784 * 64 + 64 + 64 * 10 + 10);
    let b = build_model(spec, &QuantSpec::default(), ModelOptions::default(), 4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_input_through_unsigned_quantized_mlp_gives_zero_logits() {
    let spec = mlp_spec(3, &[5], 2, false).unwrap();
    let opts = ModelOptions { signed_input: false, ..ModelOptions::default() };
    let model = build_model(spec, &QuantSpec::default(), opts, 0).unwrap();
    let out = logits(&model, &Tensor::zeros(&[4, 3]), &model.uniform_config(3), Mode::Eval);
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn eval_mode_is_independent_of_batch_composition() {
    let cfg = BitwidthConfig::new(vec![2, 3, 4, 5]);
    let model = trained_miniconv(&cfg);
    let x = make_synthetic(SyntheticKind::Templates, 12, 4, 0.5, 9).unwrap().features;
    let batched = logits(&model, &x, &cfg, Mode::Eval);
    for i in 0..12 {
        let single = logits(&model, &x.slice_rows(i, 1).unwrap(), &cfg, Mode::Eval);
        for (a, b) in single.iter().zip(&batched[i * 4..i * 4 + 4]) {
            assert!((a - b).abs() <= 1e-12, "sample {i}: {a} vs {b}");
        }
    }
}

#[test]
fn perturbation_apply_and_remove_are_inverse() {
    let mut model = miniconv(2);
    let cfg = model.uniform_config(3);
    let x = make_synthetic(SyntheticKind::Templates, 8, 4, 0.5, 2).unwrap().features;
    let clean = logits(&model, &x, &cfg, Mode::Train);
    let n = model.quantized_weight_count();
    model.apply_perturbation(vec![0.0; n]).unwrap();
    assert_eq!(logits(&model, &x, &cfg, Mode::Train), clean);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    model.apply_perturbation((0..n).map(|_| rng.random_range(-0.1..0.1)).collect()).unwrap();
    assert_ne!(logits(&model, &x, &cfg, Mode::Train), clean);
    model.remove_perturbation();
    assert_eq!(logits(&model, &x, &cfg, Mode::Train), clean);
    assert!(matches!(model.apply_perturbation(vec![0.0; n + 1]), Err(Error::Contract(_))));
}

/// `L(Q + ε) − L(Q)` against `⟨∇_Q L, ε⟩` with `ε` confined to layers whose
/// output is not re-quantized, where the loss is smooth in `ε`.
fn first_order_error(model: &Model, smooth_from: usize, seed: u64) -> f64 {
    let cfg = model.uniform_config(2);
    let batch = make_synthetic(SyntheticKind::Gaussians, 32, 4, 0.5, seed).unwrap().as_batch();
    let (l0, pass) = model.loss_and_grads(&batch, &cfg, Mode::Train, None).unwrap();
    let g = pass.flat_qweight_grads().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eps: Vec<f64> = (0..g.len())
        .map(|i| if i >= smooth_from { rng.random_range(-1.0..1.0) } else { 0.0 })
        .collect();
    let scale = 1e-4 / l2_norm(&eps);
    eps.iter_mut().for_each(|e| *e *= scale);
    let predicted = dot(&g, &eps);
    let p = Perturbation { target: PerturbTarget::Quantized, eps };
    let (l1, _) = model.loss_and_grads(&batch, &cfg, Mode::Train, Some(&p)).unwrap();
    ((l1 - l0) - predicted).abs() / predicted.abs()
}

#[test]
fn loss_change_matches_first_order_model() {
    for seed in 0..20 {
        let linear = build_model(mlp_spec(2, &[], 4, false).unwrap(), &QuantSpec::default(), ModelOptions::default(), seed)
            .unwrap();
        let err = first_order_error(&linear, 0, seed);
        assert!(err <= 0.1, "linear seed {seed}: {err}");

        let mlp = build_model(mlp_spec(2, &[8], 4, false).unwrap(), &QuantSpec::default(), ModelOptions::default(), seed)
            .unwrap();
        let err = first_order_error(&mlp, 2 * 8, seed);
        assert!(err <= 0.1, "mlp seed {seed}: {err}");
    }
}

#[test]
fn shared_weights_feed_every_bitwidth() {
    let mut model = miniconv(3);
    let x = make_synthetic(SyntheticKind::Templates, 4, 4, 0.5, 3).unwrap().features;
    let weights = model.params().iter().filter(|p| p.role == ParamRole::Weight).count();
    assert_eq!(weights, model.spec().weighted_layers().count());
    let before: Vec<_> = (2..=5).map(|b| logits(&model, &x, &model.uniform_config(b), Mode::Train)).collect();
    let searchable = model.spec().searchable_layers()[1];
    let p = model
        .params_mut()
        .iter_mut()
        .find(|p| p.role == ParamRole::Weight && p.layer == searchable)
        .unwrap();
    p.value.data_mut().iter_mut().for_each(|v| *v = -*v);
    for (b, old) in (2..=5).zip(&before) {
        assert_ne!(&logits(&model, &x, &model.uniform_config(b), Mode::Train), old, "{b}-bit");
    }
}

#[test]
fn training_one_bitwidth_leaves_other_batch_norm_sets_untouched() {
    let before = miniconv(1);
    let cfg = before.uniform_config(3);
    let after = trained_miniconv(&cfg);
    let mut touched_3 = false;
    for (p0, p1) in before.params().iter().zip(after.params()) {
        match p0.role {
            ParamRole::BnGamma(b) | ParamRole::BnBeta(b) | ParamRole::LogAlphaW(b) | ParamRole::LogAlphaZ(b)
                if b != 3 && b != 8 =>
            {
                assert_eq!(p0.value, p1.value, "{} changed", p0.name);
            }
            ParamRole::BnGamma(3) => touched_3 |= p0.value != p1.value,
            _ => {}
        }
    }
    assert!(touched_3);
    for (layer, bits) in before.running_keys() {
        let (r0, r1) = (before.running_stats(layer, bits).unwrap(), after.running_stats(layer, bits).unwrap());
        if bits == 3 || bits == 8 {
            assert_ne!(r0, r1, "layer {layer} set {bits} never updated");
        } else {
            assert_eq!(r0, r1, "layer {layer} set {bits} changed");
        }
    }
}

#[test]
fn edge_layers_always_run_at_eight_bits() {
    let spec = mlp_spec(2, &[16, 16], 4, true).unwrap();
    for b in 2..=5 {
        let bits = spec.resolve_bits(&BitwidthConfig::uniform(b, 1)).unwrap();
        let weighted: Vec<_> = spec.weighted_layers().map(|(i, _)| bits[i]).collect();
        assert_eq!(weighted, vec![Some(8), Some(b), Some(8)]);
    }
    let model = miniconv(0);
    let a = model.spec().resolve_bits(&BitwidthConfig::new(vec![2, 2, 2, 2])).unwrap();
    let c = model.spec().resolve_bits(&BitwidthConfig::new(vec![5, 5, 5, 5])).unwrap();
    let edges: Vec<usize> = model.spec().weighted_layers().map(|(i, _)| i).collect();
    for i in [edges[0], *edges.last().unwrap()] {
        assert_eq!((a[i], c[i]), (Some(8), Some(8)));
    }
}

#[test]
fn unknown_bitwidth_is_a_config_error() {
    let spec = mlp_spec(2, &[4], 3, false).unwrap();
    let model = build_model(spec, &QuantSpec::new(&[2, 3]).unwrap(), ModelOptions::default(), 0).unwrap();
    let x = Tensor::zeros(&[1, 2]);
    let err = model.forward(&x, &BitwidthConfig::new(vec![2, 5]), Mode::Eval).err().unwrap();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
}
