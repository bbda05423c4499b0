use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saqlab_core::data::{make_synthetic, SyntheticKind};
use saqlab_core::netlib::{build_model, mlp_spec, ModelOptions};
use saqlab_core::probe::{
    dense_hessian, filter_normalize, hvp, lambda_max, landscape_slice, CurvatureTarget, ModelTarget, ProbeSpace,
    QuadraticTarget,
};
use saqlab_core::quantizer::QuantSpec;
use saqlab_core::tensor::{dot, l2_norm};

fn random_psd(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let a = b.transpose() * &b;
    (0..n * n).map(|k| a[(k / n, k % n)]).collect()
}

fn top_eigenvalue(a: &[f64], n: usize) -> f64 {
    let m = DMatrix::from_row_slice(n, n, a);
    SymmetricEigen::new(m).eigenvalues.max()
}

#[test]
fn diagonal_quadratic_has_top_eigenvalue_five() {
    let q = QuadraticTarget::diagonal(&[1.0, 2.0, 5.0], vec![0.0; 3]).unwrap();
    let s = lambda_max(&q, 500, 1e-12, 0).unwrap();
    assert!((s.lambda_max - 5.0).abs() < 1e-6, "{s:?}");
    assert!(s.converged);
}

#[test]
fn power_iteration_matches_dense_eigensolver_on_random_symmetric() {
    for seed in 0..10 {
        let a = random_psd(10, seed);
        let q = QuadraticTarget::new(a.clone(), vec![0.1; 10]).unwrap();
        let expect = top_eigenvalue(&a, 10);
        let s = lambda_max(&q, 2000, 1e-12, seed).unwrap();
        assert!((s.lambda_max - expect).abs() <= 1e-3 * expect, "seed {seed}: {} vs {expect}", s.lambda_max);
    }
}

fn tiny_model(seed: u64) -> (saqlab_core::netlib::Model, saqlab_core::data::Batch) {
    let spec = mlp_spec(2, &[], 5, false).unwrap();
    let model = build_model(spec, &QuantSpec::default(), ModelOptions::default(), seed).unwrap();
    let batch = make_synthetic(SyntheticKind::Gaussians, 48, 5, 0.5, seed).unwrap().as_batch();
    (model, batch)
}

#[test]
fn power_iteration_matches_dense_hessian_of_small_net() {
    for seed in 0..5 {
        let (model, batch) = tiny_model(seed);
        let cfg = model.uniform_config(4);
        let target = ModelTarget::new(&model, cfg, &batch, ProbeSpace::Quantized).unwrap();
        let d = target.dim();
        assert!(d <= 64);
        let h = dense_hessian(&target).unwrap();
        let expect = top_eigenvalue(&h, d);
        let s = lambda_max(&target, 2000, 1e-12, seed).unwrap();
        assert!((s.lambda_max - expect).abs() <= 1e-3 * expect, "seed {seed}: {} vs {expect}", s.lambda_max);
    }
}

#[test]
fn hessian_vector_products_are_linear_and_symmetric() {
    let (model, batch) = tiny_model(3);
    let target = ModelTarget::new(&model, model.uniform_config(4), &batch, ProbeSpace::Quantized).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = target.dim();
    for _ in 0..10 {
        let u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (0.7, -1.3);
        let hu = hvp(&target, &u).unwrap();
        let hv = hvp(&target, &v).unwrap();
        let combo: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let hc = hvp(&target, &combo).unwrap();
        let scale = l2_norm(&hc).max(1e-12);
        for i in 0..d {
            assert!((hc[i] - (a * hu[i] + b * hv[i])).abs() <= 1e-4 * scale);
        }
        let (uhv, vhu) = (dot(&u, &hv), dot(&v, &hu));
        assert!((uhv - vhu).abs() <= 1e-4 * (uhv.abs() + vhu.abs()).max(1e-12), "{uhv} vs {vhu}");
    }
}

#[test]
fn landscape_of_a_quadratic_is_exactly_quadratic() {
    let q = QuadraticTarget::new(random_psd(6, 4), vec![0.4, -0.2, 0.1, 0.3, -0.5, 0.2]).unwrap();
    let g = landscape_slice(&q, 0.5, 11, 9).unwrap();
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    for i in 0..11 {
        for j in 0..11 {
            let (a, b) = (g.coordinate(i), g.coordinate(j));
            rows.extend_from_slice(&[1.0, a, b, a * a, a * b, b * b]);
            ys.push(g.losses[i][j]);
        }
    }
    let x = DMatrix::from_row_slice(ys.len(), 6, &rows);
    let y = DVector::from_vec(ys);
    let xt = x.transpose();
    let coef = (&xt * &x).cholesky().unwrap().solve(&(&xt * &y));
    let residual = (x * coef - y).amax();
    assert!(residual < 1e-8, "{residual}");
}

#[test]
fn landscape_directions_are_orthogonal_normalized_and_seeded() {
    let q = QuadraticTarget::diagonal(&[1.0, 2.0, 3.0, 4.0], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let a = landscape_slice(&q, 1.0, 5, 1).unwrap();
    assert_eq!(a, landscape_slice(&q, 1.0, 5, 1).unwrap());
    assert_ne!(a.d1, landscape_slice(&q, 1.0, 5, 2).unwrap().d1);
    assert!(dot(&a.d1, &a.d2).abs() < 1e-12);
    assert!((l2_norm(&a.d1) - l2_norm(&q.point())).abs() < 1e-12);
    assert_eq!(a.coordinate(0), -1.0);
    assert_eq!(a.coordinate(4), 1.0);

    let mut d = vec![3.0, 4.0, 1.0, 0.0];
    filter_normalize(&mut d, &[0.0, 10.0, 2.0, 0.0], &[0..2, 2..4]);
    assert_eq!(d, vec![6.0, 8.0, 2.0, 0.0]);
}

