//! Reverse-mode gradients against central finite differences, one primitive
//! at a time, plus a quantized MLP against a hand-written surrogate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saqlab_core::autodiff::{Pool2d, PoolKind, Tape, Var};
use saqlab_core::quantizer::{levels, quantize_w_taped, quantize_z_taped};
use saqlab_core::{Result, Tensor};

pub const SEEDS: u64 = 100;
const H: f64 = 1e-5;
const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-8;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Same as [`rand_tensor`] but every value is at least `gap` away from each kink.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.5..1.5);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random weighted sum of the output so every output element matters.
fn reduce(tape: &mut Tape, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    if shape.iter().product::<usize>() == 1 && shape.len() <= 1 {
        return Ok(out);
    }
    let r = tape.constant(rand_tensor(rng, &shape));
    let m = tape.mul(out, r)?;
    tape.sum(m)
}

fn eval<F>(inputs: &[Tensor], weight_seed: u64, f: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = reduce(&mut tape, out, &mut ChaCha8Rng::seed_from_u64(weight_seed)).unwrap();
    tape.value(loss).item().unwrap()
}

fn check<F>(name: &str, seed: u64, inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let weight_seed = seed ^ 0xFACE;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let loss = reduce(&mut tape, out, &mut ChaCha8Rng::seed_from_u64(weight_seed)).unwrap();
    tape.backward(loss).unwrap();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).unwrap();
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let fd = (eval(&plus, weight_seed, &f) - eval(&minus, weight_seed, &f)) / (2.0 * H);
            let a = analytic.data()[j];
            let tol = RTOL * a.abs().max(fd.abs()) + ATOL;
            assert!(
                (a - fd).abs() <= tol,
                "{name} seed {seed} input {i}[{j}]: autodiff {a} vs fd {fd}"
            );
        }
    }
}

fn for_seeds(mut body: impl FnMut(u64, &mut ChaCha8Rng)) {
    for seed in 0..SEEDS {
        body(seed, &mut ChaCha8Rng::seed_from_u64(seed));
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

pub fn matmul_and_linear() {
    for_seeds(|seed, rng| {
        let (m, k, n) = dims(rng);
        let a = rand_tensor(rng, &[m, k]);
        let b = rand_tensor(rng, &[k, n]);
        check("matmul", seed, vec![a.clone(), b], |t, v| t.matmul(v[0], v[1]));
        let w = rand_tensor(rng, &[n, k]);
        let bias = rand_tensor(rng, &[n]);
        check("linear", seed, vec![a.clone(), w.clone(), bias], |t, v| t.linear(v[0], v[1], Some(v[2])));
        check("linear-nobias", seed, vec![a, w], |t, v| t.linear(v[0], v[1], None));
    });
}

pub fn conv2d() {
    for_seeds(|seed, rng| {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..3);
        let f = rng.random_range(1..3);
        let k = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let hw = k + rng.random_range(0..3);
        let x = rand_tensor(rng, &[n, c, hw, hw]);
        let w = rand_tensor(rng, &[f, c, k, k]);
        let b = rand_tensor(rng, &[f]);
        check("conv2d", seed, vec![x, w, b], move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad));
    });
}

pub fn elementwise_arithmetic() {
    for_seeds(|seed, rng| {
        let shape = [rng.random_range(1..4), rng.random_range(1..4)];
        let a = rand_tensor(rng, &shape);
        let b = rand_tensor(rng, &shape);
        let c: f64 = rng.random_range(-2.0..2.0);
        let s = Tensor::scalar(rng.random_range(0.5..2.0));
        check("add", seed, vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        check("sub", seed, vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
        check("mul", seed, vec![a.clone(), b], |t, v| t.mul(v[0], v[1]));
        check("scale", seed, vec![a.clone()], move |t, v| t.scale(v[0], c));
        check("offset", seed, vec![a.clone()], move |t, v| t.offset(v[0], c));
        check("mul_scalar", seed, vec![a.clone(), s.clone()], |t, v| t.mul_scalar(v[0], v[1]));
        check("div_scalar", seed, vec![a, s], |t, v| t.div_scalar(v[0], v[1]));
    });
}

pub fn pointwise_nonlinearities() {
    for_seeds(|seed, rng| {
        let shape = [rng.random_range(1..4), rng.random_range(1..5)];
        let x = rand_tensor(rng, &shape);
        check("sigmoid", seed, vec![x.clone()], |t, v| t.sigmoid(v[0]));
        check("tanh", seed, vec![x.clone()], |t, v| t.tanh(v[0]));
        check("exp", seed, vec![x], |t, v| t.exp(v[0]));
        let x = away_from(rng, &shape, &[0.0], 1e-3);
        check("relu", seed, vec![x], |t, v| t.relu(v[0]));
        let x = away_from(rng, &shape, &[-0.5, 0.7], 1e-3);
        check("clip", seed, vec![x], |t, v| t.clip(v[0], -0.5, 0.7));
    });
}

pub fn reductions_and_losses() {
    for_seeds(|seed, rng| {
        let (n, k) = (rng.random_range(1..5), rng.random_range(2..6));
        let x = rand_tensor(rng, &[n, k]);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        check("sum", seed, vec![x.clone()], |t, v| t.sum(v[0]));
        check("mean", seed, vec![x.clone()], |t, v| t.mean(v[0]));
        let l = labels.clone();
        check("softmax_ce", seed, vec![x.clone()], move |t, v| t.softmax_cross_entropy(v[0], &l));
        check("log_softmax", seed, vec![x.clone()], |t, v| t.log_softmax(v[0]));
        check("pick_columns", seed, vec![x], move |t, v| t.pick_columns(v[0], &labels));
    });
}

pub fn indexing_and_reshape() {
    for_seeds(|seed, rng| {
        let (v, d) = (rng.random_range(2..6), rng.random_range(1..4));
        let table = rand_tensor(rng, &[v, d]);
        let rows: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..v)).collect();
        check("rows", seed, vec![table.clone()], move |t, x| t.rows(x[0], &rows));
        let start = rng.random_range(0..d);
        let len = rng.random_range(1..=d - start);
        check("slice_cols", seed, vec![table.clone()], move |t, x| t.slice_cols(x[0], start, len));
        check("reshape", seed, vec![table], move |t, x| t.reshape(x[0], &[d, v]));
    });
}

/// Values with distinct order statistics so no window holds a near tie.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ranks.swap(i, rng.random_range(0..=i));
    }
    let data = ranks.iter().map(|&r| r as f64 * 0.1 + rng.random_range(0.0..0.05)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn pooling() {
    for_seeds(|seed, rng| {
        let kernel = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..kernel.min(2));
        let hw = kernel + rng.random_range(0..3);
        let shape = [rng.random_range(1..3), rng.random_range(1..3), hw, hw];
        let x = spread(rng, &shape);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let cfg = Pool2d { kind, kernel, stride, pad };
            check("pool2d", seed, vec![x.clone()], move |t, v| t.pool2d(v[0], cfg));
        }
    });
}

pub fn normalization() {
    for_seeds(|seed, rng| {
        let c = rng.random_range(1..4);
        let shape = if seed % 2 == 0 {
            vec![rng.random_range(2..6), c]
        } else {
            vec![rng.random_range(1..3), c, 2, rng.random_range(1..3)]
        };
        let x = rand_tensor(rng, &shape);
        let gamma = rand_tensor(rng, &[c]);
        let beta = rand_tensor(rng, &[c]);
        check("batch_norm", seed, vec![x.clone(), gamma.clone(), beta.clone()], |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], 1e-5)?.0)
        });
        let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..2.0)).collect();
        check("batch_norm_eval", seed, vec![x, gamma, beta], move |t, v| {
            t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
        });
        let rshape = [rng.random_range(1..4), rng.random_range(2..6)];
        let rows = rand_tensor(rng, &rshape);
        check("standardize_rows", seed, vec![rows], |t, v| t.standardize_rows(v[0], 1e-8));
    });
}

/// Quantized MLP `x → Q_z± → W1 → relu → Q_z → W2 → CE`, all weights through
/// `Q_w`. The surrogate freezes each rounding residual at the base point, so
/// its exact derivative is what the straight-through rules should produce.
struct QuantMlp {
    x: Vec<f64>,
    labels: Vec<usize>,
    n: usize,
    d: usize,
    h: usize,
    k: usize,
    bits: u8,
}

/// Residuals `D(v̂) − v̂` recorded on the base pass and replayed afterwards.
#[derive(Default)]
struct Residuals {
    values: Vec<f64>,
    cursor: usize,
    frozen: bool,
}

impl Residuals {
    fn apply(&mut self, v_hat: f64, s: f64) -> f64 {
        if !self.frozen {
            let r = (v_hat * s).round() / s - v_hat;
            self.values.push(r);
        }
        let r = self.values[self.cursor];
        self.cursor += 1;
        v_hat + r
    }
}

fn sym(v: f64, alpha: f64, res: &mut Residuals, s: f64) -> f64 {
    let v_hat = 0.5 * ((v / alpha).clamp(-1.0, 1.0) + 1.0);
    alpha * (2.0 * res.apply(v_hat, s) - 1.0)
}

fn unsigned(v: f64, alpha: f64, res: &mut Residuals, s: f64) -> f64 {
    alpha * res.apply((v / alpha).clamp(0.0, 1.0), s)
}

impl QuantMlp {
    /// Parameters: `[w1 (h×d), b1 (h), w2 (k×h), b2 (k), α_w1, α_w2, α_in, α_z]`.
    fn surrogate(&self, p: &[Vec<f64>], res: &mut Residuals) -> (f64, Vec<f64>) {
        res.cursor = 0;
        let s = levels(self.bits);
        let s8 = levels(8);
        let (aw1, aw2, ain, az) = (p[4][0], p[5][0], p[6][0], p[7][0]);
        let xq: Vec<f64> = self.x.iter().map(|&v| sym(v, ain, res, s8)).collect();
        let w1: Vec<f64> = p[0].iter().map(|&v| sym(v, aw1, res, s)).collect();
        let w2: Vec<f64> = p[2].iter().map(|&v| sym(v, aw2, res, s)).collect();
        let mut pre = Vec::new();
        let mut loss = 0.0;
        for i in 0..self.n {
            let mut hidden = vec![0.0; self.h];
            for (j, hj) in hidden.iter_mut().enumerate() {
                let z = p[1][j] + (0..self.d).map(|l| w1[j * self.d + l] * xq[i * self.d + l]).sum::<f64>();
                pre.push(z);
                *hj = unsigned(z.max(0.0), az, res, s);
            }
            let logits: Vec<f64> = (0..self.k)
                .map(|c| p[3][c] + (0..self.h).map(|j| w2[c * self.h + j] * hidden[j]).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            loss += lse - logits[self.labels[i]];
        }
        res.frozen = true;
        (loss / self.n as f64, pre)
    }

    fn taped(&self, p: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        let mut t = Tape::new();
        let shapes: [&[usize]; 8] = [&[self.h, self.d], &[self.h], &[self.k, self.h], &[self.k], &[], &[], &[], &[]];
        let vars: Vec<Var> = p
            .iter()
            .zip(shapes)
            .map(|(v, s)| t.param(Tensor::new(s.to_vec(), v.clone()).unwrap()))
            .collect();
        let x = t.constant(Tensor::new(vec![self.n, self.d], self.x.clone()).unwrap());
        let xq = quantize_z_taped(&mut t, x, vars[6], 8, true).unwrap();
        let w1 = quantize_w_taped(&mut t, vars[0], vars[4], self.bits).unwrap();
        let w2 = quantize_w_taped(&mut t, vars[2], vars[5], self.bits).unwrap();
        let z = t.linear(xq, w1, Some(vars[1])).unwrap();
        let a = t.relu(z).unwrap();
        let aq = quantize_z_taped(&mut t, a, vars[7], self.bits, false).unwrap();
        let logits = t.linear(aq, w2, Some(vars[3])).unwrap();
        let loss = t.softmax_cross_entropy(logits, &self.labels).unwrap();
        t.backward(loss).unwrap();
        let grads = vars.iter().map(|&v| t.grad(v).unwrap().into_data()).collect();
        (t.value(loss).item().unwrap(), grads)
    }
}

fn near_kink(v: f64, kinks: &[f64]) -> bool {
    kinks.iter().any(|k| (v - k).abs() < 1e-3)
}

pub fn quantized_mlp_matches_frozen_residual_surrogate() {
    let mut checked = 0;
    let mut draw = 0u64;
    while checked < SEEDS {
        draw += 1;
        let rng = &mut ChaCha8Rng::seed_from_u64(draw);
        let (n, d, h, k) = (rng.random_range(1..5), 2, rng.random_range(2..6), 3);
        let bits = rng.random_range(2..6);
        let net = QuantMlp {
            x: (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect(),
            labels: (0..n).map(|_| rng.random_range(0..k)).collect(),
            n,
            d,
            h,
            k,
            bits,
        };
        let uni = |rng: &mut ChaCha8Rng, m: usize| -> Vec<f64> { (0..m).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let params = vec![
            uni(rng, h * d),
            uni(rng, h),
            uni(rng, k * h),
            uni(rng, k),
            vec![rng.random_range(0.4..1.2)],
            vec![rng.random_range(0.4..1.2)],
            vec![rng.random_range(0.8..1.6)],
            vec![rng.random_range(0.3..1.5)],
        ];
        let mut res = Residuals::default();
        let (base, pre) = net.surrogate(&params, &mut res);
        // The oracle only holds where the piecewise-smooth pieces are fixed.
        let (aw1, aw2, ain, az) = (params[4][0], params[5][0], params[6][0], params[7][0]);
        if params[0].iter().any(|&w| near_kink(w, &[-aw1, aw1]))
            || params[2].iter().any(|&w| near_kink(w, &[-aw2, aw2]))
            || net.x.iter().any(|&x| near_kink(x, &[-ain, ain]))
            || pre.iter().any(|&z| near_kink(z, &[0.0, az]))
        {
            continue;
        }
        let (taped_loss, grads) = net.taped(&params);
        assert!((taped_loss - base).abs() < 1e-12, "draw {draw}: forward {taped_loss} vs {base}");
        for (i, g) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let mut plus = params.clone();
                plus[i][j] += H;
                let mut minus = params.clone();
                minus[i][j] -= H;
                let fd = (net.surrogate(&plus, &mut res).0 - net.surrogate(&minus, &mut res).0) / (2.0 * H);
                let tol = RTOL * g[j].abs().max(fd.abs()) + ATOL;
                assert!((g[j] - fd).abs() <= tol, "draw {draw} param {i}[{j}]: ste {} vs surrogate fd {fd}", g[j]);
            }
        }
        checked += 1;
    }
}
