//! Curvature probes: Hessian-vector products by finite differences of
//! gradients, power iteration for the top eigenvalue, and 2-D loss slices
//! along filter-normalized random directions.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::netlib::{BitwidthConfig, Mode, Model, PerturbTarget, Perturbation};
use crate::optim::weight_grads;
use crate::tensor::{dot, l2_norm};

/// A loss around a fixed point `θ`, evaluated at `θ + offset`.
pub trait CurvatureTarget {
    fn dim(&self) -> usize;
    fn point(&self) -> Vec<f64>;
    fn loss(&self, offset: &[f64]) -> Result<f64>;
    fn gradient(&self, offset: &[f64]) -> Result<Vec<f64>>;
    /// Index ranges that are rescaled together when normalizing directions.
    fn filters(&self) -> Vec<Range<usize>> {
        vec![0..self.dim()]
    }
    fn describe(&self) -> String {
        format!("dim={}", self.dim())
    }
}

/// Finite-difference step used by [`hvp`].
pub fn fd_step(point: &[f64]) -> f64 {
    1e-3 * (1.0 + l2_norm(point))
}

/// `Hv ≈ ‖v‖·[∇L(θ + hv̂) − ∇L(θ − hv̂)] / 2h`.
pub fn hvp(target: &dyn CurvatureTarget, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != target.dim() {
        return Err(Error::dim(format!("vector has {} entries, target {}", v.len(), target.dim())));
    }
    let n = l2_norm(v);
    if !(n > 0.0) {
        return Err(Error::Parameter("hvp needs a nonzero vector".into()));
    }
    let h = fd_step(&target.point());
    let plus: Vec<f64> = v.iter().map(|x| h * x / n).collect();
    let minus: Vec<f64> = plus.iter().map(|x| -x).collect();
    let gp = target.gradient(&plus)?;
    let gm = target.gradient(&minus)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h) * n).collect())
}

/// Hessian assembled column by column from [`hvp`] on unit vectors, then
/// symmetrized. Row-major `dim × dim`.
pub fn dense_hessian(target: &dyn CurvatureTarget) -> Result<Vec<f64>> {
    let d = target.dim();
    let mut h = vec![0.0; d * d];
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        let col = hvp(target, &e)?;
        for i in 0..d {
            h[i * d + j] = col[i];
        }
    }
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (h[i * d + j] + h[j * d + i]);
            h[i * d + j] = s;
            h[j * d + i] = s;
        }
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumResult {
    pub lambda_max: f64,
    pub iterations: usize,
    /// `‖Hv − λv‖ / ‖v‖` at the final iterate.
    pub residual: f64,
    pub converged: bool,
    pub probe: String,
}

fn gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Power iteration with a Rayleigh-quotient estimate. Stops once the relative
/// change of the estimate drops below `tol`, or after `iters` iterations.
pub fn lambda_max(target: &dyn CurvatureTarget, iters: usize, tol: f64, seed: u64) -> Result<SpectrumResult> {
    if iters == 0 {
        return Err(Error::Parameter("power iteration needs at least one iteration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = gaussian(target.dim(), &mut rng);
    let n = l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    let mut lambda = f64::NAN;
    let mut residual = f64::NAN;
    let mut converged = false;
    let mut done = 0;
    for it in 1..=iters {
        done = it;
        let hv = hvp(target, &v)?;
        let next = dot(&v, &hv);
        residual = l2_norm(&hv.iter().zip(&v).map(|(a, b)| a - next * b).collect::<Vec<_>>());
        let change = (next - lambda).abs() / next.abs().max(f64::MIN_POSITIVE);
        lambda = next;
        let hn = l2_norm(&hv);
        if hn == 0.0 {
            converged = true;
            break;
        }
        v = hv.iter().map(|x| x / hn).collect();
        if change < tol {
            converged = true;
            break;
        }
    }
    Ok(SpectrumResult {
        lambda_max: lambda,
        iterations: done,
        residual,
        converged,
        probe: target.describe(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub halfwidth: f64,
    pub resolution: usize,
    pub seed: u64,
    /// `losses[i][j]` at `θ + a_i·d1 + a_j·d2`.
    pub losses: Vec<Vec<f64>>,
    pub center_loss: f64,
}

impl LandscapeGrid {
    pub fn coordinate(&self, i: usize) -> f64 {
        grid_coordinate(self.halfwidth, self.resolution, i)
    }
}

fn grid_coordinate(halfwidth: f64, resolution: usize, i: usize) -> f64 {
    let k = (resolution / 2) as f64;
    if k == 0.0 {
        0.0
    } else {
        halfwidth * (i as f64 - k) / k
    }
}

/// Rescales each filter of `d` to the norm of the matching filter of `point`.
pub fn filter_normalize(d: &mut [f64], point: &[f64], filters: &[Range<usize>]) {
    for r in filters {
        let dn = l2_norm(&d[r.clone()]);
        let pn = l2_norm(&point[r.clone()]);
        let s = if dn > 0.0 { pn / dn } else { 0.0 };
        d[r.clone()].iter_mut().for_each(|x| *x *= s);
    }
}

/// Loss over a `(2k+1)²` grid spanned by two filter-normalized Gaussian
/// directions, the second orthogonalized against the first.
pub fn landscape_slice(target: &dyn CurvatureTarget, halfwidth: f64, resolution: usize, seed: u64) -> Result<LandscapeGrid> {
    if resolution % 2 == 0 {
        return Err(Error::Parameter(format!("resolution must be odd, got {resolution}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = target.point();
    let filters = target.filters();
    let mut d1 = gaussian(target.dim(), &mut rng);
    let mut d2 = gaussian(target.dim(), &mut rng);
    filter_normalize(&mut d1, &point, &filters);
    filter_normalize(&mut d2, &point, &filters);
    let n11 = dot(&d1, &d1);
    if n11 > 0.0 {
        let c = dot(&d2, &d1) / n11;
        d2.iter_mut().zip(&d1).for_each(|(b, a)| *b -= c * a);
    }
    let center_loss = target.loss(&vec![0.0; target.dim()])?;
    let mut losses = vec![vec![0.0; resolution]; resolution];
    for (i, row) in losses.iter_mut().enumerate() {
        let a = grid_coordinate(halfwidth, resolution, i);
        for (j, cell) in row.iter_mut().enumerate() {
            let b = grid_coordinate(halfwidth, resolution, j);
            let offset: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| a * x + b * y).collect();
            *cell = target.loss(&offset)?;
        }
    }
    Ok(LandscapeGrid {
        d1,
        d2,
        halfwidth,
        resolution,
        seed,
        losses,
        center_loss,
    })
}

/// `½(θ+o)ᵀA(θ+o)` for a symmetric `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticTarget {
    pub a: Vec<f64>,
    pub theta: Vec<f64>,
}

impl QuadraticTarget {
    pub fn new(a: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        let d = theta.len();
        if a.len() != d * d || d == 0 {
            return Err(Error::dim(format!("{}-entry matrix for {d} coordinates", a.len())));
        }
        Ok(QuadraticTarget { a, theta })
    }

    pub fn diagonal(diag: &[f64], theta: Vec<f64>) -> Result<Self> {
        let d = diag.len();
        let mut a = vec![0.0; d * d];
        for (i, &v) in diag.iter().enumerate() {
            a[i * d + i] = v;
        }
        Self::new(a, theta)
    }

    fn shifted(&self, offset: &[f64]) -> Vec<f64> {
        self.theta.iter().zip(offset).map(|(t, o)| t + o).collect()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.theta.len();
        (0..d).map(|i| dot(&self.a[i * d..(i + 1) * d], x)).collect()
    }
}

impl CurvatureTarget for QuadraticTarget {
    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn point(&self) -> Vec<f64> {
        self.theta.clone()
    }

    fn loss(&self, offset: &[f64]) -> Result<f64> {
        let x = self.shifted(offset);
        Ok(0.5 * dot(&x, &self.apply(&x)))
    }

    fn gradient(&self, offset: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply(&self.shifted(offset)))
    }

    fn describe(&self) -> String {
        format!("quadratic dim={}", self.theta.len())
    }
}

/// Which weights a model probe differentiates with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeSpace {
    Quantized,
    FullPrecision,
}

/// Eval-mode cross-entropy of a model on a fixed batch, as a function of a
/// perturbation of its conv/linear weights.
pub struct ModelTarget<'a> {
    pub model: &'a Model,
    pub cfg: BitwidthConfig,
    pub batch: &'a Batch,
    pub space: ProbeSpace,
    point: Vec<f64>,
}

impl<'a> ModelTarget<'a> {
    pub fn new(model: &'a Model, cfg: BitwidthConfig, batch: &'a Batch, space: ProbeSpace) -> Result<Self> {
        let point = match space {
            ProbeSpace::Quantized => model.quantized_weights(&cfg, None)?,
            ProbeSpace::FullPrecision => model.flat_weights(),
        };
        Ok(ModelTarget {
            model,
            cfg,
            batch,
            space,
            point,
        })
    }

    fn perturbation(&self, offset: &[f64]) -> Perturbation {
        Perturbation {
            target: match self.space {
                ProbeSpace::Quantized => PerturbTarget::Quantized,
                ProbeSpace::FullPrecision => PerturbTarget::FullPrecision,
            },
            eps: offset.to_vec(),
        }
    }
}

impl CurvatureTarget for ModelTarget<'_> {
    fn dim(&self) -> usize {
        self.point.len()
    }

    fn point(&self) -> Vec<f64> {
        self.point.clone()
    }

    fn loss(&self, offset: &[f64]) -> Result<f64> {
        let p = self.perturbation(offset);
        let mut pass = self.model.forward_with(&self.batch.x, &self.cfg, Mode::Eval, Some(&p))?;
        let l = pass.tape.softmax_cross_entropy(pass.logits, &self.batch.labels)?;
        Ok(pass.tape.value(l).data()[0])
    }

    fn gradient(&self, offset: &[f64]) -> Result<Vec<f64>> {
        let p = self.perturbation(offset);
        let (_, pass) = self.model.loss_and_grads(self.batch, &self.cfg, Mode::Eval, Some(&p))?;
        match self.space {
            ProbeSpace::Quantized => pass.flat_qweight_grads(),
            ProbeSpace::FullPrecision => weight_grads(self.model, &pass),
        }
    }

    fn filters(&self) -> Vec<Range<usize>> {
        self.model.filter_ranges()
    }

    fn describe(&self) -> String {
        format!(
            "model={} config=[{}] samples={} space={:?}",
            self.model.spec().name,
            self.cfg,
            self.batch.len(),
            self.space
        )
    }
}
