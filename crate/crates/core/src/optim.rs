//! Momentum SGD and its sharpness-aware variants.
//!
//! Every step splits the batch into microbatches of size `m` and visits them
//! in index order. Sharpness-aware methods spend two forward/backward passes
//! per microbatch: a clean pass that yields the ascent direction and the
//! batch-norm statistics, and a perturbed pass whose gradient is accumulated.
//! The update uses the size-weighted average of the per-microbatch gradients.

use std::f64::consts::PI;
use std::str::FromStr;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::netlib::{BitwidthConfig, Mode, Model, ParamRole, PerturbTarget, Perturbation};
use crate::quantizer;
use crate::tensor::l2_norm;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_XI: f64 = 0.01;
/// Gradients with a smaller norm produce a zero perturbation.
pub const GRAD_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Sgd,
    /// Perturb full-precision weights, then quantize.
    Sam,
    /// Perturb quantized weights.
    Saq,
    /// Perturb quantized weights with an elementwise scale.
    Asaq,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Sam => "sam",
            Method::Saq => "saq",
            Method::Asaq => "asaq",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Method::Sgd),
            "sam" => Ok(Method::Sam),
            "saq" => Ok(Method::Saq),
            "asaq" => Ok(Method::Asaq),
            other => Err(Error::config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// Multiply by `factor` at each milestone epoch.
    Step { milestones: Vec<usize>, factor: f64 },
    /// Anneal to zero over `total` epochs.
    Cosine { total: usize },
}

pub fn lr_schedule(base: f64, schedule: &Schedule, epoch: usize) -> f64 {
    match schedule {
        Schedule::Constant => base,
        Schedule::Step { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| epoch >= m).count();
            base * factor.powi(passed as i32)
        }
        Schedule::Cosine { total } => {
            if *total == 0 || epoch >= *total {
                return if *total == 0 { base } else { 0.0 };
            }
            0.5 * base * (1.0 + (PI * epoch as f64 / *total as f64).cos())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub method: Method,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub rho: f64,
    pub xi: f64,
    /// Microbatch size for m-sharpness; 0 uses the whole batch.
    pub microbatch: usize,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            method: Method::Saq,
            lr: 0.05,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: 5e-4,
            rho: 0.1,
            xi: DEFAULT_XI,
            microbatch: 0,
            schedule: Schedule::Constant,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.rho >= 0.0) {
            return Err(Error::config(format!("rho must be non-negative, got {}", self.rho)));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("weight decay must be >= 0 and momentum in [0, 1)"));
        }
        if !(self.xi > 0.0) {
            return Err(Error::config("xi must be positive"));
        }
        Ok(())
    }
}

/// A perturbation together with the gradient it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationState {
    pub eps: Vec<f64>,
    pub norm: f64,
    pub grad: Vec<f64>,
}

/// `ρ·g/‖g‖`, or zero when `‖g‖` is below [`GRAD_NORM_FLOOR`].
pub fn compute_epsilon_hat(grad: &[f64], rho: f64) -> PerturbationState {
    let gn = l2_norm(grad);
    let eps: Vec<f64> = if gn < GRAD_NORM_FLOOR {
        vec![0.0; grad.len()]
    } else {
        grad.iter().map(|g| rho * g / gn).collect()
    };
    PerturbationState {
        norm: l2_norm(&eps),
        eps,
        grad: grad.to_vec(),
    }
}

/// `ρ·t²⊙g/‖t⊙g‖` with `t = |q| + ξ`.
pub fn asaq_epsilon(grad: &[f64], qweights: &[f64], rho: f64, xi: f64) -> Result<PerturbationState> {
    if grad.len() != qweights.len() {
        return Err(Error::dim(format!(
            "gradient has {} entries, weights {}",
            grad.len(),
            qweights.len()
        )));
    }
    let t: Vec<f64> = qweights.iter().map(|q| q.abs() + xi).collect();
    let tg: Vec<f64> = t.iter().zip(grad).map(|(t, g)| t * g).collect();
    let n = l2_norm(&tg);
    let eps: Vec<f64> = if n < GRAD_NORM_FLOOR {
        vec![0.0; grad.len()]
    } else {
        t.iter().zip(&tg).map(|(t, tg)| rho * t * tg / n).collect()
    };
    Ok(PerturbationState {
        norm: l2_norm(&eps),
        eps,
        grad: grad.to_vec(),
    })
}

/// Fraction of weights whose quantized value a full-precision perturbation
/// leaves unchanged.
pub fn survival_rate(w: &[f64], eps: &[f64], bits: u8, alpha: f64) -> Result<f64> {
    if w.len() != eps.len() || w.is_empty() {
        return Err(Error::dim("weights and perturbation must be equal-length and non-empty"));
    }
    quantizer::check_bits(bits)?;
    let same = w
        .iter()
        .zip(eps)
        .filter(|(w, e)| {
            quantizer::quantize_w_scalar(**w, bits, alpha) == quantizer::quantize_w_scalar(**w + **e, bits, alpha)
        })
        .count();
    Ok(same as f64 / w.len() as f64)
}

/// One momentum-SGD update on flat parameters: `v ← μv + g + λp`, `p ← p − ηv`.
pub fn momentum_update(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, decay: f64) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + decay * *p;
        *p -= lr * *v;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Size-weighted mean clean loss over the microbatches.
    pub loss: f64,
    /// Mean norm of the perturbations applied (0 for SGD).
    pub eps_norm: f64,
}

/// Optimizer state: velocity buffers and counters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub velocity: Vec<Vec<f64>>,
    pub steps: u64,
    /// Forward/backward passes performed so far.
    pub passes: u64,
}

impl OptimState {
    pub fn new(config: OptimConfig, model: &Model) -> Result<Self> {
        config.validate()?;
        Ok(OptimState {
            velocity: model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            config,
            steps: 0,
            passes: 0,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.config.lr, &self.config.schedule, epoch)
    }

    /// One step of the configured method.
    pub fn step(&mut self, model: &mut Model, batch: &Batch, cfg: &BitwidthConfig, lr: f64) -> Result<StepOutcome> {
        self.step_with(self.config.method, model, batch, cfg, lr)
    }

    pub fn sgd_step(&mut self, model: &mut Model, batch: &Batch, cfg: &BitwidthConfig, lr: f64) -> Result<StepOutcome> {
        self.step_with(Method::Sgd, model, batch, cfg, lr)
    }

    pub fn sam_step(&mut self, model: &mut Model, batch: &Batch, cfg: &BitwidthConfig, lr: f64) -> Result<StepOutcome> {
        self.step_with(Method::Sam, model, batch, cfg, lr)
    }

    pub fn saq_step(&mut self, model: &mut Model, batch: &Batch, cfg: &BitwidthConfig, lr: f64) -> Result<StepOutcome> {
        self.step_with(Method::Saq, model, batch, cfg, lr)
    }

    pub fn asaq_step(&mut self, model: &mut Model, batch: &Batch, cfg: &BitwidthConfig, lr: f64) -> Result<StepOutcome> {
        self.step_with(Method::Asaq, model, batch, cfg, lr)
    }

    pub fn step_with(
        &mut self,
        method: Method,
        model: &mut Model,
        batch: &Batch,
        cfg: &BitwidthConfig,
        lr: f64,
    ) -> Result<StepOutcome> {
        let m = if self.config.microbatch == 0 {
            batch.len()
        } else {
            self.config.microbatch
        };
        let micro = batch.chunks(m)?;
        let total = batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        let mut loss = 0.0;
        let mut eps_norm = 0.0;
        let mut stats = Vec::new();
        for mb in &micro {
            let weight = mb.len() as f64 / total;
            let (clean_loss, clean) = model.loss_and_grads(mb, cfg, Mode::Train, None)?;
            self.passes += 1;
            check_loss(clean_loss)?;
            loss += weight * clean_loss;
            let mb_grads = if method == Method::Sgd {
                clean.param_grads()?
            } else {
                let perturbation = self.perturbation(method, model, &clean)?;
                eps_norm += l2_norm(&perturbation.eps) / micro.len() as f64;
                let (pl, perturbed) = model.loss_and_grads(mb, cfg, Mode::Train, Some(&perturbation))?;
                self.passes += 1;
                check_loss(pl)?;
                perturbed.param_grads()?
            };
            stats.extend(clean.bn_stats);
            for (acc, g) in grads.iter_mut().zip(mb_grads) {
                for (a, v) in acc.iter_mut().zip(g.data()) {
                    *a += weight * v;
                }
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "gradient".into() });
        }
        model.commit_bn(&stats);
        let (momentum, decay) = (self.config.momentum, self.config.weight_decay);
        for ((p, g), v) in model.params_mut().iter_mut().zip(&grads).zip(self.velocity.iter_mut()) {
            let d = if p.role.decays() { decay } else { 0.0 };
            momentum_update(p.value.data_mut(), g, v, lr, momentum, d);
        }
        check_params(model)?;
        self.steps += 1;
        Ok(StepOutcome { loss, eps_norm })
    }

    fn perturbation(&self, method: Method, model: &Model, clean: &crate::netlib::ForwardPass) -> Result<Perturbation> {
        let rho = self.config.rho;
        Ok(match method {
            Method::Saq => Perturbation {
                target: PerturbTarget::Quantized,
                eps: compute_epsilon_hat(&clean.flat_qweight_grads()?, rho).eps,
            },
            Method::Asaq => Perturbation {
                target: PerturbTarget::Quantized,
                eps: asaq_epsilon(&clean.flat_qweight_grads()?, &clean.flat_qweights(), rho, self.config.xi)?.eps,
            },
            Method::Sam => Perturbation {
                target: PerturbTarget::FullPrecision,
                eps: compute_epsilon_hat(&weight_grads(model, clean)?, rho).eps,
            },
            Method::Sgd => unreachable!("sgd has no perturbation"),
        })
    }
}

/// Rejects non-finite parameters and clipping levels that underflow to zero.
fn check_params(model: &Model) -> Result<()> {
    for p in model.params() {
        let bad = match p.role {
            ParamRole::LogAlphaW(_) | ParamRole::LogAlphaZ(_) => p.value.data().iter().any(|v| !(v.exp() > 0.0 && v.exp().is_finite())),
            _ => p.value.data().iter().any(|v| !v.is_finite()),
        };
        if bad {
            return Err(Error::NonFinite {
                op: format!("update of `{}`", p.name),
            });
        }
    }
    Ok(())
}

fn check_loss(loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "loss".into() })
    }
}

/// Flat gradient with respect to the full-precision conv/linear weights.
pub fn weight_grads(model: &Model, pass: &crate::netlib::ForwardPass) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(model.quantized_weight_count());
    for (p, &v) in model.params().iter().zip(&pass.params) {
        if p.role == ParamRole::Weight {
            out.extend(pass.tape.grad(v)?.into_data());
        }
    }
    Ok(out)
}

/// Perturbs the full-precision weights along the normalized ascent direction
/// and reports the fraction of quantized weights that did not move.
pub fn naive_sam_quant_diag(model: &Model, batch: &Batch, cfg: &BitwidthConfig, rho: f64) -> Result<f64> {
    let (_, pass) = model.loss_and_grads(batch, cfg, Mode::Train, None)?;
    let eps = compute_epsilon_hat(&weight_grads(model, &pass)?, rho).eps;
    let before = model.quantized_weights(cfg, None)?;
    let after = model.quantized_weights(cfg, Some(&eps))?;
    let same = before.iter().zip(&after).filter(|(a, b)| a == b).count();
    Ok(same as f64 / before.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_examples() {
        let e = compute_epsilon_hat(&[3.0, 4.0], 0.1);
        assert!((e.eps[0] - 0.06).abs() < 1e-15 && (e.eps[1] - 0.08).abs() < 1e-15);
        assert_eq!(compute_epsilon_hat(&[0.0, 0.0], 0.1).eps, vec![0.0, 0.0]);
    }

    #[test]
    fn scalar_sgd_example() {
        let mut w = [1.0];
        let mut v = [0.0];
        momentum_update(&mut w, &[1.0], &mut v, 0.1, 0.0, 0.0);
        assert_eq!(w[0], 0.9);
        let mut w = [2.0];
        let mut v = [0.0];
        momentum_update(&mut w, &[0.0], &mut v, 0.1, 0.0, 0.5);
        assert_eq!(w[0], 2.0 - 0.1 * 0.5 * 2.0);
    }

    #[test]
    fn schedule_examples() {
        let step = Schedule::Step {
            milestones: vec![80, 120],
            factor: 0.1,
        };
        assert!((lr_schedule(0.01, &step, 100) - 0.001).abs() < 1e-15);
        assert!((lr_schedule(0.01, &step, 130) - 0.0001).abs() < 1e-15);
        let cos = Schedule::Cosine { total: 200 };
        assert_eq!(lr_schedule(0.1, &cos, 0), 0.1);
        assert_eq!(lr_schedule(0.1, &cos, 200), 0.0);
        assert!((lr_schedule(0.1, &cos, 100) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn survival_boundary_example() {
        for e in [-0.29, -0.1, 0.0, 0.1, 0.29] {
            assert_eq!(survival_rate(&[0.3], &[e], 2, 1.0).unwrap(), 1.0);
        }
        assert_eq!(survival_rate(&[0.3], &[0.4], 2, 1.0).unwrap(), 0.0);
    }
}
