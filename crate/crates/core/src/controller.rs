//! Learned per-layer bitwidth search.
//!
//! An LSTM policy emits one bitwidth per searchable layer, feeding each
//! decision back as the next step's input. The policy is trained with
//! REINFORCE to minimize a perturbed validation loss plus a budget penalty,
//! alternating with sharpness-aware updates of the shared weights.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::costmodel::{self, Budget, CostUnits};
use crate::data::{batches, derive_seed, Batch, Dataset};
use crate::error::{Error, Result};
use crate::netlib::{BitwidthConfig, Mode, Model, PerturbTarget, Perturbation};
use crate::optim::{compute_epsilon_hat, OptimState};
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_ENTROPY_COEF: f64 = 5e-3;
pub const DEFAULT_POLICY_LR: f64 = 5e-4;
pub const DEFAULT_POLICY_DECAY: f64 = 5e-5;
pub const BASELINE_DECAY: f64 = 0.9;
/// Reward assigned to a configuration whose loss is not finite.
pub const INVALID_REWARD: f64 = 1e6;
pub const DEFAULT_INFER_SAMPLES: usize = 20;

const EMB: usize = 0;
const W_IH: usize = 1;
const W_HH: usize = 2;
const B_LSTM: usize = 3;
const W_OUT: usize = 4;
const B_OUT: usize = 5;

/// Autoregressive LSTM policy over a fixed bitwidth set.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub bitwidths: Vec<u8>,
    pub layers: usize,
    pub hidden: usize,
    /// Embedding table (one row per bitwidth plus a start row), LSTM input
    /// and recurrent weights, LSTM bias, output weights, output bias.
    pub params: Vec<Tensor>,
}

/// One sampled configuration and the quantities REINFORCE needs from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub actions: Vec<usize>,
    pub config: BitwidthConfig,
    pub log_prob: f64,
    /// Entropy of each step's distribution at the visited state.
    pub entropies: Vec<f64>,
}

impl Trajectory {
    pub fn entropy(&self) -> f64 {
        self.entropies.iter().sum()
    }
}

/// Taped unroll of the policy along a fixed action sequence.
pub struct PolicyTape {
    pub tape: Tape,
    pub params: Vec<Var>,
    /// `[1, K]` log-probabilities at each step.
    pub log_probs: Vec<Var>,
}

impl PolicyTape {
    pub fn step_probs(&self, t: usize) -> Vec<f64> {
        self.tape.value(self.log_probs[t]).data().iter().map(|l| l.exp()).collect()
    }
}

impl Policy {
    /// LSTM weights are drawn from `U(−0.1, 0.1)`; the output head starts at
    /// zero so the initial policy is uniform at every step.
    pub fn new(bitwidths: &[u8], layers: usize, hidden: usize, seed: u64) -> Result<Self> {
        if bitwidths.is_empty() || hidden == 0 {
            return Err(Error::Parameter("policy needs bitwidths and a hidden size".into()));
        }
        let k = bitwidths.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-0.1..0.1)).collect())
        };
        let params = vec![
            uniform(&[k + 1, hidden])?,
            uniform(&[4 * hidden, hidden])?,
            uniform(&[4 * hidden, hidden])?,
            uniform(&[4 * hidden])?,
            Tensor::zeros(&[k, hidden]),
            Tensor::zeros(&[k]),
        ];
        Ok(Policy {
            bitwidths: bitwidths.to_vec(),
            layers,
            hidden,
            params,
        })
    }

    pub fn choices(&self) -> usize {
        self.bitwidths.len()
    }

    /// Mutable output bias, one logit offset per bitwidth shared by all steps.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        self.params[B_OUT].data_mut()
    }

    pub fn config_of(&self, actions: &[usize]) -> BitwidthConfig {
        BitwidthConfig::new(actions.iter().map(|&a| self.bitwidths[a]).collect())
    }

    pub fn actions_of(&self, cfg: &BitwidthConfig) -> Result<Vec<usize>> {
        if cfg.len() != self.layers {
            return Err(Error::config(format!(
                "config has {} layers, policy has {}",
                cfg.len(),
                self.layers
            )));
        }
        cfg.bits
            .iter()
            .map(|b| {
                self.bitwidths
                    .iter()
                    .position(|x| x == b)
                    .ok_or_else(|| Error::config(format!("{b}-bit is not a candidate bitwidth")))
            })
            .collect()
    }

    fn lstm_step(&self, tape: &mut Tape, p: &[Var], x: Var, h: Var, c: Var) -> Result<(Var, Var, Var)> {
        let hd = self.hidden;
        let a = tape.linear(x, p[W_IH], Some(p[B_LSTM]))?;
        let r = tape.linear(h, p[W_HH], None)?;
        let gates = tape.add(a, r)?;
        let i = tape.slice_cols(gates, 0, hd)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice_cols(gates, hd, hd)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice_cols(gates, 2 * hd, hd)?;
        let g = tape.tanh(g)?;
        let o = tape.slice_cols(gates, 3 * hd, hd)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        let logits = tape.linear(h, p[W_OUT], Some(p[B_OUT]))?;
        let lp = tape.log_softmax(logits)?;
        Ok((h, c, lp))
    }

    /// Unrolls the policy. With `actions`, follows them; otherwise samples
    /// each step from `rng`.
    fn unroll(&self, actions: Option<&[usize]>, mut rng: Option<&mut ChaCha8Rng>) -> Result<(PolicyTape, Vec<usize>)> {
        let mut tape = Tape::new();
        let p: Vec<Var> = self.params.iter().map(|t| tape.param(t.clone())).collect();
        let mut h = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut c = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut prev = self.choices();
        let mut taken = Vec::with_capacity(self.layers);
        let mut log_probs = Vec::with_capacity(self.layers);
        for t in 0..self.layers {
            let x = tape.rows(p[EMB], &[prev])?;
            let (h2, c2, lp) = self.lstm_step(&mut tape, &p, x, h, c)?;
            h = h2;
            c = c2;
            let a = match (actions, rng.as_deref_mut()) {
                (Some(acts), _) => acts[t],
                (None, Some(rng)) => sample_index(tape.value(lp).data(), rng),
                (None, None) => unreachable!("unroll needs actions or an rng"),
            };
            if a >= self.choices() {
                return Err(Error::Index(format!("action {a} out of range")));
            }
            log_probs.push(lp);
            taken.push(a);
            prev = a;
        }
        Ok((
            PolicyTape {
                tape,
                params: p,
                log_probs,
            },
            taken,
        ))
    }

    pub fn tape_along(&self, actions: &[usize]) -> Result<PolicyTape> {
        if actions.len() != self.layers {
            return Err(Error::dim(format!(
                "{} actions for a {}-step policy",
                actions.len(),
                self.layers
            )));
        }
        Ok(self.unroll(Some(actions), None)?.0)
    }

    fn trajectory(&self, pt: &PolicyTape, actions: Vec<usize>) -> Trajectory {
        let mut log_prob = 0.0;
        let mut entropies = Vec::with_capacity(actions.len());
        for (t, &a) in actions.iter().enumerate() {
            let lp = pt.tape.value(pt.log_probs[t]).data();
            log_prob += lp[a];
            entropies.push(-lp.iter().map(|l| if l.is_finite() { l.exp() * l } else { 0.0 }).sum::<f64>());
        }
        Trajectory {
            config: self.config_of(&actions),
            actions,
            log_prob,
            entropies,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
        let (pt, actions) = self.unroll(None, Some(rng))?;
        Ok(self.trajectory(&pt, actions))
    }

    /// Replays a fixed action sequence.
    pub fn replay(&self, actions: &[usize]) -> Result<Trajectory> {
        let pt = self.tape_along(actions)?;
        Ok(self.trajectory(&pt, actions.to_vec()))
    }

    pub fn log_prob(&self, cfg: &BitwidthConfig) -> Result<f64> {
        Ok(self.replay(&self.actions_of(cfg)?)?.log_prob)
    }

    /// Most likely action at each step, following the greedy path.
    pub fn greedy(&self) -> Result<Trajectory> {
        let mut actions: Vec<usize> = Vec::with_capacity(self.layers);
        for t in 0..self.layers {
            let mut prefix = actions.clone();
            prefix.resize(self.layers, 0);
            let pt = self.tape_along(&prefix)?;
            let lp = pt.tape.value(pt.log_probs[t]).data();
            let best = (0..lp.len())
                .max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a)))
                .expect("non-empty");
            actions.push(best);
        }
        self.replay(&actions)
    }

    /// Sum of per-step entropies along `actions` and its gradient.
    pub fn entropy_and_grad(&self, actions: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let mut pt = self.tape_along(actions)?;
        let mut total = None;
        for &lp in &pt.log_probs.clone() {
            let h = step_entropy(&mut pt.tape, lp)?;
            total = Some(match total {
                None => h,
                Some(acc) => pt.tape.add(acc, h)?,
            });
        }
        let total = total.ok_or_else(|| Error::contract("entropy of an empty policy"))?;
        let value = pt.tape.value(total).data()[0];
        pt.tape.backward(total)?;
        let grads = pt.params.iter().map(|&v| pt.tape.grad(v)).collect::<Result<_>>()?;
        Ok((value, grads))
    }

    /// Gradient of the single-sample surrogate
    /// `Σ_s log π_s · (A − α Σ_{t>s} H_t) − α Σ_t H_t`,
    /// whose expectation is the gradient of `E[R] − α E[Σ_t H_t]` when `A` is
    /// the reward minus a constant baseline.
    pub fn surrogate_grad(&self, actions: &[usize], advantage: f64, alpha: f64) -> Result<Vec<Tensor>> {
        let mut pt = self.tape_along(actions)?;
        let lps = pt.log_probs.clone();
        let mut ents = Vec::with_capacity(lps.len());
        for &lp in &lps {
            ents.push(step_entropy(&mut pt.tape, lp)?);
        }
        let ent_vals: Vec<f64> = ents.iter().map(|&h| pt.tape.value(h).data()[0]).collect();
        let mut terms = Vec::new();
        for (s, (&lp, &a)) in lps.iter().zip(actions).enumerate() {
            let later: f64 = ent_vals[s + 1..].iter().sum();
            let picked = pt.tape.pick_columns(lp, &[a])?;
            let picked = pt.tape.sum(picked)?;
            terms.push(pt.tape.scale(picked, advantage - alpha * later)?);
            terms.push(pt.tape.scale(ents[s], -alpha)?);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = pt.tape.add(total, t)?;
        }
        let total = pt.tape.sum(total)?;
        pt.tape.backward(total)?;
        pt.params.iter().map(|&v| pt.tape.grad(v)).collect()
    }
}

fn step_entropy(tape: &mut Tape, lp: Var) -> Result<Var> {
    let p = tape.exp(lp)?;
    let plp = tape.mul(p, lp)?;
    let s = tape.sum(plp)?;
    tape.scale(s, -1.0)
}

fn sample_index(log_probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs
        .iter()
        .enumerate()
        .rev()
        .find(|(_, l)| l.exp() > 0.0)
        .map_or(log_probs.len() - 1, |(i, _)| i)
}

/// Adam with an L2 term added to the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, params: &[Tensor]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj + self.weight_decay * *w;
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * gj;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * gj * gj;
                let mh = self.m[i][j] / c1;
                let vh = self.v[i][j] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// REINFORCE trainer state: entropy coefficient, reward baseline and Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Reinforce {
    pub alpha: f64,
    /// Subtract an exponential moving average of the reward.
    pub use_baseline: bool,
    pub baseline: Option<f64>,
    pub adam: Adam,
}

impl Reinforce {
    pub fn new(policy: &Policy, alpha: f64, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::Parameter(format!("entropy coefficient must be >= 0, got {alpha}")));
        }
        Ok(Reinforce {
            alpha,
            use_baseline: true,
            baseline: None,
            adam: Adam::new(lr, weight_decay, &policy.params),
        })
    }

    /// One policy update from sampled trajectories and their rewards.
    pub fn step(&mut self, policy: &mut Policy, samples: &[(Trajectory, f64)]) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::contract("reinforce step needs at least one sample"));
        }
        let mean = samples.iter().map(|(_, r)| r).sum::<f64>() / samples.len() as f64;
        let baseline = if self.use_baseline {
            *self.baseline.get_or_insert(mean)
        } else {
            0.0
        };
        let mut grads: Vec<Tensor> = policy.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let w = 1.0 / samples.len() as f64;
        for (traj, reward) in samples {
            let g = policy.surrogate_grad(&traj.actions, reward - baseline, self.alpha)?;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += w * b);
            }
        }
        if self.use_baseline {
            self.baseline = Some(BASELINE_DECAY * baseline + (1.0 - BASELINE_DECAY) * mean);
        }
        self.adam.update(&mut policy.params, &grads);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardSettings {
    pub rho: f64,
    pub beta: f64,
    pub budget: Budget,
    pub units: CostUnits,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardOutcome {
    pub reward: f64,
    pub perturbed_loss: f64,
    /// Cost in the penalty's units.
    pub cost: f64,
    pub valid: bool,
}

/// Perturbed validation loss under `cfg` plus the budget penalty. Batch norm
/// runs in eval mode. A non-finite loss yields [`INVALID_REWARD`].
pub fn compute_reward(model: &Model, cfg: &BitwidthConfig, val: &Batch, settings: &RewardSettings) -> Result<RewardOutcome> {
    let spec = model.spec();
    let report = costmodel::total_bops(spec, cfg)?;
    let budget = settings.budget.bops(spec)? as f64;
    let (cost, target) = match settings.units {
        CostUnits::Normalized => (report.normalized(), budget / report.full_precision_bops as f64),
        CostUnits::Raw => (report.total_bops as f64, budget),
    };
    let penalty = costmodel::constraint_penalty(cost, target, settings.beta)?;
    let perturbed = (|| -> Result<f64> {
        let (loss, pass) = model.loss_and_grads(val, cfg, Mode::Eval, None)?;
        if settings.rho == 0.0 {
            return Ok(loss);
        }
        let eps = compute_epsilon_hat(&pass.flat_qweight_grads()?, settings.rho).eps;
        let p = Perturbation {
            target: PerturbTarget::Quantized,
            eps,
        };
        let mut fwd = model.forward_with(&val.x, cfg, Mode::Eval, Some(&p))?;
        let l = fwd.tape.softmax_cross_entropy(fwd.logits, &val.labels)?;
        Ok(fwd.tape.value(l).data()[0])
    })();
    match perturbed {
        Ok(loss) if loss.is_finite() => Ok(RewardOutcome {
            reward: loss + penalty,
            perturbed_loss: loss,
            cost,
            valid: true,
        }),
        Ok(_) | Err(Error::NonFinite { .. }) => Ok(RewardOutcome {
            reward: INVALID_REWARD,
            perturbed_loss: f64::NAN,
            cost,
            valid: false,
        }),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSettings {
    pub reward: RewardSettings,
    pub warmup: usize,
    pub batch_size: usize,
    pub val_batch_size: usize,
}

/// Per-epoch summary of [`samq_epoch`].
#[derive(Clone, Debug, PartialEq)]
pub struct SearchEpoch {
    pub epoch: usize,
    pub policy_updates: usize,
    pub mean_reward: Option<f64>,
    pub mean_train_loss: f64,
}

/// One epoch of the alternating search: after warmup, a policy phase over
/// validation batches, then a weight phase over training batches with a
/// freshly sampled configuration per batch.
#[allow(clippy::too_many_arguments)]
pub fn samq_epoch(
    epoch: usize,
    model: &mut Model,
    optim: &mut OptimState,
    policy: &mut Policy,
    trainer: &mut Reinforce,
    train: &Dataset,
    val: &Dataset,
    settings: &SearchSettings,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<SearchEpoch> {
    let mut rewards = Vec::new();
    if epoch >= settings.warmup {
        for vb in batches(val, settings.val_batch_size, derive_seed(seed ^ 0x5A5A, epoch as u64), false)? {
            let traj = policy.sample(rng)?;
            let r = compute_reward(model, &traj.config, &vb, &settings.reward)?;
            rewards.push(r.reward);
            trainer.step(policy, &[(traj, r.reward)])?;
        }
    }
    let lr = optim.lr_at(epoch);
    let mut losses = Vec::new();
    for tb in batches(train, settings.batch_size, derive_seed(seed, epoch as u64), false)? {
        let traj = policy.sample(rng)?;
        losses.push(optim.step(model, &tb, &traj.config, lr)?.loss);
    }
    Ok(SearchEpoch {
        epoch,
        policy_updates: rewards.len(),
        mean_reward: (!rewards.is_empty()).then(|| rewards.iter().sum::<f64>() / rewards.len() as f64),
        mean_train_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
    })
}

/// Runs epochs `0..epochs` of the alternating search.
#[allow(clippy::too_many_arguments)]
pub fn samq_train(
    model: &mut Model,
    optim: &mut OptimState,
    policy: &mut Policy,
    trainer: &mut Reinforce,
    train: &Dataset,
    val: &Dataset,
    settings: &SearchSettings,
    epochs: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SearchEpoch>> {
    (0..epochs)
        .map(|e| samq_epoch(e, model, optim, policy, trainer, train, val, settings, seed, rng))
        .collect()
}

/// Rejection-samples up to `100·k` configurations until `k` satisfy the
/// budget, scores each distinct one, and returns the highest score; ties go
/// to lower cost, then the lexicographically smaller configuration.
pub fn infer_config(
    policy: &Policy,
    budget: u64,
    k: usize,
    rng: &mut ChaCha8Rng,
    mut cost: impl FnMut(&BitwidthConfig) -> Result<u64>,
    mut score: impl FnMut(&BitwidthConfig) -> Result<f64>,
) -> Result<(BitwidthConfig, f64)> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    let mut feasible: BTreeMap<BitwidthConfig, u64> = BTreeMap::new();
    let mut accepted = 0;
    for _ in 0..100 * k {
        let cfg = policy.sample(rng)?.config;
        let c = cost(&cfg)?;
        if c <= budget {
            feasible.insert(cfg, c);
            accepted += 1;
            if accepted == k {
                break;
            }
        }
    }
    if feasible.is_empty() {
        return Err(Error::Infeasible { budget });
    }
    let mut best: Option<(BitwidthConfig, f64, u64)> = None;
    for (cfg, c) in feasible {
        let s = score(&cfg)?;
        let better = match &best {
            None => true,
            Some((bc, bs, bcost)) => s > *bs || (s == *bs && (c < *bcost || (c == *bcost && cfg < *bc))),
        };
        if better {
            best = Some((cfg, s, c));
        }
    }
    let (cfg, s, _) = best.expect("non-empty");
    Ok((cfg, s))
}
