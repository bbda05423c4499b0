//! End-to-end workflows driven by a [`RunConfig`]: fixed-bitwidth training,
//! bitwidth search, fine-tuning, cost reports and curvature probes.
//!
//! Runs are resumable at epoch boundaries through [`Checkpoint`]s; a resumed
//! run reproduces the uninterrupted one bit for bit.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, NamedTensor, OptimSnapshot, PolicySnapshot, RngState, RunningEntry};
use crate::config::{DatasetSource, ProbeFixture, RunConfig};
use crate::controller::{self, Policy, Reinforce, RewardSettings, SearchSettings};
use crate::costmodel::{self, CostReport};
use crate::data::{self, batches, derive_seed, make_synthetic, split_half, Batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::netlib::{self, BitwidthConfig, Mode, Model, ModelOptions, ModelSpec};
use crate::optim::OptimState;
use crate::probe::{self, LandscapeGrid, ModelTarget, QuadraticTarget, SpectrumResult};
use crate::quantizer::QuantSpec;

/// One structured log line: `event=<name> key=value ...` in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub event: String,
    pub fields: Vec<(String, String)>,
}

impl Record {
    pub fn new(event: &str) -> Self {
        Record {
            event: event.to_string(),
            fields: Vec::new(),
        }
    }

    pub fn field(mut self, key: &str, value: impl fmt::Display) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn quote(v: &str) -> String {
    if !v.is_empty() && !v.contains([' ', '"', '=', '\t', '\n']) {
        return v.to_string();
    }
    let mut s = String::from("\"");
    for c in v.chars() {
        match c {
            '"' => s.push_str("\\\""),
            '\\' => s.push_str("\\\\"),
            '\n' => s.push_str("\\n"),
            c => s.push(c),
        }
    }
    s.push('"');
    s
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "event={}", self.event)?;
        for (k, v) in &self.fields {
            write!(f, " {k}={}", quote(v))?;
        }
        Ok(())
    }
}

pub fn config_record(cfg: &RunConfig) -> Record {
    let mut r = Record::new("config");
    r.fields = cfg.entries();
    r
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Clone, Debug)]
pub struct DataBundle {
    pub train: Dataset,
    pub test: Dataset,
}

/// Synthetic data draws train and test from one stream so that per-class
/// structure (e.g. templates) is shared; IDX data holds out the last
/// `test_samples` examples.
pub fn load_data(cfg: &RunConfig) -> Result<DataBundle> {
    let r = &cfg.run;
    let all = match &r.dataset {
        DatasetSource::Synthetic(kind) => make_synthetic(*kind, r.samples + r.test_samples, r.classes, r.noise, r.data_seed)?,
        DatasetSource::Idx => {
            let (Some(images), Some(labels)) = (&r.idx_images, &r.idx_labels) else {
                return Err(Error::config("idx dataset needs run.idx_images and run.idx_labels"));
            };
            data::load_idx(images, labels)?
        }
    };
    let n = all.len();
    let test_n = r.test_samples.min(n.saturating_sub(1));
    let train_n = match r.dataset {
        DatasetSource::Synthetic(_) => r.samples,
        DatasetSource::Idx => n - test_n,
    };
    if train_n == 0 || test_n == 0 {
        return Err(Error::config(format!("dataset of {n} samples cannot be split into train and test")));
    }
    let idx: Vec<usize> = (0..n).collect();
    Ok(DataBundle {
        train: all.subset(&idx[..train_n], Split::Train)?,
        test: all.subset(&idx[train_n..train_n + test_n], Split::Test)?,
    })
}

pub fn build_spec(cfg: &RunConfig, sample_shape: &[usize]) -> Result<ModelSpec> {
    netlib::spec_by_name(&cfg.run.model, sample_shape, &cfg.run.hidden, cfg.run.classes, cfg.run.edge_policy)
}

/// Bitwidth set covering the search candidates, the uniform training
/// bitwidth, and any explicit configuration.
pub fn quant_spec(cfg: &RunConfig) -> Result<QuantSpec> {
    let mut bits = cfg.quant.bitwidths.clone();
    bits.push(cfg.quant.bits);
    if let Some(c) = &cfg.quant.config {
        bits.extend_from_slice(&c.bits);
    }
    bits.sort_unstable();
    bits.dedup();
    QuantSpec::new(&bits)
}

pub fn build_model_for(cfg: &RunConfig, spec: ModelSpec) -> Result<Model> {
    let options = ModelOptions {
        weight_norm: cfg.run.weight_norm,
        ..ModelOptions::default()
    };
    netlib::build_model(spec, &quant_spec(cfg)?, options, cfg.run.seed)
}

/// The configured fixed bitwidths: the explicit list, or uniform `bits`.
pub fn fixed_config(cfg: &RunConfig, spec: &ModelSpec) -> Result<BitwidthConfig> {
    let c = match &cfg.quant.config {
        Some(c) => c.clone(),
        None => BitwidthConfig::uniform(cfg.quant.bits, spec.searchable_layers().len()),
    };
    spec.resolve_bits(&c)?;
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunKind {
    Train,
    Search,
    Finetune,
}

impl RunKind {
    pub fn name(self) -> &'static str {
        match self {
            RunKind::Train => "train",
            RunKind::Search => "search",
            RunKind::Finetune => "finetune",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(RunKind::Train),
            "search" => Ok(RunKind::Search),
            "finetune" => Ok(RunKind::Finetune),
            other => Err(Error::Consistency(format!("unknown run kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

/// A resumable run.
#[derive(Clone, Debug)]
pub struct Session {
    pub config: RunConfig,
    pub kind: RunKind,
    pub data: DataBundle,
    /// Search only: the training half and the validation half.
    pub halves: Option<(Dataset, Dataset)>,
    pub model: Model,
    pub optim: OptimState,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub policy: Option<(Policy, Reinforce)>,
    /// Bitwidths used by fixed-precision training and fine-tuning.
    pub bits: BitwidthConfig,
    pub chosen: Option<BitwidthConfig>,
}

fn layer_lines(spec: &ModelSpec) -> Vec<String> {
    spec.layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            format!(
                "{i} {} in={:?} out={:?} quantized={} fixed={} shortcut={}",
                l.kind.tag(),
                l.in_shape,
                l.out_shape,
                l.quantized,
                l.fixed_bits.map_or("-".to_string(), |b| b.to_string()),
                l.shortcut
            )
        })
        .collect()
}

impl Session {
    fn base(cfg: RunConfig, kind: RunKind) -> Result<Self> {
        cfg.validate()?;
        let data = load_data(&cfg)?;
        let spec = build_spec(&cfg, data.train.sample_shape())?;
        let bits = fixed_config(&cfg, &spec)?;
        let model = build_model_for(&cfg, spec)?;
        let epochs = match kind {
            RunKind::Search => cfg.search.epochs,
            _ => cfg.run.epochs,
        };
        let optim = OptimState::new(cfg.optim.build(epochs), &model)?;
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.run.seed, 0xC0FFEE));
        Ok(Session {
            halves: None,
            kind,
            data,
            model,
            optim,
            epoch: 0,
            rng,
            policy: None,
            bits,
            chosen: None,
            config: cfg,
        })
    }

    pub fn new_train(cfg: RunConfig) -> Result<Self> {
        Self::base(cfg, RunKind::Train)
    }

    pub fn new_search(cfg: RunConfig) -> Result<Self> {
        let mut s = Self::base(cfg, RunKind::Search)?;
        s.attach_search()?;
        Ok(s)
    }

    fn attach_search(&mut self) -> Result<()> {
        let c = &self.config;
        self.halves = Some(split_half(&self.data.train, derive_seed(c.run.data_seed, 7))?);
        let policy = Policy::new(
            &c.quant.bitwidths,
            self.model.searchable_count(),
            c.search.policy_hidden,
            derive_seed(c.run.seed, 11),
        )?;
        let mut trainer = Reinforce::new(&policy, c.search.entropy, c.search.policy_lr, c.search.policy_decay)?;
        trainer.use_baseline = c.search.baseline;
        self.policy = Some((policy, trainer));
        Ok(())
    }

    /// Fine-tuning run that starts from a finished search: shared weights,
    /// clipping levels and batch-norm state carry over, the optimizer starts
    /// fresh, and training uses the chosen configuration on the full
    /// training set.
    pub fn finetune_from(search: &Checkpoint, cfg: Option<RunConfig>) -> Result<Self> {
        let prior = Session::from_checkpoint(search)?;
        let chosen = prior
            .chosen
            .clone()
            .ok_or_else(|| Error::Consistency("checkpoint has no chosen configuration".into()))?;
        let cfg = cfg.unwrap_or(prior.config);
        let mut s = Self::base(cfg, RunKind::Finetune)?;
        if layer_lines(s.model.spec()) != layer_lines(prior.model.spec()) {
            return Err(Error::Consistency("fine-tune model differs from the searched model".into()));
        }
        s.model = prior.model;
        s.model.remove_perturbation();
        s.optim = OptimState::new(s.config.optim.build(s.config.run.epochs), &s.model)?;
        s.model.spec().resolve_bits(&chosen)?;
        s.bits = chosen.clone();
        s.chosen = Some(chosen);
        Ok(s)
    }

    pub fn total_epochs(&self) -> usize {
        match self.kind {
            RunKind::Search => self.config.search.epochs,
            _ => self.config.run.epochs,
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.total_epochs()
    }

    pub fn evaluate(&self, cfg: &BitwidthConfig) -> Result<Metrics> {
        let bs = self.config.run.batch_size.max(256);
        let (train_loss, train_acc) = self.model.evaluate(&self.data.train, cfg, bs)?;
        let (test_loss, test_acc) = self.model.evaluate(&self.data.test, cfg, bs)?;
        Ok(Metrics {
            train_loss,
            train_acc,
            test_loss,
            test_acc,
        })
    }

    pub fn metrics_record(&self, event: &str, cfg: &BitwidthConfig) -> Result<Record> {
        let m = self.evaluate(cfg)?;
        Ok(Record::new(event)
            .field("epoch", self.epoch)
            .field("config", cfg)
            .field("train_loss", fmt_f(m.train_loss))
            .field("train_acc", fmt_f(m.train_acc))
            .field("test_loss", fmt_f(m.test_loss))
            .field("test_acc", fmt_f(m.test_acc)))
    }

    fn settings(&self) -> Result<SearchSettings> {
        let c = &self.config;
        Ok(SearchSettings {
            reward: RewardSettings {
                rho: c.optim.rho,
                beta: c.search.beta,
                budget: c.search.budget(),
                units: c.search.units,
            },
            warmup: c.search.warmup,
            batch_size: c.run.batch_size,
            val_batch_size: if c.search.val_batch_size == 0 { c.run.batch_size } else { c.search.val_batch_size },
        })
    }

    /// Runs one epoch and returns its log record.
    pub fn run_epoch(&mut self) -> Result<Record> {
        if self.is_done() {
            return Err(Error::contract("run has already finished"));
        }
        let record = match self.kind {
            RunKind::Search => {
                let settings = self.settings()?;
                let (s, v) = self.halves.as_ref().expect("search session has halves");
                let (policy, trainer) = self.policy.as_mut().expect("search session has a policy");
                let e = controller::samq_epoch(
                    self.epoch,
                    &mut self.model,
                    &mut self.optim,
                    policy,
                    trainer,
                    s,
                    v,
                    &settings,
                    self.config.run.seed,
                    &mut self.rng,
                )?;
                let greedy = policy.greedy()?;
                self.epoch += 1;
                Record::new("search_epoch")
                    .field("epoch", self.epoch)
                    .field("policy_updates", e.policy_updates)
                    .field("mean_reward", e.mean_reward.map_or("-".into(), fmt_f))
                    .field("train_loss", fmt_f(e.mean_train_loss))
                    .field("greedy", &greedy.config)
                    .field("greedy_prob", fmt_f(greedy.log_prob.exp()))
            }
            RunKind::Train | RunKind::Finetune => {
                let lr = self.optim.lr_at(self.epoch);
                let bs = batches(
                    &self.data.train,
                    self.config.run.batch_size,
                    derive_seed(self.config.run.seed, self.epoch as u64),
                    false,
                )?;
                for b in &bs {
                    self.optim.step(&mut self.model, b, &self.bits, lr)?;
                }
                self.epoch += 1;
                let bits = self.bits.clone();
                self.metrics_record("epoch", &bits)?.field("lr", fmt_f(lr))
            }
        };
        Ok(record)
    }

    /// Samples feasible configurations from the trained policy and keeps the
    /// one with the best validation accuracy.
    pub fn choose_config(&mut self) -> Result<(BitwidthConfig, f64)> {
        let (policy, _) = self
            .policy
            .as_ref()
            .ok_or_else(|| Error::contract("choose_config needs a search session"))?;
        let spec = self.model.spec().clone();
        let budget = self.config.search.budget().bops(&spec)?;
        let (_, val) = self.halves.as_ref().expect("search session has halves");
        let model = &self.model;
        let bs = self.config.run.batch_size.max(256);
        let (cfg, acc) = controller::infer_config(
            policy,
            budget,
            self.config.search.samples,
            &mut self.rng,
            |c| Ok(costmodel::total_bops(&spec, c)?.total_bops),
            |c| Ok(model.evaluate(val, c, bs)?.1),
        )?;
        self.chosen = Some(cfg.clone());
        Ok((cfg, acc))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let model = &self.model;
        Checkpoint {
            config: self.config.to_text(),
            kind: self.kind.name().into(),
            epoch: self.epoch,
            layers: layer_lines(model.spec()),
            params: model
                .params()
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.clone(),
                })
                .collect(),
            running: model
                .running_keys()
                .into_iter()
                .map(|(layer, bits)| {
                    let rs = model.running_stats(layer, bits).expect("listed key");
                    RunningEntry {
                        layer,
                        bits,
                        mean: rs.mean.clone(),
                        var: rs.var.clone(),
                    }
                })
                .collect(),
            optim: Some(OptimSnapshot {
                steps: self.optim.steps,
                passes: self.optim.passes,
                velocity: self.optim.velocity.clone(),
            }),
            policy: self.policy.as_ref().map(|(p, t)| PolicySnapshot {
                params: p.params.clone(),
                adam_t: t.adam.t,
                adam_m: t.adam.m.clone(),
                adam_v: t.adam.v.clone(),
                baseline: t.baseline,
            }),
            rng: RngState::capture(&self.rng),
            chosen: self.chosen.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = RunConfig::parse(&ckpt.config)?;
        let kind = RunKind::parse(&ckpt.kind)?;
        let mut s = Self::base(cfg, kind)?;
        if kind == RunKind::Search {
            s.attach_search()?;
        }
        if layer_lines(s.model.spec()) != ckpt.layers {
            return Err(Error::Consistency("checkpoint layers do not match the configured model".into()));
        }
        if ckpt.params.len() != s.model.params().len() {
            return Err(Error::Consistency("checkpoint parameter count differs from the model".into()));
        }
        for (p, saved) in s.model.params_mut().iter_mut().zip(&ckpt.params) {
            if p.name != saved.name || p.value.shape() != saved.value.shape() {
                return Err(Error::Consistency(format!("parameter `{}` does not match `{}`", p.name, saved.name)));
            }
            p.value = saved.value.clone();
        }
        if ckpt.running.len() != s.model.running_keys().len() {
            return Err(Error::Consistency("checkpoint batch-norm state differs from the model".into()));
        }
        for r in &ckpt.running {
            let rs = s
                .model
                .running_stats_mut(r.layer, r.bits)
                .ok_or_else(|| Error::Consistency(format!("no batch-norm set for layer {} at {}-bit", r.layer, r.bits)))?;
            if rs.mean.len() != r.mean.len() || rs.var.len() != r.var.len() {
                return Err(Error::Consistency("batch-norm width mismatch".into()));
            }
            rs.mean = r.mean.clone();
            rs.var = r.var.clone();
        }
        if let Some(o) = &ckpt.optim {
            if o.velocity.len() != s.optim.velocity.len()
                || o.velocity.iter().zip(&s.optim.velocity).any(|(a, b)| a.len() != b.len())
            {
                return Err(Error::Consistency("optimizer state does not match the model".into()));
            }
            s.optim.velocity = o.velocity.clone();
            s.optim.steps = o.steps;
            s.optim.passes = o.passes;
        }
        match (&ckpt.policy, s.policy.as_mut()) {
            (Some(p), Some((policy, trainer))) => {
                let shapes_match = p.params.len() == policy.params.len()
                    && p.params.iter().zip(&policy.params).all(|(a, b)| a.shape() == b.shape())
                    && p.adam_m.len() == policy.params.len()
                    && p.adam_v.len() == policy.params.len()
                    && p.adam_m.iter().chain(&p.adam_v).zip(policy.params.iter().chain(&policy.params)).all(|(m, t)| m.len() == t.numel());
                if !shapes_match {
                    return Err(Error::Consistency("policy state does not match the configuration".into()));
                }
                policy.params = p.params.clone();
                trainer.adam.t = p.adam_t;
                trainer.adam.m = p.adam_m.clone();
                trainer.adam.v = p.adam_v.clone();
                trainer.baseline = p.baseline;
            }
            (None, None) => {}
            _ => return Err(Error::Consistency("policy state does not match the run kind".into())),
        }
        if let Some(c) = &ckpt.chosen {
            s.model.spec().resolve_bits(c)?;
            if kind == RunKind::Finetune {
                s.bits = c.clone();
            }
        }
        s.chosen = ckpt.chosen.clone();
        s.rng = ckpt.rng.restore();
        s.epoch = ckpt.epoch;
        Ok(s)
    }
}

/// Cost report for the configured model at its fixed bitwidths.
pub fn bops_report(cfg: &RunConfig) -> Result<CostReport> {
    let spec = match cfg.run.model.as_str() {
        "resnet20" | "resnet18" => build_spec(cfg, &[])?,
        _ => build_spec(cfg, load_data(cfg)?.train.sample_shape())?,
    };
    costmodel::total_bops(&spec, &fixed_config(cfg, &spec)?)
}

/// The probe batch: `probe.samples` training examples in a seeded order.
pub fn probe_batch(cfg: &RunConfig, train: &Dataset) -> Result<Batch> {
    let n = cfg.probe.samples.min(train.len());
    let first = batches(train, n, cfg.probe.seed, true)?;
    first
        .into_iter()
        .next()
        .ok_or_else(|| Error::config("probe batch is empty"))
}

fn quadratic_fixture(cfg: &RunConfig) -> Result<QuadraticTarget> {
    let d = cfg.probe.diag.len();
    QuadraticTarget::diagonal(&cfg.probe.diag, vec![1.0; d])
}

/// Largest Hessian eigenvalue, either of the analytic quadratic fixture or
/// of `session`'s model on the probe batch.
pub fn probe_spectrum(cfg: &RunConfig, session: Option<&Session>) -> Result<SpectrumResult> {
    match cfg.probe.fixture {
        ProbeFixture::Quadratic => probe::lambda_max(&quadratic_fixture(cfg)?, cfg.probe.iters, cfg.probe.tol, cfg.probe.seed),
        ProbeFixture::Model => {
            let s = session.ok_or_else(|| Error::config("model probe needs a model"))?;
            let batch = probe_batch(cfg, &s.data.train)?;
            let target = ModelTarget::new(&s.model, s.bits.clone(), &batch, cfg.probe.space)?;
            probe::lambda_max(&target, cfg.probe.iters, cfg.probe.tol, cfg.probe.seed)
        }
    }
}

/// Loss slice around the fixture or the model, plus the plain evaluation
/// loss at the center point.
pub fn probe_landscape(cfg: &RunConfig, session: Option<&Session>) -> Result<(LandscapeGrid, f64)> {
    let p = &cfg.probe;
    match p.fixture {
        ProbeFixture::Quadratic => {
            let q = quadratic_fixture(cfg)?;
            let grid = probe::landscape_slice(&q, p.halfwidth, p.resolution, p.seed)?;
            let center = probe::CurvatureTarget::loss(&q, &vec![0.0; q.theta.len()])?;
            Ok((grid, center))
        }
        ProbeFixture::Model => {
            let s = session.ok_or_else(|| Error::config("model landscape needs a model"))?;
            let batch = probe_batch(cfg, &s.data.train)?;
            let target = ModelTarget::new(&s.model, s.bits.clone(), &batch, p.space)?;
            let grid = probe::landscape_slice(&target, p.halfwidth, p.resolution, p.seed)?;
            let mut pass = s.model.forward(&batch.x, &s.bits, Mode::Eval)?;
            let l = pass.tape.softmax_cross_entropy(pass.logits, &batch.labels)?;
            Ok((grid, pass.tape.value(l).data()[0]))
        }
    }
}
