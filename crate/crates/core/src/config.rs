//! Plain-text run configuration.
//!
//! ```text
//! # comment
//! [run]
//! model = mlp
//! hidden = 64,64
//!
//! [optim]
//! method = saq
//! ```
//!
//! Every key has a default; unknown sections and keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::costmodel::{Budget, CostUnits};
use crate::data::SyntheticKind;
use crate::error::{Error, Result};
use crate::netlib::BitwidthConfig;
use crate::optim::{Method, OptimConfig, Schedule};
use crate::probe::ProbeSpace;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Synthetic(SyntheticKind),
    Idx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub model: String,
    pub hidden: Vec<usize>,
    pub dataset: DatasetSource,
    pub samples: usize,
    pub test_samples: usize,
    pub classes: usize,
    pub noise: f64,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub data_seed: u64,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub edge_policy: bool,
    pub weight_norm: bool,
    pub output: String,
    pub deterministic: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Step,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimSection {
    pub method: Method,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub rho: f64,
    pub xi: f64,
    pub microbatch: usize,
    pub schedule: ScheduleKind,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
}

impl OptimSection {
    /// Optimizer settings for a run of `epochs` epochs (the cosine horizon).
    pub fn build(&self, epochs: usize) -> OptimConfig {
        OptimConfig {
            method: self.method,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            rho: self.rho,
            xi: self.xi,
            microbatch: self.microbatch,
            schedule: match self.schedule {
                ScheduleKind::Constant => Schedule::Constant,
                ScheduleKind::Step => Schedule::Step {
                    milestones: self.milestones.clone(),
                    factor: self.decay_factor,
                },
                ScheduleKind::Cosine => Schedule::Cosine { total: epochs },
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantSection {
    pub bitwidths: Vec<u8>,
    pub bits: u8,
    /// Explicit per-layer bitwidths; overrides `bits` when set.
    pub config: Option<BitwidthConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSection {
    /// Budget as a fraction of full-precision BOPs.
    pub budget: f64,
    /// Absolute budget in BOPs; overrides `budget` when nonzero.
    pub budget_bops: u64,
    pub beta: f64,
    pub entropy: f64,
    pub policy_lr: f64,
    pub policy_decay: f64,
    pub policy_hidden: usize,
    pub warmup: usize,
    pub epochs: usize,
    pub samples: usize,
    pub val_batch_size: usize,
    pub units: CostUnits,
    pub baseline: bool,
}

impl SearchSection {
    pub fn budget(&self) -> Budget {
        if self.budget_bops > 0 {
            Budget::Absolute(self.budget_bops)
        } else {
            Budget::Fraction(self.budget)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeFixture {
    Model,
    Quadratic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSection {
    pub samples: usize,
    pub iters: usize,
    pub tol: f64,
    pub space: ProbeSpace,
    pub halfwidth: f64,
    pub resolution: usize,
    pub seed: u64,
    pub fixture: ProbeFixture,
    /// Diagonal of the quadratic fixture.
    pub diag: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run: RunSection,
    pub optim: OptimSection,
    pub quant: QuantSection,
    pub search: SearchSection,
    pub probe: ProbeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection {
                model: "mlp".into(),
                hidden: vec![64, 64],
                dataset: DatasetSource::Synthetic(SyntheticKind::Gaussians),
                samples: 300,
                test_samples: 4000,
                classes: 4,
                noise: 1.0,
                idx_images: None,
                idx_labels: None,
                data_seed: 100,
                seed: 0,
                epochs: 60,
                batch_size: 64,
                edge_policy: true,
                weight_norm: false,
                output: "run".into(),
                deterministic: true,
            },
            optim: OptimSection {
                method: Method::Saq,
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
                rho: 0.1,
                xi: 0.01,
                microbatch: 0,
                schedule: ScheduleKind::Cosine,
                milestones: vec![80, 120],
                decay_factor: 0.1,
            },
            quant: QuantSection {
                bitwidths: vec![2, 3, 4, 5],
                bits: 2,
                config: None,
            },
            search: SearchSection {
                budget: 0.016,
                budget_bops: 0,
                beta: 1e-4,
                entropy: 5e-3,
                policy_lr: 5e-4,
                policy_decay: 5e-5,
                policy_hidden: 64,
                warmup: 10,
                epochs: 100,
                samples: 20,
                val_batch_size: 0,
                units: CostUnits::Normalized,
                baseline: true,
            },
            probe: ProbeSection {
                samples: 500,
                iters: 100,
                tol: 1e-4,
                space: ProbeSpace::Quantized,
                halfwidth: 1.0,
                resolution: 21,
                seed: 0,
                fixture: ProbeFixture::Model,
                diag: vec![1.0, 2.0, 5.0],
            },
        }
    }
}

/// Sections and keys in canonical order.
pub const KEYS: &[(&str, &[&str])] = &[
    (
        "run",
        &[
            "model",
            "hidden",
            "dataset",
            "samples",
            "test_samples",
            "classes",
            "noise",
            "idx_images",
            "idx_labels",
            "data_seed",
            "seed",
            "epochs",
            "batch_size",
            "edge_policy",
            "weight_norm",
            "output",
            "deterministic",
        ],
    ),
    (
        "optim",
        &[
            "method",
            "lr",
            "momentum",
            "weight_decay",
            "rho",
            "xi",
            "microbatch",
            "schedule",
            "milestones",
            "decay_factor",
        ],
    ),
    ("quant", &["bitwidths", "bits", "config"]),
    (
        "search",
        &[
            "budget",
            "budget_bops",
            "beta",
            "entropy",
            "policy_lr",
            "policy_decay",
            "policy_hidden",
            "warmup",
            "epochs",
            "samples",
            "val_batch_size",
            "units",
            "baseline",
        ],
    ),
    (
        "probe",
        &[
            "samples",
            "iters",
            "tol",
            "space",
            "halfwidth",
            "resolution",
            "seed",
            "fixture",
            "diag",
        ],
    ),
];

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::config(format!("`{key}`: cannot parse list item `{}`", p.trim())))
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

/// Shortest representation that parses back to the same value.
fn num(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::config(format!("line {}: {msg}", n + 1));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("malformed section header `{line}`")))?
                    .trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(at(format!("unknown section `{name}`")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| at("key outside of any section".into()))?;
            cfg.set(sec, key.trim(), value.trim())
                .map_err(|e| at(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
        let (sec, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::config(format!("override key `{path}` is not section.key")))?;
        self.set(sec, key, value.trim())
    }

    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        let k = full.as_str();
        match (section, key) {
            ("run", "model") => self.run.model = v.to_string(),
            ("run", "hidden") => self.run.hidden = parse_list(k, v)?,
            ("run", "dataset") => {
                self.run.dataset = if v == "idx" {
                    DatasetSource::Idx
                } else {
                    DatasetSource::Synthetic(v.parse().map_err(|_| Error::config(format!("`{k}`: unknown dataset `{v}`")))?)
                }
            }
            ("run", "samples") => self.run.samples = parse_num(k, v)?,
            ("run", "test_samples") => self.run.test_samples = parse_num(k, v)?,
            ("run", "classes") => self.run.classes = parse_num(k, v)?,
            ("run", "noise") => self.run.noise = parse_num(k, v)?,
            ("run", "idx_images") => self.run.idx_images = (!v.is_empty()).then(|| PathBuf::from(v)),
            ("run", "idx_labels") => self.run.idx_labels = (!v.is_empty()).then(|| PathBuf::from(v)),
            ("run", "data_seed") => self.run.data_seed = parse_num(k, v)?,
            ("run", "seed") => self.run.seed = parse_num(k, v)?,
            ("run", "epochs") => self.run.epochs = parse_num(k, v)?,
            ("run", "batch_size") => self.run.batch_size = parse_num(k, v)?,
            ("run", "edge_policy") => self.run.edge_policy = parse_bool(k, v)?,
            ("run", "weight_norm") => self.run.weight_norm = parse_bool(k, v)?,
            ("run", "output") => self.run.output = v.to_string(),
            ("run", "deterministic") => self.run.deterministic = parse_bool(k, v)?,
            ("optim", "method") => self.optim.method = v.parse()?,
            ("optim", "lr") => self.optim.lr = parse_num(k, v)?,
            ("optim", "momentum") => self.optim.momentum = parse_num(k, v)?,
            ("optim", "weight_decay") => self.optim.weight_decay = parse_num(k, v)?,
            ("optim", "rho") => self.optim.rho = parse_num(k, v)?,
            ("optim", "xi") => self.optim.xi = parse_num(k, v)?,
            ("optim", "microbatch") => self.optim.microbatch = parse_num(k, v)?,
            ("optim", "schedule") => {
                self.optim.schedule = match v {
                    "constant" => ScheduleKind::Constant,
                    "step" => ScheduleKind::Step,
                    "cosine" => ScheduleKind::Cosine,
                    other => return Err(Error::config(format!("`{k}`: unknown schedule `{other}`"))),
                }
            }
            ("optim", "milestones") => self.optim.milestones = parse_list(k, v)?,
            ("optim", "decay_factor") => self.optim.decay_factor = parse_num(k, v)?,
            ("quant", "bitwidths") => self.quant.bitwidths = parse_list(k, v)?,
            ("quant", "bits") => self.quant.bits = parse_num(k, v)?,
            ("quant", "config") => {
                self.quant.config = if v.is_empty() { None } else { Some(v.parse()?) }
            }
            ("search", "budget") => self.search.budget = parse_num(k, v)?,
            ("search", "budget_bops") => self.search.budget_bops = parse_num(k, v)?,
            ("search", "beta") => self.search.beta = parse_num(k, v)?,
            ("search", "entropy") => self.search.entropy = parse_num(k, v)?,
            ("search", "policy_lr") => self.search.policy_lr = parse_num(k, v)?,
            ("search", "policy_decay") => self.search.policy_decay = parse_num(k, v)?,
            ("search", "policy_hidden") => self.search.policy_hidden = parse_num(k, v)?,
            ("search", "warmup") => self.search.warmup = parse_num(k, v)?,
            ("search", "epochs") => self.search.epochs = parse_num(k, v)?,
            ("search", "samples") => self.search.samples = parse_num(k, v)?,
            ("search", "val_batch_size") => self.search.val_batch_size = parse_num(k, v)?,
            ("search", "units") => {
                self.search.units = match v {
                    "normalized" => CostUnits::Normalized,
                    "raw" => CostUnits::Raw,
                    other => return Err(Error::config(format!("`{k}`: unknown units `{other}`"))),
                }
            }
            ("search", "baseline") => self.search.baseline = parse_bool(k, v)?,
            ("probe", "samples") => self.probe.samples = parse_num(k, v)?,
            ("probe", "iters") => self.probe.iters = parse_num(k, v)?,
            ("probe", "tol") => self.probe.tol = parse_num(k, v)?,
            ("probe", "space") => {
                self.probe.space = match v {
                    "quantized" => ProbeSpace::Quantized,
                    "full-precision" => ProbeSpace::FullPrecision,
                    other => return Err(Error::config(format!("`{k}`: unknown space `{other}`"))),
                }
            }
            ("probe", "halfwidth") => self.probe.halfwidth = parse_num(k, v)?,
            ("probe", "resolution") => self.probe.resolution = parse_num(k, v)?,
            ("probe", "seed") => self.probe.seed = parse_num(k, v)?,
            ("probe", "fixture") => {
                self.probe.fixture = match v {
                    "model" => ProbeFixture::Model,
                    "quadratic" => ProbeFixture::Quadratic,
                    other => return Err(Error::config(format!("`{k}`: unknown fixture `{other}`"))),
                }
            }
            ("probe", "diag") => self.probe.diag = parse_list(k, v)?,
            _ => return Err(Error::config(format!("unknown key `{full}`"))),
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn get(&self, section: &str, key: &str) -> Result<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Ok(match (section, key) {
            ("run", "model") => self.run.model.clone(),
            ("run", "hidden") => list(&self.run.hidden),
            ("run", "dataset") => match &self.run.dataset {
                DatasetSource::Idx => "idx".into(),
                DatasetSource::Synthetic(k) => k.name().into(),
            },
            ("run", "samples") => self.run.samples.to_string(),
            ("run", "test_samples") => self.run.test_samples.to_string(),
            ("run", "classes") => self.run.classes.to_string(),
            ("run", "noise") => num(self.run.noise),
            ("run", "idx_images") => path(&self.run.idx_images),
            ("run", "idx_labels") => path(&self.run.idx_labels),
            ("run", "data_seed") => self.run.data_seed.to_string(),
            ("run", "seed") => self.run.seed.to_string(),
            ("run", "epochs") => self.run.epochs.to_string(),
            ("run", "batch_size") => self.run.batch_size.to_string(),
            ("run", "edge_policy") => self.run.edge_policy.to_string(),
            ("run", "weight_norm") => self.run.weight_norm.to_string(),
            ("run", "output") => self.run.output.clone(),
            ("run", "deterministic") => self.run.deterministic.to_string(),
            ("optim", "method") => self.optim.method.name().into(),
            ("optim", "lr") => num(self.optim.lr),
            ("optim", "momentum") => num(self.optim.momentum),
            ("optim", "weight_decay") => num(self.optim.weight_decay),
            ("optim", "rho") => num(self.optim.rho),
            ("optim", "xi") => num(self.optim.xi),
            ("optim", "microbatch") => self.optim.microbatch.to_string(),
            ("optim", "schedule") => match self.optim.schedule {
                ScheduleKind::Constant => "constant",
                ScheduleKind::Step => "step",
                ScheduleKind::Cosine => "cosine",
            }
            .into(),
            ("optim", "milestones") => list(&self.optim.milestones),
            ("optim", "decay_factor") => num(self.optim.decay_factor),
            ("quant", "bitwidths") => list(&self.quant.bitwidths),
            ("quant", "bits") => self.quant.bits.to_string(),
            ("quant", "config") => self.quant.config.as_ref().map(|c| c.to_string()).unwrap_or_default(),
            ("search", "budget") => num(self.search.budget),
            ("search", "budget_bops") => self.search.budget_bops.to_string(),
            ("search", "beta") => num(self.search.beta),
            ("search", "entropy") => num(self.search.entropy),
            ("search", "policy_lr") => num(self.search.policy_lr),
            ("search", "policy_decay") => num(self.search.policy_decay),
            ("search", "policy_hidden") => self.search.policy_hidden.to_string(),
            ("search", "warmup") => self.search.warmup.to_string(),
            ("search", "epochs") => self.search.epochs.to_string(),
            ("search", "samples") => self.search.samples.to_string(),
            ("search", "val_batch_size") => self.search.val_batch_size.to_string(),
            ("search", "units") => match self.search.units {
                CostUnits::Normalized => "normalized",
                CostUnits::Raw => "raw",
            }
            .into(),
            ("search", "baseline") => self.search.baseline.to_string(),
            ("probe", "samples") => self.probe.samples.to_string(),
            ("probe", "iters") => self.probe.iters.to_string(),
            ("probe", "tol") => num(self.probe.tol),
            ("probe", "space") => match self.probe.space {
                ProbeSpace::Quantized => "quantized",
                ProbeSpace::FullPrecision => "full-precision",
            }
            .into(),
            ("probe", "halfwidth") => num(self.probe.halfwidth),
            ("probe", "resolution") => self.probe.resolution.to_string(),
            ("probe", "seed") => self.probe.seed.to_string(),
            ("probe", "fixture") => match self.probe.fixture {
                ProbeFixture::Model => "model",
                ProbeFixture::Quadratic => "quadratic",
            }
            .into(),
            ("probe", "diag") => self.probe.diag.iter().map(|&d| num(d)).collect::<Vec<_>>().join(","),
            _ => return Err(Error::config(format!("unknown key `{section}.{key}`"))),
        })
    }

    /// `(section.key, value)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .flat_map(|(sec, keys)| {
                keys.iter().map(move |key| {
                    let v = self.get(sec, key).expect("listed key");
                    (format!("{sec}.{key}"), v)
                })
            })
            .collect()
    }

    /// Canonical text form; [`RunConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, (sec, keys)) in KEYS.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{sec}]");
            for key in keys.iter() {
                let _ = writeln!(out, "{key} = {}", self.get(sec, key).expect("listed key"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.batch_size == 0 {
            return Err(Error::config("run.batch_size must be positive"));
        }
        if r.classes < 2 {
            return Err(Error::config("run.classes must be at least 2"));
        }
        if r.dataset == DatasetSource::Idx && (r.idx_images.is_none() || r.idx_labels.is_none()) {
            return Err(Error::config("idx dataset needs run.idx_images and run.idx_labels"));
        }
        for v in r.output.split(['/', '\\']) {
            if v == ".." {
                return Err(Error::config("run.output must stay inside the output root"));
            }
        }
        if !["mlp", "miniconv", "resnet20", "resnet18"].contains(&r.model.as_str()) {
            return Err(Error::config(format!("unknown model `{}`", r.model)));
        }
        if self.quant.bitwidths.is_empty() {
            return Err(Error::config("quant.bitwidths must not be empty"));
        }
        for &b in self.quant.bitwidths.iter().chain(std::iter::once(&self.quant.bits)) {
            crate::quantizer::check_bits(b).map_err(|e| Error::config(e.to_string()))?;
        }
        self.optim.build(r.epochs).validate()?;
        let s = &self.search;
        if !(s.beta >= 0.0) || !(s.entropy >= 0.0) {
            return Err(Error::config("search.beta and search.entropy must be non-negative"));
        }
        if s.budget_bops == 0 && !(s.budget > 0.0 && s.budget <= 1.0) {
            return Err(Error::config("search.budget must be in (0, 1]"));
        }
        if s.samples == 0 || s.policy_hidden == 0 || !(s.policy_lr > 0.0) {
            return Err(Error::config("search.samples, search.policy_hidden and search.policy_lr must be positive"));
        }
        let p = &self.probe;
        if p.iters == 0 || p.samples == 0 || p.resolution % 2 == 0 || !(p.tol > 0.0) {
            return Err(Error::config("probe.iters and probe.samples must be positive, probe.resolution odd, probe.tol positive"));
        }
        if p.diag.is_empty() {
            return Err(Error::config("probe.diag must not be empty"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parses_sections_and_comments() {
        let cfg = RunConfig::parse(
            "# lab run\n[run]\nmodel = miniconv # trailing\nepochs=3\n\n[optim]\nmethod = asaq\nschedule = step\nmilestones = 1,2\n",
        )
        .unwrap();
        assert_eq!(cfg.run.model, "miniconv");
        assert_eq!(cfg.run.epochs, 3);
        assert_eq!(cfg.optim.method, Method::Asaq);
        assert_eq!(
            cfg.optim.build(3).schedule,
            Schedule::Step {
                milestones: vec![1, 2],
                factor: 0.1
            }
        );
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        let e = RunConfig::parse("[run]\nmodle = mlp\n").unwrap_err();
        assert!(e.to_string().contains("line 2") && e.to_string().contains("run.modle"), "{e}");
        assert!(RunConfig::parse("[nope]\n").is_err());
        assert!(RunConfig::parse("model = mlp\n").is_err());
        assert!(RunConfig::parse("[optim]\nrho = -1\n").is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("search.beta=2.5").unwrap();
        assert_eq!(cfg.search.beta, 2.5);
        assert!(cfg.apply_override("beta=2").is_err());
        assert!(cfg.apply_override("search.gamma=2").is_err());
    }
}
