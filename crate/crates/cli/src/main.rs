use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use saqlab_core::checkpoint::Checkpoint;
use saqlab_core::config::RunConfig;
use saqlab_core::costmodel::{self, format_bops, CostReport};
use saqlab_core::experiment::{self, config_record, Record, Session};
use saqlab_core::Error;

/// Environment variable naming the directory that run outputs go under.
const OUTPUT_ROOT_VAR: &str = "SAQLAB_OUTPUT_ROOT";

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "saqlab", version, about = "Sharpness-aware quantization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train at a fixed bitwidth configuration.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop (with a checkpoint) once this many epochs have completed.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Search per-layer bitwidths, then pick a configuration under budget.
    Search {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Fine-tune the configuration chosen by a finished search.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint written by `search`.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Print the BOP cost report of the configured model.
    Bops {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Estimate the largest Hessian eigenvalue.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        /// Probe the model stored in this checkpoint instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a two-dimensional loss slice.
    Landscape {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct RunArgs {
    /// Configuration file; unspecified keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, as `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    bits: Option<String>,
    #[arg(long)]
    budget: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    output: Option<String>,
    /// Single-threaded execution. Always on; accepted for script compatibility.
    #[arg(long)]
    deterministic: bool,
}

impl RunArgs {
    fn direct(&self) -> Vec<(&'static str, &'static str, &Option<String>)> {
        vec![
            ("run", "model", &self.model),
            ("run", "dataset", &self.dataset),
            ("optim", "method", &self.method),
            ("run", "epochs", &self.epochs),
            ("run", "batch_size", &self.batch_size),
            ("run", "seed", &self.seed),
            ("optim", "lr", &self.lr),
            ("optim", "rho", &self.rho),
            ("quant", "bits", &self.bits),
            ("search", "budget", &self.budget),
            ("search", "beta", &self.beta),
            ("run", "output", &self.output),
        ]
    }

    fn has_overrides(&self) -> bool {
        self.config.is_some() || !self.sets.is_empty() || self.direct().iter().any(|(_, _, v)| v.is_some())
    }

    /// Layers the file, the direct flags and the `--set` overrides, in that
    /// order, over `base`.
    fn resolve_onto(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg = RunConfig::parse(&text)?;
        }
        for (section, key, value) in self.direct() {
            if let Some(v) = value {
                cfg.set(section, key, v)?;
            }
        }
        for s in &self.sets {
            cfg.apply_override(s)?;
        }
        cfg.run.deterministic |= self.deterministic;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&self) -> Result<RunConfig> {
        self.resolve_onto(RunConfig::default())
    }
}

struct RunDir {
    path: PathBuf,
    log: fs::File,
}

impl RunDir {
    fn open(cfg: &RunConfig, append: bool) -> Result<Self> {
        let root = std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("."), PathBuf::from);
        let path = root.join(&cfg.run.output);
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        let log = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path.join("log.txt"))?;
        Ok(RunDir { path, log })
    }

    fn emit(&mut self, record: &Record) -> Result<()> {
        println!("{record}");
        writeln!(self.log, "{record}")?;
        Ok(())
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }
}

/// Error raised after a checkpoint was written for a run that hit a
/// non-finite value.
#[derive(Debug)]
struct NumericAbort(Error);

impl std::fmt::Display for NumericAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "aborted on {}", self.0)
    }
}

impl std::error::Error for NumericAbort {}

/// Runs `session` to completion or to `stop_after` epochs, writing a
/// checkpoint after every epoch.
fn drive(session: &mut Session, dir: &mut RunDir, stop_after: Option<usize>) -> Result<()> {
    let limit = stop_after.unwrap_or(usize::MAX);
    while !session.is_done() && session.epoch < limit {
        match session.run_epoch() {
            Ok(r) => dir.emit(&r)?,
            Err(e @ Error::NonFinite { .. }) => {
                session.to_checkpoint().save(&dir.file("abort-checkpoint.txt"))?;
                dir.emit(&Record::new("abort").field("epoch", session.epoch).field("reason", &e))?;
                return Err(NumericAbort(e).into());
            }
            Err(e) => return Err(e.into()),
        }
        session.to_checkpoint().save(&dir.file("checkpoint.txt"))?;
    }
    Ok(())
}

fn start(session: &Session, dir: &mut RunDir, resumed: bool) -> Result<()> {
    if resumed {
        dir.emit(&Record::new("resume").field("epoch", session.epoch))?;
    } else {
        dir.emit(&config_record(&session.config))?;
        let bits = session.bits.clone();
        dir.emit(&session.metrics_record("initial", &bits)?)?;
        session.to_checkpoint().save(&dir.file("checkpoint.txt"))?;
    }
    Ok(())
}

fn load_session(path: &Path) -> Result<Session> {
    let ckpt = Checkpoint::load(path)?;
    Ok(Session::from_checkpoint(&ckpt)?)
}

fn cost_text(report: &CostReport, config: &str) -> String {
    let unit = report.unit();
    let mut out = String::new();
    out.push_str(&format!("config={config}\n"));
    out.push_str(&format!("total_macs={}\n", report.total_macs));
    out.push_str(&format!("total_bops={}\n", report.total_bops));
    out.push_str(&format!("total_bops_h={}\n", format_bops(report.total_bops, unit)));
    out.push_str(&format!("fp_bops={}\n", report.full_precision_bops));
    out.push_str(&format!("fp_bops_h={}\n", format_bops(report.full_precision_bops, unit)));
    out.push_str(&format!("normalized={:.6}\n", report.normalized()));
    out.push_str("layer kind macs weight_bits activation_bits bops\n");
    for l in &report.layers {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            l.layer, l.kind, l.macs, l.weight_bits, l.activation_bits, l.bops
        ));
    }
    out
}

fn cmd_train(run: &RunArgs, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let mut session = match resume {
        Some(p) => load_session(p)?,
        None => Session::new_train(run.resolve()?)?,
    };
    let mut dir = RunDir::open(&session.config, resume.is_some())?;
    start(&session, &mut dir, resume.is_some())?;
    drive(&mut session, &mut dir, stop_after)?;
    if session.is_done() {
        let bits = session.bits.clone();
        dir.emit(&session.metrics_record("final", &bits)?)?;
    }
    Ok(())
}

fn cmd_search(run: &RunArgs, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let mut session = match resume {
        Some(p) => load_session(p)?,
        None => Session::new_search(run.resolve()?)?,
    };
    let mut dir = RunDir::open(&session.config, resume.is_some())?;
    if resume.is_some() {
        dir.emit(&Record::new("resume").field("epoch", session.epoch))?;
    } else {
        dir.emit(&config_record(&session.config))?;
        session.to_checkpoint().save(&dir.file("checkpoint.txt"))?;
    }
    drive(&mut session, &mut dir, stop_after)?;
    if !session.is_done() {
        return Ok(());
    }
    let (chosen, val_acc) = session.choose_config()?;
    let report = costmodel::total_bops(session.model.spec(), &chosen)?;
    dir.write("chosen.txt", &cost_text(&report, &chosen.to_string()))?;
    session.to_checkpoint().save(&dir.file("checkpoint.txt"))?;
    let unit = report.unit();
    dir.emit(
        &Record::new("chosen")
            .field("config", &chosen)
            .field("val_acc", format!("{val_acc:.6}"))
            .field("bops", format_bops(report.total_bops, unit))
            .field("normalized", format!("{:.6}", report.normalized())),
    )?;
    dir.emit(&session.metrics_record("final", &chosen)?)?;
    Ok(())
}

fn cmd_finetune(run: &RunArgs, from: Option<&Path>, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let mut session = match (resume, from) {
        (Some(p), _) => load_session(p)?,
        (None, Some(p)) => {
            let ckpt = Checkpoint::load(p)?;
            let cfg = if run.has_overrides() {
                Some(run.resolve_onto(RunConfig::parse(&ckpt.config)?)?)
            } else {
                None
            };
            Session::finetune_from(&ckpt, cfg)?
        }
        (None, None) => return Err(Error::Config("finetune needs --from or --resume".into()).into()),
    };
    let mut dir = RunDir::open(&session.config, resume.is_some())?;
    start(&session, &mut dir, resume.is_some())?;
    drive(&mut session, &mut dir, stop_after)?;
    if session.is_done() {
        let bits = session.bits.clone();
        dir.emit(&session.metrics_record("final", &bits)?)?;
    }
    Ok(())
}

fn cmd_bops(run: &RunArgs) -> Result<()> {
    let cfg = run.resolve()?;
    let report = experiment::bops_report(&cfg)?;
    let spec_bits: Vec<String> = report.layers.iter().map(|l| l.weight_bits.to_string()).collect();
    let text = cost_text(&report, &spec_bits.join(","));
    let dir = RunDir::open(&cfg, false)?;
    dir.write("bops.txt", &text)?;
    let unit = report.unit();
    println!(
        "{}",
        Record::new("bops")
            .field("model", &cfg.run.model)
            .field("total", format_bops(report.total_bops, unit))
            .field("fp", format_bops(report.full_precision_bops, unit))
            .field("ratio", format!("{:.2}", report.compression_ratio()))
    );
    Ok(())
}

/// The session a probe runs against: loaded from a checkpoint, or trained
/// from the configuration when the probe targets a model.
fn probe_session(cfg: &RunConfig, checkpoint: Option<&Path>, dir: &mut RunDir) -> Result<Option<Session>> {
    if let Some(p) = checkpoint {
        return Ok(Some(load_session(p)?));
    }
    if cfg.probe.fixture == saqlab_core::config::ProbeFixture::Quadratic {
        return Ok(None);
    }
    let mut s = Session::new_train(cfg.clone())?;
    drive(&mut s, dir, None)?;
    Ok(Some(s))
}

fn probe_config(run: &RunArgs, checkpoint: Option<&Path>) -> Result<RunConfig> {
    match checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            run.resolve_onto(RunConfig::parse(&ckpt.config)?)
        }
        None => run.resolve(),
    }
}

fn cmd_probe(run: &RunArgs, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = probe_config(run, checkpoint)?;
    let mut dir = RunDir::open(&cfg, false)?;
    dir.emit(&config_record(&cfg))?;
    let session = probe_session(&cfg, checkpoint, &mut dir)?;
    let r = experiment::probe_spectrum(&cfg, session.as_ref())?;
    let record = Record::new("spectrum")
        .field("lambda_max", format!("{:.9e}", r.lambda_max))
        .field("iterations", r.iterations)
        .field("residual", format!("{:.3e}", r.residual))
        .field("converged", r.converged)
        .field("probe", &r.probe);
    dir.write("spectrum.txt", &format!("{record}\n"))?;
    dir.emit(&record)?;
    Ok(())
}

fn cmd_landscape(run: &RunArgs, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = probe_config(run, checkpoint)?;
    let mut dir = RunDir::open(&cfg, false)?;
    dir.emit(&config_record(&cfg))?;
    let session = probe_session(&cfg, checkpoint, &mut dir)?;
    let (grid, eval_loss) = experiment::probe_landscape(&cfg, session.as_ref())?;
    let mut text = format!(
        "# landscape resolution={} halfwidth={} seed={}\n",
        grid.resolution, grid.halfwidth, grid.seed
    );
    for row in &grid.losses {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        text.push_str(&cells.join(" "));
        text.push('\n');
    }
    dir.write("landscape.txt", &text)?;
    dir.emit(
        &Record::new("landscape")
            .field("resolution", grid.resolution)
            .field("center_loss", format!("{:.17e}", grid.center_loss))
            .field("eval_loss", format!("{eval_loss:.17e}")),
    )?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<NumericAbort>().is_some() {
        return EXIT_NUMERIC;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::Infeasible { .. }) => EXIT_INFEASIBLE,
        Some(Error::NonFinite { .. }) => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { run, resume, stop_after } => cmd_train(run, resume.as_deref(), *stop_after),
        Command::Search { run, resume, stop_after } => cmd_search(run, resume.as_deref(), *stop_after),
        Command::Finetune {
            run,
            from,
            resume,
            stop_after,
        } => cmd_finetune(run, from.as_deref(), resume.as_deref(), *stop_after),
        Command::Bops { run } => cmd_bops(run),
        Command::Probe { run, checkpoint } => cmd_probe(run, checkpoint.as_deref()),
        Command::Landscape { run, checkpoint } => cmd_landscape(run, checkpoint.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("saqlab: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
