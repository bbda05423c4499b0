//! Versioned text checkpoints.
//!
//! Floating-point values are written as the hex of their IEEE-754 bits, so a
//! checkpoint restores exactly and re-saving a loaded checkpoint reproduces
//! the same bytes.

use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netlib::BitwidthConfig;
use crate::tensor::Tensor;

pub const MAGIC: &str = "saqlab-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningEntry {
    pub layer: usize,
    pub bits: u8,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimSnapshot {
    pub steps: u64,
    pub passes: u64,
    pub velocity: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicySnapshot {
    pub params: Vec<Tensor>,
    pub adam_t: u64,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub baseline: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical text of the run configuration.
    pub config: String,
    pub kind: String,
    pub epoch: usize,
    /// One descriptive line per model layer, checked on restore.
    pub layers: Vec<String>,
    pub params: Vec<NamedTensor>,
    pub running: Vec<RunningEntry>,
    pub optim: Option<OptimSnapshot>,
    pub policy: Option<PolicySnapshot>,
    pub rng: RngState,
    pub chosen: Option<BitwidthConfig>,
}

fn hex_list(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 17);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{:016x}", v.to_bits());
    }
    s
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".into()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn write_tensor(out: &mut String, t: &Tensor) {
    let _ = writeln!(out, "{} {}", shape_str(t.shape()), hex_list(t.data()));
}

fn write_vecs(out: &mut String, tag: &str, vs: &[Vec<f64>]) {
    let _ = writeln!(out, "{tag} {}", vs.len());
    for v in vs {
        let _ = writeln!(out, "{} {}", v.len(), hex_list(v));
    }
}

fn bits_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} {VERSION}");
        let _ = writeln!(out, "kind {}", self.kind);
        let _ = writeln!(out, "epoch {}", self.epoch);
        let cfg_lines: Vec<&str> = self.config.lines().collect();
        let _ = writeln!(out, "config {}", cfg_lines.len());
        for l in cfg_lines {
            let _ = writeln!(out, "{l}");
        }
        let _ = writeln!(out, "layers {}", self.layers.len());
        for l in &self.layers {
            let _ = writeln!(out, "{l}");
        }
        let _ = writeln!(out, "params {}", self.params.len());
        for p in &self.params {
            let _ = write!(out, "{} ", p.name);
            write_tensor(&mut out, &p.value);
        }
        let _ = writeln!(out, "running {}", self.running.len());
        for r in &self.running {
            let _ = writeln!(out, "{} {} {} {}", r.layer, r.bits, r.mean.len(), hex_list(&r.mean));
            let _ = writeln!(out, "{}", hex_list(&r.var));
        }
        match &self.optim {
            None => out.push_str("optim none\n"),
            Some(o) => {
                let _ = writeln!(out, "optim {} {}", o.steps, o.passes);
                write_vecs(&mut out, "velocity", &o.velocity);
            }
        }
        match &self.policy {
            None => out.push_str("policy none\n"),
            Some(p) => {
                let baseline = p.baseline.map_or("none".to_string(), bits_hex);
                let _ = writeln!(out, "policy {} {} {}", p.params.len(), p.adam_t, baseline);
                for t in &p.params {
                    write_tensor(&mut out, t);
                }
                write_vecs(&mut out, "adam-m", &p.adam_m);
                write_vecs(&mut out, "adam-v", &p.adam_v);
            }
        }
        let seed: String = self.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
        let _ = writeln!(out, "rng {seed} {} {}", self.rng.stream, self.rng.word_pos);
        match &self.chosen {
            None => out.push_str("chosen none\n"),
            Some(c) => {
                let _ = writeln!(out, "chosen {c}");
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Format {
            offset: e.valid_up_to(),
            msg: "checkpoint is not UTF-8".into(),
        })?;
        let mut r = Reader::new(text);
        let (magic, version) = r.pair("header")?;
        if magic != MAGIC {
            return Err(r.err_at_last("not a checkpoint"));
        }
        if version != VERSION.to_string() {
            return Err(r.err_at_last(&format!("unsupported checkpoint version `{version}`")));
        }
        let kind = r.tagged("kind")?.to_string();
        let epoch = r.tagged_num("epoch")?;
        let n = r.tagged_num("config")?;
        let mut config = String::new();
        for _ in 0..n {
            config.push_str(r.line()?);
            config.push('\n');
        }
        let n = r.tagged_num("layers")?;
        let mut layers = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            layers.push(r.line()?.to_string());
        }
        let n = r.tagged_num("params")?;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let line = r.line()?;
            let (name, rest) = line
                .split_once(' ')
                .ok_or_else(|| r.err_at_last("param line needs a name"))?;
            params.push(NamedTensor {
                name: name.to_string(),
                value: r.tensor(rest)?,
            });
        }
        let n = r.tagged_num("running")?;
        let mut running = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let line = r.line()?;
            let mut it = line.splitn(4, ' ');
            let layer = r.num(it.next())?;
            let bits = r.num(it.next())?;
            let len: usize = r.num(it.next())?;
            let mean = r.hexes(it.next().unwrap_or(""), len)?;
            let var_line = r.line()?;
            let var = r.hexes(var_line, len)?;
            running.push(RunningEntry { layer, bits, mean, var });
        }
        let line = r.line()?;
        let optim = if line == "optim none" {
            None
        } else {
            let rest = line
                .strip_prefix("optim ")
                .ok_or_else(|| r.err_at_last("expected `optim`"))?;
            let mut it = rest.split(' ');
            let steps = r.num(it.next())?;
            let passes = r.num(it.next())?;
            if it.next().is_some() {
                return Err(r.err_at_last("trailing fields"));
            }
            Some(OptimSnapshot {
                steps,
                passes,
                velocity: r.vecs("velocity")?,
            })
        };
        let line = r.line()?;
        let policy = if line == "policy none" {
            None
        } else {
            let rest = line
                .strip_prefix("policy ")
                .ok_or_else(|| r.err_at_last("expected `policy`"))?;
            let mut it = rest.split(' ');
            let count: usize = r.num(it.next())?;
            let adam_t = r.num(it.next())?;
            let baseline = match it.next() {
                Some("none") => None,
                Some(h) => Some(r.hex(h)?),
                None => return Err(r.err_at_last("missing baseline")),
            };
            if it.next().is_some() {
                return Err(r.err_at_last("trailing fields"));
            }
            let mut ps = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let l = r.line()?;
                ps.push(r.tensor(l)?);
            }
            Some(PolicySnapshot {
                params: ps,
                adam_t,
                adam_m: r.vecs("adam-m")?,
                adam_v: r.vecs("adam-v")?,
                baseline,
            })
        };
        let line = r.line()?;
        let rest = line
            .strip_prefix("rng ")
            .ok_or_else(|| r.err_at_last("expected `rng`"))?;
        let mut it = rest.split(' ');
        let seed_hex = it.next().unwrap_or("");
        if seed_hex.len() != 64 || !seed_hex.is_ascii() {
            return Err(r.err_at_last("rng seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| r.err_at_last("bad rng seed"))?;
        }
        let stream = r.num(it.next())?;
        let word_pos = r.num(it.next())?;
        if it.next().is_some() {
            return Err(r.err_at_last("trailing fields"));
        }
        let line = r.line()?;
        let chosen = match line.strip_prefix("chosen ") {
            Some("none") => None,
            Some(c) => Some(c.parse().map_err(|_| r.err_at_last("bad chosen config"))?),
            None => return Err(r.err_at_last("expected `chosen`")),
        };
        if r.line()? != "end" {
            return Err(r.err_at_last("expected `end`"));
        }
        if r.pos != text.len() {
            return Err(Error::Format {
                offset: r.pos,
                msg: "trailing data after `end`".into(),
            });
        }
        Ok(Checkpoint {
            config,
            kind,
            epoch,
            layers,
            params,
            running,
            optim,
            policy,
            rng: RngState { seed, stream, word_pos },
            chosen,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    text: &'a str,
    pos: usize,
    last: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Reader { text, pos: 0, last: 0 }
    }

    fn err_at_last(&self, msg: &str) -> Error {
        Error::Format {
            offset: self.last,
            msg: msg.to_string(),
        }
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.text[self.pos..];
        let Some(end) = rest.find('\n') else {
            return Err(Error::Format {
                offset: self.pos,
                msg: "unexpected end of checkpoint".into(),
            });
        };
        self.last = self.pos;
        self.pos += end + 1;
        Ok(&rest[..end])
    }

    fn pair(&mut self, what: &str) -> Result<(&'a str, &'a str)> {
        let l = self.line()?;
        l.split_once(' ')
            .ok_or_else(|| self.err_at_last(&format!("malformed {what}")))
    }

    fn tagged(&mut self, tag: &str) -> Result<&'a str> {
        let (t, v) = self.pair(tag)?;
        if t != tag {
            return Err(self.err_at_last(&format!("expected `{tag}`, found `{t}`")));
        }
        Ok(v)
    }

    fn tagged_num(&mut self, tag: &str) -> Result<usize> {
        let v = self.tagged(tag)?;
        self.num(Some(v))
    }

    fn num<T: std::str::FromStr>(&self, s: Option<&str>) -> Result<T> {
        s.and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err_at_last("expected a number"))
    }

    fn hex(&self, s: &str) -> Result<f64> {
        if s.len() != 16 {
            return Err(self.err_at_last("float must be 16 hex digits"));
        }
        u64::from_str_radix(s, 16)
            .map(f64::from_bits)
            .map_err(|_| self.err_at_last("bad hex float"))
    }

    fn hexes(&self, s: &str, expected: usize) -> Result<Vec<f64>> {
        let v: Vec<f64> = if s.is_empty() {
            Vec::new()
        } else {
            s.split(' ').map(|h| self.hex(h)).collect::<Result<_>>()?
        };
        if v.len() != expected {
            return Err(self.err_at_last(&format!("expected {expected} values, found {}", v.len())));
        }
        Ok(v)
    }

    fn tensor(&self, s: &str) -> Result<Tensor> {
        let (shape, values) = s.split_once(' ').unwrap_or((s, ""));
        let shape: Vec<usize> = if shape == "scalar" {
            Vec::new()
        } else {
            shape
                .split(',')
                .map(|d| d.parse().map_err(|_| self.err_at_last("bad shape")))
                .collect::<Result<_>>()?
        };
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.err_at_last("shape overflows"))?;
        let data = self.hexes(values, numel)?;
        Tensor::new(shape, data).map_err(|e| self.err_at_last(&e.to_string()))
    }

    fn vecs(&mut self, tag: &str) -> Result<Vec<Vec<f64>>> {
        let n = self.tagged_num(tag)?;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let l = self.line()?;
            let (len, rest) = l.split_once(' ').unwrap_or((l, ""));
            let len = self.num(Some(len))?;
            out.push(self.hexes(rest, len)?);
        }
        Ok(out)
    }
}
