//! Model specifications and the quantized network they build.
//!
//! A [`ModelSpec`] is a list of layers wired as a small DAG (each layer reads
//! the previous layer unless it names another source, residual adds name a
//! second source). The same spec drives cost accounting and, through
//! [`Model`], training.
//!
//! A [`Model`] keeps one full-precision weight store per conv/linear layer.
//! Every bitwidth quantizes that shared store on the fly; only clipping levels
//! and batch-norm state are switchable per bitwidth.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Pool2d, PoolKind, Tape, Var};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::quantizer::{self, QuantSpec, EDGE_BITS};
use crate::tensor::Tensor;

/// Key for state of layers that run in full precision.
pub const FULL_PRECISION: u8 = 32;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
pub const WEIGHT_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Input,
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Pool(Pool2d),
    ResidualAdd {
        skip: Source,
    },
}

impl LayerKind {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Linear { .. })
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Linear { .. } => "linear",
            LayerKind::BatchNorm { .. } => "bn",
            LayerKind::Relu => "relu",
            LayerKind::Pool(_) => "pool",
            LayerKind::ResidualAdd { .. } => "residual-add",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input: Source,
    /// Per-sample input shape, filled in by [`ModelSpec::new`].
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub quantized: bool,
    pub fixed_bits: Option<u8>,
    /// Projection on a residual branch rather than the main path.
    pub shortcut: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, input: Source) -> Self {
        let quantized = kind.is_weighted();
        LayerSpec {
            kind,
            input,
            in_shape: Vec::new(),
            out_shape: Vec::new(),
            quantized,
            fixed_bits: None,
            shortcut: false,
        }
    }

    pub fn is_searchable(&self) -> bool {
        self.kind.is_weighted() && self.quantized && self.fixed_bits.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

fn extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return Err(Error::Build(format!(
            "kernel {kernel}, stride {stride}, pad {pad} gives no output for extent {size}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

impl ModelSpec {
    /// Infers and validates every layer's shapes. With `edge_policy`, the
    /// first and last quantized layers are pinned to 8 bits.
    pub fn new(
        name: &str,
        input_shape: Vec<usize>,
        classes: usize,
        mut layers: Vec<LayerSpec>,
        edge_policy: bool,
    ) -> Result<Self> {
        if layers.is_empty() || input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Build("empty model or input shape".into()));
        }
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
        for i in 0..layers.len() {
            let fetch = |src: Source| -> Result<Vec<usize>> {
                match src {
                    Source::Input => Ok(input_shape.clone()),
                    Source::Layer(j) if j < i => Ok(shapes[j].clone()),
                    Source::Layer(j) => Err(Error::Build(format!(
                        "layer {i} reads layer {j}, which does not precede it"
                    ))),
                }
            };
            let in_shape = fetch(layers[i].input)?;
            let out_shape = match &layers[i].kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    if in_shape.len() != 3 || in_shape[0] != *in_channels || *out_channels == 0 {
                        return Err(Error::Build(format!(
                            "layer {i}: conv expects {in_channels} channels, input is {in_shape:?}"
                        )));
                    }
                    vec![
                        *out_channels,
                        extent(in_shape[1], *kernel, *stride, *pad)?,
                        extent(in_shape[2], *kernel, *stride, *pad)?,
                    ]
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    let n: usize = in_shape.iter().product();
                    if n != *in_features || *out_features == 0 {
                        return Err(Error::Build(format!(
                            "layer {i}: linear expects {in_features} features, input is {in_shape:?}"
                        )));
                    }
                    vec![*out_features]
                }
                LayerKind::BatchNorm { channels } => {
                    if in_shape[0] != *channels {
                        return Err(Error::Build(format!(
                            "layer {i}: batch norm over {channels} channels, input is {in_shape:?}"
                        )));
                    }
                    match layers[i].input {
                        Source::Layer(j) if layers[j].kind.is_weighted() => {}
                        _ => {
                            return Err(Error::Build(format!(
                                "layer {i}: batch norm must follow a conv or linear layer"
                            )))
                        }
                    }
                    in_shape.clone()
                }
                LayerKind::Relu => in_shape.clone(),
                LayerKind::Pool(cfg) => {
                    if in_shape.len() != 3 {
                        return Err(Error::Build(format!("layer {i}: pool input {in_shape:?}")));
                    }
                    vec![
                        in_shape[0],
                        extent(in_shape[1], cfg.kernel, cfg.stride, cfg.pad)?,
                        extent(in_shape[2], cfg.kernel, cfg.stride, cfg.pad)?,
                    ]
                }
                LayerKind::ResidualAdd { skip } => {
                    let other = fetch(*skip)?;
                    if other != in_shape {
                        return Err(Error::Build(format!(
                            "layer {i}: residual add of {in_shape:?} and {other:?}"
                        )));
                    }
                    in_shape.clone()
                }
            };
            layers[i].in_shape = in_shape;
            layers[i].out_shape = out_shape.clone();
            if !layers[i].kind.is_weighted() {
                layers[i].quantized = false;
                layers[i].fixed_bits = None;
            }
            shapes.push(out_shape);
        }
        let last = shapes.last().expect("non-empty");
        if last != &[classes] {
            return Err(Error::Build(format!(
                "final output {last:?} does not match {classes} classes"
            )));
        }
        if edge_policy {
            let quantized: Vec<usize> = (0..layers.len())
                .filter(|&i| layers[i].kind.is_weighted() && layers[i].quantized)
                .collect();
            for l in layers.iter_mut() {
                l.fixed_bits = None;
            }
            if let (Some(&first), Some(&last)) = (quantized.first(), quantized.last()) {
                layers[first].fixed_bits = Some(EDGE_BITS);
                layers[last].fixed_bits = Some(EDGE_BITS);
            }
        }
        Ok(ModelSpec {
            name: name.to_string(),
            input_shape,
            classes,
            layers,
        })
    }

    pub fn weighted_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_weighted())
    }

    /// Indices of layers whose bitwidth a [`BitwidthConfig`] chooses.
    pub fn searchable_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_searchable())
            .collect()
    }

    /// Resolved bitwidth per layer: `Some(b)` for quantized conv/linear layers,
    /// `None` otherwise.
    pub fn resolve_bits(&self, cfg: &BitwidthConfig) -> Result<Vec<Option<u8>>> {
        let searchable = self.searchable_layers();
        if cfg.bits.len() != searchable.len() {
            return Err(Error::config(format!(
                "bitwidth config has {} entries, model `{}` has {} searchable layers",
                cfg.bits.len(),
                self.name,
                searchable.len()
            )));
        }
        let mut next = cfg.bits.iter();
        self.layers
            .iter()
            .map(|l| {
                if !(l.kind.is_weighted() && l.quantized) {
                    return Ok(None);
                }
                let b = match l.fixed_bits {
                    Some(b) => b,
                    None => *next.next().expect("length checked"),
                };
                quantizer::check_bits(b)?;
                Ok(Some(b))
            })
            .collect()
    }
}

/// Per-layer bitwidths for the searchable layers, in layer order. Layers with
/// a fixed bitwidth are not part of the sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitwidthConfig {
    pub bits: Vec<u8>,
}

impl BitwidthConfig {
    pub fn new(bits: Vec<u8>) -> Self {
        BitwidthConfig { bits }
    }

    pub fn uniform(bits: u8, layers: usize) -> Self {
        BitwidthConfig {
            bits: vec![bits; layers],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

impl fmt::Display for BitwidthConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.bits.iter().map(|b| b.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

impl std::str::FromStr for BitwidthConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(BitwidthConfig::new(Vec::new()));
        }
        s.split(',')
            .map(|p| {
                p.trim()
                    .parse::<u8>()
                    .map_err(|_| Error::config(format!("bad bitwidth `{p}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(BitwidthConfig::new)
    }
}

/// Incrementally wires a [`ModelSpec`].
pub struct SpecBuilder {
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    input_shape: Vec<usize>,
    current: Source,
}

impl SpecBuilder {
    pub fn new(input_shape: &[usize]) -> Self {
        SpecBuilder {
            layers: Vec::new(),
            shapes: Vec::new(),
            input_shape: input_shape.to_vec(),
            current: Source::Input,
        }
    }

    pub fn current(&self) -> Source {
        self.current
    }

    pub fn from(&mut self, src: Source) -> &mut Self {
        self.current = src;
        self
    }

    fn shape(&self, src: Source) -> Vec<usize> {
        match src {
            Source::Input => self.input_shape.clone(),
            Source::Layer(i) => self.shapes[i].clone(),
        }
    }

    fn push(&mut self, kind: LayerKind, out_shape: Vec<usize>) -> Source {
        self.layers.push(LayerSpec::new(kind, self.current));
        self.shapes.push(out_shape);
        self.current = Source::Layer(self.layers.len() - 1);
        self.current
    }

    pub fn conv(&mut self, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Source {
        let s = self.shape(self.current);
        let ext = |v: usize| (v + 2 * pad).saturating_sub(kernel) / stride.max(1) + 1;
        self.push(
            LayerKind::Conv {
                in_channels: s[0],
                out_channels,
                kernel,
                stride,
                pad,
                bias: false,
            },
            vec![out_channels, ext(s[1]), ext(s[2])],
        )
    }

    pub fn linear(&mut self, out_features: usize) -> Source {
        let in_features = self.shape(self.current).iter().product();
        self.push(
            LayerKind::Linear {
                in_features,
                out_features,
                bias: true,
            },
            vec![out_features],
        )
    }

    pub fn bn(&mut self) -> Source {
        let s = self.shape(self.current);
        self.push(LayerKind::BatchNorm { channels: s[0] }, s)
    }

    pub fn relu(&mut self) -> Source {
        let s = self.shape(self.current);
        self.push(LayerKind::Relu, s)
    }

    pub fn pool(&mut self, kind: PoolKind, kernel: usize, stride: usize, pad: usize) -> Source {
        let s = self.shape(self.current);
        let ext = |v: usize| (v + 2 * pad).saturating_sub(kernel) / stride.max(1) + 1;
        self.push(
            LayerKind::Pool(Pool2d {
                kind,
                kernel,
                stride,
                pad,
            }),
            vec![s[0], ext(s[1]), ext(s[2])],
        )
    }

    pub fn residual(&mut self, skip: Source) -> Source {
        let s = self.shape(self.current);
        self.push(LayerKind::ResidualAdd { skip }, s)
    }

    pub fn mark_shortcut(&mut self, layer: Source) {
        if let Source::Layer(i) = layer {
            self.layers[i].shortcut = true;
        }
    }

    pub fn finish(self, name: &str, classes: usize, edge_policy: bool) -> Result<ModelSpec> {
        ModelSpec::new(name, self.input_shape, classes, self.layers, edge_policy)
    }
}

/// Fully connected ReLU network.
pub fn mlp_spec(
    input: usize,
    hidden: &[usize],
    classes: usize,
    edge_policy: bool,
) -> Result<ModelSpec> {
    let mut b = SpecBuilder::new(&[input]);
    for &h in hidden {
        b.linear(h);
        b.relu();
    }
    b.linear(classes);
    let name = format!(
        "mlp-{}",
        std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(classes))
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("-")
    );
    b.finish(&name, classes, edge_policy)
}

/// Small CNN for `1×8×8` inputs: an 8-bit stem conv, two stages of two
/// searchable 3×3 convs with average pooling, and an 8-bit linear head.
pub fn miniconv_spec(input_shape: &[usize], classes: usize, edge_policy: bool) -> Result<ModelSpec> {
    const WIDTH: usize = 8;
    let mut b = SpecBuilder::new(input_shape);
    b.conv(WIDTH, 3, 1, 1);
    b.bn();
    b.relu();
    for _ in 0..2 {
        for _ in 0..2 {
            b.conv(WIDTH, 3, 1, 1);
            b.bn();
            b.relu();
        }
        b.pool(PoolKind::Avg, 2, 2, 0);
    }
    b.linear(classes);
    b.finish("miniconv", classes, edge_policy)
}

fn basic_block(b: &mut SpecBuilder, out_channels: usize, stride: usize) {
    let block_in = b.current();
    let in_channels = b.shape(block_in)[0];
    b.conv(out_channels, 3, stride, 1);
    b.bn();
    b.relu();
    b.conv(out_channels, 3, 1, 1);
    let main = b.bn();
    let skip = if stride != 1 || in_channels != out_channels {
        b.from(block_in);
        let proj = b.conv(out_channels, 1, stride, 0);
        b.mark_shortcut(proj);
        let s = b.bn();
        b.from(main);
        s
    } else {
        block_in
    };
    b.residual(skip);
    b.relu();
}

/// CIFAR ResNet-20 (three stages of three basic blocks, 1×1 projection
/// shortcuts where the shape changes).
pub fn resnet20_spec(classes: usize, edge_policy: bool) -> Result<ModelSpec> {
    let mut b = SpecBuilder::new(&[3, 32, 32]);
    b.conv(16, 3, 1, 1);
    b.bn();
    b.relu();
    for (stage, width) in [16, 32, 64].into_iter().enumerate() {
        for block in 0..3 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            basic_block(&mut b, width, stride);
        }
    }
    b.pool(PoolKind::Avg, 8, 8, 0);
    b.linear(classes);
    b.finish("resnet20", classes, edge_policy)
}

/// ImageNet ResNet-18.
pub fn resnet18_spec(classes: usize, edge_policy: bool) -> Result<ModelSpec> {
    let mut b = SpecBuilder::new(&[3, 224, 224]);
    b.conv(64, 7, 2, 3);
    b.bn();
    b.relu();
    b.pool(PoolKind::Max, 3, 2, 1);
    for (stage, width) in [64, 128, 256, 512].into_iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            basic_block(&mut b, width, stride);
        }
    }
    b.pool(PoolKind::Avg, 7, 7, 0);
    b.linear(classes);
    b.finish("resnet18", classes, edge_policy)
}

/// Resolves a spec by name: `mlp`, `miniconv`, `resnet20`, `resnet18`.
pub fn spec_by_name(
    name: &str,
    input_shape: &[usize],
    hidden: &[usize],
    classes: usize,
    edge_policy: bool,
) -> Result<ModelSpec> {
    match name {
        "mlp" => mlp_spec(input_shape.iter().product(), hidden, classes, edge_policy),
        "miniconv" => miniconv_spec(input_shape, classes, edge_policy),
        "resnet20" => resnet20_spec(classes, edge_policy),
        "resnet18" => resnet18_spec(classes, edge_policy),
        other => Err(Error::config(format!("unknown model `{other}`"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamRole {
    Weight,
    Bias,
    LogAlphaW(u8),
    LogAlphaZ(u8),
    BnGamma(u8),
    BnBeta(u8),
}

impl ParamRole {
    /// Whether the L2 penalty applies. Clipping levels and batch-norm affine
    /// parameters are exempt.
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight | ParamRole::Bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub layer: usize,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct LayerParams {
    weight: Option<usize>,
    bias: Option<usize>,
    alpha_w: BTreeMap<u8, usize>,
    alpha_z: BTreeMap<u8, usize>,
    bn: BTreeMap<u8, (usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelOptions {
    /// Standardize each output channel of the full-precision weights before
    /// quantization.
    pub weight_norm: bool,
    /// Quantize raw network inputs with the symmetric map (they may be
    /// negative); otherwise with the unsigned activation map.
    pub signed_input: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            weight_norm: false,
            signed_input: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which weights a perturbation is added to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbTarget {
    /// `Q_w(w, b) + ε`.
    Quantized,
    /// `Q_w(w + ε, b)`.
    FullPrecision,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub target: PerturbTarget,
    /// Flat over the weights of every conv/linear layer, in layer order.
    pub eps: Vec<f64>,
}

/// Result of one taped forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    /// Tape handles aligned with [`Model::params`].
    pub params: Vec<Var>,
    /// Per conv/linear layer, the weight tensor the layer multiplies by before
    /// any quantized-space perturbation: `Q_w(w, b)` for quantized layers.
    pub qweights: Vec<Var>,
    /// Batch statistics from training-mode batch norms: `(layer, bits, stats)`.
    pub bn_stats: Vec<(usize, u8, BatchStats)>,
}

impl ForwardPass {
    /// Concatenated values of [`ForwardPass::qweights`].
    pub fn flat_qweights(&self) -> Vec<f64> {
        self.qweights
            .iter()
            .flat_map(|&v| self.tape.value(v).data().iter().copied())
            .collect()
    }

    /// Concatenated gradients with respect to [`ForwardPass::qweights`].
    pub fn flat_qweight_grads(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for &v in &self.qweights {
            out.extend(self.tape.grad(v)?.into_data());
        }
        Ok(out)
    }

    pub fn param_grads(&self) -> Result<Vec<Tensor>> {
        self.params.iter().map(|&v| self.tape.grad(v)).collect()
    }
}

/// A trainable network built from a [`ModelSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    bitwidths: Vec<u8>,
    options: ModelOptions,
    params: Vec<Param>,
    layer_params: Vec<LayerParams>,
    running: Vec<BTreeMap<u8, RunningStats>>,
    perturbation: Option<Perturbation>,
}

/// Builds a model with He-uniform conv/linear weights, zero biases, unit
/// clipping levels, and identity batch norms.
pub fn build_model(spec: ModelSpec, quant: &QuantSpec, options: ModelOptions, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bitwidths = quant.bitwidths().to_vec();
    let mut params = Vec::new();
    let mut layer_params = vec![LayerParams::default(); spec.layers.len()];
    let mut running = vec![BTreeMap::new(); spec.layers.len()];
    let layer_bits = |l: &LayerSpec| -> Vec<u8> {
        if !(l.kind.is_weighted() && l.quantized) {
            vec![FULL_PRECISION]
        } else if let Some(b) = l.fixed_bits {
            vec![b]
        } else {
            bitwidths.clone()
        }
    };
    for (i, layer) in spec.layers.iter().enumerate() {
        let mut push = |role: ParamRole, name: String, value: Tensor| {
            params.push(Param {
                name,
                role,
                layer: i,
                value,
            });
            params.len() - 1
        };
        let (w_shape, fan_in, bias_len) = match &layer.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => (
                vec![*out_channels, *in_channels, *kernel, *kernel],
                in_channels * kernel * kernel,
                bias.then_some(*out_channels),
            ),
            LayerKind::Linear {
                in_features,
                out_features,
                bias,
            } => (
                vec![*out_features, *in_features],
                *in_features,
                bias.then_some(*out_features),
            ),
            LayerKind::BatchNorm { channels } => {
                let src = match layer.input {
                    Source::Layer(j) => &spec.layers[j],
                    Source::Input => unreachable!("validated by ModelSpec::new"),
                };
                for b in layer_bits(src) {
                    let g = push(ParamRole::BnGamma(b), format!("l{i}.bn{b}.gamma"), Tensor::ones(&[*channels]));
                    let be = push(ParamRole::BnBeta(b), format!("l{i}.bn{b}.beta"), Tensor::zeros(&[*channels]));
                    layer_params[i].bn.insert(b, (g, be));
                    running[i].insert(
                        b,
                        RunningStats {
                            mean: vec![0.0; *channels],
                            var: vec![1.0; *channels],
                        },
                    );
                }
                continue;
            }
            _ => continue,
        };
        let bound = (6.0 / fan_in as f64).sqrt();
        let numel: usize = w_shape.iter().product();
        let w: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
        layer_params[i].weight = Some(push(ParamRole::Weight, format!("l{i}.weight"), Tensor::new(w_shape, w)?));
        if let Some(n) = bias_len {
            layer_params[i].bias = Some(push(ParamRole::Bias, format!("l{i}.bias"), Tensor::zeros(&[n])));
        }
        if layer.quantized {
            for b in layer_bits(layer) {
                let (aw, az) = if quant.contains(b) {
                    (quant.alpha_w(b)?, quant.alpha_z(b)?)
                } else {
                    (1.0, 1.0)
                };
                let a = push(ParamRole::LogAlphaW(b), format!("l{i}.alpha_w{b}"), Tensor::scalar(aw.ln()));
                layer_params[i].alpha_w.insert(b, a);
                let z = push(ParamRole::LogAlphaZ(b), format!("l{i}.alpha_z{b}"), Tensor::scalar(az.ln()));
                layer_params[i].alpha_z.insert(b, z);
            }
        }
    }
    Ok(Model {
        spec,
        bitwidths,
        options,
        params,
        layer_params,
        running,
        perturbation: None,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn bitwidths(&self) -> &[u8] {
        &self.bitwidths
    }

    pub fn options(&self) -> ModelOptions {
        self.options
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn running_stats(&self, layer: usize, bits: u8) -> Option<&RunningStats> {
        self.running.get(layer)?.get(&bits)
    }

    pub fn running_stats_mut(&mut self, layer: usize, bits: u8) -> Option<&mut RunningStats> {
        self.running.get_mut(layer)?.get_mut(&bits)
    }

    /// `(layer, bits)` keys of every batch-norm state set, in order.
    pub fn running_keys(&self) -> Vec<(usize, u8)> {
        self.running
            .iter()
            .enumerate()
            .flat_map(|(l, m)| m.keys().map(move |&b| (l, b)))
            .collect()
    }

    /// Number of conv/linear weights and biases.
    pub fn weight_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.role.decays())
            .map(|p| p.value.numel())
            .sum()
    }

    /// Total number of conv/linear weights, the length of a perturbation.
    pub fn quantized_weight_count(&self) -> usize {
        self.layer_params
            .iter()
            .filter_map(|lp| lp.weight)
            .map(|w| self.params[w].value.numel())
            .sum()
    }

    /// Flat full-precision conv/linear weights in layer order.
    pub fn flat_weights(&self) -> Vec<f64> {
        self.layer_params
            .iter()
            .filter_map(|lp| lp.weight)
            .flat_map(|w| self.params[w].value.data().iter().copied())
            .collect()
    }

    /// Index ranges of each output filter (row of a weight tensor) in the flat
    /// weight layout.
    pub fn filter_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut offset = 0;
        for w in self.layer_params.iter().filter_map(|lp| lp.weight) {
            let t = &self.params[w].value;
            let rows = t.shape()[0];
            let inner = t.numel() / rows;
            for r in 0..rows {
                out.push(offset + r * inner..offset + (r + 1) * inner);
            }
            offset += t.numel();
        }
        out
    }

    pub fn searchable_count(&self) -> usize {
        self.spec.searchable_layers().len()
    }

    pub fn uniform_config(&self, bits: u8) -> BitwidthConfig {
        BitwidthConfig::uniform(bits, self.searchable_count())
    }

    pub fn apply_perturbation(&mut self, eps: Vec<f64>) -> Result<()> {
        self.set_perturbation(Perturbation {
            target: PerturbTarget::Quantized,
            eps,
        })
    }

    pub fn set_perturbation(&mut self, p: Perturbation) -> Result<()> {
        self.check_perturbation(&p)?;
        self.perturbation = Some(p);
        Ok(())
    }

    pub fn remove_perturbation(&mut self) {
        self.perturbation = None;
    }

    pub fn perturbation(&self) -> Option<&Perturbation> {
        self.perturbation.as_ref()
    }

    fn check_perturbation(&self, p: &Perturbation) -> Result<()> {
        let n = self.quantized_weight_count();
        if p.eps.len() != n {
            return Err(Error::contract(format!(
                "perturbation has {} entries, model has {n} weights",
                p.eps.len()
            )));
        }
        Ok(())
    }

    fn bn_key(&self, layer: usize, bits: &[Option<u8>]) -> u8 {
        match self.spec.layers[layer].input {
            Source::Layer(j) => bits[j].unwrap_or(FULL_PRECISION),
            Source::Input => FULL_PRECISION,
        }
    }

    /// Forward pass under the model's stored perturbation, if any.
    pub fn forward(&self, x: &Tensor, cfg: &BitwidthConfig, mode: Mode) -> Result<ForwardPass> {
        self.forward_with(x, cfg, mode, self.perturbation.as_ref())
    }

    pub fn forward_with(
        &self,
        x: &Tensor,
        cfg: &BitwidthConfig,
        mode: Mode,
        perturbation: Option<&Perturbation>,
    ) -> Result<ForwardPass> {
        if x.shape().get(1..) != Some(&self.spec.input_shape[..]) {
            return Err(Error::dim(format!(
                "input {:?} does not match model input {:?}",
                x.shape(),
                self.spec.input_shape
            )));
        }
        if let Some(p) = perturbation {
            self.check_perturbation(p)?;
        }
        let bits = self.spec.resolve_bits(cfg)?;
        for (i, b) in bits.iter().enumerate() {
            if let Some(b) = b {
                if !self.layer_params[i].alpha_w.contains_key(b) {
                    return Err(Error::config(format!(
                        "layer {i} has no clipping level or batch-norm set for {b}-bit"
                    )));
                }
            }
        }
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect();
        let input = tape.constant(x.clone());
        let mut outputs: Vec<Var> = Vec::with_capacity(self.spec.layers.len());
        let mut qweights = Vec::new();
        let mut bn_stats = Vec::new();
        let mut eps_offset = 0;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let src = |s: Source| match s {
                Source::Input => input,
                Source::Layer(j) => outputs[j],
            };
            let z = src(layer.input);
            let lp = &self.layer_params[i];
            let out = match &layer.kind {
                LayerKind::Conv { .. } | LayerKind::Linear { .. } => {
                    let w_idx = lp.weight.expect("weighted layer has weights");
                    let numel = self.params[w_idx].value.numel();
                    let eps_slice = |p: &Perturbation| -> Result<Tensor> {
                        Tensor::new(
                            self.params[w_idx].value.shape().to_vec(),
                            p.eps[eps_offset..eps_offset + numel].to_vec(),
                        )
                    };
                    let mut w = params[w_idx];
                    if let Some(p) = perturbation.filter(|p| p.target == PerturbTarget::FullPrecision) {
                        let e = tape.constant(eps_slice(p)?);
                        w = tape.add(w, e)?;
                    }
                    if self.options.weight_norm {
                        w = tape.standardize_rows(w, WEIGHT_NORM_EPS)?;
                    }
                    let mut z_in = z;
                    if let Some(b) = bits[i] {
                        let aw = tape.exp(params[lp.alpha_w[&b]])?;
                        w = quantizer::quantize_w_taped(&mut tape, w, aw, b)?;
                        let az = tape.exp(params[lp.alpha_z[&b]])?;
                        let signed = self.options.signed_input && layer.input == Source::Input;
                        z_in = quantizer::quantize_z_taped(&mut tape, z, az, b, signed)?;
                    }
                    qweights.push(w);
                    if let Some(p) = perturbation.filter(|p| p.target == PerturbTarget::Quantized) {
                        let e = tape.constant(eps_slice(p)?);
                        w = tape.add(w, e)?;
                    }
                    eps_offset += numel;
                    let bias = lp.bias.map(|b| params[b]);
                    match &layer.kind {
                        LayerKind::Conv { stride, pad, .. } => tape.conv2d(z_in, w, bias, *stride, *pad)?,
                        _ => tape.linear(z_in, w, bias)?,
                    }
                }
                LayerKind::BatchNorm { .. } => {
                    let key = self.bn_key(i, &bits);
                    let &(g, b) = lp.bn.get(&key).ok_or_else(|| {
                        Error::config(format!("layer {i} has no batch-norm set for {key}-bit"))
                    })?;
                    match mode {
                        Mode::Train => {
                            let (y, stats) = tape.batch_norm(z, params[g], params[b], BN_EPS)?;
                            bn_stats.push((i, key, stats));
                            y
                        }
                        Mode::Eval => {
                            let rs = &self.running[i][&key];
                            tape.batch_norm_eval(z, params[g], params[b], &rs.mean, &rs.var, BN_EPS)?
                        }
                    }
                }
                LayerKind::Relu => tape.relu(z)?,
                LayerKind::Pool(cfg) => tape.pool2d(z, *cfg)?,
                LayerKind::ResidualAdd { skip } => {
                    let other = src(*skip);
                    tape.add(z, other)?
                }
            };
            outputs.push(out);
        }
        let logits = *outputs.last().expect("non-empty model");
        Ok(ForwardPass {
            tape,
            logits,
            params,
            qweights,
            bn_stats,
        })
    }

    /// Forward plus mean cross-entropy; backward has already run on the
    /// returned pass.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        cfg: &BitwidthConfig,
        mode: Mode,
        perturbation: Option<&Perturbation>,
    ) -> Result<(f64, ForwardPass)> {
        let mut pass = self.forward_with(&batch.x, cfg, mode, perturbation)?;
        let loss = pass.tape.softmax_cross_entropy(pass.logits, &batch.labels)?;
        pass.tape.backward(loss)?;
        Ok((pass.tape.value(loss).data()[0], pass))
    }

    /// Folds training-mode batch statistics into the running estimates of the
    /// sets they came from.
    pub fn commit_bn(&mut self, stats: &[(usize, u8, BatchStats)]) {
        for (layer, bits, s) in stats {
            if let Some(rs) = self.running[*layer].get_mut(bits) {
                for (r, m) in rs.mean.iter_mut().zip(&s.mean) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                }
                for (r, v) in rs.var.iter_mut().zip(&s.var) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
                }
            }
        }
    }

    /// Flat `Q_w(w, b)` over all conv/linear layers (no perturbation). For
    /// a full-precision perturbation, quantizes `w + ε` instead.
    pub fn quantized_weights(&self, cfg: &BitwidthConfig, fp_eps: Option<&[f64]>) -> Result<Vec<f64>> {
        let bits = self.spec.resolve_bits(cfg)?;
        let mut out = Vec::with_capacity(self.quantized_weight_count());
        let mut offset = 0;
        for (i, lp) in self.layer_params.iter().enumerate() {
            let Some(w_idx) = lp.weight else { continue };
            let mut w = self.params[w_idx].value.clone();
            if let Some(eps) = fp_eps {
                if eps.len() != self.quantized_weight_count() {
                    return Err(Error::contract("perturbation length"));
                }
                let n = w.numel();
                w.data_mut()
                    .iter_mut()
                    .zip(&eps[offset..offset + n])
                    .for_each(|(a, e)| *a += e);
            }
            offset += w.numel();
            if self.options.weight_norm {
                let mut t = Tape::new();
                let v = t.constant(w);
                let s = t.standardize_rows(v, WEIGHT_NORM_EPS)?;
                w = t.value(s).clone();
            }
            let q = match bits[i] {
                Some(b) => {
                    let alpha = self.params[lp.alpha_w[&b]].value.data()[0].exp();
                    quantizer::quantize_w(&w, b, alpha)?
                }
                None => w,
            };
            out.extend(q.into_data());
        }
        Ok(out)
    }

    /// Mean loss and accuracy over a dataset in eval mode.
    pub fn evaluate(&self, data: &Dataset, cfg: &BitwidthConfig, batch_size: usize) -> Result<(f64, f64)> {
        let full = data.as_batch();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in full.chunks(batch_size.max(1))? {
            let mut pass = self.forward(&chunk.x, cfg, Mode::Eval)?;
            let loss = pass.tape.softmax_cross_entropy(pass.logits, &chunk.labels)?;
            loss_sum += pass.tape.value(loss).data()[0] * chunk.len() as f64;
            correct += count_correct(pass.tape.value(pass.logits), &chunk.labels);
        }
        Ok((loss_sum / data.len() as f64, correct as f64 / data.len() as f64))
    }
}

pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i);
            best == Some(l)
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_parameter_count() {
        let spec = mlp_spec(784, &[64], 10, true).unwrap();
        let model = build_model(spec, &QuantSpec::default(), ModelOptions::default(), 0).unwrap();
        assert_eq!(model.weight_param_count(), 50_890);
        assert_eq!(model.searchable_count(), 0);
    }

    #[test]
    fn resnet20_layer_census() {
        let spec = resnet20_spec(100, true).unwrap();
        let weighted: Vec<_> = spec.weighted_layers().collect();
        let main: Vec<_> = weighted.iter().filter(|(_, l)| !l.shortcut).collect();
        let convs = main
            .iter()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Conv { .. }))
            .count();
        assert_eq!(main.len(), 20);
        assert_eq!(convs, 19);
        assert_eq!(weighted.len() - main.len(), 2);
        let fixed: Vec<_> = weighted.iter().filter(|(_, l)| l.fixed_bits == Some(8)).collect();
        assert_eq!(fixed.len(), 2);
        assert_eq!(spec.searchable_layers().len(), 20);
    }

    #[test]
    fn miniconv_has_four_searchable_layers() {
        let spec = miniconv_spec(&[1, 8, 8], 4, true).unwrap();
        assert_eq!(spec.searchable_layers().len(), 4);
        assert!(miniconv_spec(&[1, 8, 8], 4, false).unwrap().searchable_layers().len() == 6);
    }

    #[test]
    fn build_is_deterministic() {
        let spec = miniconv_spec(&[1, 8, 8], 4, true).unwrap();
        let a = build_model(spec.clone(), &QuantSpec::default(), ModelOptions::default(), 9).unwrap();
        let b = build_model(spec, &QuantSpec::default(), ModelOptions::default(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_specs_fail_to_build() {
        let mut b = SpecBuilder::new(&[1, 4, 4]);
        b.conv(2, 5, 1, 0);
        b.linear(3);
        assert!(matches!(b.finish("bad", 3, false), Err(Error::Build(_))));
        assert!(mlp_spec(4, &[3], 2, false).unwrap().resolve_bits(&BitwidthConfig::new(vec![2])).is_err());
    }
}
