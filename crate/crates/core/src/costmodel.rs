//! Multiply-accumulate and bit-operation accounting.

use crate::error::{Error, Result};
use crate::netlib::{BitwidthConfig, LayerKind, LayerSpec, ModelSpec};

pub const FULL_PRECISION_BITS: u64 = 32;

/// MACs of one conv or linear layer. Bias, batch-norm and activation cost is
/// not counted.
pub fn layer_macs(layer: &LayerSpec) -> Result<u64> {
    match &layer.kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            ..
        } => {
            let [_, h, w] = layer.out_shape[..] else {
                return Err(Error::UnsupportedLayer(format!(
                    "conv with output shape {:?}",
                    layer.out_shape
                )));
            };
            Ok((in_channels * out_channels * kernel * kernel * h * w) as u64)
        }
        LayerKind::Linear {
            in_features,
            out_features,
            ..
        } => Ok((in_features * out_features) as u64),
        other => Err(Error::UnsupportedLayer(other.tag().into())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: &'static str,
    pub macs: u64,
    pub weight_bits: u64,
    pub activation_bits: u64,
    pub bops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_bops: u64,
    pub full_precision_bops: u64,
}

impl CostReport {
    pub fn compression_ratio(&self) -> f64 {
        self.full_precision_bops as f64 / self.total_bops as f64
    }

    /// Total BOPs as a fraction of the full-precision count.
    pub fn normalized(&self) -> f64 {
        self.total_bops as f64 / self.full_precision_bops as f64
    }

    /// Unit used for this model's human-readable BOP counts: giga when the
    /// full-precision count reaches 1e12, mega otherwise.
    pub fn unit(&self) -> BopUnit {
        if self.full_precision_bops >= 1_000_000_000_000 {
            BopUnit::Giga
        } else {
            BopUnit::Mega
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BopUnit {
    Mega,
    Giga,
}

impl BopUnit {
    pub fn scale(self) -> f64 {
        match self {
            BopUnit::Mega => 1e6,
            BopUnit::Giga => 1e9,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            BopUnit::Mega => "M",
            BopUnit::Giga => "G",
        }
    }
}

/// `bops` in `unit`, one decimal place, e.g. `674.6M`.
pub fn format_bops(bops: u64, unit: BopUnit) -> String {
    format!("{:.1}{}", bops as f64 / unit.scale(), unit.suffix())
}

/// BOPs of `spec` under `cfg`. Layers that are not quantized count at 32 bits.
pub fn total_bops(spec: &ModelSpec, cfg: &BitwidthConfig) -> Result<CostReport> {
    let bits = spec.resolve_bits(cfg)?;
    let mut layers = Vec::new();
    for (i, layer) in spec.weighted_layers() {
        let macs = layer_macs(layer)?;
        let b = bits[i].map_or(FULL_PRECISION_BITS, u64::from);
        layers.push(LayerCost {
            layer: i,
            kind: layer.kind.tag(),
            macs,
            weight_bits: b,
            activation_bits: b,
            bops: macs * b * b,
        });
    }
    let total_macs: u64 = layers.iter().map(|l| l.macs).sum();
    Ok(CostReport {
        total_bops: layers.iter().map(|l| l.bops).sum(),
        full_precision_bops: total_macs * FULL_PRECISION_BITS * FULL_PRECISION_BITS,
        total_macs,
        layers,
    })
}

pub fn full_precision_bops(spec: &ModelSpec) -> Result<u64> {
    let mut total = 0;
    for (_, layer) in spec.weighted_layers() {
        total += layer_macs(layer)?;
    }
    Ok(total * FULL_PRECISION_BITS * FULL_PRECISION_BITS)
}

/// How the budget penalty measures cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostUnits {
    /// BOPs divided by the model's full-precision BOPs.
    Normalized,
    Raw,
}

/// `β·(c − C)²`, with `c` and `C` already in the chosen units.
pub fn constraint_penalty(cost: f64, budget: f64, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::Parameter(format!("beta must be non-negative, got {beta}")));
    }
    Ok(beta * (cost - budget).powi(2))
}

/// Budget in BOPs, given either as a fraction of full precision (values up to
/// 1) or an absolute count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Fraction(f64),
    Absolute(u64),
}

impl Budget {
    pub fn bops(&self, spec: &ModelSpec) -> Result<u64> {
        match *self {
            Budget::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::config(format!("budget fraction {f} outside (0, 1]")));
                }
                Ok((full_precision_bops(spec)? as f64 * f).floor() as u64)
            }
            Budget::Absolute(b) => Ok(b),
        }
    }
}
