//! Uniform fixed-point quantization with learnable clipping levels.
//!
//! Weights map to `[0, 1]` through `½(clip(w/α_w, −1, 1) + 1)`, activations
//! through `clip(z/α_z, 0, 1)`. The discretizer rounds `v̂·s` to the nearest
//! integer (ties away from zero) with `s = 2^b − 1`, and the affine inverse maps
//! back to `α_w(2v̄ − 1)` or `α_z·v̄`.
//!
//! Gradients use the straight-through estimator: the rounding step is treated
//! as the identity. Two taped routes exist: a fused rule with closed-form
//! branch gradients ([`quantize_w_taped`]) and a chain of primitives around a
//! straight-through discretizer ([`quantize_w_composed`]). They must agree.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::autodiff::{register_custom_grad, CustomGradRule, CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BITWIDTHS: [u8; 4] = [2, 3, 4, 5];

/// Bitwidth of the first and last quantized layers.
pub const EDGE_BITS: u8 = 8;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 16;

/// How `⌊·⌉` resolves exact halves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Rounding {
    #[default]
    HalfAwayFromZero,
}

/// Number of nonzero quantization levels, `2^b − 1`.
pub fn levels(bits: u8) -> f64 {
    ((1u64 << bits) - 1) as f64
}

pub fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::Parameter(format!(
            "bitwidth {bits} outside {MIN_BITS}..={MAX_BITS}"
        )));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!(
            "clipping level must be positive, got {alpha}"
        )));
    }
    Ok(())
}

#[inline]
fn norm_w(w: f64, alpha: f64) -> f64 {
    0.5 * ((w / alpha).clamp(-1.0, 1.0) + 1.0)
}

#[inline]
fn norm_z(z: f64, alpha: f64) -> f64 {
    (z / alpha).clamp(0.0, 1.0)
}

#[inline]
fn disc(v: f64, s: f64) -> f64 {
    (v * s).round() / s
}

#[inline]
fn q_w(w: f64, alpha: f64, s: f64) -> f64 {
    alpha * (2.0 * disc(norm_w(w, alpha), s) - 1.0)
}

#[inline]
fn q_z(z: f64, alpha: f64, s: f64) -> f64 {
    alpha * disc(norm_z(z, alpha), s)
}

pub fn normalize_w(w: &Tensor, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    Ok(w.map(|v| norm_w(v, alpha)))
}

pub fn normalize_z(z: &Tensor, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    Ok(z.map(|v| norm_z(v, alpha)))
}

/// `round(v̂·s)/s` for inputs in `[0, 1]`.
pub fn discretize(v_hat: &Tensor, bits: u8) -> Result<Tensor> {
    check_bits(bits)?;
    const SLACK: f64 = 1e-12;
    if let Some(bad) = v_hat
        .data()
        .iter()
        .find(|&&v| !(-SLACK..=1.0 + SLACK).contains(&v))
    {
        return Err(Error::contract(format!(
            "discretize expects values in [0, 1], got {bad}"
        )));
    }
    let s = levels(bits);
    Ok(v_hat.map(|v| disc(v.clamp(0.0, 1.0), s)))
}

pub fn quantize_w(w: &Tensor, bits: u8, alpha: f64) -> Result<Tensor> {
    check_bits(bits)?;
    check_alpha(alpha)?;
    let s = levels(bits);
    Ok(w.map(|v| q_w(v, alpha, s)))
}

pub fn quantize_z(z: &Tensor, bits: u8, alpha: f64) -> Result<Tensor> {
    check_bits(bits)?;
    check_alpha(alpha)?;
    let s = levels(bits);
    Ok(z.map(|v| q_z(v, alpha, s)))
}

pub fn quantize_w_scalar(w: f64, bits: u8, alpha: f64) -> f64 {
    q_w(w, alpha, levels(bits))
}

pub fn quantize_z_scalar(z: f64, bits: u8, alpha: f64) -> f64 {
    q_z(z, alpha, levels(bits))
}

/// The `k`-th representable weight value, computed in the quantizer's own
/// arithmetic order.
pub fn weight_level(k: u64, bits: u8, alpha: f64) -> f64 {
    let s = levels(bits);
    alpha * (2.0 * (k as f64 / s) - 1.0)
}

/// Straight-through gradients `(∂Q_w/∂w, ∂Q_w/∂α_w)`.
pub fn ste_grad_w(w: f64, alpha: f64, bits: u8) -> (f64, f64) {
    if w.abs() < alpha {
        (1.0, (quantize_w_scalar(w, bits, alpha) - w) / alpha)
    } else {
        (0.0, w.signum())
    }
}

/// Straight-through gradients `(∂Q_z/∂z, ∂Q_z/∂α_z)`.
pub fn ste_grad_z(z: f64, alpha: f64, bits: u8) -> (f64, f64) {
    if z >= alpha {
        (0.0, 1.0)
    } else if z <= 0.0 {
        (0.0, 0.0)
    } else {
        (1.0, (quantize_z_scalar(z, bits, alpha) - z) / alpha)
    }
}

/// `round(v̂·s)/s` forward, identity backward.
struct DiscretizeSte {
    bits: u8,
    name: String,
}

impl CustomGradRule for DiscretizeSte {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        discretize(inputs[0], self.bits)
    }

    fn backward(&self, g: &Tensor, _: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![g.clone()])
    }
}

/// Fused `Q_w(w, b)` over inputs `[w, α_w]`.
struct WeightQuantizer {
    bits: u8,
    name: String,
}

impl CustomGradRule for WeightQuantizer {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        quantize_w(inputs[0], self.bits, inputs[1].item()?)
    }

    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        let alpha = inputs[1].item()?;
        let mut dw = Vec::with_capacity(g.numel());
        let mut dalpha = 0.0;
        for (&gi, &w) in g.data().iter().zip(inputs[0].data()) {
            let (a, b) = ste_grad_w(w, alpha, self.bits);
            dw.push(gi * a);
            dalpha += gi * b;
        }
        Ok(vec![
            Tensor::new(g.shape().to_vec(), dw)?,
            Tensor::new(inputs[1].shape().to_vec(), vec![dalpha])?,
        ])
    }
}

/// Fused `Q_z(z, b)` over inputs `[z, α_z]`. The signed variant uses the
/// symmetric weight map and serves raw network inputs, which may be negative.
struct ActivationQuantizer {
    bits: u8,
    signed: bool,
    name: String,
}

impl CustomGradRule for ActivationQuantizer {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let alpha = inputs[1].item()?;
        if self.signed {
            quantize_w(inputs[0], self.bits, alpha)
        } else {
            quantize_z(inputs[0], self.bits, alpha)
        }
    }

    fn backward(&self, g: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Result<Vec<Tensor>> {
        let alpha = inputs[1].item()?;
        let mut dz = Vec::with_capacity(g.numel());
        let mut dalpha = 0.0;
        for (&gi, &z) in g.data().iter().zip(inputs[0].data()) {
            let (a, b) = if self.signed {
                ste_grad_w(z, alpha, self.bits)
            } else {
                ste_grad_z(z, alpha, self.bits)
            };
            dz.push(gi * a);
            dalpha += gi * b;
        }
        Ok(vec![
            Tensor::new(g.shape().to_vec(), dz)?,
            Tensor::new(inputs[1].shape().to_vec(), vec![dalpha])?,
        ])
    }
}

/// Registered straight-through rules for one bitwidth.
#[derive(Clone, Debug)]
pub struct SteRules {
    pub discretize: CustomOp,
    pub weight: CustomOp,
    pub activation: CustomOp,
    pub signed_activation: CustomOp,
}

/// Rules for `bits`, registered once per process and shared.
pub fn ste_rules(bits: u8) -> Result<&'static SteRules> {
    check_bits(bits)?;
    static RULES: OnceLock<Vec<SteRules>> = OnceLock::new();
    let all = RULES.get_or_init(|| {
        (MIN_BITS..=MAX_BITS)
            .map(|b| SteRules {
                discretize: register_custom_grad(DiscretizeSte {
                    bits: b,
                    name: format!("discretize_ste_{b}bit"),
                }),
                weight: register_custom_grad(WeightQuantizer {
                    bits: b,
                    name: format!("quantize_w_{b}bit"),
                }),
                activation: register_custom_grad(ActivationQuantizer {
                    bits: b,
                    signed: false,
                    name: format!("quantize_z_{b}bit"),
                }),
                signed_activation: register_custom_grad(ActivationQuantizer {
                    bits: b,
                    signed: true,
                    name: format!("quantize_z_signed_{b}bit"),
                }),
            })
            .collect()
    });
    Ok(&all[(bits - MIN_BITS) as usize])
}

pub fn quantize_w_taped(tape: &mut Tape, w: Var, alpha: Var, bits: u8) -> Result<Var> {
    tape.custom(&ste_rules(bits)?.weight, &[w, alpha])
}

pub fn quantize_z_taped(
    tape: &mut Tape,
    z: Var,
    alpha: Var,
    bits: u8,
    signed: bool,
) -> Result<Var> {
    let rules = ste_rules(bits)?;
    let op = if signed {
        &rules.signed_activation
    } else {
        &rules.activation
    };
    tape.custom(op, &[z, alpha])
}

/// `Q_w` assembled from taped primitives: divide, clip, affine map,
/// straight-through discretizer, affine inverse, scale.
pub fn quantize_w_composed(tape: &mut Tape, w: Var, alpha: Var, bits: u8) -> Result<Var> {
    let u = tape.div_scalar(w, alpha)?;
    let c = tape.clip(u, -1.0, 1.0)?;
    let shifted = tape.offset(c, 1.0)?;
    let v_hat = tape.scale(shifted, 0.5)?;
    let d = tape.custom(&ste_rules(bits)?.discretize, &[v_hat])?;
    let twice = tape.scale(d, 2.0)?;
    let centered = tape.offset(twice, -1.0)?;
    tape.mul_scalar(centered, alpha)
}

/// `Q_z` assembled from taped primitives.
pub fn quantize_z_composed(tape: &mut Tape, z: Var, alpha: Var, bits: u8) -> Result<Var> {
    let u = tape.div_scalar(z, alpha)?;
    let c = tape.clip(u, 0.0, 1.0)?;
    let d = tape.custom(&ste_rules(bits)?.discretize, &[c])?;
    tape.mul_scalar(d, alpha)
}

/// Candidate bitwidths and switchable clipping levels of one layer.
///
/// Clipping levels are stored as `ln α` so positivity holds by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantSpec {
    bitwidths: Vec<u8>,
    log_alpha_w: BTreeMap<u8, f64>,
    log_alpha_z: BTreeMap<u8, f64>,
    pub rounding: Rounding,
}

impl QuantSpec {
    /// Every clipping level starts at 1.
    pub fn new(bitwidths: &[u8]) -> Result<Self> {
        if bitwidths.is_empty() {
            return Err(Error::Parameter("empty bitwidth set".into()));
        }
        let mut set = bitwidths.to_vec();
        set.sort_unstable();
        set.dedup();
        for &b in &set {
            check_bits(b)?;
        }
        let zeros: BTreeMap<u8, f64> = set.iter().map(|&b| (b, 0.0)).collect();
        Ok(QuantSpec {
            bitwidths: set,
            log_alpha_w: zeros.clone(),
            log_alpha_z: zeros,
            rounding: Rounding::HalfAwayFromZero,
        })
    }

    pub fn bitwidths(&self) -> &[u8] {
        &self.bitwidths
    }

    pub fn contains(&self, bits: u8) -> bool {
        self.bitwidths.binary_search(&bits).is_ok()
    }

    pub fn alpha_w(&self, bits: u8) -> Result<f64> {
        self.log_alpha_w
            .get(&bits)
            .map(|v| v.exp())
            .ok_or_else(|| Error::config(format!("no weight clipping level for {bits}-bit")))
    }

    pub fn alpha_z(&self, bits: u8) -> Result<f64> {
        self.log_alpha_z
            .get(&bits)
            .map(|v| v.exp())
            .ok_or_else(|| Error::config(format!("no activation clipping level for {bits}-bit")))
    }

    pub fn set_alpha_w(&mut self, bits: u8, alpha: f64) -> Result<()> {
        check_alpha(alpha)?;
        let slot = self
            .log_alpha_w
            .get_mut(&bits)
            .ok_or_else(|| Error::config(format!("{bits}-bit not in bitwidth set")))?;
        *slot = alpha.ln();
        Ok(())
    }
}

impl Default for QuantSpec {
    fn default() -> Self {
        QuantSpec::new(&DEFAULT_BITWIDTHS).expect("default bitwidths are valid")
    }
}

/// Quantized values of a full-precision weight tensor at one bitwidth.
///
/// The source weights are not copied into the view's identity: every bitwidth
/// reads the same shared store and re-quantizes on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedView {
    pub bits: u8,
    pub alpha: f64,
    values: Tensor,
}

impl QuantizedView {
    pub fn new(weights: &Tensor, bits: u8, alpha: f64) -> Result<Self> {
        Ok(QuantizedView {
            bits,
            alpha,
            values: quantize_w(weights, bits, alpha)?,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Grid index `k` of each value, or `None` when a value is off the grid.
    pub fn levels(&self) -> Option<Vec<u64>> {
        let s = levels(self.bits);
        self.values
            .data()
            .iter()
            .map(|&q| {
                let k = ((q / self.alpha + 1.0) * 0.5 * s).round();
                (k >= 0.0 && k <= s && weight_level(k as u64, self.bits, self.alpha) == q)
                    .then_some(k as u64)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v])
    }

    #[test]
    fn normalization_examples() {
        let w = Tensor::from_vec(vec![0.0, 2.0, -0.5]);
        assert_eq!(normalize_w(&w, 1.0).unwrap().data(), &[0.5, 1.0, 0.25]);
        let z = Tensor::from_vec(vec![0.4, -3.0]);
        assert_eq!(normalize_z(&z, 1.0).unwrap().data(), &[0.4, 0.0]);
        assert_eq!(normalize_z(&scalar(5.0), 2.0).unwrap().data(), &[1.0]);
        assert!(matches!(normalize_w(&w, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(normalize_z(&z, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize(&scalar(0.4), 2).unwrap().data(), &[1.0 / 3.0]);
        for b in 2..=8 {
            assert_eq!(discretize(&scalar(0.0), b).unwrap().data(), &[0.0]);
            assert_eq!(discretize(&scalar(1.0), b).unwrap().data(), &[1.0]);
        }
        // round(1.5) = 2 under half-away-from-zero
        assert_eq!(discretize(&scalar(0.5), 2).unwrap().data(), &[2.0 / 3.0]);
        assert!(matches!(
            discretize(&scalar(1.1), 2),
            Err(Error::Contract(_))
        ));
        assert!(discretize(&scalar(1.0 + 1e-13), 2).is_ok());
    }

    #[test]
    fn quantize_examples() {
        let q = quantize_w(&scalar(0.4), 2, 1.0).unwrap();
        assert!((q.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        let sat = quantize_w(&Tensor::from_vec(vec![3.0, 1.5, -1.5, -7.0]), 3, 1.5).unwrap();
        assert_eq!(sat.data(), &[1.5, 1.5, -1.5, -1.5]);
        assert_eq!(quantize_z(&scalar(0.4), 2, 1.0).unwrap().data(), &[1.0 / 3.0]);
        assert_eq!(quantize_z(&scalar(0.0), 4, 1.0).unwrap().data(), &[0.0]);
    }

    #[test]
    fn ste_branch_examples() {
        let (dw, da) = ste_grad_w(0.4, 1.0, 2);
        assert_eq!(dw, 1.0);
        assert!((da - (-1.0 / 15.0)).abs() < 1e-15);
        assert_eq!(ste_grad_w(2.0, 1.0, 2), (0.0, 1.0));
        assert_eq!(ste_grad_w(-2.0, 1.0, 2), (0.0, -1.0));
        assert_eq!(ste_grad_z(3.0, 1.0, 2), (0.0, 1.0));
        assert_eq!(ste_grad_z(-3.0, 1.0, 2), (0.0, 0.0));
    }

    #[test]
    fn taped_routes_agree_on_example() {
        for composed in [false, true] {
            let mut tape = Tape::new();
            let w = tape.param(Tensor::from_vec(vec![0.4, 2.0]));
            let a = tape.param(Tensor::scalar(1.0));
            let q = if composed {
                quantize_w_composed(&mut tape, w, a, 2).unwrap()
            } else {
                quantize_w_taped(&mut tape, w, a, 2).unwrap()
            };
            let v = tape.value(q).data();
            assert!((v[0] - 1.0 / 3.0).abs() < 1e-15);
            assert_eq!(v[1], 1.0);
            let s = tape.sum(q).unwrap();
            tape.backward(s).unwrap();
            assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 0.0]);
            let da = tape.grad(a).unwrap().data()[0];
            assert!((da - (1.0 - 1.0 / 15.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn quant_spec_switchable_levels() {
        let mut q = QuantSpec::default();
        assert_eq!(q.bitwidths(), &[2, 3, 4, 5]);
        assert_eq!(q.alpha_w(3).unwrap(), 1.0);
        assert!(matches!(q.alpha_z(8), Err(Error::Config(_))));
        q.set_alpha_w(3, 0.5).unwrap();
        assert_eq!(q.alpha_w(2).unwrap(), 1.0);
        assert!((q.alpha_w(3).unwrap() - 0.5).abs() < 1e-15);
        assert!(QuantSpec::new(&[1]).is_err());
    }

    #[test]
    fn view_values_sit_on_grid() {
        let w = Tensor::from_vec((0..50).map(|i| (i as f64 - 25.0) / 17.0).collect());
        let view = QuantizedView::new(&w, 3, 0.8).unwrap();
        let ks = view.levels().expect("on grid");
        assert!(ks.iter().all(|&k| k <= 7));
    }
}
