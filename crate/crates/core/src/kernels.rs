//! Statistics-aware sparsification, min-max quantization of the surviving
//! weights, and parameterized-clipping activation quantization.
//!
//! Weight flow for one layer:
//!
//! 1. `t = mean(|W|) + std(|W|) * sigma` ([`compute_threshold`])
//! 2. keep `|w| >= t` ([`compute_mask`])
//! 3. map each kept `|w|` onto `L + 1` evenly spaced magnitudes in
//!    `[min, max]`, `L = 2^(k-1) - 1`, and restore its sign
//!    ([`quantize_nonzero`]).
//!
//! Since `min = t > 0` for any nontrivial threshold, no kept weight is ever
//! rounded to zero.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::tensor::Tensor;

/// Initial clipping level for every quantized activation site.
pub const PACT_ALPHA_INIT: f32 = 10.0;
/// Lower bound re-applied to alpha after each optimizer step.
pub const PACT_ALPHA_FLOOR: f32 = 1e-3;
/// Relative widening applied when a quantization range collapses to a point.
pub const DEGENERATE_WIDEN: f64 = 1e-6;

/// One bit per weight element, row-major. `true` keeps the weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMask {
    bits: Vec<bool>,
}

impl SparsityMask {
    pub fn ones(len: usize) -> Self {
        SparsityMask {
            bits: vec![true; len],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        SparsityMask { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, keep: bool) {
        self.bits[i] = keep;
    }

    pub fn count_kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn count_pruned(&self) -> usize {
        self.len() - self.count_kept()
    }

    /// Fraction of pruned elements, in `[0, 1]`.
    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count_pruned() as f64 / self.len() as f64
        }
    }

    pub fn as_f32(&self) -> impl Iterator<Item = f32> + '_ {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 })
    }
}

/// How kept magnitudes are brought into `[min, max]` before rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClampMode {
    /// Magnitudes must already lie in range.
    None,
    /// Range is `[mean, mean + 2 std]` of the kept magnitudes; values are clamped into it.
    Mean2Std,
}

/// Per-layer quantization grid: `L + 1` magnitudes `min + j (max - min) / L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub k: u32,
    pub min: f32,
    pub max: f32,
    pub clamp: ClampMode,
}

impl QuantParams {
    pub fn new(k: u32, min: f32, max: f32, clamp: ClampMode) -> Result<Self> {
        if !(2..=16).contains(&k) {
            return arg_err(format!("weight bit width {k} outside 2..=16"));
        }
        if !(min >= 0.0) || !min.is_finite() || !max.is_finite() {
            return arg_err(format!(
                "quantization range [{min}, {max}] must be finite with min >= 0"
            ));
        }
        if max <= min {
            return arg_err(format!(
                "quantization range needs max > min, got [{min}, {max}]"
            ));
        }
        Ok(QuantParams { k, min, max, clamp })
    }

    /// `2^(k-1) - 1`, the number of steps between `min` and `max`.
    pub fn levels(&self) -> u32 {
        (1u32 << (self.k - 1)) - 1
    }

    /// Number of grid magnitudes, `2^(k-1)`.
    pub fn grid_points(&self) -> u32 {
        self.levels() + 1
    }

    /// Magnitude of grid level `j`.
    pub fn grid_magnitude(&self, level: u32) -> f32 {
        let (min, max) = (self.min as f64, self.max as f64);
        (min + level as f64 * (max - min) / self.levels() as f64) as f32
    }

    /// Grid level nearest to `magnitude` (which must lie in `[min, max]`),
    /// rounding halves away from zero.
    pub fn nearest_level(&self, magnitude: f32) -> u32 {
        let (min, max) = (self.min as f64, self.max as f64);
        let scaled = (magnitude as f64 - min) / (max - min);
        let j = (self.levels() as f64 * scaled).round();
        j.clamp(0.0, self.levels() as f64) as u32
    }

    /// Grid level of a magnitude produced by [`QuantParams::grid_magnitude`], if any.
    pub fn level_of(&self, magnitude: f32) -> Option<u32> {
        let j = self.nearest_level(magnitude.clamp(self.min, self.max));
        (self.grid_magnitude(j) == magnitude).then_some(j)
    }
}

/// Sign bit plus grid level of one kept weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCode {
    pub negative: bool,
    pub level: u32,
}

impl GridCode {
    pub fn value(&self, qp: &QuantParams) -> f32 {
        let m = qp.grid_magnitude(self.level);
        if self.negative {
            -m
        } else {
            m
        }
    }
}

/// Clipping level and bit width of one quantized activation site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PactParam {
    pub alpha: f32,
    pub k_act: u32,
}

impl PactParam {
    pub fn new(alpha: f32, k_act: u32) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return arg_err(format!("PACT alpha must be positive, got {alpha}"));
        }
        if k_act == 0 {
            return arg_err("activation bit width must be positive");
        }
        Ok(PactParam { alpha, k_act })
    }

    /// `2^k - 1` steps over `[0, alpha]`; `None` for passthrough widths (>= 32).
    pub fn steps(&self) -> Option<u32> {
        (self.k_act < 32).then(|| (1u32 << self.k_act) - 1)
    }
}

fn abs_stats(values: impl Iterator<Item = f32>) -> Option<(f64, f64)> {
    let mags: Vec<f64> = values.map(|v| v.abs() as f64).collect();
    if mags.is_empty() {
        return None;
    }
    let n = mags.len() as f64;
    let mean = mags.iter().sum::<f64>() / n;
    let var = mags.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Layer threshold `mean(|W|) + std(|W|) * sigma`, clamped below at zero.
/// The standard deviation is the population one.
pub fn compute_threshold(weights: &Tensor, sigma: f64) -> Result<f32> {
    let (mean, std) = abs_stats(weights.data().iter().copied())
        .ok_or_else(|| Error::Argument("threshold of an empty tensor".into()))?;
    Ok((mean + std * sigma).max(0.0) as f32)
}

/// Keeps `|w| >= t`. Ties are kept.
pub fn compute_mask(weights: &Tensor, threshold: f32) -> SparsityMask {
    SparsityMask {
        bits: weights
            .data()
            .iter()
            .map(|w| w.abs() >= threshold)
            .collect(),
    }
}

fn check_mask(weights: &[f32], mask: &SparsityMask) -> Result<()> {
    if weights.len() != mask.len() {
        return dim_err(format!(
            "mask of {} bits for {} weights",
            mask.len(),
            weights.len()
        ));
    }
    Ok(())
}

/// Min-max parameters for the kept weights: `min = threshold`,
/// `max = max |kept w|`. A collapsed range is widened to
/// `max = min (1 + 1e-6)`.
pub fn make_quant_params(
    weights: &Tensor,
    mask: &SparsityMask,
    threshold: f32,
    k: u32,
) -> Result<QuantParams> {
    check_mask(weights.data(), mask)?;
    let max = weights
        .data()
        .iter()
        .zip(mask.bits())
        .filter(|(_, &keep)| keep)
        .map(|(w, _)| w.abs())
        .fold(None, |acc: Option<f32>, m| {
            Some(acc.map_or(m, |a| a.max(m)))
        })
        .ok_or_else(|| Error::DegenerateLayer {
            layer: String::new(),
            reason: "every weight is masked".into(),
        })?;
    let max = widen_if_collapsed(threshold, max);
    QuantParams::new(k, threshold, max, ClampMode::None)
}

fn widen_if_collapsed(min: f32, max: f32) -> f32 {
    if max > min {
        return max;
    }
    let widened = (min as f64 * (1.0 + DEGENERATE_WIDEN)) as f32;
    if widened > min {
        widened
    } else {
        // min == 0 or too small to widen relatively
        min + f32::EPSILON.max(min * f32::EPSILON)
    }
}

/// 2-bit range built from the kept magnitudes: `min = mean`,
/// `max = mean + 2 std`. Kept magnitudes are clamped into it when quantized.
pub fn make_quant_params_2bit(weights: &Tensor, mask: &SparsityMask) -> Result<QuantParams> {
    check_mask(weights.data(), mask)?;
    let kept = weights
        .data()
        .iter()
        .zip(mask.bits())
        .filter(|(_, &keep)| keep)
        .map(|(w, _)| *w);
    let (mean, std) = abs_stats(kept).ok_or_else(|| Error::DegenerateLayer {
        layer: String::new(),
        reason: "every weight is masked".into(),
    })?;
    let min = mean as f32;
    let max = widen_if_collapsed(min, (mean + 2.0 * std) as f32);
    QuantParams::new(2, min, max, ClampMode::Mean2Std)
}

/// Grid codes for the kept weights, in row-major order.
pub fn encode_nonzero(
    weights: &[f32],
    mask: &SparsityMask,
    qp: &QuantParams,
) -> Result<Vec<GridCode>> {
    check_mask(weights, mask)?;
    let mut codes = Vec::with_capacity(mask.count_kept());
    for (&w, &keep) in weights.iter().zip(mask.bits()) {
        if !keep {
            continue;
        }
        let mut mag = w.abs();
        match qp.clamp {
            ClampMode::Mean2Std => mag = mag.clamp(qp.min, qp.max),
            ClampMode::None => {
                if mag < qp.min || mag > qp.max {
                    return arg_err(format!(
                        "kept magnitude {mag} outside quantization range [{}, {}]",
                        qp.min, qp.max
                    ));
                }
            }
        }
        codes.push(GridCode {
            negative: w.is_sign_negative(),
            level: qp.nearest_level(mag),
        });
    }
    Ok(codes)
}

/// Rebuilds a dense tensor from a mask and the codes of its kept elements.
pub fn decode_nonzero(
    shape: &[usize],
    mask: &SparsityMask,
    codes: &[GridCode],
    qp: &QuantParams,
) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if mask.len() != numel {
        return dim_err(format!("mask of {} bits for shape {shape:?}", mask.len()));
    }
    if codes.len() != mask.count_kept() {
        return Err(Error::Corruption(format!(
            "{} codes for {} kept weights",
            codes.len(),
            mask.count_kept()
        )));
    }
    let mut data = vec![0.0f32; numel];
    let mut it = codes.iter();
    for (d, &keep) in data.iter_mut().zip(mask.bits()) {
        if keep {
            let code = it.next().expect("count checked");
            if code.level > qp.levels() {
                return Err(Error::Corruption(format!(
                    "grid level {} above {}",
                    code.level,
                    qp.levels()
                )));
            }
            *d = code.value(qp);
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Zeroes masked weights and snaps every kept weight onto the `k`-bit grid.
pub fn quantize_nonzero(weights: &Tensor, mask: &SparsityMask, qp: &QuantParams) -> Result<Tensor> {
    let codes = encode_nonzero(weights.data(), mask, qp)?;
    decode_nonzero(weights.shape(), mask, &codes, qp)
}

/// Straight-through gradient of the sparsify-and-quantize projection:
/// rounding and sign pass the gradient unchanged, the mask gates it.
pub fn squantize_backward(upstream: &Tensor, mask: &SparsityMask) -> Result<Tensor> {
    check_mask(upstream.data(), mask)?;
    let data = upstream
        .data()
        .iter()
        .zip(mask.as_f32())
        .map(|(g, m)| g * m)
        .collect();
    Tensor::new(upstream.shape().to_vec(), data)
}

/// Clips to `[0, alpha]` and, for widths below 32, rounds onto
/// `2^k - 1` uniform steps (halves away from zero).
pub fn pact_forward_value(x: f32, p: &PactParam) -> f32 {
    let y = x.clamp(0.0, p.alpha);
    match p.steps() {
        Some(steps) => {
            let alpha = p.alpha as f64;
            let q = (y as f64 * steps as f64 / alpha).round();
            (q * alpha / steps as f64) as f32
        }
        None => y,
    }
}

pub fn pact_forward(x: &Tensor, p: &PactParam) -> Tensor {
    let data = x.data().iter().map(|&v| pact_forward_value(v, p)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Gradients of the clipped activation. Rounding is passed straight through:
/// `d/dx = 1` on `(0, alpha)`, `d/dalpha = 1` where `x >= alpha`.
pub fn pact_backward(upstream: &Tensor, x: &Tensor, p: &PactParam) -> Result<(Tensor, f32)> {
    if upstream.shape() != x.shape() {
        return dim_err(format!(
            "PACT upstream {:?} vs input {:?}",
            upstream.shape(),
            x.shape()
        ));
    }
    let (gx, ga) = pact_backward_raw(upstream.data(), x.data(), p.alpha);
    Ok((Tensor::new(x.shape().to_vec(), gx)?, ga))
}

pub(crate) fn pact_backward_raw(upstream: &[f32], x: &[f32], alpha: f32) -> (Vec<f32>, f32) {
    let mut grad_alpha = 0.0f32;
    let gx = upstream
        .iter()
        .zip(x)
        .map(|(&g, &v)| {
            if v >= alpha {
                grad_alpha += g;
                0.0
            } else if v > 0.0 {
                g
            } else {
                0.0
            }
        })
        .collect();
    (gx, grad_alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(compute_threshold(&t(&[-1.0, 1.0]), 0.0).unwrap(), 1.0);
        let w = t(&[0.1, 0.2, 0.3, 0.4]);
        assert!((compute_threshold(&w, 0.0).unwrap() - 0.25).abs() < 1e-7);
        // mean 0.25, population std sqrt(0.0125)
        let expected = 0.25 + 0.0125f64.sqrt();
        assert!((compute_threshold(&w, 1.0).unwrap() as f64 - expected).abs() < 1e-6);
        assert!((expected - 0.36180).abs() < 1e-5);
    }

    #[test]
    fn very_negative_sigma_clamps_to_zero() {
        let w = t(&[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(compute_threshold(&w, -100.0).unwrap(), 0.0);
        assert_eq!(compute_mask(&w, 0.0).count_kept(), 4);
    }

    #[test]
    fn mask_examples() {
        let w = t(&[0.1, 0.2, 0.3, 0.4]);
        let m = compute_mask(&w, 0.25);
        assert_eq!(m.bits(), &[false, false, true, true]);
        assert_eq!(m.sparsity(), 0.5);
        assert_eq!(compute_mask(&t(&[-1.0, 1.0]), 1.0).bits(), &[true, true]);
        assert_eq!(compute_mask(&w, 0.0).sparsity(), 0.0);
    }

    #[test]
    fn empty_threshold_is_an_error() {
        // Tensors cannot be empty, so exercise the stats helper directly.
        assert!(abs_stats(std::iter::empty()).is_none());
    }

    #[test]
    fn quantize_endpoints_and_midpoint() {
        let qp = QuantParams::new(4, 0.1, 0.9, ClampMode::None).unwrap();
        assert_eq!(qp.levels(), 7);
        let w = t(&[0.9, -0.9, 0.1, -0.1, 0.5]);
        let q = quantize_nonzero(&w, &SparsityMask::ones(5), &qp).unwrap();
        assert_eq!(q.data()[0], 0.9);
        assert_eq!(q.data()[1], -0.9);
        assert_eq!(q.data()[2], 0.1);
        assert_eq!(q.data()[3], -0.1);
        // w_s = 0.5, round(3.5) = 4 -> 0.1 + 4 * 0.8 / 7
        assert!((q.data()[4] - 0.557_142_87).abs() < 1e-6);
    }

    #[test]
    fn masked_positions_are_exactly_zero() {
        let qp = QuantParams::new(4, 0.2, 0.9, ClampMode::None).unwrap();
        let w = t(&[0.05, 0.5, -0.01, 0.9]);
        let mask = SparsityMask::from_bits(vec![false, true, false, true]);
        let q = quantize_nonzero(&w, &mask, &qp).unwrap();
        assert_eq!(q.data()[0].to_bits(), 0.0f32.to_bits());
        assert_eq!(q.data()[2].to_bits(), 0.0f32.to_bits());
    }

    #[test]
    fn quantize_rejects_bad_ranges() {
        assert!(QuantParams::new(4, 0.5, 0.5, ClampMode::None).is_err());
        assert!(QuantParams::new(4, -0.1, 0.5, ClampMode::None).is_err());
        assert!(QuantParams::new(1, 0.1, 0.5, ClampMode::None).is_err());
        let qp = QuantParams::new(4, 0.2, 0.5, ClampMode::None).unwrap();
        let err = quantize_nonzero(&t(&[0.9]), &SparsityMask::ones(1), &qp).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
        assert!(matches!(
            quantize_nonzero(&t(&[0.3, 0.3]), &SparsityMask::ones(1), &qp),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn two_bit_params_from_kept_weights() {
        let w = t(&[0.2, -0.4, 0.6, 0.01]);
        let mask = SparsityMask::from_bits(vec![true, true, true, false]);
        let qp = make_quant_params_2bit(&w, &mask).unwrap();
        let std = (0.08f64 / 3.0).sqrt();
        assert!((qp.min - 0.4).abs() < 1e-6);
        assert!((qp.max as f64 - (0.4 + 2.0 * std)).abs() < 1e-6);
        assert!((qp.max - 0.726_60).abs() < 1e-5);
        assert_eq!(qp.clamp, ClampMode::Mean2Std);
        assert_eq!(qp.levels(), 1);

        let q = quantize_nonzero(&w, &mask, &qp).unwrap();
        for (&v, &keep) in q.data().iter().zip(mask.bits()) {
            if keep {
                assert!(v.abs() == qp.min || v.abs() == qp.max, "{v}");
            }
        }
        assert_eq!(q.data()[1], -qp.min);
    }

    #[test]
    fn two_bit_zero_variance_is_widened() {
        let w = t(&[0.3, -0.3, 0.3]);
        let qp = make_quant_params_2bit(&w, &SparsityMask::ones(3)).unwrap();
        assert_eq!(qp.min, 0.3);
        assert_eq!(qp.max, (0.3f32 as f64 * (1.0 + 1e-6)) as f32);
        assert!(qp.max > qp.min);
    }

    #[test]
    fn all_masked_layer_is_degenerate() {
        let w = t(&[0.3, -0.3]);
        let mask = SparsityMask::from_bits(vec![false, false]);
        assert!(matches!(
            make_quant_params_2bit(&w, &mask),
            Err(Error::DegenerateLayer { .. })
        ));
        assert!(matches!(
            make_quant_params(&w, &mask, 0.5, 4),
            Err(Error::DegenerateLayer { .. })
        ));
    }

    #[test]
    fn equal_magnitudes_widen_the_standard_range() {
        let w = t(&[-1.0, 1.0]);
        let t0 = compute_threshold(&w, 0.0).unwrap();
        let mask = compute_mask(&w, t0);
        let qp = make_quant_params(&w, &mask, t0, 4).unwrap();
        assert!(qp.max > qp.min);
        let q = quantize_nonzero(&w, &mask, &qp).unwrap();
        assert_eq!(q.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn ste_gates_by_mask() {
        let g = t(&[1.0, -2.0, 3.0]);
        assert_eq!(squantize_backward(&g, &SparsityMask::ones(3)).unwrap(), g);
        let zero = squantize_backward(&g, &SparsityMask::from_bits(vec![false; 3])).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));
        assert!(squantize_backward(&g, &SparsityMask::ones(2)).is_err());
    }

    #[test]
    fn pact_clips_and_rounds() {
        let p = PactParam::new(2.0, 4).unwrap();
        assert_eq!(pact_forward_value(-3.0, &p), 0.0);
        assert_eq!(pact_forward_value(0.0, &p), 0.0);
        assert_eq!(pact_forward_value(2.0, &p), 2.0);
        assert_eq!(pact_forward_value(7.0, &p), 2.0);
        // alpha/2 * 15 / alpha = 7.5 rounds up to 8
        assert_eq!(pact_forward_value(1.0, &p), (8.0f64 * 2.0 / 15.0) as f32);
        let passthrough = PactParam::new(2.0, 32).unwrap();
        assert_eq!(pact_forward_value(1.2345, &passthrough), 1.2345);
        assert!(PactParam::new(0.0, 4).is_err());
    }

    #[test]
    fn pact_gradient_regions() {
        let p = PactParam::new(1.0, 4).unwrap();
        let x = t(&[0.2, 0.5, 0.9]);
        let up = t(&[1.0, 2.0, 3.0]);
        let (gx, ga) = pact_backward(&up, &x, &p).unwrap();
        assert_eq!(gx, up);
        assert_eq!(ga, 0.0);

        let x = t(&[1.0, 1.5, 9.0]);
        let (gx, ga) = pact_backward(&up, &x, &p).unwrap();
        assert!(gx.data().iter().all(|v| *v == 0.0));
        assert_eq!(ga, 6.0);

        let x = t(&[-0.5, 0.5, 2.0]);
        let (gx, ga) = pact_backward(&up, &x, &p).unwrap();
        assert_eq!(gx.data(), &[0.0, 2.0, 0.0]);
        assert_eq!(ga, 3.0);
    }
}
