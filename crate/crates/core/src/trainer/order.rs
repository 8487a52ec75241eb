//! Per-layer weight projection under each compression order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    compute_mask, compute_threshold, decode_nonzero, encode_nonzero, make_quant_params,
    make_quant_params_2bit, GridCode, QuantParams, SparsityMask,
};
use crate::tensor::Tensor;

/// How sparsification and quantization are composed for compressible layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrderMode {
    /// Sparsify, then quantize the survivors with `min = t`.
    #[serde(rename = "QonS")]
    QonS,
    /// Quantize the full tensor with `min = 0`, then sparsify to the same
    /// pruned count Q-on-S would give.
    #[serde(rename = "SonQ")]
    SonQ,
    /// Quantize with `t = 0`: no pruning.
    #[serde(rename = "quantize-only")]
    QuantizeOnly,
    #[serde(rename = "sparsify-only")]
    SparsifyOnly,
    /// Weights pass through untouched.
    #[serde(rename = "baseline")]
    Baseline,
}

/// The weight-side knobs of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightPolicy {
    pub order: OrderMode,
    /// Weight bit width; 32 disables quantization.
    pub k: u32,
    pub sigma: f64,
    /// Use the mean / mean+2std range when `k == 2`.
    pub clamp_2bit: bool,
}

impl WeightPolicy {
    pub fn quantizes(&self) -> bool {
        self.k < 32 && !matches!(self.order, OrderMode::SparsifyOnly | OrderMode::Baseline)
    }
}

/// Result of projecting one layer's shadow weights.
#[derive(Debug, Clone)]
pub struct Squantized {
    /// Weights the forward pass uses.
    pub effective: Tensor,
    pub mask: SparsityMask,
    pub threshold: f32,
    /// `None` when weights are not quantized.
    pub quant: Option<QuantParams>,
    /// One code per kept element when quantized, else empty.
    pub codes: Vec<GridCode>,
}

impl Squantized {
    pub fn sparsity(&self) -> f64 {
        self.mask.sparsity()
    }
}

fn degenerate(reason: &str) -> Error {
    Error::DegenerateLayer {
        layer: String::new(),
        reason: reason.into(),
    }
}

fn masked(weights: &Tensor, mask: &SparsityMask) -> Tensor {
    let data = weights
        .data()
        .iter()
        .zip(mask.bits())
        .map(|(&w, &keep)| if keep { w } else { 0.0 })
        .collect();
    Tensor::new(weights.shape().to_vec(), data).expect("same shape")
}

fn quantized(
    weights: &Tensor,
    mask: SparsityMask,
    threshold: f32,
    qp: QuantParams,
) -> Result<Squantized> {
    let codes = encode_nonzero(weights.data(), &mask, &qp)?;
    let effective = decode_nonzero(weights.shape(), &mask, &codes, &qp)?;
    Ok(Squantized {
        effective,
        mask,
        threshold,
        quant: Some(qp),
        codes,
    })
}

fn min_max_params(
    weights: &Tensor,
    mask: &SparsityMask,
    threshold: f32,
    policy: &WeightPolicy,
) -> Result<QuantParams> {
    if policy.k == 2 && policy.clamp_2bit {
        make_quant_params_2bit(weights, mask)
    } else {
        make_quant_params(weights, mask, threshold, policy.k)
    }
}

/// Projects `weights` under `policy`, computing the layer threshold from
/// the weights' own statistics.
pub fn apply_order_mode(weights: &Tensor, policy: &WeightPolicy) -> Result<Squantized> {
    apply_order_mode_with_threshold(weights, policy, None)
}

/// As [`apply_order_mode`], optionally reusing a previously computed threshold.
pub fn apply_order_mode_with_threshold(
    weights: &Tensor,
    policy: &WeightPolicy,
    threshold: Option<f32>,
) -> Result<Squantized> {
    let threshold = match threshold {
        Some(t) => t,
        None => compute_threshold(weights, policy.sigma)?,
    };
    match policy.order {
        OrderMode::Baseline => Ok(Squantized {
            effective: weights.clone(),
            mask: SparsityMask::ones(weights.numel()),
            threshold: 0.0,
            quant: None,
            codes: Vec::new(),
        }),
        OrderMode::SparsifyOnly => sparsify_only(weights, threshold),
        OrderMode::QonS if policy.k >= 32 => sparsify_only(weights, threshold),
        OrderMode::QonS => {
            let mask = compute_mask(weights, threshold);
            if mask.count_kept() == 0 {
                return Err(degenerate("every weight fell below the threshold"));
            }
            let qp = min_max_params(weights, &mask, threshold, policy)?;
            quantized(weights, mask, threshold, qp)
        }
        OrderMode::QuantizeOnly if policy.k >= 32 => Ok(Squantized {
            effective: weights.clone(),
            mask: SparsityMask::ones(weights.numel()),
            threshold: 0.0,
            quant: None,
            codes: Vec::new(),
        }),
        OrderMode::QuantizeOnly => {
            let mask = SparsityMask::ones(weights.numel());
            let qp = min_max_params(weights, &mask, 0.0, policy)?;
            quantized(weights, mask, 0.0, qp)
        }
        OrderMode::SonQ => sparsify_on_quantized(weights, threshold, policy),
    }
}

fn sparsify_only(weights: &Tensor, threshold: f32) -> Result<Squantized> {
    let mask = compute_mask(weights, threshold);
    if mask.count_kept() == 0 {
        return Err(degenerate("every weight fell below the threshold"));
    }
    Ok(Squantized {
        effective: masked(weights, &mask),
        mask,
        threshold,
        quant: None,
        codes: Vec::new(),
    })
}

fn sparsify_on_quantized(
    weights: &Tensor,
    threshold: f32,
    policy: &WeightPolicy,
) -> Result<Squantized> {
    let n = weights.numel();
    let pruned = compute_mask(weights, threshold).count_pruned();
    if pruned == n {
        return Err(degenerate("every weight fell below the threshold"));
    }
    if policy.k >= 32 {
        return sparsify_only(weights, threshold);
    }
    let dense = SparsityMask::ones(n);
    let qp = if policy.k == 2 && policy.clamp_2bit {
        make_quant_params_2bit(weights, &dense)?
    } else {
        make_quant_params(weights, &dense, 0.0, policy.k)?
    };
    let all_codes = encode_nonzero(weights.data(), &dense, &qp)?;

    // prune the `pruned` smallest quantized magnitudes; ties by original magnitude
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        all_codes[a]
            .level
            .cmp(&all_codes[b].level)
            .then(weights.data()[a].abs().total_cmp(&weights.data()[b].abs()))
            .then(a.cmp(&b))
    });
    let mut mask = SparsityMask::ones(n);
    for &i in &order[..pruned] {
        mask.set(i, false);
    }
    let codes: Vec<GridCode> = all_codes
        .into_iter()
        .zip(mask.bits())
        .filter(|(_, &keep)| keep)
        .map(|(c, _)| c)
        .collect();
    let effective = decode_nonzero(weights.shape(), &mask, &codes, &qp)?;
    Ok(Squantized {
        effective,
        mask,
        threshold,
        quant: Some(qp),
        codes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(order: OrderMode, k: u32, sigma: f64) -> WeightPolicy {
        WeightPolicy {
            order,
            k,
            sigma,
            clamp_2bit: false,
        }
    }

    fn distinct_nonzero(t: &Tensor) -> usize {
        let mut mags: Vec<u32> = t
            .data()
            .iter()
            .filter(|v| **v != 0.0)
            .map(|v| v.abs().to_bits())
            .collect();
        mags.sort_unstable();
        mags.dedup();
        mags.len()
    }

    #[test]
    fn dense_mask_makes_orders_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::rand_uniform(&[64], -1.0, 1.0, &mut rng);
        let a = apply_order_mode(&w, &policy(OrderMode::QonS, 4, -1e9)).unwrap();
        let b = apply_order_mode(&w, &policy(OrderMode::SonQ, 4, -1e9)).unwrap();
        assert_eq!(a.threshold, 0.0);
        assert_eq!(a.effective, b.effective);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn masked_positions_zero_under_both_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::rand_uniform(&[256], -1.0, 1.0, &mut rng);
        for order in [OrderMode::QonS, OrderMode::SonQ] {
            let s = apply_order_mode(&w, &policy(order, 4, 0.0)).unwrap();
            for (&v, &keep) in s.effective.data().iter().zip(s.mask.bits()) {
                if !keep {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn same_sparsity_and_more_levels_for_qons() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::rand_uniform(&[2048], -1.0, 1.0, &mut rng);
        let q = apply_order_mode(&w, &policy(OrderMode::QonS, 4, 0.0)).unwrap();
        let s = apply_order_mode(&w, &policy(OrderMode::SonQ, 4, 0.0)).unwrap();
        assert_eq!(q.mask.count_pruned(), s.mask.count_pruned());
        assert!((q.sparsity() - 0.5).abs() < 0.05);
        assert!(distinct_nonzero(&q.effective) >= distinct_nonzero(&s.effective));
        assert_eq!(distinct_nonzero(&q.effective), 8);
    }

    #[test]
    fn baseline_and_passthrough() {
        let w = Tensor::from_vec(vec![0.3, -0.1, 0.7]);
        let b = apply_order_mode(&w, &policy(OrderMode::Baseline, 4, 0.0)).unwrap();
        assert_eq!(b.effective, w);
        let s = apply_order_mode(&w, &policy(OrderMode::QonS, 32, 0.0)).unwrap();
        assert!(s.quant.is_none());
        assert_eq!(s.effective.data(), &[0.0, 0.0, 0.7]);
    }

    #[test]
    fn all_pruned_is_degenerate() {
        let w = Tensor::from_vec(vec![0.3, -0.1, 0.7]);
        for order in [OrderMode::QonS, OrderMode::SonQ, OrderMode::SparsifyOnly] {
            assert!(matches!(
                apply_order_mode(&w, &policy(order, 4, 100.0)),
                Err(Error::DegenerateLayer { .. })
            ));
        }
    }
}
