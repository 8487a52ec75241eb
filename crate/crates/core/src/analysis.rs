//! Histograms, level utilization, sigma sweeps, compression and FLOP
//! accounting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::container::PackedModel;
use crate::io::dataset::DatasetHandle;
use crate::kernels::{compute_mask, compute_threshold, QuantParams};
use crate::nn::{Network, WeightKind, WeightLayerStat};
use crate::tensor::Tensor;
use crate::trainer::order::{apply_order_mode, OrderMode, WeightPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bins: usize,
    /// Plotting hint: adds a `log10(count + 1)` column to the CSV.
    pub log_scale_y: bool,
    pub range: (f32, f32),
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.range;
        if self.bins < 2 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Argument(format!(
                "histogram needs >= 2 bins and a finite range with hi > lo, got {} bins over [{lo}, {hi}]",
                self.bins
            )));
        }
        Ok(())
    }

    /// Range symmetric about zero covering every element of `t`.
    pub fn symmetric(t: &Tensor, bins: usize) -> Self {
        let m = t.data().iter().fold(0.0f32, |a, v| a.max(v.abs()));
        let m = if m > 0.0 { m } else { 1.0 };
        HistogramSpec {
            bins,
            log_scale_y: true,
            range: (-m, m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub center: f64,
    pub count: usize,
}

/// Counts per equal-width bin. Values outside the range land in the edge bins.
pub fn weight_histogram(t: &Tensor, spec: &HistogramSpec) -> Result<Vec<HistogramBin>> {
    spec.validate()?;
    let (lo, hi) = (spec.range.0 as f64, spec.range.1 as f64);
    let width = (hi - lo) / spec.bins as f64;
    let mut counts = vec![0usize; spec.bins];
    for &v in t.data() {
        let b = ((v as f64 - lo) / width).floor();
        let b = if b.is_nan() {
            0.0
        } else {
            b.clamp(0.0, (spec.bins - 1) as f64)
        };
        counts[b as usize] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            center: lo + (i as f64 + 0.5) * width,
            count,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelUse {
    pub used: u32,
    pub total: u32,
}

/// Distinct grid magnitudes occupied by the nonzero entries of `quantized`.
/// An off-grid magnitude is a consistency error.
pub fn level_utilization(quantized: &Tensor, qp: &QuantParams) -> Result<LevelUse> {
    let mut seen = vec![false; qp.grid_points() as usize];
    for (i, &v) in quantized.data().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let j = qp.level_of(v.abs()).ok_or_else(|| {
            Error::Consistency(format!(
                "element {i} has magnitude {} off the {}-bit grid [{}, {}]",
                v.abs(),
                qp.k,
                qp.min,
                qp.max
            ))
        })?;
        seen[j as usize] = true;
    }
    Ok(LevelUse {
        used: seen.iter().filter(|s| **s).count() as u32,
        total: qp.grid_points(),
    })
}

/// Level use of the two composition orders on the same weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderEffect {
    pub sparsity: f64,
    pub qons: LevelUse,
    pub sonq: LevelUse,
    /// Lowest grid level occupied under each order.
    pub qons_lowest: Option<u32>,
    pub sonq_lowest: Option<u32>,
}

fn lowest_level(t: &Tensor, qp: &QuantParams) -> Option<u32> {
    t.data()
        .iter()
        .filter(|v| **v != 0.0)
        .filter_map(|v| qp.level_of(v.abs()))
        .min()
}

pub fn order_effect(weights: &Tensor, k: u32, sigma: f64) -> Result<OrderEffect> {
    let policy = |order| WeightPolicy {
        order,
        k,
        sigma,
        clamp_2bit: false,
    };
    let q = apply_order_mode(weights, &policy(OrderMode::QonS))?;
    let s = apply_order_mode(weights, &policy(OrderMode::SonQ))?;
    let (qq, sq) = match (q.quant, s.quant) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Argument("order effect needs k < 32".into())),
    };
    Ok(OrderEffect {
        sparsity: q.sparsity(),
        qons: level_utilization(&q.effective, &qq)?,
        sonq: level_utilization(&s.effective, &sq)?,
        qons_lowest: lowest_level(&q.effective, &qq),
        sonq_lowest: lowest_level(&s.effective, &sq),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sigma: f64,
    pub sparsity: f64,
}

/// Element-weighted sparsity each sigma would give on `layers`, sorted by sigma.
pub fn sparsity_sweep(layers: &[Tensor], sigmas: &[f64]) -> Result<Vec<SweepPoint>> {
    if sigmas.iter().any(|s| s.is_nan()) {
        return Err(Error::Argument("sigma must not be NaN".into()));
    }
    let mut sorted = sigmas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total: usize = layers.iter().map(Tensor::numel).sum();
    sorted
        .into_iter()
        .map(|sigma| {
            let mut pruned = 0usize;
            for l in layers {
                let t = compute_threshold(l, sigma)?;
                pruned += compute_mask(l, t).count_pruned();
            }
            Ok(SweepPoint {
                sigma,
                sparsity: if total == 0 {
                    0.0
                } else {
                    pruned as f64 / total as f64
                },
            })
        })
        .collect()
}

/// Storage and sparsity summary of a set of weight layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub layers: Vec<WeightLayerStat>,
    pub sparsity_conv: f64,
    pub sparsity_fc: f64,
    pub sparsity_all: f64,
    pub params_total: u64,
    pub params_effective: u64,
    pub bits_dense: u64,
    pub bits_effective: u64,
    pub compression_rate: f64,
    /// Rate floored to a whole factor, as tables usually print it.
    pub compression_rate_floor: u64,
    /// Rate counting one mask bit per element of each compressed layer.
    pub rate_with_mask: f64,
    pub flops_dense: Option<f64>,
    pub flops_effective: Option<f64>,
}

fn weighted_sparsity<'a>(layers: impl Iterator<Item = &'a WeightLayerStat>) -> f64 {
    let (mut total, mut zeros) = (0u64, 0u64);
    for l in layers {
        total += l.n_total as u64;
        zeros += (l.n_total - l.n_nonzero) as u64;
    }
    if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    }
}

/// `sum(n_total * 32) / sum(bits)` with `bits = n_nonzero * k` for
/// compressed layers and `n_total * 32` for exempt ones.
pub fn compression_rate(layers: &[WeightLayerStat]) -> Result<CompressionReport> {
    if layers.is_empty() {
        return Err(Error::Argument("no layers to account".into()));
    }
    let (mut dense, mut eff, mut mask) = (0u64, 0u64, 0u64);
    for l in layers {
        if l.n_total == 0 {
            return Err(Error::Argument(format!("layer `{}` is empty", l.name)));
        }
        if l.n_nonzero > l.n_total {
            return Err(Error::Argument(format!(
                "layer `{}` has {} nonzeros out of {}",
                l.name, l.n_nonzero, l.n_total
            )));
        }
        if !(1..=32).contains(&l.k_bits) {
            return Err(Error::Argument(format!(
                "layer `{}` has bit width {}",
                l.name, l.k_bits
            )));
        }
        dense += l.n_total as u64 * 32;
        if l.exempt {
            eff += l.n_total as u64 * 32;
        } else {
            eff += l.n_nonzero as u64 * l.k_bits as u64;
            if l.k_bits < 32 || l.n_nonzero < l.n_total {
                mask += l.n_total as u64;
            }
        }
    }
    if eff == 0 {
        return Err(Error::Argument("every compressed layer is empty".into()));
    }
    let rate = dense as f64 / eff as f64;
    Ok(CompressionReport {
        layers: layers.to_vec(),
        sparsity_conv: weighted_sparsity(layers.iter().filter(|l| l.kind == WeightKind::Conv)),
        sparsity_fc: weighted_sparsity(layers.iter().filter(|l| l.kind == WeightKind::Dense)),
        sparsity_all: weighted_sparsity(layers.iter()),
        params_total: layers.iter().map(|l| l.n_total as u64).sum(),
        params_effective: layers.iter().map(|l| l.n_nonzero as u64).sum(),
        bits_dense: dense,
        bits_effective: eff,
        compression_rate: rate,
        compression_rate_floor: rate.floor() as u64,
        rate_with_mask: dense as f64 / (eff + mask) as f64,
        flops_dense: None,
        flops_effective: None,
    })
}

/// Size summary of the weight records (`*.weight`, rank >= 2) of a packed
/// model. Full-precision records count as exempt.
pub fn packed_layer_stats(model: &PackedModel) -> Vec<WeightLayerStat> {
    model
        .records
        .iter()
        .filter(|r| r.name.ends_with(".weight") && r.shape.len() >= 2)
        .map(|r| WeightLayerStat {
            name: r.name.trim_end_matches(".weight").to_string(),
            kind: if r.shape.len() == 4 {
                WeightKind::Conv
            } else {
                WeightKind::Dense
            },
            n_total: r.numel(),
            n_nonzero: r.kept(),
            k_bits: r.bits(),
            exempt: r.is_full_precision(),
        })
        .collect()
}

/// `2 * H' W' * C_out * C_in * Kh * Kw`.
pub fn conv_flops(
    out_h: usize,
    out_w: usize,
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
) -> f64 {
    2.0 * (out_h * out_w) as f64 * (c_out * c_in * kh * kw) as f64
}

/// `2 * O * I`.
pub fn dense_flops(out: usize, inp: usize) -> f64 {
    2.0 * out as f64 * inp as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub name: String,
    pub flops_dense: f64,
    pub w_density: f64,
    pub a_density: f64,
    pub flops_effective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
    pub flops_dense: f64,
    pub flops_effective: f64,
}

/// Sums `flops * w_density * a_density` per layer. Each input is
/// `(name, dense flops, weight density, activation density)`.
pub fn flop_report(layers: &[(String, f64, f64, f64)]) -> Result<FlopReport> {
    let mut out = Vec::with_capacity(layers.len());
    for (name, flops, w, a) in layers {
        for (what, d) in [("weight", w), ("activation", a)] {
            if !(0.0..=1.0).contains(d) {
                return Err(Error::Argument(format!(
                    "{what} density {d} of `{name}` outside [0, 1]"
                )));
            }
        }
        if !(*flops >= 0.0) {
            return Err(Error::Argument(format!("negative FLOPs for `{name}`")));
        }
        out.push(LayerFlops {
            name: name.clone(),
            flops_dense: *flops,
            w_density: *w,
            a_density: *a,
            flops_effective: flops * w * a,
        });
    }
    Ok(FlopReport {
        flops_dense: out.iter().map(|l| l.flops_dense).sum(),
        flops_effective: out.iter().map(|l| l.flops_effective).sum(),
        layers: out,
    })
}

/// Whole-network estimate from one weight and one activation density.
pub fn uniform_flop_estimate(flops_dense: f64, w_density: f64, a_density: f64) -> f64 {
    flops_dense * w_density * a_density
}

/// Per-sample FLOPs of every weight layer of `net`. Weight densities come
/// from `w_density` or else the current projection; activation densities
/// from `act_density` or else 1. Exempt layers count as fully dense.
pub fn network_flops(
    net: &Network,
    w_density: Option<&[f64]>,
    act_density: Option<&[f64]>,
) -> Result<FlopReport> {
    let mut probe = net.clone();
    probe.trace_shapes()?;
    let stats = net.weight_stats();
    for (what, d) in [("weight", w_density), ("activation", act_density)] {
        if let Some(d) = d {
            if d.len() != stats.len() {
                return Err(Error::Argument(format!(
                    "{} {what} densities for {} layers",
                    d.len(),
                    stats.len()
                )));
            }
        }
    }
    let mut rows = Vec::with_capacity(stats.len());
    for (i, (s, t)) in stats.iter().zip(probe.traces()).enumerate() {
        let w = net.params.get(net.layers()[i].weight);
        let flops = match s.kind {
            WeightKind::Conv => {
                let ws = w.shape();
                conv_flops(
                    t.output_shape[2],
                    t.output_shape[3],
                    ws[0],
                    ws[1],
                    ws[2],
                    ws[3],
                )
            }
            WeightKind::Dense => dense_flops(w.shape()[0], w.shape()[1]),
        };
        let (wd, ad) = if s.exempt {
            (1.0, 1.0)
        } else {
            (
                w_density.map_or(s.n_nonzero as f64 / s.n_total as f64, |w| w[i]),
                act_density.map_or(1.0, |a| a[i]),
            )
        };
        rows.push((s.name.clone(), flops, wd, ad));
    }
    flop_report(&rows)
}

/// Fraction of nonzero inputs to each weight layer over the first `batch`
/// samples of `data`, in evaluation mode.
pub fn measure_activation_density(
    net: &mut Network,
    data: &DatasetHandle,
    batch: usize,
) -> Result<Vec<f64>> {
    if data.is_empty() || batch == 0 {
        return Err(Error::Argument(
            "activation density needs at least one sample".into(),
        ));
    }
    let rows: Vec<usize> = (0..batch.min(data.len())).collect();
    let (images, _) = data.batch(&rows)?;
    net.predict(&images)?;
    Ok(net.traces().iter().map(|t| t.input_density).collect())
}

pub fn write_histogram_csv<W: Write>(
    out: W,
    bins: &[HistogramBin],
    spec: &HistogramSpec,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if spec.log_scale_y {
        w.write_record(["bin_center", "count", "log10_count"])?;
    } else {
        w.write_record(["bin_center", "count"])?;
    }
    for b in bins {
        let mut rec = vec![b.center.to_string(), b.count.to_string()];
        if spec.log_scale_y {
            rec.push(((b.count + 1) as f64).log10().to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(out: W, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sigma", "sparsity"])?;
    for p in points {
        w.write_record([p.sigma.to_string(), p.sparsity.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(
        name: &str,
        n_total: usize,
        n_nonzero: usize,
        k: u32,
        exempt: bool,
    ) -> WeightLayerStat {
        WeightLayerStat {
            name: name.into(),
            kind: WeightKind::Conv,
            n_total,
            n_nonzero,
            k_bits: k,
            exempt,
        }
    }

    #[test]
    fn table_rates() {
        let r = compression_rate(&[layer("all", 25_500_000, 11_500_000, 4, false)]).unwrap();
        assert!((r.compression_rate - 17.739).abs() < 1e-3);
        assert_eq!(r.compression_rate_floor, 17);
        let r = compression_rate(&[layer("all", 25_500_000, 9_500_000, 2, false)]).unwrap();
        assert_eq!(r.compression_rate_floor, 42);
        let r = compression_rate(&[layer("all", 1000, 1000, 32, false)]).unwrap();
        assert_eq!(r.compression_rate, 1.0);
        assert_eq!(r.rate_with_mask, 1.0);
    }

    #[test]
    fn nonzero_above_total_is_rejected() {
        assert!(compression_rate(&[layer("x", 10, 11, 4, false)]).is_err());
    }

    #[test]
    fn single_conv_flops() {
        assert_eq!(conv_flops(3, 3, 1, 1, 3, 3), 162.0);
    }

    #[test]
    fn histogram_edges_and_constant() {
        let t = Tensor::from_vec(vec![0.5; 7]);
        let spec = HistogramSpec {
            bins: 4,
            log_scale_y: false,
            range: (-1.0, 1.0),
        };
        let h = weight_histogram(&t, &spec).unwrap();
        assert_eq!(h.iter().filter(|b| b.count > 0).count(), 1);
        let t = Tensor::from_vec(vec![-5.0, 5.0, 1.0]);
        let h = weight_histogram(&t, &spec).unwrap();
        assert_eq!(h[0].count, 1);
        assert_eq!(h[3].count, 2);
    }

    #[test]
    fn off_grid_is_consistency_error() {
        let qp = QuantParams::new(4, 0.1, 0.8, crate::kernels::ClampMode::None).unwrap();
        let t = Tensor::from_vec(vec![0.8, -0.1, 0.0]);
        assert_eq!(
            level_utilization(&t, &qp).unwrap(),
            LevelUse { used: 2, total: 8 }
        );
        let t = Tensor::from_vec(vec![0.8, 0.12]);
        assert!(matches!(
            level_utilization(&t, &qp),
            Err(Error::Consistency(_))
        ));
    }
}
