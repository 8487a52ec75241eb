//! Per-channel batch normalization with running statistics.

use crate::error::{arg_err, dim_err, Result};

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

/// Channel layout of a `[B, C]` or `[B, C, H, W]` tensor.
#[derive(Debug, Clone, Copy)]
pub struct ChannelLayout {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl ChannelLayout {
    pub fn of(shape: &[usize]) -> Result<Self> {
        match shape {
            [b, c] => Ok(ChannelLayout {
                batch: *b,
                channels: *c,
                spatial: 1,
            }),
            [b, c, h, w] => Ok(ChannelLayout {
                batch: *b,
                channels: *c,
                spatial: h * w,
            }),
            _ => dim_err(format!("batchnorm expects rank 2 or 4, got {shape:?}")),
        }
    }

    fn count(&self) -> usize {
        self.batch * self.spatial
    }

    #[inline]
    fn for_channel(&self, c: usize, mut f: impl FnMut(usize)) {
        for b in 0..self.batch {
            let base = (b * self.channels + c) * self.spatial;
            for s in 0..self.spatial {
                f(base + s);
            }
        }
    }
}

/// Values the backward pass needs from a training-mode forward.
#[derive(Debug, Clone)]
pub struct BatchNormSaved {
    pub normalized: Vec<f32>,
    pub inv_std: Vec<f32>,
}

pub struct BatchNormTrainOutput {
    pub output: Vec<f32>,
    pub saved: BatchNormSaved,
    pub batch_mean: Vec<f32>,
    /// Unbiased variance, used for the running estimate.
    pub batch_var_unbiased: Vec<f32>,
}

pub fn batchnorm_train(
    input: &[f32],
    layout: ChannelLayout,
    gamma: &[f32],
    beta: &[f32],
) -> Result<BatchNormTrainOutput> {
    let n = layout.count();
    if layout.batch == 0 {
        return arg_err("batchnorm on an empty batch");
    }
    let mut output = vec![0.0f32; input.len()];
    let mut normalized = vec![0.0f32; input.len()];
    let mut inv_std = vec![0.0f32; layout.channels];
    let mut batch_mean = vec![0.0f32; layout.channels];
    let mut batch_var_unbiased = vec![0.0f32; layout.channels];
    for c in 0..layout.channels {
        let mut sum = 0.0f64;
        layout.for_channel(c, |i| sum += input[i] as f64);
        let mean = sum / n as f64;
        let mut sq = 0.0f64;
        layout.for_channel(c, |i| {
            let d = input[i] as f64 - mean;
            sq += d * d;
        });
        let var = sq / n as f64;
        let istd = 1.0 / (var + BN_EPS as f64).sqrt();
        layout.for_channel(c, |i| {
            let xh = ((input[i] as f64 - mean) * istd) as f32;
            normalized[i] = xh;
            output[i] = gamma[c] * xh + beta[c];
        });
        inv_std[c] = istd as f32;
        batch_mean[c] = mean as f32;
        batch_var_unbiased[c] = if n > 1 {
            (sq / (n - 1) as f64) as f32
        } else {
            var as f32
        };
    }
    Ok(BatchNormTrainOutput {
        output,
        saved: BatchNormSaved {
            normalized,
            inv_std,
        },
        batch_mean,
        batch_var_unbiased,
    })
}

pub fn batchnorm_eval(
    input: &[f32],
    layout: ChannelLayout,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
) -> Vec<f32> {
    let mut output = vec![0.0f32; input.len()];
    for c in 0..layout.channels {
        let istd = 1.0 / (running_var[c] + BN_EPS).sqrt();
        layout.for_channel(c, |i| {
            output[i] = gamma[c] * (input[i] - running_mean[c]) * istd + beta[c];
        });
    }
    output
}

/// Returns `(grad_input, grad_gamma, grad_beta)` for a training-mode forward.
pub fn batchnorm_backward(
    upstream: &[f32],
    layout: ChannelLayout,
    gamma: &[f32],
    saved: &BatchNormSaved,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let n = layout.count() as f32;
    let mut gi = vec![0.0f32; upstream.len()];
    let mut gg = vec![0.0f32; layout.channels];
    let mut gb = vec![0.0f32; layout.channels];
    for c in 0..layout.channels {
        let (mut sum_dy, mut sum_dy_xh) = (0.0f32, 0.0f32);
        layout.for_channel(c, |i| {
            sum_dy += upstream[i];
            sum_dy_xh += upstream[i] * saved.normalized[i];
        });
        gg[c] = sum_dy_xh;
        gb[c] = sum_dy;
        let k = gamma[c] * saved.inv_std[c] / n;
        layout.for_channel(c, |i| {
            gi[i] = k * (n * upstream[i] - sum_dy - saved.normalized[i] * sum_dy_xh);
        });
    }
    (gi, gg, gb)
}
