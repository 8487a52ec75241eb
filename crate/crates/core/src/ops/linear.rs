//! Dense and convolution kernels (forward and vector-Jacobian products).

use crate::error::{dim_err, Result};
use crate::parallel::map_items;

/// `out[b,o] = sum_i input[b,i] * weight[o,i] + bias[o]`.
pub fn dense_forward(
    input: &[f32],
    weight: &[f32],
    bias: &[f32],
    batch: usize,
    in_features: usize,
    out_features: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; batch * out_features];
    for b in 0..batch {
        let row = &input[b * in_features..(b + 1) * in_features];
        for o in 0..out_features {
            let w = &weight[o * in_features..(o + 1) * in_features];
            let mut acc = 0.0f32;
            for i in 0..in_features {
                acc += row[i] * w[i];
            }
            out[b * out_features + o] = acc + bias[o];
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn dense_backward(
    upstream: &[f32],
    input: &[f32],
    weight: &[f32],
    batch: usize,
    in_features: usize,
    out_features: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut gi = vec![0.0f32; batch * in_features];
    let mut gw = vec![0.0f32; out_features * in_features];
    let mut gb = vec![0.0f32; out_features];
    for b in 0..batch {
        let row = &input[b * in_features..(b + 1) * in_features];
        let gin = &mut gi[b * in_features..(b + 1) * in_features];
        for o in 0..out_features {
            let g = upstream[b * out_features + o];
            gb[o] += g;
            let w = &weight[o * in_features..(o + 1) * in_features];
            let gwr = &mut gw[o * in_features..(o + 1) * in_features];
            for i in 0..in_features {
                gin[i] += g * w[i];
                gwr[i] += g * row[i];
            }
        }
    }
    (gi, gw, gb)
}

/// Shapes of one 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return dim_err(format!(
                "conv2d expects rank-4 input and weight, got {input:?} and {weight:?}"
            ));
        }
        if input[1] != weight[1] {
            return dim_err(format!(
                "conv2d input has {} channels but weight expects {}",
                input[1], weight[1]
            ));
        }
        if stride == 0 {
            return dim_err("conv2d stride must be positive");
        }
        let out_h = output_extent(input[2], weight[2], stride, padding)?;
        let out_w = output_extent(input[3], weight[3], stride, padding)?;
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: weight[0],
            kernel_h: weight[2],
            kernel_w: weight[3],
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Multiply-accumulate count for one sample.
    pub fn macs_per_sample(&self) -> u64 {
        (self.out_spatial() * self.out_channels * self.patch_len()) as u64
    }
}

/// `(extent + 2*padding - kernel) / stride + 1`, rejecting non-integer results.
pub fn output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if kernel > padded {
        return dim_err(format!(
            "kernel {kernel} larger than padded extent {padded}"
        ));
    }
    if (padded - kernel) % stride != 0 {
        return dim_err(format!(
            "output size ({extent} + 2*{padding} - {kernel})/{stride} + 1 is not an integer"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Input offset within one sample for output row `oy` / column `ox` and
/// kernel tap `(ki, kj)`, if not padding.
#[inline]
fn tap(extent: usize, o: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let v = (o * stride + k).checked_sub(padding)?;
    (v < extent).then_some(v)
}

/// Patch matrix `[C*Kh*Kw, B*H'*W']` for the whole batch.
fn im2col(input: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (spatial, n) = (g.out_spatial(), g.batch * g.out_spatial());
    let mut out = vec![0.0f32; g.patch_len() * n];
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let ck = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let row = &mut out[ck * n..(ck + 1) * n];
                for b in 0..g.batch {
                    let plane = &input[(b * g.in_channels + c) * g.height * g.width..];
                    for oy in 0..g.out_h {
                        let Some(y) = tap(g.height, oy, ki, g.stride, g.padding) else {
                            continue;
                        };
                        for ox in 0..g.out_w {
                            if let Some(x) = tap(g.width, ox, kj, g.stride, g.padding) {
                                row[b * spatial + oy * g.out_w + ox] = plane[y * g.width + x];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-adds a patch-matrix gradient back onto the input layout.
fn col2im(cols: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (spatial, n) = (g.out_spatial(), g.batch * g.out_spatial());
    let mut out = vec![0.0f32; g.batch * g.in_sample()];
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let ck = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let row = &cols[ck * n..(ck + 1) * n];
                for b in 0..g.batch {
                    let base = (b * g.in_channels + c) * g.height * g.width;
                    for oy in 0..g.out_h {
                        let Some(y) = tap(g.height, oy, ki, g.stride, g.padding) else {
                            continue;
                        };
                        for ox in 0..g.out_w {
                            if let Some(x) = tap(g.width, ox, kj, g.stride, g.padding) {
                                out[base + y * g.width + x] += row[b * spatial + oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[inline]
fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    for (d, s) in y.iter_mut().zip(x) {
        *d += a * s;
    }
}

/// Dot product with eight fixed-order partial sums.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    for (x, y) in ra.iter().zip(rb) {
        acc[0] += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Cross-correlation of `[B, C, H, W]` with `[F, C, Kh, Kw]`. Each output
/// sums its taps in `(c, ki, kj)` order; zero weights are skipped.
pub fn conv2d_forward(input: &[f32], weight: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (ck_len, spatial, n) = (g.patch_len(), g.out_spatial(), g.batch * g.out_spatial());
    let cols = im2col(input, g);
    let rows = map_items(g.out_channels, |f| {
        let mut r = vec![0.0f32; n];
        for (ck, &wv) in weight[f * ck_len..(f + 1) * ck_len].iter().enumerate() {
            if wv != 0.0 {
                axpy(wv, &cols[ck * n..(ck + 1) * n], &mut r);
            }
        }
        r
    });
    let mut out = vec![0.0f32; g.batch * g.out_channels * spatial];
    for (f, r) in rows.iter().enumerate() {
        for b in 0..g.batch {
            let dst = (b * g.out_channels + f) * spatial;
            out[dst..dst + spatial].copy_from_slice(&r[b * spatial..(b + 1) * spatial]);
        }
    }
    out
}

/// Returns `(grad_input, grad_weight)`.
pub fn conv2d_backward(
    upstream: &[f32],
    input: &[f32],
    weight: &[f32],
    g: &ConvGeometry,
) -> (Vec<f32>, Vec<f32>) {
    let (ck_len, spatial, n) = (g.patch_len(), g.out_spatial(), g.batch * g.out_spatial());
    let cols = im2col(input, g);
    // upstream regrouped as [F, B*H'*W']
    let mut up = vec![0.0f32; g.out_channels * n];
    for b in 0..g.batch {
        for f in 0..g.out_channels {
            let src = (b * g.out_channels + f) * spatial;
            up[f * n + b * spatial..f * n + (b + 1) * spatial]
                .copy_from_slice(&upstream[src..src + spatial]);
        }
    }
    let grad_weight = map_items(g.out_channels, |f| {
        let uf = &up[f * n..(f + 1) * n];
        (0..ck_len)
            .map(|ck| dot(uf, &cols[ck * n..(ck + 1) * n]))
            .collect::<Vec<_>>()
    })
    .concat();
    let gcols = map_items(ck_len, |ck| {
        let mut r = vec![0.0f32; n];
        for f in 0..g.out_channels {
            let wv = weight[f * ck_len + ck];
            if wv != 0.0 {
                axpy(wv, &up[f * n..(f + 1) * n], &mut r);
            }
        }
        r
    })
    .concat();
    (col2im(&gcols, g), grad_weight)
}

/// Non-overlapping `k x k` average pooling on `[B, C, H, W]`.
pub fn avg_pool_forward(
    input: &[f32],
    shape: &[usize],
    k: usize,
) -> Result<(Vec<f32>, Vec<usize>)> {
    if shape.len() != 4 {
        return dim_err(format!("avg_pool expects rank-4 input, got {shape:?}"));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if k == 0 || h % k != 0 || w % k != 0 {
        return dim_err(format!("pool size {k} does not tile {h}x{w}"));
    }
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f32;
    let mut out = vec![0.0f32; n * c * oh * ow];
    for nc in 0..n * c {
        let plane = &input[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += plane[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                out[(nc * oh + oy) * ow + ox] = acc * scale;
            }
        }
    }
    Ok((out, vec![n, c, oh, ow]))
}

pub fn avg_pool_backward(upstream: &[f32], in_shape: &[usize], k: usize) -> Vec<f32> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f32;
    let mut gin = vec![0.0f32; n * c * h * w];
    for nc in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                gin[(nc * h + y) * w + x] = upstream[(nc * oh + y / k) * ow + x / k] * scale;
            }
        }
    }
    gin
}
