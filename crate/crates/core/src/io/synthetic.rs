//! Class-conditioned Gaussian-blob images.
//!
//! Each class owns a fixed set of blob prototypes drawn from
//! `pattern_seed`. A sample renders its class's blobs with jittered
//! centers and amplitudes, plus pixel noise drawn from the sample seed.
//! Train and test sets generated with different seeds therefore share the
//! same class structure.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::dataset::DatasetHandle;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n: usize,
    #[serde(default)]
    pub pattern_seed: u64,
    #[serde(default = "three")]
    pub blobs_per_class: usize,
    #[serde(default = "blob_sigma")]
    pub blob_sigma: f32,
    /// Std of the per-sample blob-center displacement, in pixels.
    #[serde(default = "jitter")]
    pub jitter: f32,
    #[serde(default = "noise")]
    pub noise: f32,
    /// Class proportions; uniform when absent.
    #[serde(default)]
    pub proportions: Option<Vec<f64>>,
}

fn one() -> usize {
    1
}
fn three() -> usize {
    3
}
fn blob_sigma() -> f32 {
    1.5
}
fn jitter() -> f32 {
    1.0
}
fn noise() -> f32 {
    0.3
}

impl SyntheticSpec {
    pub fn new(classes: usize, height: usize, width: usize, n: usize) -> Self {
        SyntheticSpec {
            classes,
            channels: 1,
            height,
            width,
            n,
            pattern_seed: 0,
            blobs_per_class: three(),
            blob_sigma: blob_sigma(),
            jitter: jitter(),
            noise: noise(),
            proportions: None,
        }
    }

    /// 10 classes of 1x16x16 images.
    pub fn desk(n: usize) -> Self {
        Self::new(10, 16, 16, n)
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2
            || self.channels == 0
            || self.height == 0
            || self.width == 0
            || self.n == 0
        {
            return Err(Error::Config(
                "synthetic data needs >= 2 classes and positive extents".into(),
            ));
        }
        if self.blobs_per_class == 0 || !(self.blob_sigma > 0.0) {
            return Err(Error::Config(
                "blobs need a positive count and width".into(),
            ));
        }
        if !(self.jitter >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("jitter and noise must be nonnegative".into()));
        }
        if let Some(p) = &self.proportions {
            if p.len() != self.classes
                || p.iter().any(|v| !(*v >= 0.0) || !v.is_finite())
                || p.iter().sum::<f64>() <= 0.0
            {
                return Err(Error::Config(format!(
                    "proportions must be {} nonnegative weights with a positive sum",
                    self.classes
                )));
            }
        }
        Ok(())
    }

    /// Per-class sample counts: floor of the proportional share, with the
    /// remainder handed out by largest fractional part (lowest class first
    /// on ties).
    pub fn class_counts(&self) -> Vec<usize> {
        let weights = self
            .proportions
            .clone()
            .unwrap_or_else(|| vec![1.0; self.classes]);
        let total: f64 = weights.iter().sum();
        let shares: Vec<f64> = weights.iter().map(|w| w / total * self.n as f64).collect();
        let mut counts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
        let mut rest = self.n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..self.classes).collect();
        order.sort_by(|&a, &b| {
            let fa = shares[a] - shares[a].floor();
            let fb = shares[b] - shares[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &c in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            counts[c] += 1;
            rest -= 1;
        }
        counts
    }
}

struct Blob {
    y: f32,
    x: f32,
    /// One amplitude per channel.
    amp: Vec<f32>,
}

fn prototypes(spec: &SyntheticSpec) -> Vec<Vec<Blob>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.pattern_seed);
    let margin = |extent: usize| (extent as f32 * 0.15).min(2.0);
    let (my, mx) = (margin(spec.height), margin(spec.width));
    (0..spec.classes)
        .map(|_| {
            (0..spec.blobs_per_class)
                .map(|_| Blob {
                    y: rng.random_range(my..=(spec.height as f32 - 1.0 - my).max(my)),
                    x: rng.random_range(mx..=(spec.width as f32 - 1.0 - mx).max(mx)),
                    amp: (0..spec.channels)
                        .map(|_| rng.random_range(0.6..1.4))
                        .collect(),
                })
                .collect()
        })
        .collect()
}

/// Generates `spec.n` labeled images. Pixel values are left unnormalized.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<DatasetHandle> {
    spec.validate()?;
    let protos = prototypes(spec);
    let mut labels: Vec<usize> = spec
        .class_counts()
        .into_iter()
        .enumerate()
        .flat_map(|(c, n)| std::iter::repeat_n(c, n))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);

    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let jitter = Normal::new(0.0f32, spec.jitter).expect("validated");
    let noise = Normal::new(0.0f32, spec.noise).expect("validated");
    let inv = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
    let mut data = vec![0.0f32; spec.n * c * h * w];
    for (i, &label) in labels.iter().enumerate() {
        let img = &mut data[i * c * h * w..(i + 1) * c * h * w];
        for blob in &protos[label] {
            let cy = blob.y + jitter.sample(&mut rng);
            let cx = blob.x + jitter.sample(&mut rng);
            let scale: f32 = rng.random_range(0.7..1.3);
            for ch in 0..c {
                let a = blob.amp[ch] * scale;
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        img[(ch * h + y) * w + x] += a * (-d2 * inv).exp();
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let images = Tensor::new(vec![spec.n, c, h, w], data)?;
    DatasetHandle::new(images, labels, spec.classes)
}
