//! In-memory labeled image sets.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::idx::load_idx;
use crate::io::synthetic::{gen_synthetic, SyntheticSpec};
use crate::tensor::Tensor;

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Normalization already applied to `images`.
    pub normalization: Normalization,
}

impl DatasetHandle {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Dimension(format!(
                "images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Argument(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        let channels = images.shape()[1];
        Ok(DatasetHandle {
            images,
            labels,
            classes,
            normalization: Normalization::identity(channels),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// Per-channel mean and population std of the raw images.
    pub fn fit_normalization(&self) -> Normalization {
        let s = self.images.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let data = self.images.data();
        let mut mean = vec![0.0f32; c];
        let mut std = vec![1.0f32; c];
        for ch in 0..c {
            let vals = (0..n).flat_map(|i| {
                let base = (i * c + ch) * hw;
                data[base..base + hw].iter().map(|&v| v as f64)
            });
            let count = (n * hw) as f64;
            let m = vals.clone().sum::<f64>() / count;
            let var = vals.map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            mean[ch] = m as f32;
            std[ch] = if var > 0.0 { var.sqrt() as f32 } else { 1.0 };
        }
        Normalization { mean, std }
    }

    /// Applies `norm` to raw (identity-normalized) images.
    pub fn normalize(&mut self, norm: Normalization) -> Result<()> {
        if self.normalization != Normalization::identity(self.channels()) {
            return Err(Error::State("images are already normalized".into()));
        }
        let c = self.channels();
        if norm.mean.len() != c || norm.std.len() != c {
            return Err(Error::Dimension(format!(
                "normalization for {} channels applied to {c}",
                norm.mean.len()
            )));
        }
        let hw = self.images.shape()[2] * self.images.shape()[3];
        for (i, v) in self.images.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = (*v - norm.mean[ch]) / norm.std[ch];
        }
        self.normalization = norm;
        Ok(())
    }

    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_rows(rows)?;
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Ok((images, labels))
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSpec {
    /// `n` is the training-set size.
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
        n_test: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        #[serde(default = "default_classes")]
        classes: usize,
    },
}

fn default_classes() -> usize {
    10
}

impl DataSpec {
    /// The 10-class, 1x16x16 synthetic set used for desk-scale runs.
    pub fn desk(n_train: usize, n_test: usize) -> Self {
        DataSpec::Synthetic {
            spec: SyntheticSpec::desk(n_train),
            n_test,
        }
    }

    /// Loads train and test sets, both normalized with statistics fitted on
    /// the training set.
    pub fn load(&self, seed: u64) -> Result<(DatasetHandle, Option<DatasetHandle>)> {
        let (mut train, test) = match self {
            DataSpec::Synthetic { spec, n_test } => {
                let train = gen_synthetic(spec, seed)?;
                let test = if *n_test > 0 {
                    Some(gen_synthetic(
                        &SyntheticSpec {
                            n: *n_test,
                            ..spec.clone()
                        },
                        seed ^ 0x7e57_0000_0000_0001,
                    )?)
                } else {
                    None
                };
                (train, test)
            }
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
            } => {
                let train = load_idx(train_images, train_labels, *classes)?;
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some(load_idx(i, l, *classes)?),
                    (None, None) => None,
                    _ => {
                        return Err(Error::Config(
                            "test_images and test_labels must be given together".into(),
                        ))
                    }
                };
                (train, test)
            }
        };
        let norm = train.fit_normalization();
        train.normalize(norm.clone())?;
        let test = match test {
            Some(mut t) => {
                t.normalize(norm)?;
                Some(t)
            }
            None => None,
        };
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_centers_channels() {
        let images = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let mut d = DatasetHandle::new(images, vec![0, 1], 2).unwrap();
        let norm = d.fit_normalization();
        assert_eq!(norm.mean, vec![4.0]);
        d.normalize(norm).unwrap();
        let s: f32 = d.images.data().iter().sum();
        assert!(s.abs() < 1e-6);
        assert!(d.normalize(Normalization::identity(1)).is_err());
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let images = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(DatasetHandle::new(images, vec![0, 3], 3).is_err());
    }
}
