//! In-memory image datasets: the CIFAR-10 binary format and synthetic
//! tasks whose best operation family is known by construction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::{Real, Tensor};

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Images stored as `f32` in `[N, C, H, W]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub shape: [usize; 3],
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, shape: [usize; 3], classes: usize) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if images.len() != per * labels.len() {
            return Err(contract(format!(
                "{} pixels for {} images of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(contract(format!("label {l} outside 0..{classes}")));
        }
        Ok(Self {
            images,
            labels,
            shape,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            classes: self.classes,
        }
    }

    /// First half and second half (the first gets the extra sample when the
    /// length is odd).
    pub fn split_halves(&self) -> (Self, Self) {
        let mid = self.len().div_ceil(2);
        let all: Vec<usize> = (0..self.len()).collect();
        (self.subset(&all[..mid]), self.subset(&all[mid..]))
    }

    /// Stacks the selected images into an `[n, C, H, W]` tensor.
    pub fn batch<F: Real>(&self, indices: &[usize]) -> (Tensor<F>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| F::of(v as f64)));
        }
        let [c, h, w] = self.shape;
        (
            Tensor::new(vec![indices.len(), c, h, w], data),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Consecutive full batches over a permutation of the dataset; a
    /// trailing partial batch is dropped.
    pub fn batches(&self, batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(rng) = rng {
            order.shuffle(rng);
        }
        order.chunks_exact(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Sequential batches covering every sample, the last possibly short.
    pub fn eval_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        let order: Vec<usize> = (0..self.len()).collect();
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Reads the standard CIFAR-10 binary batches from `dir`. Pixels are scaled
/// to `[0, 1]` and standardised per channel. With a `limit`, a seeded random
/// subset of that size is kept, in file order.
pub fn load_cifar10(dir: &Path, split: Split, limit: Option<usize>, seed: u64) -> Result<Dataset> {
    let files: Vec<&str> = match split {
        Split::Train => CIFAR_TRAIN_FILES.to_vec(),
        Split::Test => vec![CIFAR_TEST_FILE],
    };
    let mut raw = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::Dataset {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Dataset {
                path,
                reason: format!(
                    "size {} is not a positive multiple of {CIFAR_RECORD}-byte records",
                    bytes.len()
                ),
            });
        }
        if let Some((r, rec)) = bytes.chunks_exact(CIFAR_RECORD).enumerate().find(|(_, rec)| rec[0] > 9) {
            return Err(Error::Dataset {
                path,
                reason: format!("record {r} has label byte {}", rec[0]),
            });
        }
        raw.extend(bytes);
    }
    let total = raw.len() / CIFAR_RECORD;
    let mut keep: Vec<usize> = (0..total).collect();
    if let Some(limit) = limit.filter(|&l| l < total) {
        keep.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        keep.truncate(limit);
        keep.sort_unstable();
    }
    let plane = 32 * 32;
    let mut images = Vec::with_capacity(keep.len() * 3 * plane);
    let mut labels = Vec::with_capacity(keep.len());
    for &r in &keep {
        let rec = &raw[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        labels.push(rec[0] as usize);
        for c in 0..3 {
            let px = &rec[1 + c * plane..1 + (c + 1) * plane];
            images.extend(px.iter().map(|&b| (b as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]));
        }
    }
    Dataset::new(images, labels, [3, 32, 32], 10)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticVariant {
    /// Oriented gratings with random phase: every class has the same mean
    /// and per-pixel distribution, so only oriented filters separate them.
    Texture,
    /// Flat images whose brightness depends on the class.
    Intensity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub variant: SyntheticVariant,
    pub classes: usize,
    pub samples: usize,
    pub channels: usize,
    pub size: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            variant: SyntheticVariant::Texture,
            classes: 2,
            samples: 1000,
            channels: 3,
            size: 16,
            noise: 0.5,
        }
    }
}

/// Generates a balanced dataset. Labels cycle through the classes so counts
/// differ by at most one; the result depends only on `spec` and `seed`.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2
        || spec.samples == 0
        || spec.channels == 0
        || spec.size < 2
        || spec.noise.is_nan()
        || spec.noise < 0.0
    {
        return Err(Error::Config(format!("degenerate synthetic dataset {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let (c, n) = (spec.channels, spec.size);
    let mut images = Vec::with_capacity(spec.samples * c * n * n);
    let mut labels = Vec::with_capacity(spec.samples);
    let period = 4.0;
    for i in 0..spec.samples {
        let label = i % spec.classes;
        labels.push(label);
        match spec.variant {
            SyntheticVariant::Texture => {
                let theta = std::f64::consts::PI * label as f64 / spec.classes as f64;
                let (dx, dy) = (theta.cos(), theta.sin());
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                for _ in 0..c {
                    for y in 0..n {
                        for x in 0..n {
                            let t = std::f64::consts::TAU * (x as f64 * dx + y as f64 * dy) / period + phase;
                            images.push((t.sin() + noise.sample(&mut rng)) as f32);
                        }
                    }
                }
            }
            SyntheticVariant::Intensity => {
                let level = label as f64 / (spec.classes - 1) as f64 * 2.0 - 1.0;
                for _ in 0..c * n * n {
                    images.push((level + noise.sample(&mut rng)) as f32);
                }
            }
        }
    }
    Dataset::new(images, labels, [c, n, n], spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticSpec {
            classes: 3,
            samples: 101,
            ..SyntheticSpec::default()
        };
        let a = gen_synthetic(&spec, 7).unwrap();
        let b = gen_synthetic(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_synthetic(&spec, 8).unwrap());
        let counts: Vec<usize> = (0..3).map(|k| a.labels.iter().filter(|&&l| l == k).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn texture_classes_share_mean_brightness() {
        let spec = SyntheticSpec {
            noise: 0.0,
            samples: 400,
            ..SyntheticSpec::default()
        };
        let d = gen_synthetic(&spec, 1).unwrap();
        for k in 0..2 {
            let (sum, cnt) = (0..d.len())
                .filter(|&i| d.labels[i] == k)
                .fold((0.0f64, 0usize), |(s, n), i| {
                    (
                        s + d.image(i).iter().map(|&v| v as f64).sum::<f64>(),
                        n + d.image(i).len(),
                    )
                });
            assert!((sum / cnt as f64).abs() < 0.05, "class {k} mean {}", sum / cnt as f64);
        }
    }

    #[test]
    fn halves_and_batches() {
        let d = gen_synthetic(
            &SyntheticSpec {
                samples: 11,
                ..SyntheticSpec::default()
            },
            0,
        )
        .unwrap();
        let (a, b) = d.split_halves();
        assert_eq!((a.len(), b.len()), (6, 5));
        assert_eq!(b.image(0), d.image(6));
        assert_eq!(d.batches(4, None).len(), 2);
        assert_eq!(d.eval_batches(4).last().unwrap().len(), 3);
        let (x, y) = d.batch::<f64>(&[2, 3]);
        assert_eq!(x.shape(), &[2, 3, 16, 16]);
        assert_eq!(y, vec![d.labels[2], d.labels[3]]);
    }
}
