//! Datasets: the CIFAR-10 binary format and two synthetic generators.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CacError, Result};
use crate::tensor::Tensor;

/// Labelled images `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: impl Into<String>) -> Result<Self> {
        let (n, ..) = images.dims4()?;
        if n != labels.len() {
            return Err(CacError::invalid(format!("{n} images but {} labels", labels.len())));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(CacError::invalid(format!("label {l} at index {i} outside 0..{num_classes}")));
        }
        Ok(Dataset { images, labels, num_classes, split: split.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split.clone(),
        })
    }

    /// The first `n` samples after a seeded shuffle.
    pub fn seeded_subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 || n > self.len() {
            return Err(CacError::Config(format!(
                "subset size {n} must be in 1..={} for split {}",
                self.len(),
                self.split
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        self.select(&idx)
    }

    /// Splits off the last `n` samples.
    pub fn split_tail(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(CacError::invalid(format!("cannot hold out {n} of {} samples", self.len())));
        }
        let cut = self.len() - n;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        let mut test = self.select(&tail)?;
        test.split = format!("{}-holdout", self.split);
        Ok((self.select(&head)?, test))
    }
}

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Per-channel standardisation constants applied after scaling bytes to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }
}

impl Normalization {
    pub fn apply(&self, channel: usize, byte: u8) -> f32 {
        ((byte as f64 / 255.0 - self.mean[channel]) / self.std[channel]) as f32
    }
}

/// Parses one CIFAR-10 batch file: records of a label byte followed by
/// R, G and B planes of 1024 row-major bytes.
pub fn parse_cifar_batch(bytes: &[u8], norm: &Normalization, source: &str) -> Result<Dataset> {
    let format_err = |detail: String| CacError::Format { path: source.to_string(), detail };
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(format_err(format!(
            "length {} is not a multiple of {CIFAR_RECORD}; truncated record {whole} starts at byte offset {}",
            bytes.len(),
            whole * CIFAR_RECORD
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    if n == 0 {
        return Err(format_err("no records".into()));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3 * plane);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(format_err(format!(
                "record {i} (byte offset {}) has label {label}, expected 0..=9",
                i * CIFAR_RECORD
            )));
        }
        labels.push(label as usize);
        for (c, px) in rec[1..].chunks_exact(plane).enumerate() {
            data.extend(px.iter().map(|&b| norm.apply(c, b)));
        }
    }
    let images = Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?;
    Dataset::new(images, labels, 10, source)
}

fn read_batches(dir: &Path, names: &[String], norm: &Normalization, split: &str) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for name in names {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| CacError::io(&path, e))?;
        let part = parse_cifar_batch(&bytes, norm, &path.display().to_string())?;
        labels.extend(part.labels);
        data.extend(part.images.into_data());
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?, labels, 10, split)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path, norm: &Normalization) -> Result<(Dataset, Dataset)> {
    let train: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let train = read_batches(dir, &train, norm, "train")?;
    let test = read_batches(dir, &["test_batch.bin".to_string()], norm, "test")?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Class 0: low-frequency blobs. Class 1: per-pixel noise textures.
    SmoothVsTextured,
    /// Class `c`: i.i.d. pixels from `N(±0.5, 1)`.
    TwoGaussians,
}

/// Balanced two-class synthetic set; sample `i` has label `i % 2`.
pub fn synth_dataset(kind: SynthKind, n: usize, seed: u64, channels: usize, side: usize) -> Result<Dataset> {
    if n < 2 || channels == 0 || side < 4 {
        return Err(CacError::invalid(format!(
            "synthetic set needs n >= 2, channels >= 1, side >= 4; got n={n}, channels={channels}, side={side}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = side * side;
    let mut data = Vec::with_capacity(n * channels * plane);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for &label in &labels {
        match (kind, label) {
            (SynthKind::SmoothVsTextured, 0) => {
                // a few wide Gaussian bumps, shared across channels up to a gain
                let bumps: Vec<(f64, f64, f64, f64)> = (0..3)
                    .map(|_| {
                        (
                            rng.random_range(0.0..side as f64),
                            rng.random_range(0.0..side as f64),
                            rng.random_range(0.35..0.6) * side as f64,
                            rng.random_range(-1.0..1.0),
                        )
                    })
                    .collect();
                let field: Vec<f64> = (0..plane)
                    .map(|p| {
                        let (y, x) = ((p / side) as f64, (p % side) as f64);
                        bumps
                            .iter()
                            .map(|&(cy, cx, s, a)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp())
                            .sum()
                    })
                    .collect();
                for _ in 0..channels {
                    let gain = rng.random_range(0.5..1.0);
                    data.extend(field.iter().map(|&v| (gain * v) as f32));
                }
            }
            (SynthKind::SmoothVsTextured, _) => {
                for _ in 0..channels {
                    data.extend((0..plane).map(|_| rng.random_range(-1.0f32..1.0)));
                }
            }
            (SynthKind::TwoGaussians, c) => {
                let mu = if c == 0 { -0.5 } else { 0.5 };
                for _ in 0..channels * plane {
                    data.push((mu + unit.sample(&mut rng)) as f32);
                }
            }
        }
    }
    let images = Tensor::new(vec![n, channels, side, side], data)?;
    let split = match kind {
        SynthKind::SmoothVsTextured => "smooth_vs_textured",
        SynthKind::TwoGaussians => "two_gaussians",
    };
    Dataset::new(images, labels, 2, split)
}

/// Random horizontal flip and zero-padded random crop, in place.
pub fn augment(x: &mut Tensor<f32>, rng: &mut ChaCha8Rng, flip: bool, crop_pad: usize) -> Result<()> {
    let (b, c, h, w) = x.dims4()?;
    let plane = h * w;
    for s in 0..b {
        let do_flip = flip && rng.random_bool(0.5);
        let (dy, dx) = if crop_pad > 0 {
            let r = 2 * crop_pad as i64 + 1;
            let mut draw = || (rng.random_range(0..r) - crop_pad as i64) as isize;
            (draw(), draw())
        } else {
            (0, 0)
        };
        if !do_flip && dy == 0 && dx == 0 {
            continue;
        }
        let sample = x.sample_mut(s);
        for ch in 0..c {
            let src = sample[ch * plane..(ch + 1) * plane].to_vec();
            let dst = &mut sample[ch * plane..(ch + 1) * plane];
            for i in 0..h {
                for j in 0..w {
                    let sj = if do_flip { w - 1 - j } else { j };
                    let (si, sj) = (i as isize + dy, sj as isize + dx);
                    dst[i * w + j] = if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                        src[si as usize * w + sj as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    Ok(())
}
