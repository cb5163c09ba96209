//! Synthetic tasks and the CIFAR-10 binary reader.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Samples;
use crate::numerics::RngStream;

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_PIXELS: usize = 3072;
const CIFAR_SIDE: usize = 32;
const CIFAR_CHANNELS: usize = 3;
const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Gaussian class clusters.
    #[default]
    SynthClass,
    /// Random-teacher regression.
    SynthReg,
    Cifar10Bin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    #[default]
    None,
    /// Random horizontal flip and 4-pixel-pad random crop, redrawn per epoch.
    FlipCrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    /// Input dimension of the synthetic tasks (CIFAR is fixed at 3072).
    pub in_dim: usize,
    /// Distance scale between synthetic class centers, in units of the
    /// within-class noise.
    pub separation: f64,
    /// Seeded random subset of the training split, e.g. 5000 for CIFAR.
    pub subset: Option<usize>,
    pub normalize: bool,
    pub augmentation: Augmentation,
    /// Directory holding `data_batch_*.bin` / `test_batch.bin`.
    pub path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SynthClass,
            n_train: 1000,
            n_test: 500,
            classes: 10,
            in_dim: 32,
            separation: 1.0,
            subset: None,
            normalize: true,
            augmentation: Augmentation::None,
            path: None,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn input_dim(&self) -> usize {
        match self.kind {
            DatasetKind::Cifar10Bin => CIFAR_PIXELS,
            _ => self.in_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            DatasetKind::Cifar10Bin => CIFAR_CLASSES,
            _ => self.classes,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Samples,
    pub test: Samples,
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let mut rng = RngStream::new(spec.seed);
    let (mut train, mut test) = match spec.kind {
        DatasetKind::SynthClass => synthetic_classification(spec, &mut rng)?,
        DatasetKind::SynthReg => synthetic_regression(spec, &mut rng)?,
        DatasetKind::Cifar10Bin => {
            let dir = spec
                .path
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("cifar10_bin needs a data path".into()))?;
            load_cifar_dir(dir)?
        }
    };
    if let Some(n) = spec.subset {
        train = random_subset(&train, n, &mut rng);
    }
    if spec.kind == DatasetKind::Cifar10Bin && spec.n_test > 0 && spec.n_test < test.len() {
        test = random_subset(&test, spec.n_test, &mut rng);
    }
    if spec.normalize {
        let (mean, std) = feature_stats(&train.x);
        standardize(&mut train.x, &mean, &std);
        standardize(&mut test.x, &mean, &std);
    }
    Ok(Dataset { train, test })
}

fn random_subset(samples: &Samples, n: usize, rng: &mut RngStream) -> Samples {
    if n >= samples.len() {
        return samples.clone();
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(n);
    idx.sort_unstable();
    samples.select(&idx)
}

/// Balanced labels: round-robin assignment, then shuffled.
fn balanced_labels(n: usize, classes: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    labels
}

fn synthetic_classification(spec: &DatasetSpec, rng: &mut RngStream) -> Result<(Samples, Samples)> {
    if spec.classes < 2 || spec.in_dim == 0 {
        return Err(Error::InvalidArgument(
            "synthetic classification needs >= 2 classes and a positive input dim".into(),
        ));
    }
    let d = spec.in_dim;
    let centers: Array2<f64> = if spec.classes == 2 {
        // Two clusters at ±µ.
        let mu: Vec<f64> = (0..d)
            .map(|_| rng.standard_normal() * spec.separation)
            .collect();
        Array2::from_shape_fn((2, d), |(c, j)| if c == 0 { mu[j] } else { -mu[j] })
    } else {
        Array2::from_shape_fn((spec.classes, d), |_| {
            rng.standard_normal() * spec.separation
        })
    };
    let draw = |n: usize, rng: &mut RngStream| -> Result<Samples> {
        let labels = balanced_labels(n, spec.classes, rng);
        let x = Array2::from_shape_fn((n, d), |(i, j)| {
            centers[[labels[i], j]] + rng.standard_normal()
        });
        Samples::classification(x, labels, spec.classes)
    };
    let train = draw(spec.n_train, rng)?;
    let test = draw(spec.n_test, rng)?;
    Ok((train, test))
}

fn synthetic_regression(spec: &DatasetSpec, rng: &mut RngStream) -> Result<(Samples, Samples)> {
    let (d, k) = (spec.in_dim, spec.classes.max(1));
    let teacher = Array2::from_shape_fn((d, k), |_| rng.standard_normal() / (d as f64).sqrt());
    let draw = |n: usize, rng: &mut RngStream| -> Result<Samples> {
        let x = Array2::from_shape_fn((n, d), |_| rng.standard_normal());
        let y = x.dot(&teacher).mapv(f64::tanh);
        Samples::regression(x, y)
    };
    let train = draw(spec.n_train, rng)?;
    let test = draw(spec.n_test, rng)?;
    Ok((train, test))
}

/// Per-feature mean and standard deviation (population variance).
pub fn feature_stats(x: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows().max(1) as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let var = x
        .axis_iter(Axis(0))
        .fold(ndarray::Array1::zeros(x.ncols()), |acc, row| {
            acc + (&row - &mean).mapv(|v| v * v)
        })
        / n;
    (mean.to_vec(), var.mapv(f64::sqrt).to_vec())
}

fn standardize(x: &mut Array2<f64>, mean: &[f64], std: &[f64]) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        for (j, v) in row.iter_mut().enumerate() {
            let s = if std[j] > 0.0 { std[j] } else { 1.0 };
            *v = (*v - mean[j]) / s;
        }
    }
}

/// Parses concatenated 3073-byte records: one label byte, then 1024 red,
/// 1024 green and 1024 blue bytes. Pixels are scaled to `[0, 1]`.
pub fn parse_cifar_records(bytes: &[u8]) -> Result<Samples> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD_BYTES;
        return Err(Error::MalformedRecord {
            offset,
            reason: format!("truncated record of {} bytes", bytes.len() - offset),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut x = Array2::zeros((n, CIFAR_PIXELS));
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::MalformedRecord {
                offset: i * CIFAR_RECORD_BYTES,
                reason: format!("label byte {label} outside [0, 9]"),
            });
        }
        labels.push(label);
        for (dst, &src) in x.row_mut(i).iter_mut().zip(&record[1..]) {
            *dst = src as f64 / 255.0;
        }
    }
    Samples::classification(x, labels, CIFAR_CLASSES)
}

fn concat(parts: Vec<Samples>) -> Result<Samples> {
    let views: Vec<_> = parts.iter().map(|s| s.x.view()).collect();
    let x =
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let labels = parts
        .iter()
        .flat_map(|s| s.labels.iter().copied())
        .collect();
    Samples::classification(x, labels, CIFAR_CLASSES)
}

/// Reads `data_batch_1..5.bin` (whichever exist) and `test_batch.bin`.
pub fn load_cifar_dir(dir: &Path) -> Result<(Samples, Samples)> {
    let mut train_parts = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{i}.bin"));
        if path.exists() {
            train_parts.push(parse_cifar_records(&fs::read(&path)?)?);
        }
    }
    if train_parts.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no data_batch_*.bin under {}",
            dir.display()
        )));
    }
    let test = parse_cifar_records(&fs::read(dir.join("test_batch.bin"))?)?;
    Ok((concat(train_parts)?, test))
}

/// Random horizontal flips and zero-padded random crops of CIFAR-layout rows.
pub fn flip_crop(x: &Array2<f64>, pad: usize, rng: &mut RngStream) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    let side = CIFAR_SIDE as isize;
    for (src, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let flip = rng.coin();
        let dy = rng.below(2 * pad + 1) as isize - pad as isize;
        let dx = rng.below(2 * pad + 1) as isize - pad as isize;
        for c in 0..CIFAR_CHANNELS {
            let base = c * CIFAR_SIDE * CIFAR_SIDE;
            for r in 0..side {
                for col in 0..side {
                    let sr = r + dy;
                    let sc0 = col + dx;
                    let sc = if flip { side - 1 - sc0 } else { sc0 };
                    if (0..side).contains(&sr) && (0..side).contains(&sc) {
                        dst[base + (r * side + col) as usize] =
                            src[base + (sr * side + sc) as usize];
                    }
                }
            }
        }
    }
    out
}

/// Synthetic images in the CIFAR-10 binary layout: each class has a fixed
/// random color template, samples add per-pixel noise.
pub fn synthetic_cifar_records(n: usize, rng: &mut RngStream, templates: &[Vec<f64>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * CIFAR_RECORD_BYTES);
    let labels = balanced_labels(n, CIFAR_CLASSES, rng);
    for label in labels {
        out.push(label as u8);
        for &t in &templates[label] {
            let v = t + 40.0 * rng.standard_normal();
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn cifar_templates(rng: &mut RngStream) -> Vec<Vec<f64>> {
    (0..CIFAR_CLASSES)
        .map(|_| {
            (0..CIFAR_PIXELS)
                .map(|_| 64.0 + 128.0 * rng.uniform())
                .collect()
        })
        .collect()
}

/// Writes a synthetic dataset as `data_batch_1.bin` and `test_batch.bin`.
pub fn write_synthetic_cifar(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rng = RngStream::new(seed);
    let templates = cifar_templates(&mut rng);
    for (name, n) in [("data_batch_1.bin", n_train), ("test_batch.bin", n_test)] {
        let bytes = synthetic_cifar_records(n, &mut rng, &templates);
        fs::File::create(dir.join(name))?.write_all(&bytes)?;
    }
    Ok(())
}
