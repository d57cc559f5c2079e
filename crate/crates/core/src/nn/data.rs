//! Datasets: IDX digit files, CSV tables and a seeded synthetic generator.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Row-major samples, `len() * sample_len()` values.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub sample_shape: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, sample_shape: Vec<usize>) -> Result<Self> {
        let width: usize = sample_shape.iter().product();
        if width == 0 || inputs.len() != labels.len() * width {
            return Err(Error::Dataset(format!(
                "{} values do not form {} samples of shape {sample_shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset {
            inputs,
            labels,
            sample_shape,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Gathers the given rows into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let width = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.inputs[i * width..(i + 1) * width]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok((Tensor::new(data, shape)?, labels))
    }

    /// First `n` samples and the rest.
    pub fn split(mut self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let width = self.sample_len();
        let tail_inputs = self.inputs.split_off(n * width);
        let tail_labels = self.labels.split_off(n);
        let tail = Dataset {
            inputs: tail_inputs,
            labels: tail_labels,
            sample_shape: self.sample_shape.clone(),
            classes: self.classes,
        };
        (self, tail)
    }

    pub fn take(mut self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.inputs.truncate(n * self.sample_len());
        self.labels.truncate(n);
        self
    }
}

/// Seeded Gaussian-cluster generator producing digit-like data in `[0, 1]`.
///
/// All classes share a sparse background of lit pixels. Each class mean
/// redraws a random subset of pixels as lit or dark, so class means differ in
/// a few high-contrast strokes. Samples add isotropic Gaussian noise to their
/// class mean and are clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub classes: usize,
    pub sample_shape: Vec<usize>,
    /// Fraction of background pixels that are lit.
    pub active_fraction: f64,
    /// Fraction of pixels each class redraws.
    pub class_fraction: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            samples: 2048,
            classes: 10,
            sample_shape: vec![784],
            active_fraction: 0.2,
            class_fraction: 0.05,
            noise: 0.5,
            seed: 0,
        }
    }
}

pub fn synthetic_clusters(spec: &SyntheticSpec) -> Result<Dataset> {
    let width: usize = spec.sample_shape.iter().product();
    if spec.classes < 2 || width == 0 || spec.samples == 0 {
        return Err(Error::Dataset(
            "synthetic data needs >= 2 classes, a non-empty sample shape and samples".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.active_fraction)
        || !(0.0..=1.0).contains(&spec.class_fraction)
        || !(spec.noise >= 0.0)
    {
        return Err(Error::Dataset(
            "synthetic fractions must be in [0, 1] and noise non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lit = |rng: &mut ChaCha8Rng, p: f64| {
        if rng.random_bool(p) {
            rng.random_range(0.5..1.0)
        } else {
            0.0
        }
    };
    let background: Vec<f64> = (0..width).map(|_| lit(&mut rng, spec.active_fraction)).collect();
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            background
                .iter()
                .map(|&b| {
                    if rng.random_bool(spec.class_fraction) {
                        lit(&mut rng, 0.5)
                    } else {
                        b
                    }
                })
                .collect()
        })
        .collect();
    let mut inputs = Vec::with_capacity(spec.samples * width);
    let mut labels = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let class = rng.random_range(0..spec.classes);
        labels.push(class);
        for &p in &prototypes[class] {
            let z: f64 = rng.sample(StandardNormal);
            inputs.push((p + spec.noise * z).clamp(0.0, 1.0));
        }
    }
    let mut data = Dataset::new(inputs, labels, spec.sample_shape.clone())?;
    data.classes = spec.classes;
    Ok(data)
}

const IDX_U8: u8 = 0x08;

fn idx_body<'a>(bytes: &'a [u8], what: &str) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Dataset(format!("{what}: missing IDX magic number")));
    }
    if bytes[2] != IDX_U8 {
        return Err(Error::Dataset(format!(
            "{what}: unsupported IDX element type {:#04x} (only unsigned bytes)",
            bytes[2]
        )));
    }
    let rank = usize::from(bytes[3]);
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Dataset(format!("{what}: truncated IDX header")));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != count {
        return Err(Error::Dataset(format!(
            "{what}: IDX dims {dims:?} need {count} bytes, found {}",
            body.len()
        )));
    }
    Ok((dims, body))
}

/// Parses an IDX image file (`0x00000803` for `[n, rows, cols]`) and label
/// file (`0x00000801`). Pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (img_dims, pixels) = idx_body(images, "images")?;
    let (lbl_dims, raw_labels) = idx_body(labels, "labels")?;
    if img_dims.len() < 2 || lbl_dims.len() != 1 {
        return Err(Error::Dataset(format!(
            "expected image dims [n, ...] and label dims [n], got {img_dims:?} and {lbl_dims:?}"
        )));
    }
    if img_dims[0] != lbl_dims[0] {
        return Err(Error::Dataset(format!(
            "{} images but {} labels",
            img_dims[0], lbl_dims[0]
        )));
    }
    let inputs = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels = raw_labels.iter().map(|&l| usize::from(l)).collect();
    let sample_len: usize = img_dims[1..].iter().product();
    Dataset::new(inputs, labels, vec![sample_len])
}

pub fn read_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    parse_idx(&img, &lbl)
}

/// Serializes unsigned-byte data in IDX format.
pub fn encode_idx(dims: &[usize], values: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_U8, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(values);
    out
}

/// Reads a numeric CSV with a header row; `label_column` names the class
/// column and every other column is a feature.
pub fn read_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Dataset(format!("{}: no column named `{label_column}`", path.display())))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        for (col, field) in record.iter().enumerate() {
            let bad = || {
                Error::Dataset(format!(
                    "{}: line {}: column `{}` is not numeric: `{field}`",
                    path.display(),
                    row + 2,
                    &headers[col]
                ))
            };
            if col == label_idx {
                labels.push(field.trim().parse::<usize>().map_err(|_| bad())?);
            } else {
                inputs.push(field.trim().parse::<f64>().map_err(|_| bad())?);
            }
        }
    }
    Dataset::new(inputs, labels, vec![headers.len() - 1])
}
