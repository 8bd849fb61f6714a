//! Labeled sample collections and the synthetic generators used at desk scale.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::seed;

/// Indexed collection of `(features, label)` pairs sharing one per-sample shape.
///
/// Features are stored row-major in 64-bit floats; image samples use the
/// `[C, H, W]` shape and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    shape: Vec<usize>,
    data: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        shape: Vec<usize>,
        data: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let dim: usize = shape.iter().product();
        if dim == 0 {
            return Err(invalid("sample shape must have non-zero size"));
        }
        if data.len() != dim * labels.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", dim * labels.len()),
                actual: format!("{} values", data.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            shape,
            data,
            labels,
            num_classes,
        })
    }

    pub fn empty(shape: Vec<usize>, num_classes: usize) -> Self {
        Self {
            shape,
            data: Vec::new(),
            labels: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Flattened feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Indices of class `k`, ascending.
    pub fn class_indices(&self, k: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == k).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Self {
            shape: self.shape.clone(),
            data,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Concatenates two datasets with the same sample shape.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.shape),
                actual: format!("{:?}", other.shape),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            shape: self.shape.clone(),
            data,
            labels,
            num_classes: self.num_classes.max(other.num_classes),
        })
    }

    /// Features of `indices` as a `(n, *shape)` tensor.
    pub fn features(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let d = self.dim();
        let mut flat = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            flat.extend_from_slice(self.sample(i));
        }
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(&self.shape);
        Ok(Tensor::from_vec(flat, dims, device)?.to_dtype(dtype)?)
    }

    pub fn all_features(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.features(&idx, dtype, device)
    }

    pub fn label_tensor(&self, indices: &[usize], device: &Device) -> Result<Tensor> {
        let l: Vec<u32> = indices.iter().map(|&i| self.labels[i] as u32).collect();
        Ok(Tensor::from_vec(l, indices.len(), device)?)
    }

    /// Builds a dataset from a `(n, ...)` tensor and labels.
    pub fn from_tensor(x: &Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let dims = x.dims();
        if dims.is_empty() {
            return Err(invalid("tensor must have a batch dimension"));
        }
        let data = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Self::new(dims[1..].to_vec(), data, labels, num_classes)
    }

    /// Writes `data`, `labels` and a `meta` tensor (`[num_classes, *shape]`)
    /// to a safetensors file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let device = Device::Cpu;
        let mut meta = vec![self.num_classes as u32];
        meta.extend(self.shape.iter().map(|&s| s as u32));
        let labels: Vec<u32> = self.labels.iter().map(|&l| l as u32).collect();
        let tensors = HashMap::from([
            ("data".to_string(), Tensor::from_vec(self.data.clone(), (self.len(), self.dim()), &device)?),
            ("labels".to_string(), Tensor::from_vec(labels, self.len(), &device)?),
            ("meta".to_string(), Tensor::new(meta, &device)?),
        ]);
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let t = candle_core::safetensors::load(path, &Device::Cpu)?;
        let get = |k: &str| t.get(k).ok_or_else(|| invalid(format!("dataset file lacks `{k}`")));
        let meta = get("meta")?.to_vec1::<u32>()?;
        if meta.len() < 2 {
            return Err(invalid("dataset meta tensor is too short"));
        }
        let labels = get("labels")?.to_vec1::<u32>()?.into_iter().map(|l| l as usize).collect();
        let data = get("data")?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Self::new(meta[1..].iter().map(|&s| s as usize).collect(), data, labels, meta[0] as usize)
    }

    /// Content hash over shape, labels and feature bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.shape {
            h.update((*s as u64).to_le_bytes());
        }
        h.update((self.num_classes as u64).to_le_bytes());
        for l in &self.labels {
            h.update((*l as u64).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Deterministic split: the first `fraction` of each class (after a seeded
    /// shuffle) goes to the first part.
    pub fn split(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let mut rng = seed::rng(seed);
        let mut first = Vec::new();
        let mut second = Vec::new();
        for k in 0..self.num_classes {
            let mut idx = self.class_indices(k);
            shuffle(&mut idx, &mut rng);
            let cut = ((idx.len() as f64) * fraction).round() as usize;
            first.extend_from_slice(&idx[..cut]);
            second.extend_from_slice(&idx[cut..]);
        }
        first.sort_unstable();
        second.sort_unstable();
        (self.subset(&first), self.subset(&second))
    }
}

pub fn shuffle<T, R: Rng>(v: &mut [T], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// A smooth random field on an `h x w` grid: a sum of a few low-frequency
/// cosines with random phases, scaled to unit peak magnitude.
fn smooth_field<R: Rng>(rng: &mut R, h: usize, w: usize, max_freq: f64, terms: usize) -> Vec<f64> {
    let mut field = vec![0.0; h * w];
    for _ in 0..terms {
        let fy = rng.random_range(0.0..max_freq);
        let fx = rng.random_range(0.0..max_freq);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(0.5..1.0);
        for y in 0..h {
            for x in 0..w {
                let t = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64);
                field[y * w + x] += amp * (t + phase).cos();
            }
        }
    }
    let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        field.iter_mut().for_each(|v| *v /= peak);
    }
    field
}

/// Multi-class image task: every class owns a faint smooth texture added, at a
/// per-sample random amplitude, on top of a random smooth background.
///
/// Samples with small amplitude sit far from their class core, which gives the
/// screening and density machinery easy and hard samples to tell apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrototypeImageTask {
    pub num_classes: usize,
    pub channels: usize,
    pub size: usize,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub background_amplitude: f64,
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for PrototypeImageTask {
    fn default() -> Self {
        Self {
            num_classes: 10,
            channels: 3,
            size: 16,
            amplitude_min: 0.05,
            amplitude_max: 0.15,
            background_amplitude: 0.2,
            pixel_noise: 0.02,
            seed: 0,
        }
    }
}

impl PrototypeImageTask {
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = seed::child_rng(self.seed, "prototypes");
        let plane = self.size * self.size;
        (0..self.num_classes)
            .map(|_| {
                let mut p = Vec::with_capacity(self.channels * plane);
                for _ in 0..self.channels {
                    p.extend(smooth_field(&mut rng, self.size, self.size, 4.0, 4));
                }
                p
            })
            .collect()
    }

    /// Draws `per_class` samples of every class; `split` selects an
    /// independent stream (e.g. "train", "test").
    pub fn generate(&self, per_class: usize, split: &str) -> Result<LabeledDataset> {
        if self.amplitude_min > self.amplitude_max || self.amplitude_min < 0.0 {
            return Err(invalid("amplitude range must satisfy 0 <= min <= max"));
        }
        let protos = self.prototypes();
        let mut rng = seed::child_rng(self.seed, &format!("samples/{split}"));
        let noise = Normal::new(0.0, self.pixel_noise.max(0.0)).map_err(|e| invalid(e.to_string()))?;
        let plane = self.size * self.size;
        let dim = self.channels * plane;
        let n = per_class * self.num_classes;
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let k = i % self.num_classes;
            let amp = rng.random_range(self.amplitude_min..=self.amplitude_max);
            for c in 0..self.channels {
                let base = rng.random_range(0.35..0.65);
                let bg = smooth_field(&mut rng, self.size, self.size, 2.5, 3);
                for p in 0..plane {
                    let v = base
                        + self.background_amplitude * bg[p]
                        + amp * protos[k][c * plane + p]
                        + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
            labels.push(k);
        }
        LabeledDataset::new(
            vec![self.channels, self.size, self.size],
            data,
            labels,
            self.num_classes,
        )
    }
}

/// Smooth natural-looking cover images for watermarking, shape `[C, size, size]`.
pub fn smooth_covers(n: usize, channels: usize, size: usize, seed: u64) -> Result<LabeledDataset> {
    let mut rng = seed::child_rng(seed, "covers");
    let plane = size * size;
    let mut data = Vec::with_capacity(n * channels * plane);
    for _ in 0..n {
        let shared = smooth_field(&mut rng, size, size, 2.0, 3);
        for _ in 0..channels {
            let base = rng.random_range(0.3..0.7);
            let own = smooth_field(&mut rng, size, size, 3.0, 3);
            for p in 0..plane {
                let v = base + 0.18 * shared[p] + 0.1 * own[p];
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    LabeledDataset::new(vec![channels, size, size], data, vec![0; n], 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_misaligned_data() {
        assert!(LabeledDataset::new(vec![2], vec![0.0; 3], vec![0, 1], 2).is_err());
        assert!(LabeledDataset::new(vec![2], vec![0.0; 4], vec![0, 2], 2).is_err());
    }

    #[test]
    fn prototype_task_is_deterministic_and_in_range() {
        let task = PrototypeImageTask {
            size: 8,
            ..Default::default()
        };
        let a = task.generate(3, "train").unwrap();
        let b = task.generate(3, "train").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        assert_eq!(a.class_counts(), vec![3; 10]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = task.generate(3, "test").unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn split_partitions_every_class() {
        let task = PrototypeImageTask {
            size: 4,
            ..Default::default()
        };
        let d = task.generate(10, "train").unwrap();
        let (a, b) = d.split(0.7, 1);
        assert_eq!(a.len() + b.len(), d.len());
        assert_eq!(a.class_counts(), vec![7; 10]);
    }

    #[test]
    fn tensor_round_trip() {
        let d = LabeledDataset::new(vec![1, 2, 2], (0..8).map(f64::from).collect(), vec![0, 1], 2)
            .unwrap();
        let t = d.all_features(DType::F64, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 1, 2, 2]);
        let back = LabeledDataset::from_tensor(&t, vec![0, 1], 2).unwrap();
        assert_eq!(back, d);
    }
}
