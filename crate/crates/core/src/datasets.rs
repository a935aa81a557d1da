//! CIFAR binary and MNIST IDX loaders, splits, per-channel normalization and
//! a small synthetic image generator for tests and smoke runs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CsnnError, Result};
use crate::rng::{Component, SeedSplitter};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, h, w, c]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
    /// Statistics applied by [`normalize_inplace`], if any.
    pub stats: Option<ChannelStats>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        let [n, ..] = images.shape()[..] else {
            return Err(CsnnError::dim("dataset images must be [n, h, w, c]"));
        };
        if images.shape().len() != 4 {
            return Err(CsnnError::dim("dataset images must be [n, h, w, c]"));
        }
        if labels.len() != n {
            return Err(CsnnError::Data(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_count) {
            return Err(CsnnError::Data(format!("label {y} outside {class_count} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
            split,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.stats.is_some()
    }

    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        let (h, w, c) = self.sample_shape();
        let len = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(CsnnError::Data(format!("index {i} outside {} samples", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            images: Tensor::new(vec![indices.len(), h, w, c], data)?,
            labels,
            class_count: self.class_count,
            split,
            stats: self.stats.clone(),
        })
    }

    /// The first `n` samples (all if fewer).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split)
    }

    /// SHA-256 over the shape, the little-endian pixel values and the labels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.images.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u32).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Decodes CIFAR binary records: label byte(s), then 1024 red, 1024 green and
/// 1024 blue bytes in row-major order. CIFAR-100 records carry the coarse and
/// then the fine label; the fine label is used.
pub fn decode_cifar(bytes: &[u8], variant: CifarVariant, origin: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let rec = variant.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(CsnnError::format(
            origin,
            format!("{} bytes is not a whole number of {rec}-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / rec;
    let mut images = vec![0.0f32; n * CIFAR_PIXELS];
    let mut labels = Vec::with_capacity(n);
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for (r, record) in bytes.chunks_exact(rec).enumerate() {
        let label = record[variant.label_bytes() - 1] as usize;
        if label >= variant.classes() {
            return Err(CsnnError::format(origin, format!("record {r}: label {label} out of range")));
        }
        labels.push(label);
        let px = &record[variant.label_bytes()..];
        let out = &mut images[r * CIFAR_PIXELS..(r + 1) * CIFAR_PIXELS];
        for p in 0..plane {
            for c in 0..3 {
                out[p * 3 + c] = px[c * plane + p] as f32 / 255.0;
            }
        }
    }
    Ok((images, labels))
}

/// Loads and concatenates CIFAR binary files.
pub fn load_cifar_binary(paths: &[PathBuf], variant: CifarVariant, split: Split) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path).map_err(|e| CsnnError::io(path, e))?;
        let (im, lb) = decode_cifar(&bytes, variant, path)?;
        images.extend(im);
        labels.extend(lb);
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, CIFAR_SIDE, CIFAR_SIDE, 3], images)?,
        labels,
        variant.classes(),
        split,
    )
}

/// Train and test splits of an extracted `cifar-10-batches-bin` directory.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let test = vec![dir.join("test_batch.bin")];
    Ok((
        load_cifar_binary(&train, CifarVariant::Cifar10, Split::Train)?,
        load_cifar_binary(&test, CifarVariant::Cifar10, Split::Test)?,
    ))
}

/// Encodes images in `[0, 1]` back to CIFAR records (values are rounded to
/// the nearest byte). CIFAR-100 records get coarse label 0.
pub fn encode_cifar(ds: &Dataset, variant: CifarVariant) -> Result<Vec<u8>> {
    if ds.sample_shape() != (CIFAR_SIDE, CIFAR_SIDE, 3) {
        return Err(CsnnError::dim("CIFAR records hold 32×32×3 images"));
    }
    if ds.is_normalized() {
        return Err(CsnnError::Data("cannot write normalized images as CIFAR bytes".into()));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(ds.len() * variant.record_len());
    for (i, &y) in ds.labels.iter().enumerate() {
        if y >= variant.classes() {
            return Err(CsnnError::Data(format!("label {y} does not fit {variant:?}")));
        }
        if variant == CifarVariant::Cifar100 {
            out.push(0);
        }
        out.push(y as u8);
        let img = &ds.images.data()[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS];
        for c in 0..3 {
            for p in 0..plane {
                out.push((img[p * 3 + c].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_cifar_binary(ds: &Dataset, variant: CifarVariant, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &encode_cifar(ds, variant)?)
}

fn be_u32(bytes: &[u8], at: usize, origin: &Path) -> Result<usize> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()) as usize)
        .ok_or_else(|| CsnnError::format(origin, "truncated IDX header"))
}

pub const IDX_IMAGES_MAGIC: usize = 0x0000_0803;
pub const IDX_LABELS_MAGIC: usize = 0x0000_0801;

/// Parses an IDX image file and its label file into `[n, rows, cols, 1]`
/// images in `[0, 1]`.
pub fn decode_mnist_idx(images: &[u8], labels: &[u8], image_path: &Path, label_path: &Path) -> Result<(Tensor, Vec<usize>)> {
    if be_u32(images, 0, image_path)? != IDX_IMAGES_MAGIC {
        return Err(CsnnError::format(image_path, "bad IDX image magic"));
    }
    if be_u32(labels, 0, label_path)? != IDX_LABELS_MAGIC {
        return Err(CsnnError::format(label_path, "bad IDX label magic"));
    }
    let n = be_u32(images, 4, image_path)?;
    let rows = be_u32(images, 8, image_path)?;
    let cols = be_u32(images, 12, image_path)?;
    let nl = be_u32(labels, 4, label_path)?;
    if nl != n {
        return Err(CsnnError::Data(format!("{n} images but {nl} labels")));
    }
    let px = &images[16..];
    if px.len() != n * rows * cols {
        return Err(CsnnError::format(
            image_path,
            format!("expected {} pixel bytes, found {}", n * rows * cols, px.len()),
        ));
    }
    let lb = &labels[8..];
    if lb.len() != n {
        return Err(CsnnError::format(label_path, format!("expected {n} label bytes, found {}", lb.len())));
    }
    let data = px.iter().map(|&b| b as f32 / 255.0).collect();
    Ok((
        Tensor::new(vec![n, rows, cols, 1], data)?,
        lb.iter().map(|&b| b as usize).collect(),
    ))
}

pub fn load_mnist_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let ib = fs::read(images).map_err(|e| CsnnError::io(images, e))?;
    let lb = fs::read(labels).map_err(|e| CsnnError::io(labels, e))?;
    let (t, l) = decode_mnist_idx(&ib, &lb, images, labels)?;
    Dataset::new(t, l, 10, split)
}

/// Seeded partition into `eval_count` samples and the rest, each part kept in
/// its original order. Returns `(eval, rest)`; `rest` keeps `rest_split`.
pub fn split_eval(ds: &Dataset, eval_count: usize, rest_split: Split, seed: u64) -> Result<(Dataset, Dataset)> {
    if eval_count >= ds.len() {
        return Err(CsnnError::Data(format!(
            "eval count {eval_count} must be smaller than the {} available samples",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut SeedSplitter::new(seed).rng(Component::DataSplit, eval_count as u64));
    let (mut eval, mut rest) = (idx[..eval_count].to_vec(), idx[eval_count..].to_vec());
    eval.sort_unstable();
    rest.sort_unstable();
    Ok((ds.subset(&eval, Split::Eval)?, ds.subset(&rest, rest_split)?))
}

/// Per-channel mean and standard deviation (population), `σ` floored.
pub fn channel_stats(images: &Tensor) -> Result<ChannelStats> {
    let c = *images.shape().last().ok_or_else(|| CsnnError::dim("empty shape"))?;
    if images.is_empty() {
        return Err(CsnnError::Data("cannot compute statistics of an empty split".into()));
    }
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for px in images.data().chunks_exact(c) {
        for ch in 0..c {
            sum[ch] += px[ch] as f64;
        }
    }
    let count = (images.len() / c) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    for px in images.data().chunks_exact(c) {
        for ch in 0..c {
            let d = px[ch] as f64 - mean[ch];
            sq[ch] += d * d;
        }
    }
    let std = sq.iter().map(|s| (s / count).sqrt().max(STD_FLOOR)).collect();
    Ok(ChannelStats { mean, std })
}

/// Standardizes every channel with `stats`, or with the split's own
/// statistics when it is the train split. Refuses to normalize twice.
pub fn normalize_inplace(ds: &mut Dataset, stats: Option<&ChannelStats>) -> Result<ChannelStats> {
    if ds.is_normalized() {
        return Err(CsnnError::Data("dataset is already normalized".into()));
    }
    let stats = match stats {
        Some(s) => s.clone(),
        None if ds.split == Split::Train => channel_stats(&ds.images)?,
        None => {
            return Err(CsnnError::Data(
                "eval and test splits must be normalized with train statistics".into(),
            ))
        }
    };
    let c = ds.sample_shape().2;
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(CsnnError::dim(format!("statistics for {} channels, images have {c}", stats.mean.len())));
    }
    for px in ds.images.data_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            px[ch] = ((px[ch] as f64 - stats.mean[ch]) / stats.std[ch].max(STD_FLOOR)) as f32;
        }
    }
    ds.stats = Some(stats.clone());
    Ok(stats)
}

/// Class-conditioned synthetic images in `[0, 1]`: each class has its own
/// tint and grating orientation/frequency; phase, contrast and pixel noise
/// vary per sample.
pub fn synthetic(n: usize, side: usize, channels: usize, classes: usize, seed: u64, split: Split) -> Result<Dataset> {
    if classes == 0 {
        return Err(CsnnError::Config("synthetic data needs at least one class".into()));
    }
    let seeds = SeedSplitter::new(seed);
    let mut proto = seeds.rng(Component::Synthetic, 0);
    let class_params: Vec<(Vec<f32>, f32, f32)> = (0..classes)
        .map(|k| {
            let tint = (0..channels).map(|_| proto.random_range(0.25..0.75)).collect();
            let angle = std::f32::consts::PI * k as f32 / classes as f32;
            let freq = proto.random_range(0.3..1.2);
            (tint, angle, freq)
        })
        .collect();
    let split_tag = match split {
        Split::Train => 1,
        Split::Eval => 2,
        Split::Test => 3,
    };
    let mut rng = seeds.rng(Component::Synthetic, split_tag);
    let mut data = Vec::with_capacity(n * side * side * channels);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let (tint, angle, freq) = &class_params[k];
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        let contrast = rng.random_range(0.15..0.3);
        let (s, c) = angle.sin_cos();
        for y in 0..side {
            for x in 0..side {
                let g = ((x as f32 * c + y as f32 * s) * freq + phase).sin();
                for ch in 0..channels {
                    let v = tint[ch] + contrast * g * if ch % 2 == 0 { 1.0 } else { -1.0 } + rng.random_range(-0.05..0.05);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(k);
    }
    Dataset::new(Tensor::new(vec![n, side, side, channels], data)?, labels, classes, split)
}
