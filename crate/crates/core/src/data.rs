//! Loaders for the IDX (MNIST, Fashion-MNIST) and CIFAR-10 binary formats,
//! per-channel normalization and seeded augmentation.
//!
//! Files ending in `.gz` are decompressed transparently. Pixels are scaled
//! to `[0, 1]`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::conv::Shape;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: truncated, {expected} bytes needed, {found} present")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: label {label} at item {index} is not below {NUM_CLASSES}")]
    BadLabel { path: PathBuf, index: usize, label: u8 },
    #[error("{path}: {len} bytes is not a whole number of {CIFAR_RECORD}-byte records")]
    RecordSize { path: PathBuf, len: usize },
    #[error("dataset {0} not found")]
    NotFound(String),
    #[error("normalized features cannot be written back as bytes")]
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel statistics used as `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub shape: Shape,
    /// Items packed one after another.
    pub features: Vec<f32>,
    pub labels: Vec<u8>,
    pub split: Split,
    pub normalization: Option<Normalization>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let n = self.shape.len();
        &self.features[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f32], usize)> + '_ {
        (0..self.len()).map(move |i| (self.item(i), self.label(i)))
    }

    /// The first `n` items.
    pub fn take(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            shape: self.shape,
            features: self.features[..n * self.shape.len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            split: self.split,
            normalization: self.normalization.clone(),
        }
    }

    /// Per-channel mean and (population) standard deviation.
    pub fn statistics(&self) -> Normalization {
        let plane = self.shape.plane();
        let mut mean = Vec::with_capacity(self.shape.c);
        let mut std = Vec::with_capacity(self.shape.c);
        for c in 0..self.shape.c {
            let values = || (0..self.len()).flat_map(move |i| self.item(i)[c * plane..(c + 1) * plane].iter().map(|&v| v as f64));
            let count = (self.len() * plane) as f64;
            let m = values().sum::<f64>() / count;
            let v = values().map(|x| (x - m) * (x - m)).sum::<f64>() / count;
            mean.push(m as f32);
            std.push(v.sqrt().max(1e-12) as f32);
        }
        Normalization { mean, std }
    }

    /// Applies `(x - mean) / std` per channel and records the statistics.
    pub fn normalize(&mut self, stats: &Normalization) {
        let plane = self.shape.plane();
        for item in self.features.chunks_exact_mut(self.shape.len()) {
            for c in 0..self.shape.c {
                for v in &mut item[c * plane..(c + 1) * plane] {
                    *v = (*v - stats.mean[c]) / stats.std[c];
                }
            }
        }
        self.normalization = Some(stats.clone());
    }

    fn pixel_bytes(&self) -> Result<Vec<u8>, DataError> {
        if self.normalization.is_some() {
            return Err(DataError::Normalized);
        }
        Ok(self.features.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Reads a file, decompressing it when the name ends in `.gz`.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = fs::read(path).map_err(io_err(path))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io_err(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated { path: path.to_path_buf(), expected: offset + 4, found: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::BadMagic { path: path.to_path_buf(), found, expected });
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: usize, path: &Path) -> Result<(), DataError> {
    if bytes.len() < expected {
        return Err(DataError::Truncated { path: path.to_path_buf(), expected, found: bytes.len() });
    }
    Ok(())
}

fn check_labels(labels: &[u8], path: &Path) -> Result<(), DataError> {
    match labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
        Some(index) => Err(DataError::BadLabel { path: path.to_path_buf(), index, label: labels[index] }),
        None => Ok(()),
    }
}

/// Loads an IDX image file and its label file.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<LabeledDataset, DataError> {
    let img = read_maybe_gz(images)?;
    check_magic(&img, IDX_IMAGES_MAGIC, images)?;
    let n = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    check_len(&img, 16 + n * rows * cols, images)?;

    let lab = read_maybe_gz(labels)?;
    check_magic(&lab, IDX_LABELS_MAGIC, labels)?;
    let m = be_u32(&lab, 4, labels)? as usize;
    check_len(&lab, 8 + m, labels)?;
    if m != n {
        return Err(DataError::CountMismatch { images: n, labels: m });
    }
    let label_bytes = lab[8..8 + m].to_vec();
    check_labels(&label_bytes, labels)?;
    Ok(LabeledDataset {
        shape: Shape::new(1, rows, cols),
        features: img[16..16 + n * rows * cols].iter().map(|&b| b as f32 / 255.0).collect(),
        labels: label_bytes,
        split,
        normalization: None,
    })
}

/// Writes a single-channel dataset as an IDX pair (uncompressed).
pub fn write_idx(ds: &LabeledDataset, images: &Path, labels: &Path) -> Result<(), DataError> {
    let mut img = Vec::with_capacity(16 + ds.features.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [ds.len(), ds.shape.h, ds.shape.w] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    img.extend(ds.pixel_bytes()?);
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend_from_slice(&ds.labels);
    write_file(images, &img)?;
    write_file(labels, &lab)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10(files: &[PathBuf], split: Split) -> Result<LabeledDataset, DataError> {
    let shape = Shape::new(3, 32, 32);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for path in files {
        let bytes = read_maybe_gz(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::RecordSize { path: path.clone(), len: bytes.len() });
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if record[0] as usize >= NUM_CLASSES {
                return Err(DataError::BadLabel { path: path.clone(), index: r, label: record[0] });
            }
            labels.push(record[0]);
            features.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    Ok(LabeledDataset { shape, features, labels, split, normalization: None })
}

pub fn write_cifar10(ds: &LabeledDataset, path: &Path) -> Result<(), DataError> {
    let pixels = ds.pixel_bytes()?;
    let n = ds.shape.len();
    let mut bytes = Vec::with_capacity(ds.len() * (n + 1));
    for i in 0..ds.len() {
        bytes.push(ds.labels[i]);
        bytes.extend_from_slice(&pixels[i * n..(i + 1) * n]);
    }
    write_file(path, &bytes)
}

/// Known datasets and their file layout below a data root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "mnist" => Some(Self::Mnist),
            "fashion-mnist" | "fashion_mnist" => Some(Self::FashionMnist),
            "cifar10" | "cifar-10" => Some(Self::Cifar10),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mnist => "mnist",
            Self::FashionMnist => "fashion-mnist",
            Self::Cifar10 => "cifar10",
        }
    }

    /// Directories searched below the root, in order.
    fn directories(self) -> &'static [&'static str] {
        match self {
            Self::Mnist => &["mnist", "MNIST/raw", "MNIST", ""],
            Self::FashionMnist => &["fashion-mnist", "FashionMNIST/raw", "FashionMNIST", "fashion"],
            Self::Cifar10 => &["cifar-10-batches-bin", "cifar10", "cifar-10", ""],
        }
    }
}

fn find_file(dir: &Path, name: &str) -> Option<PathBuf> {
    [name.to_string(), format!("{name}.gz")].into_iter().map(|n| dir.join(n)).find(|p| p.is_file())
}

/// Loads a split of a known dataset from `root`.
pub fn load_dataset(kind: DatasetKind, root: &Path, split: Split) -> Result<LabeledDataset, DataError> {
    for dir in kind.directories() {
        let dir = root.join(dir);
        match kind {
            DatasetKind::Mnist | DatasetKind::FashionMnist => {
                let prefix = if split == Split::Train { "train" } else { "t10k" };
                let images = find_file(&dir, &format!("{prefix}-images-idx3-ubyte"));
                let labels = find_file(&dir, &format!("{prefix}-labels-idx1-ubyte"));
                if let (Some(i), Some(l)) = (images, labels) {
                    return load_idx(&i, &l, split);
                }
            }
            DatasetKind::Cifar10 => {
                let names: Vec<String> = match split {
                    Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
                    Split::Test => vec!["test_batch.bin".to_string()],
                };
                let files: Option<Vec<PathBuf>> = names.iter().map(|n| find_file(&dir, n)).collect();
                if let Some(files) = files {
                    return load_cifar10(&files, split);
                }
            }
        }
    }
    Err(DataError::NotFound(format!("{} ({:?} split) below {}", kind.name(), split, root.display())))
}

/// Mirrors every row of a `(c, h, w)` item.
pub fn flip_horizontal(item: &mut [f32], shape: Shape) {
    for row in item.chunks_exact_mut(shape.w) {
        row.reverse();
    }
}

/// Zero-pads by `pad` on every side and crops a window of the original size
/// at offset `(dy, dx)` in the padded image.
pub fn pad_crop(item: &[f32], shape: Shape, pad: usize, dy: usize, dx: usize) -> Vec<f32> {
    let mut out = vec![0.0; item.len()];
    for c in 0..shape.c {
        for y in 0..shape.h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= shape.h as isize {
                continue;
            }
            for x in 0..shape.w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < shape.w as isize {
                    out[c * shape.plane() + y * shape.w + x] = item[c * shape.plane() + sy as usize * shape.w + sx as usize];
                }
            }
        }
    }
    out
}

/// Random flips and padded crops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    pub crop_pad: usize,
}

impl Augment {
    pub const NONE: Augment = Augment { flip: false, crop_pad: 0 };

    pub fn is_none(&self) -> bool {
        !self.flip && self.crop_pad == 0
    }

    /// Augments one item; the draw depends only on `(seed, epoch, index)`.
    pub fn apply(&self, item: &[f32], shape: Shape, seed: u64, epoch: usize, index: usize) -> Vec<f32> {
        if self.is_none() {
            return item.to_vec();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((epoch as u64) << 32) ^ index as u64);
        let flip = self.flip && rng.gen::<bool>();
        let (dy, dx) = if self.crop_pad > 0 {
            (rng.gen_range(0..=2 * self.crop_pad), rng.gen_range(0..=2 * self.crop_pad))
        } else {
            (0, 0)
        };
        let mut out = if self.crop_pad > 0 { pad_crop(item, shape, self.crop_pad, dy, dx) } else { item.to_vec() };
        if flip {
            flip_horizontal(&mut out, shape);
        }
        out
    }
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Packed examples of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub item_len: usize,
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn inputs(&self) -> Vec<&[f32]> {
        self.features.chunks_exact(self.item_len).collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Shuffled, augmented mini-batches of one training epoch.
pub fn epoch_batches<'a>(
    ds: &'a LabeledDataset,
    batch_size: usize,
    augment: Augment,
    seed: u64,
    epoch: usize,
) -> impl Iterator<Item = Batch> + 'a {
    let order = epoch_order(ds.len(), seed, epoch);
    let item_len = ds.shape.len();
    let batch_size = batch_size.max(1);
    (0..order.len().div_ceil(batch_size)).map(move |b| {
        let idx = &order[b * batch_size..((b + 1) * batch_size).min(order.len())];
        let mut features = Vec::with_capacity(idx.len() * item_len);
        for &i in idx {
            features.extend(augment.apply(ds.item(i), ds.shape, seed, epoch, i));
        }
        Batch { item_len, features, labels: idx.iter().map(|&i| ds.label(i)).collect() }
    })
}

/// A learnable stand-in dataset: each class is a fixed random byte
/// prototype, items are prototypes with per-pixel noise, quantized to bytes.
pub fn synthetic_dataset(n: usize, shape: Shape, seed: u64, split: Split) -> LabeledDataset {
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<f32>> =
        (0..NUM_CLASSES).map(|_| (0..shape.len()).map(|_| if proto_rng.gen::<f32>() < 0.3 { 1.0 } else { 0.0 }).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(if split == Split::Train { 1 } else { 2 });
    let mut features = Vec::with_capacity(n * shape.len());
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..NUM_CLASSES);
        labels.push(label as u8);
        for &p in &prototypes[label] {
            let v: f32 = (0.6 * p + 0.4 * rng.gen::<f32>()).clamp(0.0, 1.0);
            features.push((v * 255.0).round() / 255.0);
        }
    }
    LabeledDataset { shape, features, labels, split, normalization: None }
}
