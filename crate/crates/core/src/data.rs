//! MNIST (IDX) and CIFAR-10 (binary batch) loaders plus per-image standardization.
//!
//! Raw pixels are mapped to `[0, 1]` by dividing by 255. [`Dataset::standardize`]
//! then rescales every image independently to zero mean and unit variance.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{SeededRng, Stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 32 * 32 * 3;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, H, W, C]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "Dataset",
                format!("images {:?} with {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            images,
            labels,
            split,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// First `n` samples (all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice_rows(0, n),
            labels: self.labels[..n].to_vec(),
            split: self.split,
            classes: self.classes,
        }
    }

    /// Applies [`standardize_per_image`] to every image.
    pub fn standardize(mut self) -> Self {
        let per: usize = self.sample_shape().iter().product();
        self.images
            .data_mut()
            .par_chunks_mut(per)
            .for_each(standardize_slice);
        self
    }

    /// Images and labels at the given indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.gather_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Sample order for one training epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    SeededRng::split(seed, Stream::Shuffle, epoch as u64).permutation(n)
}

/// `(x − mean) / max(std, 1/√N)` with population std.
pub fn standardize_per_image(image: &Tensor) -> Tensor {
    let mut out = image.clone();
    standardize_slice(out.data_mut());
    out
}

fn standardize_slice(x: &mut [f64]) {
    if x.iter().all(|&v| v == x[0]) {
        x.fill(0.0);
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt().max(1.0 / n.sqrt());
    for v in x {
        *v = (*v - mean) / denom;
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(kind: &'static str, path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        kind,
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 {
        return Err(format_err("idx", path, "truncated header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            "idx",
            path,
            format!("bad image magic {magic:#010x}"),
        ));
    }
    let (n, rows, cols) = (
        be_u32(bytes, 4) as usize,
        be_u32(bytes, 8) as usize,
        be_u32(bytes, 12) as usize,
    );
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(format_err(
            "idx",
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(format_err("idx", path, "zero dimension"));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(format_err("idx", path, "truncated header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            "idx",
            path,
            format!("bad label magic {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(format_err(
            "idx",
            path,
            format!("expected {} bytes, found {}", 8 + n, bytes.len()),
        ));
    }
    Ok(bytes[8..].to_vec())
}

/// Raw (unstandardized) MNIST-style dataset from a pair of IDX files.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(format_err(
            "idx",
            labels_path,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    let images = Tensor::new(
        [n, rows, cols, 1],
        pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    Dataset::new(
        images,
        labels.iter().map(|&l| l as usize).collect(),
        split,
        10,
    )
}

/// Raw CIFAR-10 dataset from binary batch files.
pub fn load_cifar10_bin(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(format_err(
                "cifar",
                path,
                format!("{} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(format_err("cifar", path, format!("label byte {label}")));
            }
            labels.push(label);
            let planes = &rec[1..];
            for p in 0..1024 {
                for c in 0..3 {
                    data.push(planes[c * 1024 + p] as f64 / 255.0);
                }
            }
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Invalid("no CIFAR-10 files given".into()));
    }
    Dataset::new(Tensor::new([n, 32, 32, 3], data)?, labels, split, 10)
}

/// Standardized MNIST train and test splits from a directory holding the canonical files.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let p = |name: &str| dir.join(name);
    let train = load_mnist_idx(&p(MNIST_FILES[0]), &p(MNIST_FILES[1]), Split::Train)?;
    let test = load_mnist_idx(&p(MNIST_FILES[2]), &p(MNIST_FILES[3]), Split::Test)?;
    Ok((train.standardize(), test.standardize()))
}

/// Standardized CIFAR-10 train and test splits. Looks in `dir` and in
/// `dir/cifar-10-batches-bin`.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let nested = dir.join("cifar-10-batches-bin");
    let base = if nested.join("test_batch.bin").exists() {
        nested
    } else {
        dir.to_path_buf()
    };
    let train: Vec<PathBuf> = (1..=5)
        .map(|i| base.join(format!("data_batch_{i}.bin")))
        .collect();
    let train = load_cifar10_bin(&train, Split::Train)?;
    let test = load_cifar10_bin(&[base.join("test_batch.bin")], Split::Test)?;
    Ok((train.standardize(), test.standardize()))
}

/// Writes an IDX image file (used to build fixtures and subsets).
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols);
    let mut buf = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    buf.extend_from_slice(&pixels[..n * rows * cols]);
    write_all(path, &buf)
}

/// Writes an IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    write_all(path, &buf)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
