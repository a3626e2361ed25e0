//! Datasets: MNIST from IDX files, seeded synthetic blobs, and minibatching.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, RngState};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape {
                op: "Dataset::new",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::domain(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Splits off the last `fraction` of samples (in stored order) as a
    /// validation set.
    pub fn split_validation(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::domain(format!(
                "validation fraction {fraction} outside [0, 1)"
            )));
        }
        let n_val = (self.len() as f64 * fraction).round() as usize;
        let cut = self.len() - n_val;
        let train: Vec<usize> = (0..cut).collect();
        let val: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&train), self.subset(&val)))
    }
}

/// Reads a whole file, transparently gunzipping when it starts with the gzip
/// magic bytes.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl IdxReader<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::format(self.pos as u64, format!("truncated while reading {what}"))
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn expect_magic(&mut self, magic: u32, kind: &str) -> Result<()> {
        let found = self.u32("magic number")?;
        if found != magic {
            return Err(Error::format(
                0,
                format!("bad {kind} magic 0x{found:08x}, expected 0x{magic:08x}"),
            ));
        }
        Ok(())
    }

    fn body(&self, len: usize, what: &str) -> Result<&[u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated {what}: need {len} bytes after header, found {available}"),
            ));
        }
        Ok(&self.bytes[self.pos..self.pos + len])
    }
}

/// Parses an IDX image/label pair already in memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let mut img = IdxReader {
        bytes: images,
        pos: 0,
    };
    img.expect_magic(IDX_IMAGES_MAGIC, "images")?;
    let n_images = img.u32("image count")? as usize;
    let rows = img.u32("row count")? as usize;
    let cols = img.u32("column count")? as usize;
    let dim = rows * cols;
    let pixels = img.body(n_images * dim, "image data")?;

    let mut lab = IdxReader {
        bytes: labels,
        pos: 0,
    };
    lab.expect_magic(IDX_LABELS_MAGIC, "labels")?;
    let n_labels = lab.u32("label count")? as usize;
    if n_labels != n_images {
        return Err(Error::format(
            4,
            format!("label count {n_labels} does not match image count {n_images}"),
        ));
    }
    let label_bytes = lab.body(n_labels, "label data")?;

    let features = Matrix::new(
        n_images,
        dim,
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(features, labels, num_classes)
}

/// Loads an IDX image file and its label file (raw or gzipped). Pixels are
/// scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    parse_idx(&read_maybe_gz(images_path)?, &read_maybe_gz(labels_path)?)
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::usage(format!(
        "missing {stem}[.gz] in {}",
        dir.display()
    )))
}

/// Loads the canonical `(train, test)` MNIST split from a directory holding
/// `train-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`, ... (optionally `.gz`).
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &find_idx(dir, "train-images-idx3-ubyte")?,
        &find_idx(dir, "train-labels-idx1-ubyte")?,
    )?;
    let test = load_idx(
        &find_idx(dir, "t10k-images-idx3-ubyte")?,
        &find_idx(dir, "t10k-labels-idx1-ubyte")?,
    )?;
    Ok((train, test))
}

/// Gaussian class blobs: class means drawn from `N(0, 4)` per dimension,
/// unit-variance noise around them. Samples are interleaved by class.
pub fn make_synthetic(
    seed: u64,
    n_per_class: usize,
    num_classes: usize,
    input_dim: usize,
) -> Result<Dataset> {
    make_planted(seed, n_per_class, num_classes, input_dim, 0, 2.0)
}

/// Train/test pair drawn from the same blobs.
pub fn make_synthetic_split(
    seed: u64,
    n_train_per_class: usize,
    n_test_per_class: usize,
    num_classes: usize,
    input_dim: usize,
) -> Result<(Dataset, Dataset)> {
    let all = make_synthetic(
        seed,
        n_train_per_class + n_test_per_class,
        num_classes,
        input_dim,
    )?;
    Ok(split_per_class(&all, n_train_per_class * num_classes))
}

/// Class blobs over the first `informative` features followed by
/// `noise_dims` pure `N(0, 1)` features that carry no label information.
/// `separation` is the standard deviation of the class means.
pub fn make_planted(
    seed: u64,
    n_per_class: usize,
    num_classes: usize,
    informative: usize,
    noise_dims: usize,
    separation: f64,
) -> Result<Dataset> {
    if n_per_class == 0 || num_classes == 0 || informative + noise_dims == 0 {
        return Err(Error::domain(
            "sample counts and dimensions must be positive",
        ));
    }
    let dim = informative + noise_dims;
    let mut mean_rng = RngState::with_stream(seed, 0);
    let means = mean_rng
        .standard_normal_matrix(num_classes, informative)
        .scale(separation);
    let mut rng = RngState::with_stream(seed, 1);
    let n = n_per_class * num_classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        labels.push(class);
        for d in 0..informative {
            data.push(means.get(class, d) + rng.standard_normal());
        }
        for _ in 0..noise_dims {
            data.push(rng.standard_normal());
        }
    }
    Dataset::new(Matrix::new(n, dim, data)?, labels, num_classes)
}

/// Train/test pair from [`make_planted`].
pub fn make_planted_split(
    seed: u64,
    n_train_per_class: usize,
    n_test_per_class: usize,
    num_classes: usize,
    informative: usize,
    noise_dims: usize,
    separation: f64,
) -> Result<(Dataset, Dataset)> {
    let all = make_planted(
        seed,
        n_train_per_class + n_test_per_class,
        num_classes,
        informative,
        noise_dims,
        separation,
    )?;
    Ok(split_per_class(&all, n_train_per_class * num_classes))
}

fn split_per_class(all: &Dataset, n_train: usize) -> (Dataset, Dataset) {
    let train: Vec<usize> = (0..n_train).collect();
    let test: Vec<usize> = (n_train..all.len()).collect();
    (all.subset(&train), all.subset(&test))
}

/// Shuffled minibatches. Every epoch visits each sample exactly once; the
/// last batch of an epoch may be short. Epoch `e` uses its own stream of
/// `seed`, so the permutation sequence is replayable.
#[derive(Clone, Debug)]
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    cursor: usize,
    order: Vec<usize>,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::domain("batch size must be positive"));
        }
        let mut it = BatchIterator {
            dataset,
            batch_size,
            seed,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        it.reshuffle();
        Ok(it)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.dataset.len()).collect();
        RngState::with_stream(self.seed, self.epoch as u64 + 1).shuffle(&mut self.order);
        self.cursor = 0;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.batch_size)
    }

    /// Sample indices of the current epoch, in visiting order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Next `(features, labels)` batch, moving to a freshly shuffled epoch
    /// once the current one is exhausted.
    pub fn next_batch(&mut self) -> (Matrix, Vec<usize>) {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let labels = idx.iter().map(|&i| self.dataset.labels[i]).collect();
        (self.dataset.features.select_rows(idx), labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn parses_two_image_fixture() {
        let pixels = [0u8, 255, 51, 102, 204, 0, 255, 17];
        let ds = parse_idx(&idx_images(2, 2, 2, &pixels), &idx_labels(&[7, 3])).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input_dim(), 4);
        assert_eq!(ds.labels(), &[7, 3]);
        assert_eq!(ds.num_classes(), 10);
        assert_eq!(ds.features().row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.features().row(1), &[0.8, 0.0, 1.0, 17.0 / 255.0]);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let images = idx_images(1, 1, 1, &[0]);
        let mut labels = idx_labels(&[1]);
        labels[..4].copy_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        assert!(matches!(
            parse_idx(&images, &labels),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let short = idx_images(2, 2, 2, &[1, 2, 3]);
        let err = parse_idx(&short, &idx_labels(&[1, 2])).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 19, .. }), "{err}");
        let header_only = &idx_images(1, 1, 1, &[])[..10];
        assert!(matches!(
            parse_idx(header_only, &idx_labels(&[1])),
            Err(Error::Format { offset: 8, .. })
        ));
        let images = idx_images(2, 1, 1, &[1, 2]);
        assert!(matches!(
            parse_idx(&images, &idx_labels(&[1])),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn gzipped_files_load() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let write_gz = |name: &str, bytes: &[u8]| {
            let path = dir.path().join(name);
            let mut enc = GzEncoder::new(File::create(&path).unwrap(), Compression::fast());
            enc.write_all(bytes).unwrap();
            enc.finish().unwrap();
            path
        };
        let img = write_gz("i.gz", &idx_images(1, 1, 2, &[255, 0]));
        let lab = write_gz("l.gz", &idx_labels(&[4]));
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.features().row(0), &[1.0, 0.0]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic(3, 5, 3, 4).unwrap();
        let b = make_synthetic(3, 5, 3, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_synthetic(4, 5, 3, 4).unwrap());
    }

    #[test]
    fn single_class_synthetic() {
        let ds = make_synthetic(1, 7, 1, 3).unwrap();
        assert!(ds.labels().iter().all(|&l| l == 0));
        assert!(make_synthetic(1, 0, 1, 3).is_err());
    }

    #[test]
    fn planted_split_shares_class_means() {
        let (train, test) = make_planted_split(2, 50, 10, 2, 3, 5, 3.0).unwrap();
        assert_eq!(train.len(), 100);
        assert_eq!(test.len(), 20);
        assert_eq!(train.input_dim(), 8);
    }

    #[test]
    fn batch_sizes_cover_remainder() {
        let ds = make_synthetic(1, 5, 2, 2).unwrap();
        let mut it = BatchIterator::new(&ds, 4, 0).unwrap();
        let sizes: Vec<usize> = (0..3).map(|_| it.next_batch().1.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(it.batches_per_epoch(), 3);
        assert_eq!(it.epoch(), 0);
        it.next_batch();
        assert_eq!(it.epoch(), 1);
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let ds = make_synthetic(1, 6, 2, 2).unwrap();
        let mut it = BatchIterator::new(&ds, ds.len(), 9).unwrap();
        let (x, _) = it.next_batch();
        assert_eq!(x.rows(), ds.len());
        let mut order = it.order().to_vec();
        order.sort_unstable();
        assert_eq!(order, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn epochs_replay_and_differ() {
        let ds = make_synthetic(1, 20, 2, 2).unwrap();
        let orders = |seed| {
            let mut it = BatchIterator::new(&ds, ds.len(), seed).unwrap();
            let mut out = Vec::new();
            for _ in 0..2 {
                it.next_batch();
                out.push(it.order().to_vec());
            }
            out
        };
        let a = orders(5);
        assert_eq!(a, orders(5));
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn validation_split_takes_the_tail() {
        let ds = make_synthetic(1, 10, 2, 2).unwrap();
        let (train, val) = ds.split_validation(0.1).unwrap();
        assert_eq!(train.len(), 18);
        assert_eq!(val.len(), 2);
        assert_eq!(val.features().row(1), ds.features().row(19));
    }
}
