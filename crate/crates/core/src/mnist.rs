//! MNIST in IDX format: parsing, normalization, loading, fetching and batching.
//!
//! IDX layout: a 4-byte big-endian magic (`0x00000803` for `u8` images with
//! three dimensions, `0x00000801` for `u8` labels with one), one 4-byte
//! big-endian size per dimension, then the raw unsigned-byte payload.

use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the dataset directory.
pub const DATA_DIR_ENV: &str = "DEEPCL_DATA_DIR";
/// Environment variable overriding the download mirror.
pub const MIRROR_ENV: &str = "DEEPCL_MNIST_MIRROR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";
pub const DEFAULT_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Decoded contents of one IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Idx {
    Images { count: usize, rows: usize, cols: usize, pixels: Vec<u8> },
    Labels(Vec<u8>),
}

pub fn parse_idx(bytes: &[u8]) -> Result<Idx> {
    let mut cur = io::Cursor::new(bytes);
    let truncated = |what: &str| Error::Length(format!("IDX input truncated in {what}"));
    let magic = cur.read_u32::<BigEndian>().map_err(|_| truncated("magic"))?;
    let ndims = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        other => return Err(Error::Format(format!("unsupported IDX magic 0x{other:08x}"))),
    };
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(cur.read_u32::<BigEndian>().map_err(|_| truncated("dimension sizes"))? as usize);
    }
    let payload = &bytes[4 + 4 * ndims..];
    let expected: usize = dims.iter().product();
    if payload.len() != expected {
        return Err(Error::Length(format!(
            "IDX payload has {} bytes, dimensions {dims:?} require {expected}",
            payload.len()
        )));
    }
    Ok(match dims.as_slice() {
        [count, rows, cols] => Idx::Images {
            count: *count,
            rows: *rows,
            cols: *cols,
            pixels: payload.to_vec(),
        },
        _ => Idx::Labels(payload.to_vec()),
    })
}

/// Scales byte pixels to `[0, 1]` as a `[count, pixels_per_image]` tensor.
pub fn normalize(pixels: &[u8], count: usize) -> Result<Tensor> {
    if count == 0 || pixels.len() % count != 0 {
        return Err(Error::shape(format!("{} pixels cannot be split into {count} images", pixels.len())));
    }
    let data = pixels.iter().map(|&p| p as Scalar / 255.0).collect();
    Tensor::new(vec![count, pixels.len() / count], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_names(&self) -> (&'static str, &'static str) {
        match self {
            Split::Train => (TRAIN_IMAGES, TRAIN_LABELS),
            Split::Test => (TEST_IMAGES, TEST_LABELS),
        }
    }

    pub fn official_count(&self) -> usize {
        match self {
            Split::Train => 60_000,
            Split::Test => 10_000,
        }
    }
}

/// Images as a `[count, 784]` tensor in `[0, 1]` plus labels in `0..=9`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.rank() != 2 || images.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::Format(format!("label {l} outside 0..=9")));
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn from_idx(image_bytes: &[u8], label_bytes: &[u8], split: Split) -> Result<Self> {
        let Idx::Images { count, pixels, .. } = parse_idx(image_bytes)? else {
            return Err(Error::Format("expected an IDX image file".into()));
        };
        let Idx::Labels(labels) = parse_idx(label_bytes)? else {
            return Err(Error::Format("expected an IDX label file".into()));
        };
        if labels.len() != count {
            return Err(Error::Length(format!("{count} images but {} labels", labels.len())));
        }
        Dataset::new(normalize(&pixels, count)?, labels, split)
    }

    /// Loads one split from `dir`, accepting plain or `.gz` files.
    pub fn load(dir: impl AsRef<Path>, split: Split) -> Result<Self> {
        let dir = dir.as_ref();
        let (img, lbl) = split.file_names();
        Dataset::from_idx(&read_maybe_gz(dir, img)?, &read_maybe_gz(dir, lbl)?, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn signal_len(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::vector(self.images.row(i).to_vec())
    }

    /// Stacks the given samples into a `[B, 784]` batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let d = self.signal_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts(vec![indices.len(), d], data), labels)
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.gather(&idx);
        Dataset { images, labels, split: self.split }
    }

    pub fn label_histogram(&self) -> [usize; 10] {
        let mut h = [0; 10];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

fn read_maybe_gz(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let plain = dir.join(name);
    let mut buf = Vec::new();
    if plain.exists() {
        File::open(&plain)?.read_to_end(&mut buf)?;
        return Ok(buf);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        GzDecoder::new(File::open(&gz)?).read_to_end(&mut buf)?;
        return Ok(buf);
    }
    Err(Error::Io(io::Error::new(
        io::ErrorKind::NotFound,
        format!("{} (or .gz) not found", plain.display()),
    )))
}

/// Dataset directory: the explicit argument, else `$DEEPCL_DATA_DIR`, else `data/mnist`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

/// True when both splits can be loaded from `dir`.
pub fn is_available(dir: &Path) -> bool {
    [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS]
        .iter()
        .all(|n| dir.join(n).exists() || dir.join(format!("{n}.gz")).exists())
}

/// Downloads the four gzip-compressed IDX files into `dir`.
///
/// `mirror` is a base URL (`http://`, `https://` or `file://`); files that
/// already exist are left alone. Returns the paths written.
pub fn fetch(dir: &Path, mirror: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for name in [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS] {
        if dir.join(name).exists() || dir.join(format!("{name}.gz")).exists() {
            continue;
        }
        let file = format!("{name}.gz");
        let url = format!("{}/{file}", mirror.trim_end_matches('/'));
        let dest = dir.join(&file);
        let tmp = dir.join(format!("{file}.part"));
        download(&url, &tmp)?;
        // validate before publishing the file under its final name
        let mut bytes = Vec::new();
        GzDecoder::new(File::open(&tmp)?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Fetch(format!("{url}: not a gzip stream: {e}")))?;
        parse_idx(&bytes)?;
        std::fs::rename(&tmp, &dest)?;
        written.push(dest);
    }
    Ok(written)
}

fn download(url: &str, dest: &Path) -> Result<()> {
    if let Some(path) = url.strip_prefix("file://") {
        std::fs::copy(path, dest).map_err(|e| Error::Fetch(format!("{url}: {e}")))?;
        return Ok(());
    }
    let resp = ureq::get(url).call().map_err(|e| Error::Fetch(format!("{url}: {e}")))?;
    let mut reader = resp.into_body().into_reader();
    let mut out = File::create(dest)?;
    io::copy(&mut reader, &mut out).map_err(|e| Error::Fetch(format!("{url}: {e}")))?;
    Ok(())
}

/// Seeded permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// One epoch of shuffled mini-batches; the final batch may be partial.
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_order(dataset, batch_size, permutation(dataset.len(), &mut rng))
    }

    pub fn with_order(dataset: &'a Dataset, batch_size: usize, order: Vec<usize>) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(BatchIterator { dataset, batch_size, order, pos: 0 })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Indices of the next batch without gathering the data.
    pub fn next_indices(&mut self) -> Option<&[usize]> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(idx)
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = (Tensor, Vec<u8>);

    fn next(&mut self) -> Option<Self::Item> {
        let ds = self.dataset;
        self.next_indices().map(|idx| ds.gather(idx))
    }
}

pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<BatchIterator<'_>> {
    BatchIterator::new(dataset, batch_size, seed)
}

/// Encodes images and labels as IDX byte streams (used for fixtures and tests).
pub fn encode_idx_images(pixels: &[u8], count: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [count, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
