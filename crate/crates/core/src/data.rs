//! CIFAR binary ingestion, raw-tensor import, standardization,
//! augmentation and seeded batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
const PIXELS: usize = CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR10_RECORD: usize = 1 + PIXELS;
pub const CIFAR100_RECORD: usize = 2 + PIXELS;
pub const TRAIN_SIZE: usize = 50_000;
pub const TEST_SIZE: usize = 10_000;
pub const RAW_MAGIC: &[u8; 5] = b"RAWT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Train-time augmentation: zero-pad, random crop back to the original
/// size and optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub pad: usize,
    pub flip: bool,
}

impl Augmentation {
    pub const CIFAR: Augmentation = Augmentation { pad: 4, flip: true };
}

/// Per-channel statistics used for standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population mean and standard deviation of every channel.
    pub fn of(images: &Tensor4<f32>) -> Self {
        let d = images.dims();
        let count = (d.n * d.plane()) as f64;
        let mut mean = vec![0.0; d.c];
        let mut sq = vec![0.0; d.c];
        for n in 0..d.n {
            for c in 0..d.c {
                for &v in images.plane(n, c) {
                    mean[c] += v as f64;
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for n in 0..d.n {
            for c in 0..d.c {
                for &v in images.plane(n, c) {
                    let e = v as f64 - mean[c];
                    sq[c] += e * e;
                }
            }
        }
        let std = sq.iter().map(|s| (s / count).sqrt()).collect();
        ChannelStats { mean, std }
    }

    pub fn apply(&self, images: &mut Tensor4<f32>) {
        let d = images.dims();
        for n in 0..d.n {
            for c in 0..d.c {
                let (m, s) = (self.mean[c], self.std[c].max(f64::MIN_POSITIVE));
                for v in images.plane_mut(n, c) {
                    *v = ((*v as f64 - m) / s) as f32;
                }
            }
        }
    }
}

/// Images with integer labels. Images are standardized on load.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub class_count: usize,
    /// Applied to every sample drawn by [`ImageDataset::batches`].
    pub augmentation: Option<Augmentation>,
}

impl ImageDataset {
    pub fn new(
        images: Tensor4<f32>,
        labels: Vec<usize>,
        split: Split,
        class_count: usize,
    ) -> Result<Self> {
        if labels.len() != images.dims().n {
            return Err(Error::Data(format!(
                "{} labels for {} images",
                labels.len(),
                images.dims().n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!(
                "label {bad} outside 0..{class_count}"
            )));
        }
        Ok(ImageDataset {
            images,
            labels,
            split,
            class_count,
            augmentation: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_dims(&self) -> Dims {
        Dims {
            n: 1,
            ..self.images.dims()
        }
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        ImageDataset {
            images: self.images.gather_samples(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            class_count: self.class_count,
            augmentation: self.augmentation,
        }
    }

    /// Iterates one epoch. The order is a permutation seeded by
    /// `(seed, epoch)` when `shuffle` is set and the identity otherwise.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Batches<'_> {
        assert!(batch_size >= 1, "batch size must be positive");
        let order = if shuffle {
            epoch_permutation(self.len(), seed, epoch)
        } else {
            (0..self.len()).collect()
        };
        Batches {
            dataset: self,
            order,
            pos: 0,
            batch_size,
            augment: true,
            rng: stream_rng(seed, 2 * epoch + 1),
        }
    }

    /// All samples in order, never augmented.
    pub fn eval_batches(&self, batch_size: usize) -> Batches<'_> {
        Batches {
            augment: false,
            ..self.batches(batch_size, 0, 0, false)
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The sample order of epoch `epoch` for `seed`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 2 * epoch));
    order
}

/// One mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
    /// Dataset indices of the samples.
    pub indices: Vec<usize>,
}

pub struct Batches<'a> {
    dataset: &'a ImageDataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: bool,
    rng: ChaCha8Rng,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let mut images = self.dataset.images.gather_samples(&indices);
        if let Some(aug) = self.dataset.augmentation.filter(|_| self.augment) {
            let d = images.dims();
            for n in 0..d.n {
                let out = augment(images.sample(n), d.c, d.h, d.w, aug, &mut self.rng);
                images.sample_mut(n).copy_from_slice(&out);
            }
        }
        let labels = indices.iter().map(|&i| self.dataset.labels[i]).collect();
        Some(Batch {
            images,
            labels,
            indices,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

/// Draws a crop offset in `0..=2·pad` per axis and a flip, then applies
/// them to a `c×h×w` image.
pub fn augment<R: Rng + ?Sized>(
    image: &[f32],
    c: usize,
    h: usize,
    w: usize,
    aug: Augmentation,
    rng: &mut R,
) -> Vec<f32> {
    let dy = rng.gen_range(0..=2 * aug.pad);
    let dx = rng.gen_range(0..=2 * aug.pad);
    let flip = aug.flip && rng.gen_bool(0.5);
    crop_and_flip(image, c, h, w, aug.pad, (dy, dx), flip)
}

/// Crops the `h×w` window at `offset` out of the image zero-padded by
/// `pad` on every side, then mirrors columns if `flip`.
pub fn crop_and_flip(
    image: &[f32],
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
    (dy, dx): (usize, usize),
    flip: bool,
) -> Vec<f32> {
    assert_eq!(image.len(), c * h * w);
    let mut out = vec![0.0f32; image.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy).wrapping_sub(pad);
            if sy >= h {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx).wrapping_sub(pad);
                if sx >= w {
                    continue;
                }
                let ox = if flip { w - 1 - x } else { x };
                out[ch * h * w + y * w + ox] = image[ch * h * w + sy * w + sx];
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Cifar {
    Ten,
    Hundred,
}

impl Cifar {
    fn record(self) -> usize {
        match self {
            Cifar::Ten => CIFAR10_RECORD,
            Cifar::Hundred => CIFAR100_RECORD,
        }
    }

    fn classes(self) -> usize {
        match self {
            Cifar::Ten => 10,
            Cifar::Hundred => 100,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses whole records; pixel `(c, y, x)` of a record sits at byte
/// `label_bytes + c·1024 + y·32 + x`.
fn parse_records(
    path: &Path,
    bytes: &[u8],
    kind: Cifar,
    expected_records: usize,
    pixels: &mut Vec<f32>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    let record = kind.record();
    let expected = (expected_records * record) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let label_at = record - PIXELS - 1;
    for r in bytes.chunks_exact(record) {
        let label = r[label_at] as usize;
        if label >= kind.classes() {
            return Err(Error::Data(format!(
                "{}: label {label} outside 0..{}",
                path.display(),
                kind.classes()
            )));
        }
        labels.push(label);
        pixels.extend(r[record - PIXELS..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

fn load_split(
    dir: &Path,
    kind: Cifar,
    files: &[(&str, usize)],
    split: Split,
) -> Result<ImageDataset> {
    let total: usize = files.iter().map(|(_, n)| n).sum();
    let mut pixels = Vec::with_capacity(total * PIXELS);
    let mut labels = Vec::with_capacity(total);
    for &(name, records) in files {
        let path = dir.join(name);
        let bytes = read_file(&path)?;
        parse_records(&path, &bytes, kind, records, &mut pixels, &mut labels)?;
    }
    let images = Tensor4::from_vec(
        Dims::new(total, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE),
        pixels,
    )?;
    ImageDataset::new(images, labels, split, kind.classes())
}

fn finish(mut train: ImageDataset, mut test: ImageDataset, aug: Option<Augmentation>) -> (ImageDataset, ImageDataset) {
    let stats = ChannelStats::of(&train.images);
    stats.apply(&mut train.images);
    stats.apply(&mut test.images);
    train.augmentation = aug;
    (train, test)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(ImageDataset, ImageDataset)> {
    let dir = dir.as_ref();
    let names: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let train_files: Vec<(&str, usize)> = names.iter().map(|n| (n.as_str(), TRAIN_SIZE / 5)).collect();
    let train = load_split(dir, Cifar::Ten, &train_files, Split::Train)?;
    let test = load_split(dir, Cifar::Ten, &[("test_batch.bin", TEST_SIZE)], Split::Test)?;
    Ok(finish(train, test, Some(Augmentation::CIFAR)))
}

/// Loads `train.bin` and `test.bin`, keeping the fine labels.
pub fn load_cifar100(dir: impl AsRef<Path>) -> Result<(ImageDataset, ImageDataset)> {
    let dir = dir.as_ref();
    let train = load_split(dir, Cifar::Hundred, &[("train.bin", TRAIN_SIZE)], Split::Train)?;
    let test = load_split(dir, Cifar::Hundred, &[("test.bin", TEST_SIZE)], Split::Test)?;
    Ok(finish(train, test, Some(Augmentation::CIFAR)))
}

/// Serializes images and labels in the raw-tensor format:
/// `"RAWT1"`, u32 LE `N C H W`, `N·C·H·W` f32 LE values, `N` u8 labels.
pub fn encode_raw(images: &Tensor4<f32>, labels: &[u8]) -> Result<Vec<u8>> {
    let d = images.dims();
    if labels.len() != d.n {
        return Err(Error::Data(format!("{} labels for {} images", labels.len(), d.n)));
    }
    let mut out = Vec::with_capacity(5 + 16 + 4 * d.len() + d.n);
    out.extend_from_slice(RAW_MAGIC);
    for v in d.as_array() {
        let v = u32::try_from(v).map_err(|_| Error::Data(format!("dimension {v} too large")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(labels);
    Ok(out)
}

pub fn decode_raw(path: &Path, bytes: &[u8]) -> Result<(Tensor4<f32>, Vec<usize>)> {
    if bytes.len() < 21 || &bytes[..5] != RAW_MAGIC {
        return Err(Error::Data(format!("{}: not a RAWT1 file", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let dims = Dims::new(dim(0), dim(1), dim(2), dim(3));
    let expected = 21 + 4 * dims.len() as u64 + dims.n as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let payload = &bytes[21..21 + 4 * dims.len()];
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels = bytes[21 + 4 * dims.len()..].iter().map(|&b| b as usize).collect();
    Ok((Tensor4::from_vec(dims, values)?, labels))
}

/// Loads `train.rawt` and `test.rawt` from `dir` and standardizes both
/// with the train statistics. Augmentation crops without flipping.
pub fn load_raw(dir: impl AsRef<Path>, class_count: usize) -> Result<(ImageDataset, ImageDataset)> {
    let dir = dir.as_ref();
    let read = |name: &str, split: Split| -> Result<ImageDataset> {
        let path: PathBuf = dir.join(name);
        let (images, labels) = decode_raw(&path, &read_file(&path)?)?;
        ImageDataset::new(images, labels, split, class_count)
    };
    let train = read("train.rawt", Split::Train)?;
    let test = read("test.rawt", Split::Test)?;
    if train.sample_dims() != test.sample_dims() {
        return Err(Error::Data(format!(
            "train samples are {}, test samples are {}",
            train.sample_dims(),
            test.sample_dims()
        )));
    }
    Ok(finish(train, test, Some(Augmentation { pad: 4, flip: false })))
}

/// Gaussian-blob toy data: each class has a fixed random mean image and
/// samples add uniform noise of amplitude `noise`.
pub fn synthetic(
    n: usize,
    class_count: usize,
    dims: (usize, usize, usize),
    noise: f64,
    seed: u64,
) -> Result<ImageDataset> {
    let (c, h, w) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f32>> = (0..class_count)
        .map(|_| (0..c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % class_count).collect();
    let mut data = Vec::with_capacity(n * c * h * w);
    for &l in &labels {
        data.extend(
            centers[l]
                .iter()
                .map(|&m| m + rng.gen_range(-noise..=noise) as f32),
        );
    }
    ImageDataset::new(Tensor4::from_vec(Dims::new(n, c, h, w), data)?, labels, Split::Train, class_count)
}
