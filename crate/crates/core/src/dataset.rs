//! Labelled image splits: CIFAR-10 binary ingestion, a deterministic blob
//! generator for desk-scale studies, and an on-disk dataset directory.
//!
//! Records on disk follow the CIFAR-10 batch layout: one label byte, then
//! full red, green and blue planes in row-major order. Grayscale images are
//! stored as three identical planes.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

const META: &str = "meta.json";

/// Images (`[N, C, H, W]`, values in `[0, 1]`) with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Split> {
        if images.rank() != 4 || images.rows() != labels.len() {
            return Err(Error::Data(format!("{} labels for images of shape {:?}", labels.len(), images.shape())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {l} outside {num_classes} classes")));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Split { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The first `n` examples (all of them if `n` is 0 or too large).
    pub fn head(&self, n: usize) -> Split {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        let idx: Vec<usize> = (0..n).collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> Split {
        Split { images: self.images.select_rows(idx), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }
}

/// Train and test splits plus an optional pool of extra training data.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub extra: Option<Split>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(train: Split, test: Split, extra: Option<Split>, num_classes: usize) -> Result<Dataset> {
        if train.is_empty() || test.is_empty() {
            return Err(Error::Data("train and test splits must be nonempty".into()));
        }
        let shape = train.image_shape();
        for s in std::iter::once(&test).chain(&extra) {
            if s.image_shape() != shape {
                return Err(Error::Data(format!("split image shape {:?} differs from {shape:?}", s.image_shape())));
            }
        }
        Ok(Dataset { train, test, extra, num_classes })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.train.image_shape()
    }
}

/// Parameters of the two-class blob generator.
///
/// Class 0 has a bright top-left quadrant and class 1 a bright bottom-right
/// quadrant, except that with probability `flip_prob` the quadrant points to
/// the other class. A faint checkerboard whose sign encodes the class,
/// smaller than the usual `8/255` attack radius, makes clean accuracy exceed
/// what the quadrant alone allows; only a non-robust model relies on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobOptions {
    pub n: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub background: f64,
    pub foreground: f64,
    pub texture: f64,
    pub flip_prob: f64,
    /// Size of the extra pool; 0 for none.
    pub extra: usize,
    pub seed: u64,
}

impl Default for BlobOptions {
    fn default() -> Self {
        BlobOptions {
            n: 2000,
            image_size: 8,
            noise_sigma: 0.15,
            background: 0.3,
            foreground: 0.6,
            texture: 0.03,
            flip_prob: 0.1,
            extra: 0,
            seed: 0,
        }
    }
}

/// Generate a balanced two-class grayscale dataset with an 80/20
/// train/test split. Example `i` is drawn from its own generator stream and
/// has label `i mod 2`; the extra pool uses indices `n..n + extra`, so it
/// never overlaps train or test. Pixels are quantized to multiples of
/// `1/255`, which makes a written and re-read dataset bitwise identical.
pub fn gen_blobs(opts: &BlobOptions) -> Result<Dataset> {
    if opts.n < 4 || opts.n % 2 != 0 {
        return Err(Error::Data(format!("blob count {} must be even and at least 4", opts.n)));
    }
    if opts.image_size < 2 {
        return Err(Error::Data("blob images need a side of at least 2".into()));
    }
    if !(opts.noise_sigma >= 0.0 && (0.0..=1.0).contains(&opts.flip_prob)) {
        return Err(Error::Data("noise_sigma must be nonnegative and flip_prob in [0, 1]".into()));
    }
    let n_train = opts.n * 4 / 5;
    let n_train = n_train - n_train % 2;
    let make = |range: std::ops::Range<usize>| {
        let side = opts.image_size;
        let mut data = Vec::with_capacity(range.len() * side * side);
        let mut labels = Vec::with_capacity(range.len());
        for i in range {
            let label = i % 2;
            data.extend(blob(opts, i as u64, label));
            labels.push(label);
        }
        let images = Tensor::new(vec![labels.len(), 1, side, side], data)?;
        Split::new(images, labels, 2)
    };
    let train = make(0..n_train)?;
    let test = make(n_train..opts.n)?;
    let extra = if opts.extra > 0 { Some(make(opts.n..opts.n + opts.extra)?) } else { None };
    Dataset::new(train, test, extra, 2)
}

fn blob(opts: &BlobOptions, index: u64, label: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index);
    let side = opts.image_size;
    let half = side / 2;
    let flipped = rng.random_bool(opts.flip_prob);
    let top_left = (label == 0) != flipped;
    let class_sign = if label == 0 { -1.0 } else { 1.0 };
    let noise = Normal::new(0.0, opts.noise_sigma).expect("nonnegative sigma");
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let bright = if top_left { r < half && c < half } else { r >= half && c >= half };
            let base = if bright { opts.foreground } else { opts.background };
            let checker = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            let v = base + opts.texture * class_sign * checker + noise.sample(&mut rng);
            out.push(quantize(v));
        }
    }
    out
}

fn quantize(v: f64) -> f64 {
    to_byte(v) as f64 / 255.0
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parse CIFAR-style records of `1 + 3·side²` bytes with labels below
/// `num_classes`. Pixels are scaled by `1/255`.
pub fn parse_records(bytes: &[u8], side: usize, num_classes: usize, origin: &Path) -> Result<Split> {
    let record = 1 + 3 * side * side;
    if bytes.len() % record != 0 {
        let offset = bytes.len() - bytes.len() % record;
        return Err(Error::format(
            origin,
            format!(
                "length {} is not a multiple of {record}; trailing partial record at byte offset {offset}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (record - 1));
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[0] as usize;
        if label >= num_classes {
            return Err(Error::format(origin, format!("label {label} at byte offset {}", i * record)));
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, side, side], data)?;
    Split::new(images, labels, num_classes)
}

/// Read and concatenate CIFAR-10 binary batch files.
pub fn load_cifar10_binary(paths: &[PathBuf]) -> Result<Split> {
    let mut parts = Vec::new();
    for p in paths {
        let bytes = std::fs::read(p)?;
        parts.push(parse_records(&bytes, CIFAR_SIDE, CIFAR_CLASSES, p)?);
    }
    concat(parts, CIFAR_CLASSES)
}

/// Load the standard CIFAR-10 binary distribution: `data_batch_1..5.bin`
/// for training and `test_batch.bin` for testing.
pub fn load_cifar10_dir(dir: &Path) -> Result<Dataset> {
    let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let train = load_cifar10_binary(&train)?;
    let test = load_cifar10_binary(&[dir.join("test_batch.bin")])?;
    Dataset::new(train, test, None, CIFAR_CLASSES)
}

fn concat(parts: Vec<Split>, num_classes: usize) -> Result<Split> {
    let refs: Vec<&Tensor> = parts.iter().map(|s| &s.images).collect();
    let images = Tensor::concat_rows(&refs)?;
    let labels = parts.into_iter().flat_map(|s| s.labels).collect();
    Split::new(images, labels, num_classes)
}

/// Encode a split as records. One-channel images are written as three
/// identical planes; pixels are rounded to the nearest byte.
pub fn encode_records(split: &Split) -> Result<Vec<u8>> {
    let [c, h, w] = split.image_shape();
    if h != w || !(c == 1 || c == 3) {
        return Err(Error::Data(format!("cannot encode images of shape {:?} as records", [c, h, w])));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(split.len() * (1 + 3 * plane));
    for (i, &label) in split.labels.iter().enumerate() {
        out.push(u8::try_from(label).map_err(|_| Error::Data(format!("label {label} does not fit a byte")))?);
        let img = split.images.row(i);
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            out.extend(img[src * plane..(src + 1) * plane].iter().map(|&v| to_byte(v)));
        }
    }
    Ok(out)
}

/// Contents of `meta.json` in a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// 1 for grayscale (stored as three identical planes), else 3.
    pub channels: usize,
    pub side: usize,
    pub num_classes: usize,
    pub train: usize,
    pub test: usize,
    pub extra: usize,
}

/// Write `train.bin`, `test.bin`, optional `extra.bin` and `meta.json`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let [channels, side, _] = ds.image_shape();
    let meta = DatasetMeta {
        channels,
        side,
        num_classes: ds.num_classes,
        train: ds.train.len(),
        test: ds.test.len(),
        extra: ds.extra.as_ref().map_or(0, Split::len),
    };
    std::fs::write(dir.join("train.bin"), encode_records(&ds.train)?)?;
    std::fs::write(dir.join("test.bin"), encode_records(&ds.test)?)?;
    if let Some(extra) = &ds.extra {
        std::fs::write(dir.join("extra.bin"), encode_records(extra)?)?;
    }
    std::fs::write(dir.join(META), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Load a directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META);
    let meta: DatasetMeta =
        serde_json::from_slice(&std::fs::read(&meta_path)?).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let read = |name: &str, expect: usize| -> Result<Split> {
        let path = dir.join(name);
        let split = parse_records(&std::fs::read(&path)?, meta.side, meta.num_classes, &path)?;
        if split.len() != expect {
            return Err(Error::format(&path, format!("{} records, meta says {expect}", split.len())));
        }
        Ok(if meta.channels == 1 { first_plane(&split) } else { split })
    };
    let train = read("train.bin", meta.train)?;
    let test = read("test.bin", meta.test)?;
    let extra = if meta.extra > 0 { Some(read("extra.bin", meta.extra)?) } else { None };
    Dataset::new(train, test, extra, meta.num_classes)
}

fn first_plane(split: &Split) -> Split {
    let [_, h, w] = split.image_shape();
    let plane = h * w;
    let mut data = Vec::with_capacity(split.len() * plane);
    for i in 0..split.len() {
        data.extend_from_slice(&split.images.row(i)[..plane]);
    }
    let images = Tensor::new(vec![split.len(), 1, h, w], data).expect("plane extent");
    Split { images, labels: split.labels.clone() }
}

/// The two fixed augmentations: horizontal flip with probability ½ and a
/// random crop after zero padding by `crop_padding` pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Augment {
    pub flip: bool,
    pub crop_padding: usize,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.crop_padding == 0
    }

    /// Augment every image of `images` in place, drawing from `rng`.
    pub fn apply(&self, images: &mut Tensor, rng: &mut impl Rng) {
        if self.is_identity() {
            return;
        }
        let shape = images.shape().to_vec();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let len = c * h * w;
        let pad = self.crop_padding as i64;
        let mut scratch = vec![0.0; len];
        for img in images.data_mut().chunks_mut(len) {
            let flip = self.flip && rng.random_bool(0.5);
            let (dy, dx) = if pad > 0 { (rng.random_range(-pad..=pad), rng.random_range(-pad..=pad)) } else { (0, 0) };
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sx = if flip { w - 1 - x } else { x } as i64 + dx;
                        let sy = y as i64 + dy;
                        let inside = (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx);
                        scratch[(ch * h + y) * w + x] =
                            if inside { img[(ch * h + sy as usize) * w + sx as usize] } else { 0.0 };
                    }
                }
            }
            img.copy_from_slice(&scratch);
        }
    }
}
