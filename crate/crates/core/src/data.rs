//! Datasets: synthetic generators, the IDX binary format, splits and batching.
//!
//! All randomness comes from explicit seeds.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

/// One mini-batch of features and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Consecutive chunks of at most `size` samples, in order.
    pub fn chunks(&self, size: usize) -> Result<Vec<Batch>> {
        if size == 0 {
            return Err(Error::Parameter("chunk size must be positive".into()));
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.len() {
            let len = size.min(self.len() - start);
            out.push(Batch {
                x: self.x.slice_rows(start, len)?,
                labels: self.labels[start..start + len].to_vec(),
            });
            start += len;
        }
        Ok(out)
    }
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if features.shape().first() != Some(&labels.len()) {
            return Err(Error::Consistency(format!(
                "{} labels for features of shape {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        Dataset::new(
            self.features.gather_rows(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
            split,
        )
    }

    /// The whole dataset as a single batch.
    pub fn as_batch(&self) -> Batch {
        Batch {
            x: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Isotropic Gaussian clusters with means evenly spaced on a circle of
    /// radius 2.
    Gaussians,
    /// Two interleaved half-circles.
    Moons,
    /// `1×8×8` images: a fixed random template per class plus noise.
    Templates,
}

impl SyntheticKind {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::Gaussians => "gaussians",
            SyntheticKind::Moons => "moons",
            SyntheticKind::Templates => "templates",
        }
    }
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussians" => Ok(SyntheticKind::Gaussians),
            "moons" => Ok(SyntheticKind::Moons),
            "templates" => Ok(SyntheticKind::Templates),
            other => Err(Error::Parameter(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

const TEMPLATE_SIDE: usize = 8;

pub fn make_synthetic(
    kind: SyntheticKind,
    n: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::Parameter(format!(
            "need n >= classes >= 2, got n={n}, classes={classes}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Parameter(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::new();
    let shape = match kind {
        SyntheticKind::Gaussians => {
            for _ in 0..n {
                let c = rng.random_range(0..classes);
                let angle = 2.0 * PI * c as f64 / classes as f64;
                let (e0, e1): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                data.push(2.0 * angle.cos() + noise * e0);
                data.push(2.0 * angle.sin() + noise * e1);
                labels.push(c);
            }
            vec![n, 2]
        }
        SyntheticKind::Moons => {
            if classes != 2 {
                return Err(Error::Parameter("moons has exactly two classes".into()));
            }
            for _ in 0..n {
                let c = rng.random_range(0..2);
                let t: f64 = rng.random_range(0.0..PI);
                let (x, y) = if c == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let (e0, e1): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                data.push(x + noise * e0);
                data.push(y + noise * e1);
                labels.push(c);
            }
            vec![n, 2]
        }
        SyntheticKind::Templates => {
            let pixels = TEMPLATE_SIDE * TEMPLATE_SIDE;
            let templates: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..pixels).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            for _ in 0..n {
                let c = rng.random_range(0..classes);
                for &p in &templates[c] {
                    let e: f64 = rng.sample(StandardNormal);
                    data.push(p + noise * e);
                }
                labels.push(c);
            }
            vec![n, 1, TEMPLATE_SIDE, TEMPLATE_SIDE]
        }
    };
    Dataset::new(Tensor::new(shape, data)?, labels, classes, Split::Train)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// A decoded IDX file holding unsigned bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            Error::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("IDX header truncated at byte {offset}"),
            ))
        })
}

/// Parses an in-memory IDX file whose magic number must equal `expected_magic`.
pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<IdxArray> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected_magic {
        return Err(Error::Format {
            offset: 0,
            msg: format!("magic number {magic:#010x}, expected {expected_magic:#010x}"),
        });
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let offset = 4 + 4 * i;
        let d = be_u32(bytes, offset)? as usize;
        if d == 0 && i > 0 {
            return Err(Error::Format {
                offset,
                msg: "zero dimension".into(),
            });
        }
        dims.push(d);
    }
    let body = 4 + 4 * ndim;
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format {
            offset: 4,
            msg: "dimension product overflows".into(),
        })?;
    let available = bytes.len() - body;
    if available < expected {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("IDX body has {available} bytes, header promises {expected}"),
        )));
    }
    if available > expected {
        return Err(Error::Format {
            offset: body + expected,
            msg: format!("{} trailing bytes", available - expected),
        });
    }
    Ok(IdxArray {
        dims,
        data: bytes[body..].to_vec(),
    })
}

pub fn encode_idx(magic: u32, dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Decodes an image/label IDX pair into a dataset of shape `[N, 1, H, W]`
/// with pixels scaled to `[0, 1]`.
pub fn decode_idx_pair(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let img = parse_idx(images, IDX_IMAGES_MAGIC)?;
    let lab = parse_idx(labels, IDX_LABELS_MAGIC)?;
    if img.dims[0] != lab.dims[0] {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            img.dims[0], lab.dims[0]
        )));
    }
    if img.dims[0] == 0 {
        return Err(Error::Consistency("empty IDX dataset".into()));
    }
    let labels: Vec<usize> = lab.data.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    let features = Tensor::new(
        vec![img.dims[0], 1, img.dims[1], img.dims[2]],
        img.data.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    Dataset::new(features, labels, classes, Split::Train)
}

/// Reads an image/label pair of IDX files, transparently gunzipping.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    decode_idx_pair(&read_maybe_gz(images_path)?, &read_maybe_gz(labels_path)?)
}

/// Writes `[N, 1, H, W]` features in `[0, 1]` and labels as an IDX pair.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let s = dataset.features.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::dim(format!("IDX images need [N, 1, H, W], got {s:?}")));
    }
    if dataset.labels.iter().any(|&l| l > 255) {
        return Err(Error::Parameter("IDX labels must fit in a byte".into()));
    }
    let pixels: Vec<u8> = dataset
        .features
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let labels: Vec<u8> = dataset.labels.iter().map(|&l| l as u8).collect();
    File::create(images_path)?.write_all(&encode_idx(IDX_IMAGES_MAGIC, &[s[0], s[2], s[3]], &pixels))?;
    File::create(labels_path)?.write_all(&encode_idx(IDX_LABELS_MAGIC, &[labels.len()], &labels))?;
    Ok(())
}

/// Stratified seeded split into two halves. Per class, the halves differ by
/// at most one sample; odd classes alternate which half gets the extra one.
pub fn split_half(dataset: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    if dataset.len() < 2 {
        return Err(Error::Parameter("split_half needs at least two samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut extra_to_first = true;
    for class in 0..dataset.classes {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        members.shuffle(&mut rng);
        let mut take = members.len() / 2;
        if members.len() % 2 == 1 {
            if extra_to_first {
                take += 1;
            }
            extra_to_first = !extra_to_first;
        }
        first.extend_from_slice(&members[..take]);
        second.extend_from_slice(&members[take..]);
    }
    first.shuffle(&mut rng);
    second.shuffle(&mut rng);
    Ok((
        dataset.subset(&first, Split::Train)?,
        dataset.subset(&second, Split::Val)?,
    ))
}

/// Splits off a held-out set of `fraction` of the samples (unstratified).
pub fn split_fraction(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Parameter(format!("holdout fraction {fraction}")));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = ((dataset.len() as f64) * fraction).round() as usize;
    let held = held.clamp(1, dataset.len() - 1);
    Ok((
        dataset.subset(&idx[held..], Split::Train)?,
        dataset.subset(&idx[..held], Split::Test)?,
    ))
}

/// Seed for epoch `epoch` of a stream rooted at `seed`.
pub fn derive_seed(seed: u64, epoch: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One epoch of shuffled mini-batches.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, drop_last: bool) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();
    for chunk in idx.chunks(batch_size) {
        if drop_last && chunk.len() < batch_size {
            break;
        }
        out.push(Batch {
            x: dataset.features.gather_rows(chunk)?,
            labels: chunk.iter().map(|&i| dataset.labels[i]).collect(),
        });
    }
    Ok(out)
}
