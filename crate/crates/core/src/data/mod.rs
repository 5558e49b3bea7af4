//! Synthetic source data, the corruption suite and the 1-D clustering demo.
//!
//! Every image is drawn from its own generator keyed by `(seed, split,
//! index)`, so a dataset does not depend on generation order.

pub mod corrupt;
pub mod oned;

pub use corrupt::{apply_corruption, CorruptedBatch, CorruptionKind, CorruptionSpec};
pub use oned::{
    clustering_entropy_bits, entropy_shift, interval_of, quantile_clusters, sample_1d, Component, OneDDistribution, ShiftRow,
};

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    /// Side length of the square single-channel images.
    pub image_size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            image_size: 16,
            train_per_class: 500,
            test_per_class: 200,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            return Err(Error::Config("num_classes must lie in 2..=65535".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config("image_size must be at least 4".into()));
        }
        Ok(())
    }
}

/// Labelled single-channel images, `images` shaped `N×1×S×S`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(num_classes: usize, images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[1] != 1 || images.shape()[2] != images.shape()[3] {
            return Err(Error::Dimension(format!("images must be N×1×S×S, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label { label: bad, classes: num_classes });
        }
        Ok(Self {
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Images `idx` converted to `T`, with their labels.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let x = self.images.gather_rows(idx).cast();
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            num_classes: self.num_classes,
            images: self.images.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Per-class mean image; `None` for classes without samples.
    pub fn class_means(&self) -> Vec<Option<Vec<f64>>> {
        let px = self.image_size() * self.image_size();
        let mut sums = vec![vec![0.0; px]; self.num_classes];
        let mut counts = vec![0usize; self.num_classes];
        for (img, &l) in self.images.data().chunks_exact(px).zip(&self.labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(img) {
                *s += *v as f64;
            }
        }
        sums.into_iter()
            .zip(counts)
            .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
            .collect()
    }
}

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of item `index` in stream `stream` under `seed`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ mix64(stream)) ^ index)
}

const TRAIN_STREAM: u64 = 0x7472_6169_6e;
const TEST_STREAM: u64 = 0x7465_7374;

struct ClassPattern {
    angle: f64,
    freq: f64,
    blob: (f64, f64),
}

fn class_pattern(k: usize, classes: usize, size: usize) -> ClassPattern {
    let s = size as f64;
    let a = 2.0 * PI * k as f64 / classes as f64;
    ClassPattern {
        angle: PI * k as f64 / classes as f64,
        freq: [2.0, 3.0, 4.0][k % 3] / s,
        blob: (s / 2.0 - 0.5 + 0.3 * s * a.cos(), s / 2.0 - 0.5 + 0.3 * s * a.sin()),
    }
}

fn render(p: &ClassPattern, size: usize, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let phase = rng.random_range(0.0..2.0 * PI);
    let angle = p.angle + rng.random_range(-0.08..0.08);
    let freq = p.freq * rng.random_range(0.95..1.05);
    let amp = rng.random_range(0.16..0.22);
    let (bx, by) = (p.blob.0 + rng.random_range(-1.0..1.0), p.blob.1 + rng.random_range(-1.0..1.0));
    let blob_amp = rng.random_range(0.2..0.28);
    let (ca, sa) = (angle.cos(), angle.sin());
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let g = (2.0 * PI * freq * (xf * ca + yf * sa) + phase).sin();
            let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
            let blob = (-d2 / (2.0 * 1.8f64.powi(2))).exp();
            let v = 0.45 + amp * g + blob_amp * blob + noise.sample(rng);
            out[y * size + x] = v.clamp(0.0, 1.0) as f32;
        }
    }
}

fn generate_split(spec: &DatasetSpec, per_class: usize, stream: u64) -> Result<Dataset> {
    let (c, s) = (spec.num_classes, spec.image_size);
    let n = c * per_class;
    let patterns: Vec<ClassPattern> = (0..c).map(|k| class_pattern(k, c, s)).collect();
    let mut data = vec![0.0f32; n * s * s];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in data.chunks_exact_mut(s * s).enumerate() {
        let k = i % c;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stream, i as u64));
        render(&patterns[k], s, &mut rng, img);
        labels.push(k);
    }
    if n == 0 {
        return Err(Error::Config("dataset split would be empty".into()));
    }
    Dataset::new(c, Tensor::new(vec![n, 1, s, s], data)?, labels)
}

/// Train and test sets; classes interleave so any prefix is near-balanced.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    Ok((
        generate_split(spec, spec.train_per_class, TRAIN_STREAM)?,
        generate_split(spec, spec.test_per_class, TEST_STREAM)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpHeader {
    num_classes: usize,
    image_size: usize,
    count: usize,
}

/// Header line, `f32` little-endian pixels, then `u16` little-endian labels.
pub fn write_dump<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    let header = DumpHeader {
        num_classes: ds.num_classes,
        image_size: ds.image_size(),
        count: ds.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(ds.images.numel() * 4 + ds.len() * 2);
    for v in ds.images.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &ds.labels {
        let l = u16::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit u16")))?;
        buf.extend_from_slice(&l.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_dump<R: Read>(r: R) -> Result<Dataset> {
    let mut bytes = Vec::new();
    BufReader::new(r).read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("dataset dump has no header line".into()))?;
    let h: DumpHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format(format!("bad dump header: {e}")))?;
    let px = h.count * h.image_size * h.image_size;
    let body = &bytes[nl + 1..];
    if body.len() != px * 4 + h.count * 2 {
        return Err(Error::Format(format!(
            "dump body has {} bytes, header implies {}",
            body.len(),
            px * 4 + h.count * 2
        )));
    }
    let (img, lab) = body.split_at(px * 4);
    let data = img
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let labels = lab
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes(b.try_into().expect("2 bytes")) as usize)
        .collect();
    let images = Tensor::new(vec![h.count, 1, h.image_size, h.image_size], data)
        .map_err(|e| Error::Format(e.to_string()))?;
    Dataset::new(h.num_classes, images, labels)
}

pub fn save_dump(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    write_dump(BufWriter::new(File::create(path)?), ds)
}

pub fn load_dump(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dump(File::open(path)?)
}
