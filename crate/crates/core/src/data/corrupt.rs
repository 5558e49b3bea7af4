//! Five corruption families with monotone five-level severity schedules.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    Blur,
    Brightness,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Blur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
        }
    }

    fn stream(self) -> u64 {
        0xC0_0000 + self as u64
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption `{s}`")))
    }
}

pub const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
pub const IMPULSE_FRACTION: [f64; 5] = [0.01, 0.03, 0.06, 0.10, 0.17];
/// Box width and number of passes.
pub const BLUR_BOX: [(usize, usize); 5] = [(2, 1), (3, 1), (3, 2), (5, 2), (5, 3)];
pub const BRIGHTNESS_SHIFT: [f64; 5] = [0.05, 0.1, 0.15, 0.2, 0.3];
pub const CONTRAST_SCALE: [f64; 5] = [0.75, 0.6, 0.5, 0.4, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1 (mild) to 5 (strongest).
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        let s = Self { kind, severity, seed };
        s.level()?;
        Ok(s)
    }

    fn level(&self) -> Result<usize> {
        match self.severity {
            1..=5 => Ok(self.severity as usize - 1),
            s => Err(Error::Config(format!("severity {s} is outside 1..=5"))),
        }
    }
}

/// A corrupted copy of labelled images.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedBatch {
    pub spec: CorruptionSpec,
    pub data: Dataset,
}

impl CorruptedBatch {
    pub fn from_dataset(ds: &Dataset, spec: CorruptionSpec) -> Result<Self> {
        Ok(Self {
            spec,
            data: Dataset::new(ds.num_classes, apply_corruption(&ds.images, &spec)?, ds.labels.clone())?,
        })
    }
}

/// Corrupts every `C×H×W` image of `images`; image `i` draws its noise
/// from a generator keyed by `(seed, kind, i)`.
pub fn apply_corruption(images: &Tensor<f32>, spec: &CorruptionSpec) -> Result<Tensor<f32>> {
    let lvl = spec.level()?;
    if images.rank() != 4 {
        return Err(Error::Dimension(format!("expected N×C×H×W images, got {:?}", images.shape())));
    }
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let per_image = images.shape()[1] * h * w;
    let mut out = images.clone();
    for (i, img) in out.data_mut().chunks_exact_mut(per_image).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, spec.kind.stream(), i as u64));
        match spec.kind {
            CorruptionKind::GaussianNoise => {
                let n = Normal::new(0.0, GAUSSIAN_SIGMA[lvl]).expect("valid std");
                img.iter_mut().for_each(|v| *v += n.sample(&mut rng) as f32);
            }
            CorruptionKind::ImpulseNoise => {
                let p = IMPULSE_FRACTION[lvl];
                for v in img.iter_mut() {
                    if rng.random_bool(p) {
                        *v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                    }
                }
            }
            CorruptionKind::Blur => {
                let (width, passes) = BLUR_BOX[lvl];
                for plane in img.chunks_exact_mut(h * w) {
                    for _ in 0..passes {
                        box_blur(plane, h, w, width);
                    }
                }
            }
            CorruptionKind::Brightness => {
                let b = BRIGHTNESS_SHIFT[lvl] as f32;
                img.iter_mut().for_each(|v| *v += b);
            }
            CorruptionKind::Contrast => {
                let c = CONTRAST_SCALE[lvl] as f32;
                img.iter_mut().for_each(|v| *v = 0.5 + (*v - 0.5) * c);
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Separable box filter of `width` taps covering offsets
/// `−⌊(width−1)/2⌋ ..= ⌈(width−1)/2⌉`, replicating edges.
fn box_blur(plane: &mut [f32], h: usize, w: usize, width: usize) {
    let lo = (width - 1) / 2;
    let blur_line = |get: &dyn Fn(usize) -> f32, len: usize, out: &mut Vec<f32>| {
        out.clear();
        for i in 0..len {
            let s: f32 = (0..width).map(|d| get((i + d).saturating_sub(lo).min(len - 1))).sum();
            out.push(s / width as f32);
        }
    };
    let mut line = Vec::with_capacity(h.max(w));
    for y in 0..h {
        let row: Vec<f32> = plane[y * w..(y + 1) * w].to_vec();
        blur_line(&|x| row[x], w, &mut line);
        plane[y * w..(y + 1) * w].copy_from_slice(&line);
    }
    for x in 0..w {
        let col: Vec<f32> = (0..h).map(|y| plane[y * w + x]).collect();
        blur_line(&|y| col[y], h, &mut line);
        for (y, v) in line.iter().enumerate() {
            plane[y * w + x] = *v;
        }
    }
}
