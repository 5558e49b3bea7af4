//! Equal-mass clustering of a 1-D distribution and the entropy drop it
//! suffers when the distribution shifts under frozen boundaries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// Gaussian mixture plus the offset that turns it into the target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneDDistribution {
    pub components: Vec<Component>,
    /// Target shift in units of the mixture standard deviation.
    pub shift_stds: f64,
}

impl Default for OneDDistribution {
    fn default() -> Self {
        Self {
            components: vec![
                Component { weight: 0.6, mean: -1.0, std: 0.7 },
                Component { weight: 0.4, mean: 1.5, std: 0.9 },
            ],
            shift_stds: 1.5,
        }
    }
}

impl OneDDistribution {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        if self.components.iter().any(|c| !(c.std > 0.0) || !(c.weight >= 0.0)) {
            return Err(Error::Config("mixture stds must be positive and weights non-negative".into()));
        }
        let w: f64 = self.components.iter().map(|c| c.weight).sum();
        if (w - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {w}, not 1")));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        let second: f64 = self.components.iter().map(|c| c.weight * (c.std * c.std + c.mean * c.mean)).sum();
        (second - m * m).sqrt()
    }

    /// The same mixture moved right by `shift_stds · std`.
    pub fn target(&self) -> Self {
        let d = self.shift_stds * self.std();
        Self {
            components: self
                .components
                .iter()
                .map(|c| Component { mean: c.mean + d, ..*c })
                .collect(),
            shift_stds: 0.0,
        }
    }
}

pub fn sample_1d(dist: &OneDDistribution, n: usize, seed: u64) -> Result<Vec<f64>> {
    dist.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normals: Vec<Normal<f64>> = dist
        .components
        .iter()
        .map(|c| Normal::new(c.mean, c.std).expect("validated std"))
        .collect();
    Ok((0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = normals.len() - 1;
            for (i, c) in dist.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            normals[pick].sample(&mut rng)
        })
        .collect())
}

/// The `K − 1` empirical `j/K` quantiles: order statistics at rank
/// `⌈j·n/K⌉` (1-based).
pub fn quantile_clusters(samples: &[f64], k: usize) -> Result<Vec<f64>> {
    let n = samples.len();
    if k < 2 || n < k {
        return Err(Error::Contract(format!("need K ≥ 2 and n ≥ K, got K = {k}, n = {n}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((1..k).map(|j| sorted[(j * n).div_ceil(k) - 1]).collect())
}

/// Interval of `x`; a value equal to a boundary falls in the left interval.
pub fn interval_of(boundaries: &[f64], x: f64) -> usize {
    boundaries.partition_point(|&b| b < x)
}

/// Entropy in bits of the hard assignment of `samples` to the intervals.
pub fn clustering_entropy_bits(boundaries: &[f64], samples: &[f64]) -> f64 {
    let mut counts = vec![0usize; boundaries.len() + 1];
    for &x in samples {
        counts[interval_of(boundaries, x)] += 1;
    }
    let n = samples.len() as f64;
    -counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Source and frozen-boundary target entropies for one cluster count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShiftRow {
    pub k: usize,
    pub source_bits: f64,
    pub target_bits: f64,
    /// Target minus source mutual information. With hard intervals
    /// `H(Z|X) = 0`, so this is the entropy difference.
    pub delta_mi_bits: f64,
}

pub fn entropy_shift(dist: &OneDDistribution, k: usize, n: usize, seed: u64) -> Result<ShiftRow> {
    let source = sample_1d(dist, n, seed)?;
    let target = sample_1d(&dist.target(), n, seed.wrapping_add(1))?;
    let b = quantile_clusters(&source, k)?;
    let (s, t) = (clustering_entropy_bits(&b, &source), clustering_entropy_bits(&b, &target));
    Ok(ShiftRow {
        k,
        source_bits: s,
        target_bits: t,
        delta_mi_bits: t - s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_values_go_left() {
        let b = [1.0, 2.0];
        assert_eq!(interval_of(&b, 1.0), 0);
        assert_eq!(interval_of(&b, 1.5), 1);
        assert_eq!(interval_of(&b, 2.0), 1);
        assert_eq!(interval_of(&b, 2.1), 2);
    }

    #[test]
    fn small_quantiles_by_hand() {
        let xs = [5.0, 1.0, 4.0, 2.0, 3.0, 6.0];
        assert_eq!(quantile_clusters(&xs, 2).unwrap(), vec![3.0]);
        assert_eq!(quantile_clusters(&xs, 3).unwrap(), vec![2.0, 4.0]);
        assert!((clustering_entropy_bits(&[2.0, 4.0], &xs) - 3f64.log2()).abs() < 1e-12);
        assert!(quantile_clusters(&xs, 7).is_err());
        assert!(quantile_clusters(&xs, 1).is_err());
    }

    #[test]
    fn mixture_moments() {
        let d = OneDDistribution {
            components: vec![
                Component { weight: 0.5, mean: -1.0, std: 1.0 },
                Component { weight: 0.5, mean: 1.0, std: 1.0 },
            ],
            shift_stds: 2.0,
        };
        assert!(d.mean().abs() < 1e-15);
        assert!((d.std() - 2f64.sqrt()).abs() < 1e-12);
        assert!((d.target().mean() - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        let bad = OneDDistribution {
            components: vec![Component { weight: 0.7, mean: 0.0, std: 1.0 }],
            shift_stds: 0.0,
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
