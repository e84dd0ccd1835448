//! Entropy-ranked curriculum sampling.
//!
//! Slices are ranked by the Shannon entropy of their HR target. During the
//! first `horizon` iterations each batch draws entropy targets from a normal
//! distribution whose mean ramps linearly from the lowest to the highest
//! entropy, and every target picks the slice with the nearest entropy. After
//! the horizon, slices are drawn uniformly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Grid, SliceRecord};
use crate::error::{Error, Result};

pub const DEFAULT_ENTROPY_BINS: usize = 256;

/// Shannon entropy in bits of the intensity histogram, with `n_bins`
/// equal-width bins spanning the image's own range.
pub fn shannon_entropy(image: &Grid, n_bins: usize) -> Result<f64> {
    entropy_of_values(image.iter().copied(), image.len(), n_bins)
}

fn entropy_of_values(values: impl Iterator<Item = f64> + Clone, len: usize, n_bins: usize) -> Result<f64> {
    if len == 0 {
        return Err(Error::Empty("entropy of an empty image"));
    }
    if n_bins < 2 {
        return Err(Error::Config(format!("need at least 2 histogram bins, got {n_bins}")));
    }
    let (lo, hi) = values
        .clone()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Domain("image contains non-finite values".into()));
    }
    if hi <= lo {
        return Ok(0.0);
    }
    let mut counts = vec![0usize; n_bins];
    let width = (hi - lo) / n_bins as f64;
    for v in values {
        let bin = (((v - lo) / width) as usize).min(n_bins - 1);
        counts[bin] += 1;
    }
    let n = len as f64;
    Ok(counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum())
}

/// Slices ordered by ascending entropy, ties by ascending slice id.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyIndex {
    entries: Vec<(String, f64)>,
}

impl EntropyIndex {
    pub fn from_entropies(entries: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let mut entries: Vec<(String, f64)> = entries.into_iter().collect();
        if entries.is_empty() {
            return Err(Error::Empty("entropy index needs at least one slice"));
        }
        if entries.iter().any(|(_, e)| !e.is_finite()) {
            return Err(Error::Domain("non-finite entropy".into()));
        }
        entries.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn e_min(&self) -> f64 {
        self.entries[0].1
    }

    pub fn e_max(&self) -> f64 {
        self.entries[self.entries.len() - 1].1
    }

    /// Position of the slice whose entropy is nearest to `target`; among
    /// equally near slices the lowest slice id wins.
    pub fn nearest(&self, target: f64) -> usize {
        let first_with = |e: f64| self.entries.partition_point(|(_, x)| *x < e);
        let above = self.entries.partition_point(|(_, x)| *x < target);
        if above == 0 {
            return 0;
        }
        let below = first_with(self.entries[above - 1].1);
        if above == self.entries.len() {
            return below;
        }
        let d_below = target - self.entries[below].1;
        let d_above = self.entries[above].1 - target;
        match d_below.total_cmp(&d_above) {
            std::cmp::Ordering::Less => below,
            std::cmp::Ordering::Greater => above,
            std::cmp::Ordering::Equal => {
                if self.entries[below].0 <= self.entries[above].0 {
                    below
                } else {
                    above
                }
            }
        }
    }
}

/// Entropy index over the HR targets of `records`.
pub fn build_entropy_index(records: &[SliceRecord], n_bins: usize) -> Result<EntropyIndex> {
    if records.is_empty() {
        return Err(Error::Empty("entropy index needs at least one slice"));
    }
    let entries = records
        .iter()
        .map(|r| Ok((r.slice_id.clone(), shannon_entropy(&r.hr_t2, n_bins)?)))
        .collect::<Result<Vec<_>>>()?;
    EntropyIndex::from_entropies(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    /// Iterations that follow the entropy ramp before uniform sampling.
    pub horizon: usize,
    pub batch_size: usize,
    /// Spread of the entropy targets in bits; `None` uses a sixth of the
    /// index's entropy range.
    pub sigma: Option<f64>,
    pub seed: u64,
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn sigma_for(&self, index: &EntropyIndex) -> f64 {
        self.sigma
            .unwrap_or_else(|| (index.e_max() - index.e_min()) / 6.0)
    }
}

/// Mean entropy target at `iteration`: a linear ramp from `e_min` reaching
/// `e_max` at the horizon and staying there.
pub fn curriculum_mu(iteration: usize, horizon: usize, e_min: f64, e_max: f64) -> f64 {
    if horizon == 0 {
        return e_max;
    }
    let progress = (iteration as f64 / horizon as f64).min(1.0);
    e_min + (e_max - e_min) * progress
}

/// Generator for one iteration's draws, fixed by `(seed, iteration)` alone.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Positions in `index` of one batch.
pub fn sample_batch_positions<R: Rng>(
    index: &EntropyIndex,
    iteration: usize,
    config: &CurriculumConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    config.validate()?;
    if index.is_empty() {
        return Err(Error::Empty("cannot sample from an empty index"));
    }
    if iteration >= config.horizon {
        return Ok((0..config.batch_size)
            .map(|_| rng.random_range(0..index.len()))
            .collect());
    }
    let (lo, hi) = (index.e_min(), index.e_max());
    let mu = curriculum_mu(iteration, config.horizon, lo, hi);
    let sigma = config.sigma_for(index);
    let normal = if sigma > 0.0 {
        Some(Normal::new(mu, sigma).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    Ok((0..config.batch_size)
        .map(|_| {
            let target = normal.map_or(mu, |n| n.sample(rng)).clamp(lo, hi);
            index.nearest(target)
        })
        .collect())
}

/// Slice ids of one batch, drawn with replacement.
pub fn sample_batch_indices<R: Rng>(
    index: &EntropyIndex,
    iteration: usize,
    config: &CurriculumConfig,
    rng: &mut R,
) -> Result<Vec<String>> {
    Ok(sample_batch_positions(index, iteration, config, rng)?
        .into_iter()
        .map(|p| index.entries[p].0.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(entries: &[(&str, f64)]) -> EntropyIndex {
        EntropyIndex::from_entropies(entries.iter().map(|(id, e)| (id.to_string(), *e))).unwrap()
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(shannon_entropy(&Grid::from_elem((4, 4), 0.5), 256).unwrap(), 0.0);
        let two = Grid::from_shape_fn((4, 4), |(r, _)| if r < 2 { 0.0 } else { 1.0 });
        assert!((shannon_entropy(&two, 256).unwrap() - 1.0).abs() < 1e-12);
        let ramp = Grid::from_shape_fn((16, 16), |(r, c)| (r * 16 + c) as f64);
        assert!((shannon_entropy(&ramp, 256).unwrap() - 8.0).abs() < 1e-12);
        assert!(shannon_entropy(&Grid::zeros((0, 0)), 256).is_err());
        assert!(shannon_entropy(&ramp, 1).is_err());
    }

    #[test]
    fn index_ordering() {
        let idx = index(&[("a", 2.0), ("b", 1.0), ("c", 3.0)]);
        let es: Vec<f64> = idx.entries().iter().map(|e| e.1).collect();
        assert_eq!(es, vec![1.0, 2.0, 3.0]);
        assert_eq!((idx.e_min(), idx.e_max()), (1.0, 3.0));

        let idx = index(&[("z", 1.0), ("m", 1.0)]);
        assert_eq!(idx.entries()[0].0, "m");

        let idx = index(&[("solo", 4.2)]);
        assert_eq!(idx.e_min(), idx.e_max());
        assert!(EntropyIndex::from_entropies(Vec::new()).is_err());
    }

    #[test]
    fn nearest_tie_breaks_on_id() {
        let idx = index(&[("b", 1.0), ("a", 3.0), ("c", 3.0)]);
        assert_eq!(idx.entries()[idx.nearest(2.0)].0, "a");
        assert_eq!(idx.entries()[idx.nearest(2.9)].0, "a");
        assert_eq!(idx.entries()[idx.nearest(-5.0)].0, "b");
        assert_eq!(idx.entries()[idx.nearest(99.0)].0, "a");
        let idx = index(&[("a", 1.0), ("b", 3.0)]);
        assert_eq!(idx.entries()[idx.nearest(2.0)].0, "a");
    }

    #[test]
    fn mu_ramp() {
        assert_eq!(curriculum_mu(0, 100, 1.0, 3.0), 1.0);
        assert_eq!(curriculum_mu(50, 100, 1.0, 3.0), 2.0);
        assert_eq!(curriculum_mu(100, 100, 1.0, 3.0), 3.0);
        assert_eq!(curriculum_mu(1000, 100, 1.0, 3.0), 3.0);
        assert_eq!(curriculum_mu(0, 0, 1.0, 3.0), 3.0);
        let mut last = f64::NEG_INFINITY;
        for i in 0..300 {
            let mu = curriculum_mu(i, 200, 0.5, 6.0);
            assert!(mu >= last);
            last = mu;
        }
    }

    #[test]
    fn narrow_sigma_at_start_picks_easiest() {
        let idx = index(&[("a", 1.0), ("b", 2.0), ("c", 3.0)]);
        let cfg = CurriculumConfig {
            horizon: 10,
            batch_size: 16,
            sigma: Some(1e-9),
            seed: 0,
        };
        let ids = sample_batch_indices(&idx, 0, &cfg, &mut iteration_rng(0, 0)).unwrap();
        assert!(ids.iter().all(|id| id == "a"));
    }

    #[test]
    fn sampling_is_deterministic() {
        let idx = index(&[("a", 1.0), ("b", 2.0), ("c", 3.0), ("d", 3.5)]);
        let cfg = CurriculumConfig {
            horizon: 10,
            batch_size: 8,
            sigma: None,
            seed: 7,
        };
        for it in [0, 5, 10, 20] {
            let a = sample_batch_indices(&idx, it, &cfg, &mut iteration_rng(7, it)).unwrap();
            let b = sample_batch_indices(&idx, it, &cfg, &mut iteration_rng(7, it)).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().all(|id| idx.entries().iter().any(|(e, _)| e == id)));
        }
    }

    #[test]
    fn rejects_bad_config() {
        let idx = index(&[("a", 1.0)]);
        let mut cfg = CurriculumConfig {
            horizon: 1,
            batch_size: 0,
            sigma: None,
            seed: 0,
        };
        assert!(sample_batch_positions(&idx, 0, &cfg, &mut iteration_rng(0, 0)).is_err());
        cfg.batch_size = 2;
        cfg.sigma = Some(-1.0);
        assert!(sample_batch_positions(&idx, 0, &cfg, &mut iteration_rng(0, 0)).is_err());
    }
}
