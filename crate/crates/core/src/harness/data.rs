//! Synthetic source/target datasets and their JSON file form.
//!
//! Each sample carries a hidden "transcript" class drawn uniformly from
//! `intermediate_classes`. Its clean signal is that class's prototype plus
//! jitter; the observed input adds domain noise. The final label is the
//! transcript class folded onto `labels` classes, through a domain-specific
//! relabeling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    pub n_samples: usize,
    pub dim: usize,
    pub labels: usize,
    pub intermediate_classes: usize,
    /// Std of the per-sample jitter around a prototype.
    pub jitter: f64,
    pub source_noise: f64,
    pub target_noise: f64,
    /// Per-dimension magnitude of the target-domain noise mean.
    pub target_shift: f64,
    pub domain: Domain,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            n_samples: 800,
            dim: 16,
            labels: 8,
            intermediate_classes: 16,
            jitter: 0.1,
            source_noise: 0.15,
            target_noise: 0.35,
            target_shift: 0.5,
            domain: Domain::Source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: usize,
    pub input: Vec<f64>,
    pub clean: Vec<f64>,
    pub intermediate: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub dim: usize,
    pub labels: usize,
    pub intermediate_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample positions are used as batch indices throughout.
    pub fn inputs(&self, idx: &[usize]) -> Tensor {
        self.gather(idx, |s| &s.input)
    }

    pub fn clean(&self, idx: &[usize]) -> Tensor {
        self.gather(idx, |s| &s.clean)
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].label).collect()
    }

    pub fn intermediates_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].intermediate).collect()
    }

    pub fn ids_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].id).collect()
    }

    fn gather(&self, idx: &[usize], field: impl Fn(&Sample) -> &Vec<f64>) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(field(&self.samples[i]));
        }
        Tensor::new(vec![idx.len(), self.dim], data).expect("sample width checked at load")
    }

    /// Subset by positions, keeping sample ids.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            dim: self.dim,
            labels: self.labels,
            intermediate_classes: self.intermediate_classes,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.labels == 0 || self.intermediate_classes == 0 {
            return Err(Error::InvalidArgument("dataset dims must be positive".into()));
        }
        for s in &self.samples {
            if s.input.len() != self.dim || s.clean.len() != self.dim {
                return Err(Error::InvalidArgument(format!(
                    "sample {} has width {} / {}, expected {}",
                    s.id,
                    s.input.len(),
                    s.clean.len(),
                    self.dim
                )));
            }
            if s.label >= self.labels || s.intermediate >= self.intermediate_classes {
                return Err(Error::InvalidArgument(format!("sample {} label out of range", s.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let data: Dataset = serde_json::from_str(&text)?;
        data.validate()?;
        Ok(data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Deterministic synthetic dataset. Prototypes and the target relabeling
/// depend only on `seed`, so both domains generated from one seed share them.
pub fn generate_synthetic(params: &SyntheticParams, seed: u64) -> Result<Dataset> {
    let p = params;
    if p.n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be positive".into()));
    }
    if p.dim == 0 || p.labels == 0 || p.intermediate_classes == 0 {
        return Err(Error::InvalidArgument("synthetic dims must be positive".into()));
    }
    if p.labels > p.intermediate_classes {
        return Err(Error::InvalidArgument(format!(
            "{} labels cannot be folded from {} intermediate classes",
            p.labels, p.intermediate_classes
        )));
    }
    let bad_std = |v: f64| !(v.is_finite() && v >= 0.0);
    if bad_std(p.jitter) || bad_std(p.source_noise) || bad_std(p.target_noise) || !p.target_shift.is_finite() {
        return Err(Error::InvalidArgument("noise levels must be finite and nonnegative".into()));
    }

    let mut world = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<f64>> = (0..p.intermediate_classes)
        .map(|_| Tensor::randn(&mut world, &[p.dim], 0.6).into_data())
        .collect();
    let shift_dir: Vec<f64> =
        (0..p.dim).map(|_| if world.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let mut relabel: Vec<usize> = (0..p.intermediate_classes).collect();
    relabel.shuffle(&mut world);

    let (domain_tag, noise_std, shift) = match p.domain {
        Domain::Source => (0x5eed_0001_u64, p.source_noise, 0.0),
        Domain::Target => (0x5eed_0002_u64, p.target_noise, p.target_shift),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain_tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let jitter = Normal::new(0.0, p.jitter).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let samples = (0..p.n_samples)
        .map(|id| {
            let z = id % p.intermediate_classes;
            let clean: Vec<f64> = prototypes[z].iter().map(|&v| v + jitter.sample(&mut rng)).collect();
            let input = clean
                .iter()
                .zip(&shift_dir)
                .map(|(&c, &d)| c + shift * d + noise.sample(&mut rng))
                .collect();
            let label = match p.domain {
                Domain::Source => z % p.labels,
                Domain::Target => relabel[z] % p.labels,
            };
            Sample { id, input, clean, intermediate: z, label }
        })
        .collect::<Vec<_>>();
    let mut samples = samples;
    samples.shuffle(&mut rng);

    Ok(Dataset { dim: p.dim, labels: p.labels, intermediate_classes: p.intermediate_classes, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let p = SyntheticParams { n_samples: 50, ..Default::default() };
        assert_eq!(generate_synthetic(&p, 3).unwrap(), generate_synthetic(&p, 3).unwrap());
        assert_ne!(generate_synthetic(&p, 3).unwrap(), generate_synthetic(&p, 4).unwrap());
    }

    #[test]
    fn zero_samples_rejected() {
        let p = SyntheticParams { n_samples: 0, ..Default::default() };
        assert!(generate_synthetic(&p, 0).is_err());
        let p = SyntheticParams { dim: 0, ..Default::default() };
        assert!(generate_synthetic(&p, 0).is_err());
    }

    #[test]
    fn target_noise_mean_is_shifted() {
        let delta = 0.5;
        let mk = |domain| {
            let p = SyntheticParams { n_samples: 2000, target_shift: delta, domain, ..Default::default() };
            generate_synthetic(&p, 11).unwrap()
        };
        let noise_mean = |d: &Dataset| {
            let mut m = vec![0.0; d.dim];
            for s in &d.samples {
                for (k, (x, c)) in s.input.iter().zip(&s.clean).enumerate() {
                    m[k] += (x - c) / d.len() as f64;
                }
            }
            m
        };
        let (src, tgt) = (noise_mean(&mk(Domain::Source)), noise_mean(&mk(Domain::Target)));
        let shift: f64 = src.iter().zip(&tgt).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(shift >= delta, "shift {shift}");
        // Every coordinate moved by about delta.
        for (a, b) in src.iter().zip(&tgt) {
            assert!(((a - b).abs() - delta).abs() < 0.05, "{a} {b}");
        }
    }

    #[test]
    fn all_labels_present() {
        let p = SyntheticParams { n_samples: 800, labels: 8, domain: Domain::Target, ..Default::default() };
        let d = generate_synthetic(&p, 5).unwrap();
        let mut counts = [0usize; 8];
        for s in &d.samples {
            counts[s.label] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let d = generate_synthetic(&SyntheticParams { n_samples: 20, ..Default::default() }, 1).unwrap();
        d.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), d);
    }
}
