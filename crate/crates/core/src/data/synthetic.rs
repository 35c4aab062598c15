//! Labeled synthetic long videos.
//!
//! Every phase owns a prototype vector shared by all videos. Within a phase,
//! frames move linearly from the phase's prototype toward the next phase's
//! prototype as the phase progresses; the final phase stays on its
//! prototype. Gaussian noise is added per entry.

use ndarray::{Array1, Array2};
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{split_train_test, DatasetSplit, VideoRecord};
use crate::rng::Rng;
use crate::{Error, Result};

pub const TRAIN_RATIO: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub num_phases: usize,
    pub feature_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_std: f64,
    /// Derived from the run seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_videos: 63,
            num_phases: 5,
            feature_dim: 32,
            min_len: 48,
            max_len: 80,
            noise_std: 2.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos < 2 {
            return Err(Error::config("num_videos must be at least 2"));
        }
        if self.num_phases == 0 || self.feature_dim == 0 {
            return Err(Error::config("num_phases and feature_dim must be at least 1"));
        }
        if self.min_len < self.num_phases {
            return Err(Error::config(format!(
                "min_len {} is shorter than num_phases {}",
                self.min_len, self.num_phases
            )));
        }
        if self.max_len < self.min_len {
            return Err(Error::config("max_len must be >= min_len"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Splits `len` frames into `phases` contiguous segments of at least one
/// frame each, with random relative lengths. Returns segment start indices
/// followed by `len`.
fn phase_bounds(len: usize, phases: usize, rng: &mut Rng) -> Vec<usize> {
    let weights: Vec<f64> = (0..phases).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = weights.iter().sum();
    let extra = (len - phases) as f64;
    let mut bounds = Vec::with_capacity(phases + 1);
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        bounds.push(k + (extra * acc / total).round() as usize);
        acc += w;
    }
    bounds.push(len);
    bounds
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut rng = Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let prototypes: Vec<Array1<f64>> = (0..spec.num_phases)
        .map(|_| Array1::from_shape_fn(d, |_| StandardNormal.sample(&mut rng)))
        .collect();

    let mut records = Vec::with_capacity(spec.num_videos);
    for v in 0..spec.num_videos {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let bounds = phase_bounds(len, spec.num_phases, &mut rng);
        let mut features = Array2::<f32>::zeros((len, d));
        let mut labels = Vec::with_capacity(len);
        for p in 0..spec.num_phases {
            let (start, end) = (bounds[p], bounds[p + 1]);
            let seg_len = (end - start) as f64;
            for t in start..end {
                let progress = if p + 1 < spec.num_phases {
                    (t - start) as f64 / seg_len
                } else {
                    0.0
                };
                let next = &prototypes[(p + 1).min(spec.num_phases - 1)];
                let mut row = features.row_mut(t);
                for j in 0..d {
                    let base = prototypes[p][j] + progress * (next[j] - prototypes[p][j]);
                    let noise: f64 = if spec.noise_std > 0.0 {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        spec.noise_std * n
                    } else {
                        0.0
                    };
                    row[j] = (base + noise) as f32;
                }
                labels.push(p);
            }
        }
        records.push(
            VideoRecord::new(format!("vid{v:04}"), features)
                .with_labels(labels)
                .with_action(0),
        );
    }
    let split_seed: u64 = rng.random();
    let mut split = split_train_test(records, TRAIN_RATIO, split_seed)?;
    split.num_phases = spec.num_phases;
    Ok(split)
}
