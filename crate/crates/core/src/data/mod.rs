//! Feature-sequence videos: the in-memory record, train/test splits, the
//! synthetic generator and on-disk storage.

mod fseq;
mod synthetic;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

pub use fseq::{decode_fseq, encode_fseq, load_features, save_features, sidecar_path, FSEQ_MAGIC, FSEQ_VERSION};
pub use synthetic::{generate_synthetic, SyntheticSpec};

/// One video as a sequence of S frame feature vectors of width D.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    /// S×D, row-major, one row per frame.
    pub features: Array2<f32>,
    /// One phase label per frame, when annotated.
    pub phase_labels: Option<Vec<usize>>,
    pub action_label: Option<u32>,
    /// Number of trailing zero frames appended by padding. Zero for real data.
    pub padded_frames: usize,
}

impl VideoRecord {
    pub fn new(id: impl Into<String>, features: Array2<f32>) -> Self {
        Self {
            id: id.into(),
            features,
            phase_labels: None,
            action_label: None,
            padded_frames: 0,
        }
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Self {
        self.phase_labels = Some(labels);
        self
    }

    pub fn with_action(mut self, action: u32) -> Self {
        self.action_label = Some(action);
        self
    }

    pub fn num_frames(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Frames that carry real content (everything before the padded tail).
    pub fn real_frames(&self) -> usize {
        self.num_frames() - self.padded_frames
    }

    pub fn validate(&self) -> Result<()> {
        let (s, d) = self.features.dim();
        if s == 0 {
            return Err(Error::invalid(format!("video `{}` has no frames", self.id)));
        }
        if d == 0 {
            return Err(Error::invalid(format!("video `{}` has zero feature width", self.id)));
        }
        if let Some((idx, _)) = self.features.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "video `{}` has a non-finite feature at frame {}",
                self.id,
                idx / d
            )));
        }
        if let Some(labels) = &self.phase_labels {
            if labels.len() != s {
                return Err(Error::invalid(format!(
                    "video `{}` has {} phase labels for {} frames",
                    self.id,
                    labels.len(),
                    s
                )));
            }
        }
        if self.padded_frames >= s {
            return Err(Error::invalid(format!("video `{}` is entirely padding", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<VideoRecord>,
    pub test: Vec<VideoRecord>,
    pub num_phases: usize,
    pub feature_dim: usize,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for rec in self.train.iter().chain(&self.test) {
            rec.validate()?;
            if rec.feature_dim() != self.feature_dim {
                return Err(Error::invalid(format!(
                    "video `{}` has width {}, dataset width is {}",
                    rec.id,
                    rec.feature_dim(),
                    self.feature_dim
                )));
            }
            if !ids.insert(rec.id.as_str()) {
                return Err(Error::invalid(format!("duplicate video id `{}`", rec.id)));
            }
        }
        Ok(())
    }

    pub fn find(&self, id: &str) -> Option<&VideoRecord> {
        self.train.iter().chain(&self.test).find(|r| r.id == id)
    }
}

/// Deterministic whole-video split. The train side gets `floor(ratio * n)`
/// records, clamped so that both sides are non-empty.
pub fn split_train_test(records: Vec<VideoRecord>, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    if records.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 records to split, got {}",
            records.len()
        )));
    }
    let feature_dim = records[0].feature_dim();
    let num_phases = records
        .iter()
        .filter_map(|r| r.phase_labels.as_ref())
        .flat_map(|l| l.iter().copied())
        .max()
        .map_or(0, |m| m + 1);

    let n = records.len();
    let n_train = ((ratio * n as f64 + 1e-9).floor() as usize).clamp(1, n - 1);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Rng::seed_from_u64(seed));

    let mut slots: Vec<Option<VideoRecord>> = records.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("each index visited once");
    let train: Vec<_> = order[..n_train].iter().map(|&i| take(i)).collect();
    let test: Vec<_> = order[n_train..].iter().map(|&i| take(i)).collect();

    let split = DatasetSplit {
        train,
        test,
        num_phases,
        feature_dim,
    };
    split.validate()?;
    Ok(split)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    num_phases: usize,
    feature_dim: usize,
    train: Vec<String>,
    test: Vec<String>,
}

const MANIFEST: &str = "dataset.json";

/// Writes `dir/dataset.json` plus `dir/{train,test}/<id>.fseq` (+ sidecars).
pub fn save_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    for (sub, recs) in [("train", &split.train), ("test", &split.test)] {
        let sub_dir = dir.join(sub);
        fs::create_dir_all(&sub_dir).map_err(|e| Error::io(&sub_dir, e))?;
        for rec in recs.iter() {
            save_features(rec, &sub_dir.join(format!("{}.fseq", rec.id)))?;
        }
    }
    let manifest = Manifest {
        num_phases: split.num_phases,
        feature_dim: split.feature_dim,
        train: split.train.iter().map(|r| r.id.clone()).collect(),
        test: split.test.iter().map(|r| r.id.clone()).collect(),
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    let load = |sub: &str, ids: &[String]| -> Result<Vec<VideoRecord>> {
        ids.iter()
            .map(|id| load_features(&dir.join(sub).join(format!("{id}.fseq"))))
            .collect()
    };
    let split = DatasetSplit {
        train: load("train", &manifest.train)?,
        test: load("test", &manifest.test)?,
        num_phases: manifest.num_phases,
        feature_dim: manifest.feature_dim,
    };
    split.validate()?;
    Ok(split)
}
