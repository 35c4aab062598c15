//! Evaluation of frozen frame-wise representations: linear probes for phase
//! classification and progression, Kendall's tau, AP@K retrieval, DTW
//! alignment and similarity-matrix export.

mod align;
mod probe;
mod rank;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, VideoRecord};
use crate::encoder::{self, EncoderConfig, EncoderParams};
use crate::{Error, Result};

pub use crate::loss::SimilarityMatrix;
pub use align::{dtw_align, path_csv, similarity_csv, similarity_matrix, similarity_pgm, AlignmentPath};
pub use probe::{
    linear_probe_classification, linear_probe_progression, progression_targets, r_squared, stack_frames, ProbeConfig,
};
pub use rank::{
    ap_at_k, dataset_ap_at_k, dataset_kendalls_tau, kendalls_tau, nearest_neighbors, retrieve_frames, FrameMatch,
};

/// Retrieval depths reported by [`evaluate`].
pub const AP_DEPTHS: [usize; 3] = [5, 10, 15];

/// L2-normalized representations of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedVideo {
    pub id: String,
    /// One row per frame, padding included.
    pub embeddings: Array2<f64>,
    pub phase_labels: Option<Vec<usize>>,
    pub action_label: Option<u32>,
    pub real_frames: usize,
}

impl EmbeddedVideo {
    /// Construct from raw embeddings; rows are normalized here.
    pub fn new(id: impl Into<String>, embeddings: Array2<f64>) -> Result<Self> {
        let id = id.into();
        let embeddings = normalize_rows(embeddings, &id)?;
        let real_frames = embeddings.nrows();
        Ok(Self {
            id,
            embeddings,
            phase_labels: None,
            action_label: None,
            real_frames,
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Self {
        self.phase_labels = Some(labels);
        self
    }

    pub fn with_action(mut self, action: Option<u32>) -> Self {
        self.action_label = action;
        self
    }

    /// Embeddings of the non-padding frames.
    pub fn real(&self) -> ArrayView2<'_, f64> {
        self.embeddings.slice(ndarray::s![..self.real_frames, ..])
    }

    pub fn real_labels(&self) -> Option<&[usize]> {
        self.phase_labels.as_deref().map(|l| &l[..self.real_frames])
    }

    fn labels_or_err(&self) -> Result<&[usize]> {
        self.real_labels()
            .ok_or_else(|| Error::invalid(format!("video `{}` has no phase labels", self.id)))
    }
}

fn normalize_rows(mut m: Array2<f64>, id: &str) -> Result<Array2<f64>> {
    for (i, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::numeric(format!("video `{id}` frame {i}: representation norm is {norm}")));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(m)
}

/// Encodes every record in one evaluation-mode pass over its full length and
/// L2-normalizes the rows of `H`.
pub fn embed_dataset(params: &EncoderParams, cfg: &EncoderConfig, records: &[VideoRecord]) -> Result<Vec<EmbeddedVideo>> {
    records
        .iter()
        .map(|rec| {
            let features = rec.features.mapv(f64::from);
            let h = encoder::infer(params, cfg, &features)?.h;
            let mut video = EmbeddedVideo::new(rec.id.clone(), h)?.with_action(rec.action_label);
            video.phase_labels = rec.phase_labels.clone();
            video.real_frames = rec.real_frames();
            Ok(video)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classification_acc: f64,
    pub progression_r2: f64,
    pub kendalls_tau: f64,
    pub ap_at_k: BTreeMap<usize, f64>,
    /// Effective run configuration, echoed for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.classification_acc) {
            return Err(Error::internal(format!("accuracy {} outside [0, 1]", self.classification_acc)));
        }
        if !(self.progression_r2 <= 1.0) {
            return Err(Error::internal(format!("R^2 {} above 1", self.progression_r2)));
        }
        if !(-1.0..=1.0).contains(&self.kendalls_tau) {
            return Err(Error::internal(format!("tau {} outside [-1, 1]", self.kendalls_tau)));
        }
        if let Some((k, v)) = self.ap_at_k.iter().find(|(_, v)| !in_unit(**v)) {
            return Err(Error::internal(format!("AP@{k} = {v} outside [0, 1]")));
        }
        Ok(())
    }
}

/// All four metrics from already embedded train and test videos.
pub fn evaluate_embeddings(
    train: &[EmbeddedVideo],
    test: &[EmbeddedVideo],
    num_phases: usize,
    probe: &ProbeConfig,
) -> Result<EvalReport> {
    let (train_x, train_y) = stack_frames(train)?;
    let (test_x, test_y) = stack_frames(test)?;
    let classification_acc = linear_probe_classification(&train_x, &train_y, &test_x, &test_y, num_phases, probe)?;

    let targets = |videos: &[EmbeddedVideo]| -> Result<Array2<f64>> {
        let parts: Vec<Array2<f64>> = videos
            .iter()
            .map(|v| progression_targets(v.labels_or_err()?, num_phases))
            .collect::<Result<_>>()?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
    };
    let progression_r2 = linear_probe_progression(&train_x, &targets(train)?, &test_x, &targets(test)?, probe)?;

    let report = EvalReport {
        classification_acc,
        progression_r2,
        kendalls_tau: dataset_kendalls_tau(test)?,
        ap_at_k: dataset_ap_at_k(test, &AP_DEPTHS)?,
        config: None,
    };
    report.validate()?;
    Ok(report)
}

/// Embeds a dataset split with frozen parameters and computes every metric.
pub fn evaluate(params: &EncoderParams, cfg: &EncoderConfig, split: &DatasetSplit, probe: &ProbeConfig) -> Result<EvalReport> {
    let train = embed_dataset(params, cfg, &split.train)?;
    let test = embed_dataset(params, cfg, &split.test)?;
    evaluate_embeddings(&train, &test, split.num_phases, probe)
}
