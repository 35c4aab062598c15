//! Temporal view construction: padding, paired cropping with guaranteed
//! overlap, frame sampling and feature-space jitter.

use ndarray::Array2;
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::VideoRecord;
use crate::{Error, Result};

/// Rejection-sampling budget for [`crop_pair`] before the constructive fallback.
pub const CROP_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Random,
    Even,
}

impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Sampling::Random),
            "even" => Ok(Sampling::Even),
            other => Err(Error::config(format!("unknown sampling mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Frames per view (T).
    pub frames: usize,
    /// Maximum crop length as a multiple of `frames`.
    pub alpha: f64,
    /// Minimum overlap between the two crops, as a fraction of the shorter one.
    pub beta: f64,
    pub sampling: Sampling,
    pub jitter_std: f64,
    pub jitter_dropout: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            frames: 240,
            alpha: 1.5,
            beta: 0.2,
            sampling: Sampling::Random,
            jitter_std: 0.1,
            jitter_dropout: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::config("frames (T) must be at least 2"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 1.0) {
            return Err(Error::config(format!("alpha must be >= 1, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        if !(self.jitter_std.is_finite() && self.jitter_std >= 0.0) {
            return Err(Error::config("jitter_std must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.jitter_dropout) {
            return Err(Error::config(format!(
                "jitter_dropout must be in [0, 1), got {}",
                self.jitter_dropout
            )));
        }
        Ok(())
    }

    /// Longest admissible crop for a video of `num_frames` frames.
    pub fn max_crop(&self, num_frames: usize) -> usize {
        ((self.alpha * self.frames as f64).floor() as usize).min(num_frames)
    }
}

/// Half-open frame interval `[start, start + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

impl Window {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.start..self.end()).contains(&t)
    }

    pub fn overlap(&self, other: &Window) -> usize {
        self.end().min(other.end()).saturating_sub(self.start.max(other.start))
    }

    /// Overlap divided by the shorter length.
    pub fn overlap_fraction(&self, other: &Window) -> f64 {
        self.overlap(other) as f64 / self.len.min(other.len) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    /// T×D gathered (and jittered) features.
    pub features: Array2<f64>,
    /// Raw-video frame index of each row, strictly increasing.
    pub timestamps: Vec<usize>,
    pub window: Window,
    pub view_index: u8,
}

impl AugmentedView {
    pub fn timestamps_f64(&self) -> Vec<f64> {
        self.timestamps.iter().map(|&t| t as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view1: AugmentedView,
    pub view2: AugmentedView,
    pub source_id: String,
}

/// Appends zero frames until the record has at least `frames` frames. Padded
/// frames inherit the last real label.
pub fn pad_if_short(record: &VideoRecord, frames: usize) -> VideoRecord {
    let s = record.num_frames();
    if s >= frames {
        return record.clone();
    }
    let mut features = Array2::zeros((frames, record.feature_dim()));
    features.slice_mut(ndarray::s![..s, ..]).assign(&record.features);
    let phase_labels = record.phase_labels.as_ref().map(|labels| {
        let last = labels.last().copied().unwrap_or(0);
        let mut out = labels.clone();
        out.resize(frames, last);
        out
    });
    VideoRecord {
        id: record.id.clone(),
        features,
        phase_labels,
        action_label: record.action_label,
        padded_frames: record.padded_frames + (frames - s),
    }
}

fn random_window<R: rand::Rng + ?Sized>(num_frames: usize, min_len: usize, max_len: usize, rng: &mut R) -> Window {
    let len = rng.random_range(min_len..=max_len);
    let start = rng.random_range(0..=num_frames - len);
    Window { start, len }
}

/// Draws two crops with lengths in `[T, min(floor(alpha*T), S)]` overlapping
/// by at least `beta` of the shorter one.
pub fn crop_pair<R: rand::Rng + ?Sized>(
    num_frames: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Window, Window)> {
    let t = cfg.frames;
    if num_frames < t {
        return Err(Error::invalid(format!(
            "video has {num_frames} frames, crops need at least {t}"
        )));
    }
    let max_len = cfg.max_crop(num_frames);
    let mut last = None;
    for _ in 0..CROP_ATTEMPTS {
        let w1 = random_window(num_frames, t, max_len, rng);
        let w2 = random_window(num_frames, t, max_len, rng);
        if w1.overlap_fraction(&w2) >= cfg.beta {
            return Ok((w1, w2));
        }
        last = Some((w1, w2));
    }

    // Slide the second window toward the placement where the shorter crop
    // sits inside the longer one; overlap grows monotonically on the way.
    let (w1, mut w2) = last.expect("CROP_ATTEMPTS > 0");
    let target = if w2.len <= w1.len {
        w1.start
    } else {
        w1.start.min(num_frames - w2.len)
    };
    while w1.overlap_fraction(&w2) < cfg.beta {
        if w2.start == target {
            return Err(Error::Internal(format!(
                "cannot reach overlap {} for windows {w1:?} and {w2:?}",
                cfg.beta
            )));
        }
        if w2.start < target {
            w2.start += 1;
        } else {
            w2.start -= 1;
        }
    }
    Ok((w1, w2))
}

/// Picks `frames` strictly increasing timestamps from `window`.
pub fn sample_frames<R: rand::Rng + ?Sized>(
    window: Window,
    frames: usize,
    mode: Sampling,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if frames == 0 || window.len < frames {
        return Err(Error::invalid(format!(
            "cannot sample {frames} frames from a window of {}",
            window.len
        )));
    }
    let out = match mode {
        Sampling::Random => {
            let mut picks = index::sample(rng, window.len, frames).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| window.start + i).collect()
        }
        Sampling::Even if frames == 1 => vec![window.start],
        Sampling::Even => {
            let step = (window.len - 1) as f64 / (frames - 1) as f64;
            (0..frames)
                .map(|k| window.start + (k as f64 * step).round() as usize)
                .collect()
        }
    };
    Ok(out)
}

/// Adds Gaussian noise to every entry, then zeroes each feature dimension
/// with probability `jitter_dropout`. The dropout mask is shared by all
/// frames of the view.
pub fn feature_jitter<R: rand::Rng + ?Sized>(mut view: AugmentedView, cfg: &AugmentConfig, rng: &mut R) -> AugmentedView {
    if cfg.jitter_std > 0.0 {
        view.features.mapv_inplace(|x| {
            let n: f64 = StandardNormal.sample(rng);
            x + cfg.jitter_std * n
        });
    }
    if cfg.jitter_dropout > 0.0 {
        for mut col in view.features.columns_mut() {
            if rng.random_bool(cfg.jitter_dropout) {
                col.fill(0.0);
            }
        }
    }
    view
}

fn gather(record: &VideoRecord, timestamps: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((timestamps.len(), record.feature_dim()), |(i, j)| {
        f64::from(record.features[[timestamps[i], j]])
    })
}

/// Pad, crop two windows, sample frames in each, gather, then jitter each
/// view independently.
pub fn build_view_pair<R: rand::Rng + ?Sized>(record: &VideoRecord, cfg: &AugmentConfig, rng: &mut R) -> Result<ViewPair> {
    cfg.validate()?;
    record.validate()?;
    let padded = pad_if_short(record, cfg.frames);
    let (w1, w2) = crop_pair(padded.num_frames(), cfg, rng)?;
    let s1 = sample_frames(w1, cfg.frames, cfg.sampling, rng)?;
    let s2 = sample_frames(w2, cfg.frames, cfg.sampling, rng)?;
    let view1 = AugmentedView {
        features: gather(&padded, &s1),
        timestamps: s1,
        window: w1,
        view_index: 1,
    };
    let view2 = AugmentedView {
        features: gather(&padded, &s2),
        timestamps: s2,
        window: w2,
        view_index: 2,
    };
    Ok(ViewPair {
        view1: feature_jitter(view1, cfg, rng),
        view2: feature_jitter(view2, cfg, rng),
        source_id: record.id.clone(),
    })
}
