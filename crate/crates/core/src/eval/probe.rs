use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::EmbeddedVideo;
use crate::{Error, Result};

/// Full-batch gradient descent settings shared by both probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 0.1 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("probe lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Affine whitening with train statistics: `(x - mean) L^-T` where
/// `L L^T` is the train covariance plus a small ridge.
struct Whitener {
    mean: Array1<f64>,
    inv_chol_t: Array2<f64>,
}

/// Ridge added to the covariance diagonal, relative to its mean variance.
const WHITEN_RIDGE: f64 = 1e-6;

impl Whitener {
    fn fit(x: &Array2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let xc = x - &mean;
        let d = xc.ncols();
        let mut cov = xc.t().dot(&xc) / xc.nrows() as f64;
        let ridge = WHITEN_RIDGE * (cov.diag().sum() / d as f64) + 1e-12;
        cov.diag_mut().mapv_inplace(|v| v + ridge);
        let inv = lower_inverse(&cholesky(&cov));
        Self {
            mean,
            inv_chol_t: inv.reversed_axes(),
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean).dot(&self.inv_chol_t)
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
fn cholesky(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let dot: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            if i == j {
                l[[i, i]] = (a[[i, i]] - dot).max(f64::MIN_POSITIVE).sqrt();
            } else {
                l[[i, j]] = (a[[i, j]] - dot) / l[[j, j]];
            }
        }
    }
    l
}

fn lower_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    for c in 0..n {
        inv[[c, c]] = 1.0 / l[[c, c]];
        for i in c + 1..n {
            let dot: f64 = (c..i).map(|k| l[[i, k]] * inv[[k, c]]).sum();
            inv[[i, c]] = -dot / l[[i, i]];
        }
    }
    inv
}

/// Stacks the non-padding frames of `videos` with their phase labels.
pub fn stack_frames(videos: &[EmbeddedVideo]) -> Result<(Array2<f64>, Vec<usize>)> {
    if videos.is_empty() {
        return Err(Error::invalid("no videos to stack"));
    }
    let views: Vec<_> = videos.iter().map(|v| v.real()).collect();
    let x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?;
    let mut y = Vec::with_capacity(x.nrows());
    for v in videos {
        y.extend_from_slice(v.labels_or_err()?);
    }
    Ok((x, y))
}

fn check_rows(x: &Array2<f64>, n: usize, what: &str) -> Result<()> {
    if x.nrows() != n || x.nrows() == 0 {
        return Err(Error::shape(format!("{what}: {} rows for {n} targets", x.nrows())));
    }
    Ok(())
}

/// Accuracy of a softmax-regression probe trained on whitened `train_x` and applied to `test_x`.
pub fn linear_probe_classification(
    train_x: &Array2<f64>,
    train_y: &[usize],
    test_x: &Array2<f64>,
    test_y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_rows(train_x, train_y.len(), "train")?;
    check_rows(test_x, test_y.len(), "test")?;
    if train_x.ncols() != test_x.ncols() {
        return Err(Error::shape("train and test embedding widths differ"));
    }
    if let Some(&bad) = train_y.iter().chain(test_y).find(|&&c| c >= num_classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
    }
    if train_y.iter().all(|&c| c == train_y[0]) {
        return Err(Error::invalid("probe training data has a single class"));
    }

    let scaler = Whitener::fit(train_x);
    let xc = scaler.apply(train_x);
    let n = xc.nrows() as f64;
    let mut weight = Array2::<f64>::zeros((xc.ncols(), num_classes));
    let mut bias = Array1::<f64>::zeros(num_classes);
    for _ in 0..cfg.steps {
        let mut probs = xc.dot(&weight) + &bias;
        for (mut row, &label) in probs.rows_mut().into_iter().zip(train_y) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
            row[label] -= 1.0;
        }
        probs /= n;
        weight.scaled_add(-cfg.lr, &xc.t().dot(&probs));
        bias.scaled_add(-cfg.lr, &probs.sum_axis(Axis(0)));
    }

    let logits = scaler.apply(test_x).dot(&weight) + &bias;
    let correct = logits
        .rows()
        .into_iter()
        .zip(test_y)
        .filter(|(row, &label)| argmax(row.iter().copied()) == label)
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

/// First index of the maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Per-frame distances to the phase boundaries, normalized by video length.
///
/// Boundary `k` for `k = 0..=num_phases` is the number of frames whose label
/// is below `k`, so the video start and end are included. Row `t` holds
/// `(t - b_k) / S`.
pub fn progression_targets(labels: &[usize], num_phases: usize) -> Result<Array2<f64>> {
    if labels.is_empty() {
        return Err(Error::invalid("video has no frames"));
    }
    let s = labels.len() as f64;
    let bounds: Vec<f64> = (0..=num_phases)
        .map(|k| labels.iter().filter(|&&l| l < k).count() as f64)
        .collect();
    Ok(Array2::from_shape_fn((labels.len(), bounds.len()), |(t, k)| (t as f64 - bounds[k]) / s))
}

/// `1 - SS_res / SS_tot` per target column; `None` for constant columns.
pub fn r_squared(pred: &Array2<f64>, target: &Array2<f64>) -> Vec<Option<f64>> {
    target
        .columns()
        .into_iter()
        .zip(pred.columns())
        .map(|(y, p)| {
            let mean = y.mean().unwrap_or(0.0);
            let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
            let ss_res: f64 = y.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
            (ss_tot > 1e-12 * y.len() as f64).then(|| 1.0 - ss_res / ss_tot)
        })
        .collect()
}

/// Average test R^2 of an affine least-squares regressor fit by gradient
/// descent on whitened `train_x`.
pub fn linear_probe_progression(
    train_x: &Array2<f64>,
    train_y: &Array2<f64>,
    test_x: &Array2<f64>,
    test_y: &Array2<f64>,
    cfg: &ProbeConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_rows(train_x, train_y.nrows(), "train")?;
    check_rows(test_x, test_y.nrows(), "test")?;
    if train_y.ncols() != test_y.ncols() || train_x.ncols() != test_x.ncols() {
        return Err(Error::shape("train and test widths differ"));
    }
    let scaler = Whitener::fit(train_x);
    let xc = scaler.apply(train_x);
    let n = xc.nrows() as f64;
    let mut weight = Array2::<f64>::zeros((xc.ncols(), train_y.ncols()));
    let mut bias = Array1::<f64>::zeros(train_y.ncols());
    for _ in 0..cfg.steps {
        let mut resid = xc.dot(&weight) + &bias - train_y;
        resid /= n;
        weight.scaled_add(-cfg.lr, &xc.t().dot(&resid));
        bias.scaled_add(-cfg.lr, &resid.sum_axis(Axis(0)));
    }
    let pred = scaler.apply(test_x).dot(&weight) + &bias;
    let scores = r_squared(&pred, test_y);
    let kept: Vec<f64> = scores
        .iter()
        .enumerate()
        .filter_map(|(k, s)| {
            if s.is_none() {
                log::warn!("progression target {k} is constant on the test set; skipped");
            }
            *s
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::invalid("every progression target is constant"));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}
