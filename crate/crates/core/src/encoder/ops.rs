//! Forward and backward rules for the encoder's building blocks.
//!
//! Matrices are `rows = frames`. Backward functions accumulate parameter
//! gradients into the supplied containers and return the input gradient.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{Linear, Norm, RunningStats};

pub const NORM_EPS: f64 = 1e-5;

pub fn linear(x: &ArrayView2<f64>, lin: &Linear) -> Array2<f64> {
    let mut y = x.dot(&lin.weight);
    y += &lin.bias;
    y
}

pub fn linear_backward(x: &ArrayView2<f64>, lin: &Linear, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
    grad.weight += &x.t().dot(dy);
    grad.bias += &dy.sum_axis(Axis(0));
    dy.dot(&lin.weight.t())
}

/// Normalized activations and reciprocal standard deviations, indexed along
/// the normalized axis.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Per-row normalization over features.
pub fn layer_norm(x: &Array2<f64>, norm: &Norm) -> (Array2<f64>, NormCache) {
    let width = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / width;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / width;
    let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
    let xhat = centered * &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * &norm.gamma + &norm.beta;
    (y, NormCache { xhat, inv_std })
}

pub fn layer_norm_backward(cache: &NormCache, norm: &Norm, dy: &Array2<f64>, grad: &mut Norm) -> Array2<f64> {
    grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    let dxhat = dy * &norm.gamma;
    let width = dy.ncols() as f64;
    let mean_d = dxhat.sum_axis(Axis(1)) / width;
    let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / width;
    let mut dx = dxhat;
    Zip::from(dx.rows_mut())
        .and(cache.xhat.rows())
        .and(&mean_d)
        .and(&mean_dx)
        .and(&cache.inv_std)
        .for_each(|mut row, xh, &md, &mdx, &is| {
            Zip::from(&mut row).and(&xh).for_each(|d, &h| *d = is * (*d - md - h * mdx));
        });
    dx
}

/// Batch statistics of one forward call, kept for the running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Biased (population) variance.
    pub var: Array1<f64>,
    pub count: usize,
}

/// Per-feature normalization over the frames of the input (training mode).
pub fn batch_norm_train(x: &Array2<f64>, norm: &Norm) -> (Array2<f64>, NormCache, BatchStats) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
    let xhat = centered * &inv_std;
    let y = &xhat * &norm.gamma + &norm.beta;
    let stats = BatchStats {
        mean,
        var,
        count: x.nrows(),
    };
    (y, NormCache { xhat, inv_std }, stats)
}

pub fn batch_norm_eval(x: &Array2<f64>, norm: &Norm, stats: &RunningStats) -> (Array2<f64>, NormCache) {
    let inv_std = stats.var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
    let xhat = (x - &stats.mean) * &inv_std;
    let y = &xhat * &norm.gamma + &norm.beta;
    (y, NormCache { xhat, inv_std })
}

pub fn batch_norm_train_backward(cache: &NormCache, norm: &Norm, dy: &Array2<f64>, grad: &mut Norm) -> Array2<f64> {
    grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    let n = dy.nrows() as f64;
    let dxhat = dy * &norm.gamma;
    let mean_d = dxhat.sum_axis(Axis(0)) / n;
    let mean_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0)) / n;
    (dxhat - &mean_d - &cache.xhat * &mean_dx) * &cache.inv_std
}

pub fn batch_norm_eval_backward(cache: &NormCache, norm: &Norm, dy: &Array2<f64>, grad: &mut Norm) -> Array2<f64> {
    grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    dy * &norm.gamma * &cache.inv_std
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// `dy` masked by `pre > 0`.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
}

pub fn gelu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(pre).for_each(|d, &v| {
        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
        *d *= 0.5 * (1.0 + t) + 0.5 * v * dt;
    });
    dx
}

/// In-place row softmax with max subtraction.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head scaled dot-product attention over already-projected q, k, v
/// (each T×M). Returns the concatenated head outputs and the per-head
/// attention probabilities.
pub fn attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (t, m) = q.dim();
    let dh = m / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((t, m));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        softmax_rows(&mut scores);
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (out, probs)
}

/// Gradients of [`attention`] with respect to q, k and v.
pub fn attention_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    probs: &[Array2<f64>],
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t, m) = q.dim();
    let heads = probs.len();
    let dh = m / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((t, m));
    let mut dk = Array2::zeros((t, m));
    let mut dv = Array2::zeros((t, m));
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_o = d_out.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&d_o));
        let dp = d_o.dot(&v.slice(cols).t());
        let row_dot = (&dp * p).sum_axis(Axis(1));
        let mut ds = dp - &row_dot.insert_axis(Axis(1));
        ds *= p;
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}
