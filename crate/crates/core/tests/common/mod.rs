//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use seqcon::encoder::{self, EncoderConfig, EncoderParams, Mode};
use seqcon::loss::{self, SclConfig};
use seqcon::rng::Rng;

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn randn(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Sorted distinct integer timestamps below `limit`.
pub fn timestamps(len: usize, limit: usize, rng: &mut Rng) -> Vec<f64> {
    let mut picked = rand::seq::index::sample(rng, limit, len).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|t| t as f64).collect()
}

pub fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn row(m: &Array2<f64>, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

/// Minimal DTW cost and path by enumerating every monotone path. Costs are
/// summed along the path from (0, 0).
pub fn dtw_by_enumeration(sim: &Array2<f64>) -> (f64, Vec<(usize, usize)>) {
    let (rows, cols) = sim.dim();
    let mut best = (f64::INFINITY, Vec::new());
    let mut path = vec![(0, 0)];
    fn walk(sim: &Array2<f64>, path: &mut Vec<(usize, usize)>, cost: f64, best: &mut (f64, Vec<(usize, usize)>)) {
        let (rows, cols) = sim.dim();
        let (i, j) = *path.last().unwrap();
        if (i, j) == (rows - 1, cols - 1) {
            if cost < best.0 {
                *best = (cost, path.clone());
            }
            return;
        }
        for (di, dj) in [(1, 1), (1, 0), (0, 1)] {
            let (ni, nj) = (i + di, j + dj);
            if ni < rows && nj < cols {
                path.push((ni, nj));
                walk(sim, path, cost + (1.0 - sim[[ni, nj]]), best);
                path.pop();
            }
        }
    }
    walk(sim, &mut path, 1.0 - sim[[0, 0]], &mut best);
    debug_assert!(rows > 0 && cols > 0);
    best
}

/// Kendall's tau by the sign-product definition over all ordered pairs.
pub fn tau_by_pairs(emb1: &Array2<f64>, emb2: &Array2<f64>) -> f64 {
    let nn: Vec<usize> = (0..emb1.nrows())
        .map(|u| {
            let q = row(emb1, u);
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for v in 0..emb2.nrows() {
                let s = naive_cosine(&q, &row(emb2, v));
                if s > best_sim {
                    best = v;
                    best_sim = s;
                }
            }
            best
        })
        .collect();
    let n = emb1.nrows();
    let mut total = 0i64;
    for u in 0..n {
        for v in 0..n {
            if u != v {
                let a = (u as i64 - v as i64).signum();
                let b = (nn[u] as i64 - nn[v] as i64).signum();
                total += a * b;
            }
        }
    }
    total as f64 / (n * (n - 1)) as f64
}

/// AP@K by ranking each candidate by how many others beat it.
pub fn ap_by_rank_counting(query: &[f64], query_label: usize, cands: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
    let scores: Vec<f64> = (0..cands.nrows()).map(|i| naive_cosine(query, &row(cands, i))).collect();
    let mut hits = 0;
    for i in 0..scores.len() {
        let rank = (0..scores.len())
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count();
        if rank < k && labels[i] == query_label {
            hits += 1;
        }
    }
    hits as f64 / k as f64
}

/// Duplicates random rows of `m` in place so nearest-neighbor ties occur.
pub fn duplicate_rows(m: &mut Array2<f64>, rng: &mut Rng) {
    if m.nrows() < 2 {
        return;
    }
    for _ in 0..m.nrows() / 2 {
        let src = rng.random_range(0..m.nrows());
        let dst = rng.random_range(0..m.nrows());
        let copy = m.row(src).to_owned();
        m.row_mut(dst).assign(&copy);
    }
}

pub struct GradCheck {
    pub max_rel: f64,
    pub entries: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// One random instance of the full pipeline (two views through a 1-layer
/// encoder in training mode, then SCL), checking every parameter and both
/// inputs against central differences.
pub fn scl_encoder_gradient_check(seed: u64, h: f64) -> GradCheck {
    let mut r = rng(seed);
    let input_dim = r.random_range(2..=16);
    let (model_dim, heads) = [(8, 2), (8, 4), (16, 2), (16, 4)][r.random_range(0..4)];
    let cfg = EncoderConfig {
        input_dim,
        model_dim,
        num_layers: 1,
        num_heads: heads,
        ffn_dim: 2 * model_dim,
        out_dim: r.random_range(2..=8),
        proj_hidden: model_dim,
        proj_out: r.random_range(2..=8),
        dropout: if seed % 2 == 0 { 0.0 } else { 0.2 },
    };
    let (t1, t2) = (r.random_range(3..=8), r.random_range(3..=8));
    let x1 = randn(t1, input_dim, &mut r);
    let x2 = randn(t2, input_dim, &mut r);
    let s1 = timestamps(t1, 3 * t1.max(t2), &mut r);
    let s2 = timestamps(t2, 3 * t1.max(t2), &mut r);
    let scl = SclConfig { sigma2: 10.0, tau: 0.1 };
    let modes = [Mode::Train { dropout_seed: seed }, Mode::Train { dropout_seed: seed + 1 }];

    let mut params = EncoderParams::init(&cfg, seed);
    for (name, mut t) in params.tensors_mut() {
        if name.ends_with("gamma") || name.ends_with("beta") {
            let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
            t.mapv_inplace(|_| {
                let n: f64 = StandardNormal.sample(&mut r);
                base + 0.3 * n
            });
        }
    }

    let loss_of = |p: &EncoderParams, a: &Array2<f64>, b: &Array2<f64>| -> f64 {
        let z1 = encoder::forward(p, &cfg, a, modes[0]).unwrap().output.z;
        let z2 = encoder::forward(p, &cfg, b, modes[1]).unwrap().output.z;
        loss::scl_loss(&z1, &z2, &s1, &s2, &scl).unwrap().loss
    };

    let p1 = encoder::forward(&params, &cfg, &x1, modes[0]).unwrap();
    let p2 = encoder::forward(&params, &cfg, &x2, modes[1]).unwrap();
    let out = loss::scl_loss(&p1.output.z, &p2.output.z, &s1, &s2, &scl).unwrap();
    let g1 = encoder::backward(&p1, &params, &cfg, &out.grad_z1, None).unwrap();
    let g2 = encoder::backward(&p2, &params, &cfg, &out.grad_z2, None).unwrap();
    let mut grads = g1.params.clone();
    grads.add_scaled(&g2.params, 1.0);

    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let len = params.tensors()[ti].1.len();
        for k in 0..len {
            let orig = params.tensors()[ti].1.as_slice_memory_order().unwrap()[k];
            let set = |p: &mut EncoderParams, v: f64| {
                p.tensors_mut()[ti].1.as_slice_memory_order_mut().unwrap()[k] = v;
            };
            set(&mut params, orig + h);
            let up = loss_of(&params, &x1, &x2);
            set(&mut params, orig - h);
            let down = loss_of(&params, &x1, &x2);
            set(&mut params, orig);
            let analytic = grads.tensors()[ti].1.as_slice_memory_order().unwrap()[k];
            worst = worst.max(rel_err(analytic, (up - down) / (2.0 * h)));
            entries += 1;
        }
    }
    for (which, x, gx) in [(0, &x1, &g1.input), (1, &x2, &g2.input)] {
        let mut xp = x.clone();
        for idx in 0..xp.len() {
            let orig = xp.as_slice().unwrap()[idx];
            let eval_at = |xp: &Array2<f64>| if which == 0 { loss_of(&params, xp, &x2) } else { loss_of(&params, &x1, xp) };
            xp.as_slice_mut().unwrap()[idx] = orig + h;
            let up = eval_at(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let down = eval_at(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            worst = worst.max(rel_err(gx.as_slice().unwrap()[idx], (up - down) / (2.0 * h)));
            entries += 1;
        }
    }
    GradCheck { max_rel: worst, entries }
}

/// Softmax of `row / tau`, computed directly.
pub fn softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - max) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Gaussian prior row for timestamp `si` against `s2`, computed directly.
pub fn prior_row(si: f64, s2: &[f64], sigma2: f64) -> Vec<f64> {
    let e: Vec<f64> = s2.iter().map(|&sj| (-(si - sj).powi(2) / (2.0 * sigma2)).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Writes a tiny run config under `dir` and returns its path.
pub fn small_run_config(dir: &std::path::Path, epochs: usize) -> std::path::PathBuf {
    let mut cfg = seqcon::config::RunConfig::bundled();
    cfg.synthetic.num_videos = 6;
    cfg.synthetic.num_phases = 3;
    cfg.synthetic.feature_dim = 6;
    cfg.synthetic.min_len = 20;
    cfg.synthetic.max_len = 28;
    cfg.augment.frames = 16;
    cfg.encoder = EncoderConfig {
        input_dim: 6,
        model_dim: 16,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 32,
        out_dim: 8,
        proj_hidden: 16,
        proj_out: 8,
        dropout: 0.0,
    };
    cfg.optim.epochs = epochs;
    cfg.optim.checkpoint_every = 1;
    cfg.probe.steps = 50;
    cfg.paths = seqcon::config::Paths::under(dir.join("run"));
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

/// Runs the CLI in-process and returns (exit code, stdout, stderr).
pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = seqcon::cli::run(std::iter::once("seqcon").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}
