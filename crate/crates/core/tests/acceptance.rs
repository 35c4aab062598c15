//! Acceptance suite. Runs every criterion in order and prints one
//! `criterion N PASS|FAIL: ...` line each; exits non-zero on any failure.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use ndarray::{Array2, ArrayView1};
use rand::Rng as _;
use seqcon::augment::{crop_pair, AugmentConfig};
use seqcon::encoder::{decode_checkpoint, encode_checkpoint, EncoderConfig};
use seqcon::eval::{ap_at_k, dtw_align, kendalls_tau, SimilarityMatrix};
use seqcon::loss::{gaussian_weights, scl_frame_losses, scl_loss, SclConfig};
use seqcon::data::{decode_fseq, encode_fseq};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok { Ok(detail) } else { Err(detail) }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for seed in 0..20 {
        let g = scl_encoder_gradient_check(1000 + seed, 1e-5);
        worst = worst.max(g.max_rel);
        entries += g.entries;
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("20 instances, {entries} entries, max rel err {worst:.2e} (< 1e-4), {:.1}s (< 60s)", elapsed.as_secs_f64()),
    )
}

fn loss_identities() -> Outcome {
    let mut r = rng(2);
    let mut uniform_err: f64 = 0.0;
    for _ in 0..100 {
        let t = r.random_range(1..=32);
        let v = randn(1, 5, &mut r);
        let z = Array2::from_shape_fn((t, 5), |(_, j)| v[[0, j]]);
        let s1 = timestamps(t, 4 * t, &mut r);
        let s2 = timestamps(t, 4 * t, &mut r);
        let out = scl_loss(&z, &z, &s1, &s2, &SclConfig::default()).map_err(|e| e.to_string())?;
        uniform_err = uniform_err.max((out.loss - 2.0 * (t as f64).ln()).abs());
    }
    let (mut kl_err, mut kl_min) = (0.0f64, f64::INFINITY);
    for _ in 0..1000 {
        let (t1, t2, d) = (r.random_range(1..=12), r.random_range(1..=12), r.random_range(1..=8));
        let z1 = randn(t1, d, &mut r);
        let z2 = randn(t2, d, &mut r);
        let s1 = timestamps(t1, 40, &mut r);
        let s2 = timestamps(t2, 40, &mut r);
        let cfg = SclConfig { sigma2: [1.0, 10.0, 25.0][r.random_range(0..3)], tau: r.random_range(0.05..1.0) };
        let losses = scl_frame_losses(&z1, &z2, &s1, &s2, &cfg).map_err(|e| e.to_string())?;
        for (i, li) in losses.iter().enumerate() {
            let w = prior_row(s1[i], &s2, cfg.sigma2);
            let sims: Vec<f64> = (0..t2).map(|j| naive_cosine(&z1.row(i).to_vec(), &z2.row(j).to_vec())).collect();
            let divergence = kl(&w, &softmax(&sims, cfg.tau));
            kl_err = kl_err.max((li - entropy(&w) - divergence).abs());
            kl_min = kl_min.min(li - entropy(&w));
        }
    }
    let mut sum_err: f64 = 0.0;
    for sigma2 in [1.0, 10.0, 25.0] {
        for _ in 0..100 {
            let s1 = timestamps(r.random_range(1..=30), 200, &mut r);
            let s2 = timestamps(r.random_range(1..=30), 200, &mut r);
            let w = gaussian_weights(&s1, &s2, sigma2).map_err(|e| e.to_string())?.0;
            for row in w.rows() {
                sum_err = sum_err.max((row.sum() - 1.0).abs());
            }
        }
    }
    check(
        uniform_err < 1e-9 && kl_err < 1e-9 && kl_min >= -1e-9 && sum_err < 1e-9,
        format!(
            "|L-2logT| {uniform_err:.1e}, |L-H-KL| {kl_err:.1e} over 1000 instances, min(L-H) {kl_min:.3e}, |sum w-1| {sum_err:.1e}"
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng(3);
    let mut mismatches = Vec::new();
    for trial in 0..200 {
        let (rows, cols) = (r.random_range(1..=6), r.random_range(1..=6));
        let sim = Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0));
        let (path, cost) = dtw_align(&SimilarityMatrix(sim.clone())).map_err(|e| e.to_string())?;
        let (best, best_path) = dtw_by_enumeration(&sim);
        if cost != best || path.pairs() != best_path.as_slice() {
            mismatches.push(format!("dtw trial {trial}"));
        }
    }
    for trial in 0..200 {
        let d = r.random_range(1..=4);
        let e1 = randn(r.random_range(2..=7), d, &mut r);
        let mut e2 = randn(r.random_range(1..=7), d, &mut r);
        duplicate_rows(&mut e2, &mut r);
        if kendalls_tau(e1.view(), e2.view()).map_err(|e| e.to_string())? != tau_by_pairs(&e1, &e2) {
            mismatches.push(format!("tau trial {trial}"));
        }
    }
    for trial in 0..200 {
        let d = r.random_range(1..=4);
        let n = r.random_range(1..=30);
        let mut cands = randn(n, d, &mut r);
        duplicate_rows(&mut cands, &mut r);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..4)).collect();
        let q = randn(1, d, &mut r).row(0).to_vec();
        let (label, k) = (r.random_range(0..4), r.random_range(1..=n));
        let got = ap_at_k(ArrayView1::from(&q), label, cands.view(), &labels, k).map_err(|e| e.to_string())?;
        if got != ap_by_rank_counting(&q, label, &cands, &labels, k) {
            mismatches.push(format!("ap trial {trial}"));
        }
    }
    check(
        mismatches.is_empty(),
        format!("600 trials (dtw, tau, ap@k), {} mismatches {:?}", mismatches.len(), mismatches.iter().take(5).collect::<Vec<_>>()),
    )
}

fn augmentation() -> Outcome {
    let mut r = rng(4);
    let mut violations = 0;
    let mut draws = 0;
    for (alpha, beta) in [(1.0, 0.2), (1.5, 0.2), (1.5, 1.0)] {
        for _ in 0..10_000 {
            let frames = r.random_range(1..=64);
            let s = r.random_range(frames..=3 * frames);
            let cfg = AugmentConfig { frames, alpha, beta, ..AugmentConfig::default() };
            let (w1, w2) = crop_pair(s, &cfg, &mut r).map_err(|e| e.to_string())?;
            let hi = ((alpha * frames as f64).floor() as usize).min(s);
            let ok_len = |len: usize| frames <= len && len <= hi;
            let ok_bounds = w1.end() <= s && w2.end() <= s;
            let frac = w1.overlap(&w2) as f64 / w1.len.min(w2.len) as f64;
            if !(ok_len(w1.len) && ok_len(w2.len) && ok_bounds && frac >= beta) {
                violations += 1;
            }
            draws += 1;
        }
    }
    check(violations == 0, format!("{draws} draws over 3 (alpha, beta) settings, {violations} violations"))
}

fn cli(args: &[&str]) -> Result<String, String> {
    let (code, out, err) = run_cli(args);
    if code == 0 { Ok(out) } else { Err(format!("`{}` exited {code}: {}", args.join(" "), err.trim())) }
}

fn report_field(dir: &Path, key: &str) -> Result<f64, String> {
    let text = fs::read_to_string(dir.join("report.json")).map_err(|e| e.to_string())?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    v[key].as_f64().ok_or_else(|| format!("report has no `{key}`"))
}

/// Full SCL pipeline with the bundled config: gen-data, random-init eval,
/// train, eval. Returns (random acc, trained acc, trained tau).
fn scl_pipeline(dir: &Path) -> Result<(f64, f64, f64), String> {
    let out = dir.to_str().unwrap();
    cli(&["--out", out, "gen-data"])?;
    cli(&["--out", out, "eval", "--random-init"])?;
    let random_acc = report_field(dir, "classification_acc")?;
    cli(&["--out", out, "train"])?;
    cli(&["--out", out, "eval"])?;
    Ok((random_acc, report_field(dir, "classification_acc")?, report_field(dir, "kendalls_tau")?))
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn benchmark(scl_dir: &Path) -> Outcome {
    let start = Instant::now();
    let (random_acc, trained_acc, scl_tau) = scl_pipeline(scl_dir)?;
    let base = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = base.path().to_str().unwrap();
    cli(&["--out", b, "gen-data"])?;
    cli(&["--out", b, "train", "--objective", "frame-contrastive"])?;
    cli(&["--out", b, "eval"])?;
    let base_tau = report_field(base.path(), "kendalls_tau")?;
    let elapsed = start.elapsed();
    let gain = 100.0 * (trained_acc - random_acc);
    check(
        gain >= 15.0 && scl_tau >= base_tau && scl_tau >= 0.8 && elapsed < Duration::from_secs(600),
        format!(
            "(a) acc {trained_acc:.4} vs random {random_acc:.4}: +{gain:.1}pp (>= 15); (b) tau scl {scl_tau:.4} vs baseline {base_tau:.4}; (c) tau {scl_tau:.4} (>= 0.8); {:.0}s (< 600s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn determinism(scl_dir: &Path) -> Outcome {
    let first = artifacts(scl_dir);
    fs::remove_dir_all(scl_dir).map_err(|e| e.to_string())?;
    scl_pipeline(scl_dir)?;
    let second = artifacts(scl_dir);
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let has = |n: &str| names.contains(&n);
    check(
        first.len() == second.len() && differing.is_empty() && has("model.ckpt") && has("report.json"),
        format!("{} artifacts incl. model.ckpt and report.json, {} differ {:?}", first.len(), differing.len(), differing),
    )
}

fn formats() -> Outcome {
    let mut fseq = b"FSEQ".to_vec();
    for v in [1u32, 2, 2] {
        fseq.extend(v.to_le_bytes());
    }
    for v in [0.25f32, -1.0, 3.5, 1e-7] {
        fseq.extend(v.to_le_bytes());
    }
    let features = decode_fseq(&fseq).map_err(|e| e.to_string())?;
    let fseq_ok = encode_fseq(&features) == fseq && features[[1, 1]] == 1e-7;

    let config = EncoderConfig::default();
    let json = serde_json::to_string(&config).unwrap();
    let mut ckpt = b"CKPT".to_vec();
    ckpt.extend(1u32.to_le_bytes());
    ckpt.extend((json.len() as u32).to_le_bytes());
    ckpt.extend(json.as_bytes());
    ckpt.extend(1u32.to_le_bytes());
    ckpt.extend(b"x");
    ckpt.extend(1u32.to_le_bytes());
    ckpt.extend(2u32.to_le_bytes());
    ckpt.extend((-0.5f32).to_le_bytes());
    ckpt.extend(f32::MIN_POSITIVE.to_le_bytes());
    let decoded = decode_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    let ckpt_ok = encode_checkpoint(&decoded) == ckpt && decoded.config == config;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let c = small_run_config(dir.path(), 1);
    let c = c.to_str().unwrap();
    cli(&["--config", c, "gen-data"])?;
    let victim = dir.path().join("run/data/test");
    let victim = fs::read_dir(&victim)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "fseq"))
        .unwrap();
    let mut bytes = fs::read(&victim).unwrap();
    bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
    fs::write(&victim, bytes).unwrap();
    let (code, _, err) = run_cli(&["--config", c, "eval", "--random-init"]);
    let rejected = code == 4 && err.contains("kind=format") && err.contains("`version`");
    check(
        fseq_ok && ckpt_ok && rejected,
        format!("fseq round-trip {fseq_ok}, checkpoint round-trip {ckpt_ok}, corrupted version header exit {code} ({})", err.trim()),
    )
}

fn main() {
    let scl = tempfile::tempdir().expect("temp dir");
    let scl_dir = scl.path().join("scl");
    let criteria: Vec<(usize, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, Box::new(gradients)),
        (2, Box::new(loss_identities)),
        (3, Box::new(oracle_equivalence)),
        (4, Box::new(augmentation)),
        (5, Box::new(|| benchmark(&scl_dir))),
        (6, Box::new(|| determinism(&scl_dir))),
        (7, Box::new(formats)),
    ];
    let mut failed = 0;
    for (n, run) in &criteria {
        match run() {
            Ok(detail) => println!("criterion {n} PASS: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
