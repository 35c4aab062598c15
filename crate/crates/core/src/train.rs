//! Optimization: Adam with decoupled weight decay, cosine learning-rate
//! decay without restarts, the epoch loop over view pairs, and `fit` with
//! periodic checkpoints and resume.
//!
//! Parameters, optimizer moments and running statistics are rounded to f32
//! after every update so that a checkpoint captures the training state
//! exactly and a resumed run continues bit-identically.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::augment::{build_view_pair, AugmentConfig};
use crate::data::VideoRecord;
use crate::encoder::ops::BatchStats;
use crate::encoder::{self, Checkpoint, EncoderConfig, EncoderParams, Mode};
use crate::loss::{baseline_contrastive_loss, scl_loss, timestamp_correspondence, LossOutput, SclConfig};
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub videos_per_batch: usize,
    /// Derived from the run seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 300,
            videos_per_batch: 4,
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be finite and >= 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config("eps must be > 0"));
        }
        if self.videos_per_batch == 0 {
            return Err(Error::config("videos_per_batch must be at least 1"));
        }
        Ok(())
    }
}

/// Which contrastive objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    /// Sequence contrastive loss with a Gaussian timestamp prior.
    Scl(SclConfig),
    /// Per-frame contrastive baseline: the timestamp-matched frame of the
    /// other view is the only positive.
    FrameContrastive { tau: f64 },
}

impl Default for Objective {
    fn default() -> Self {
        Objective::Scl(SclConfig::default())
    }
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        match self {
            Objective::Scl(cfg) => cfg.validate(),
            Objective::FrameContrastive { tau } => SclConfig { sigma2: 1.0, tau: *tau }.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams,
    pub first_moment: EncoderParams,
    pub second_moment: EncoderParams,
    pub step: u64,
    pub epoch: u64,
}

fn round_to_f32(params: &mut EncoderParams) {
    for (_, mut t) in params.tensors_mut() {
        t.mapv_inplace(|v| f64::from(v as f32));
    }
    for (_, mut t) in params.buffers_mut() {
        t.mapv_inplace(|v| f64::from(v as f32));
    }
}

impl TrainState {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut params = EncoderParams::init(cfg, seed);
        round_to_f32(&mut params);
        Self {
            params,
            first_moment: EncoderParams::zeros(cfg),
            second_moment: EncoderParams::zeros(cfg),
            step: 0,
            epoch: 0,
        }
    }

    pub fn to_checkpoint(&self, cfg: &EncoderConfig) -> Checkpoint {
        let mut ckpt = Checkpoint::from_params(cfg, &self.params);
        for (name, t) in self.first_moment.tensors() {
            ckpt.push(format!("adam.m.{name}"), t);
        }
        for (name, t) in self.second_moment.tensors() {
            ckpt.push(format!("adam.v.{name}"), t);
        }
        ckpt.push_scalar("optim.step", self.step as f64);
        ckpt.push_scalar("optim.epoch", self.epoch as f64);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let params = ckpt.params()?;
        let mut first_moment = EncoderParams::zeros(&ckpt.config);
        let mut second_moment = EncoderParams::zeros(&ckpt.config);
        ckpt.fill("adam.m.", first_moment.tensors_mut())?;
        ckpt.fill("adam.v.", second_moment.tensors_mut())?;
        let scalar = |name: &str| {
            ckpt.scalar(name)
                .ok_or_else(|| Error::format("tensors", format!("missing scalar `{name}`")))
        };
        Ok(Self {
            params,
            first_moment,
            second_moment,
            step: scalar("optim.step")? as u64,
            epoch: scalar("optim.epoch")? as u64,
        })
    }
}

/// `0.5 * base_lr * (1 + cos(pi * step / total_steps))`, with `step`
/// clamped to `total_steps`.
pub fn cosine_lr(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let progress = step.min(total_steps) as f64 / total_steps as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One Adam update at learning rate `lr`, preceded by decoupled weight decay
/// `theta -= lr * weight_decay * theta`.
pub fn adam_step(state: &mut TrainState, grads: &EncoderParams, cfg: &OptimConfig, lr: f64) -> Result<()> {
    for (name, g) in grads.tensors() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient in `{name}` at step {}", state.step)));
        }
    }
    let t = (state.step + 1) as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let decay = lr * cfg.weight_decay;
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.eps);

    let params = state.params.tensors_mut();
    let ms = state.first_moment.tensors_mut();
    let vs = state.second_moment.tensors_mut();
    for ((((_, mut p), (_, mut m)), (_, mut v)), (_, g)) in params.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
        ndarray::Zip::from(&mut p)
            .and(&mut m)
            .and(&mut v)
            .and(&g)
            .for_each(|p, m, v, &g| {
                let m_new = b1 * *m + (1.0 - b1) * g;
                let v_new = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = m_new / bias1;
                let v_hat = v_new / bias2;
                let decayed = *p - decay * *p;
                *p = f64::from((decayed - lr * m_hat / (v_hat.sqrt() + eps)) as f32);
                *m = f64::from(m_new as f32);
                *v = f64::from(v_new as f32);
            });
    }
    state.step += 1;
    if !state.params.is_finite() {
        return Err(Error::numeric(format!("parameters became non-finite at step {}", state.step)));
    }
    Ok(())
}

pub fn batches_per_epoch(num_videos: usize, videos_per_batch: usize) -> u64 {
    num_videos.div_ceil(videos_per_batch.max(1)) as u64
}

/// Everything one epoch needs besides the mutable state.
#[derive(Debug, Clone, Copy)]
pub struct EpochContext<'a> {
    pub encoder: &'a EncoderConfig,
    pub augment: &'a AugmentConfig,
    pub objective: &'a Objective,
    pub optim: &'a OptimConfig,
    /// Schedule length in optimizer steps.
    pub total_steps: u64,
    /// Worker threads for the per-video forward/backward passes.
    pub threads: usize,
}

struct PairResult {
    loss: f64,
    grads: EncoderParams,
    stats: [[BatchStats; 2]; 2],
}

fn objective_loss(objective: &Objective, z1: &Array2<f64>, z2: &Array2<f64>, s1: &[usize], s2: &[usize]) -> Result<Option<LossOutput>> {
    match objective {
        Objective::Scl(cfg) => {
            let f1: Vec<f64> = s1.iter().map(|&t| t as f64).collect();
            let f2: Vec<f64> = s2.iter().map(|&t| t as f64).collect();
            scl_loss(z1, z2, &f1, &f2, cfg).map(Some)
        }
        Objective::FrameContrastive { tau } => {
            let corr = timestamp_correspondence(s1, s2);
            if corr.is_empty() {
                return Ok(None);
            }
            baseline_contrastive_loss(z1, z2, &corr, *tau).map(Some)
        }
    }
}

fn pair_step(
    params: &EncoderParams,
    ctx: &EpochContext<'_>,
    record: &VideoRecord,
    pair_seed: u64,
) -> Result<Option<PairResult>> {
    let mut rng = Rng::seed_from_u64(pair_seed);
    let pair = build_view_pair(record, ctx.augment, &mut rng)?;
    let (d1, d2): (u64, u64) = (rng.random(), rng.random());
    let p1 = encoder::forward(params, ctx.encoder, &pair.view1.features, Mode::Train { dropout_seed: d1 })?;
    let p2 = encoder::forward(params, ctx.encoder, &pair.view2.features, Mode::Train { dropout_seed: d2 })?;
    let Some(out) = objective_loss(ctx.objective, &p1.output.z, &p2.output.z, &pair.view1.timestamps, &pair.view2.timestamps)? else {
        return Ok(None);
    };
    let mut grads = encoder::backward(&p1, params, ctx.encoder, &out.grad_z1, None)?.params;
    let g2 = encoder::backward(&p2, params, ctx.encoder, &out.grad_z2, None)?.params;
    grads.add_scaled(&g2, 1.0);
    let stats = [
        p1.batch_stats.expect("training forward records statistics"),
        p2.batch_stats.expect("training forward records statistics"),
    ];
    Ok(Some(PairResult {
        loss: out.loss,
        grads,
        stats,
    }))
}

fn run_pairs(
    params: &EncoderParams,
    ctx: &EpochContext<'_>,
    jobs: &[(&VideoRecord, u64)],
) -> Vec<Result<Option<PairResult>>> {
    let threads = ctx.threads.clamp(1, jobs.len().max(1));
    if threads == 1 {
        return jobs.iter().map(|&(rec, seed)| pair_step(params, ctx, rec, seed)).collect();
    }
    let chunk = jobs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&(rec, seed)| pair_step(params, ctx, rec, seed))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("training worker panicked"))
            .collect()
    })
}

/// One pass over `videos` in shuffled batches. Returns the mean batch loss.
pub fn train_epoch(state: &mut TrainState, videos: &[VideoRecord], ctx: &EpochContext<'_>, rng: &mut Rng) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut order: Vec<usize> = (0..videos.len()).collect();
    order.shuffle(rng);

    let mut batch_losses = Vec::new();
    for batch in order.chunks(ctx.optim.videos_per_batch) {
        // Seeds are drawn up front so results do not depend on thread count.
        let jobs: Vec<(&VideoRecord, u64)> = batch.iter().map(|&i| (&videos[i], rng.random())).collect();
        let results = run_pairs(&state.params, ctx, &jobs);

        let mut grads = EncoderParams::zeros(ctx.encoder);
        let (mut loss, mut count) = (0.0, 0usize);
        for res in results {
            let Some(pair) = res? else { continue };
            loss += pair.loss;
            count += 1;
            grads.add_scaled(&pair.grads, 1.0);
            for stats in &pair.stats {
                encoder::update_running_stats(&mut state.params, stats);
            }
        }
        if count == 0 {
            log::warn!("batch had no usable view pairs; skipping update");
            continue;
        }
        grads.scale(1.0 / count as f64);
        let lr = cosine_lr(ctx.optim.lr, state.step, ctx.total_steps);
        adam_step(state, &grads, ctx.optim, lr)?;
        round_to_f32(&mut state.params);
        batch_losses.push(loss / count as f64);
    }
    if batch_losses.is_empty() {
        return Err(Error::numeric("no batch produced a loss this epoch"));
    }
    Ok(batch_losses.iter().sum::<f64>() / batch_losses.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    /// Continue from `checkpoint` when it exists.
    pub resume: bool,
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: TrainState,
    pub history: Vec<EpochLog>,
}

pub fn loss_csv(history: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,lr\n");
    for row in history {
        writeln!(out, "{},{},{}", row.epoch, row.loss, row.lr).expect("writing to a String");
    }
    out
}

fn read_history(path: &Path, keep: u64) -> Result<Vec<EpochLog>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let parts: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::format("loss_csv", e.to_string()));
        if parts.len() != 3 {
            return Err(Error::format("loss_csv", format!("bad row `{line}`")));
        }
        let epoch = parse(parts[0])? as u64;
        if epoch <= keep {
            rows.push(EpochLog {
                epoch,
                loss: parse(parts[1])?,
                lr: parse(parts[2])?,
            });
        }
    }
    Ok(rows)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains for `optim.epochs` epochs from a fresh initialization (or from the
/// checkpoint when resuming).
pub fn fit(
    videos: &[VideoRecord],
    encoder_cfg: &EncoderConfig,
    augment: &AugmentConfig,
    objective: &Objective,
    optim: &OptimConfig,
    opts: &FitOptions,
) -> Result<FitResult> {
    encoder_cfg.validate()?;
    augment.validate()?;
    objective.validate()?;
    optim.validate()?;

    let resume_from = opts.checkpoint.as_deref().filter(|p| opts.resume && p.exists());
    let (mut state, mut history) = match resume_from {
        Some(path) => {
            let ckpt = encoder::load_checkpoint(path)?;
            if &ckpt.config != encoder_cfg {
                return Err(Error::config("checkpoint encoder config differs from the run config"));
            }
            let state = TrainState::from_checkpoint(&ckpt)?;
            let history = match &opts.loss_csv {
                Some(csv) => read_history(csv, state.epoch)?,
                None => Vec::new(),
            };
            log::info!("resuming from {} at epoch {}", path.display(), state.epoch);
            (state, history)
        }
        None => (
            TrainState::new(encoder_cfg, rng::stream_seed(optim.seed, "init")),
            Vec::new(),
        ),
    };

    let total_steps = optim.epochs as u64 * batches_per_epoch(videos.len(), optim.videos_per_batch);
    let ctx = EpochContext {
        encoder: encoder_cfg,
        augment,
        objective,
        optim,
        total_steps,
        threads: opts.threads.max(1),
    };
    let train_seed = rng::stream_seed(optim.seed, "train");
    let save = |state: &TrainState, history: &[EpochLog]| -> Result<()> {
        if let Some(path) = &opts.checkpoint {
            write_file(path, &encoder::encode_checkpoint(&state.to_checkpoint(encoder_cfg)))?;
        }
        if let Some(path) = &opts.loss_csv {
            write_file(path, loss_csv(history).as_bytes())?;
        }
        Ok(())
    };

    while state.epoch < optim.epochs as u64 {
        let mut epoch_rng = Rng::seed_from_u64(rng::child_seed(train_seed, state.epoch));
        let lr = cosine_lr(optim.lr, state.step, total_steps);
        let loss = train_epoch(&mut state, videos, &ctx, &mut epoch_rng)?;
        state.epoch += 1;
        log::info!("epoch {} loss {loss:.6} lr {lr:e}", state.epoch);
        history.push(EpochLog {
            epoch: state.epoch,
            loss,
            lr,
        });
        if optim.checkpoint_every > 0 && state.epoch % optim.checkpoint_every as u64 == 0 {
            save(&state, &history)?;
        }
    }
    save(&state, &history)?;
    Ok(FitResult { state, history })
}
