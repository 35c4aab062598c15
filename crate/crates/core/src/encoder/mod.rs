//! Frame-level temporal encoder.
//!
//! ```text
//! X (T×D) -> fc -> BN -> ReLU -> fc -> BN -> ReLU      projection block, T×M
//!         -> + sine-cosine positional encoding
//!         -> N × pre-norm Transformer layer            full bidirectional attention
//!         -> fc                                        H, T×out_dim
//!         -> fc -> ReLU -> fc                          Z, T×proj_out
//! ```
//!
//! Gradients are derived by hand; [`backward`] is checked against central
//! finite differences in the tests.

mod checkpoint;
pub mod ops;
mod params;

use ndarray::{Array2, ArrayView2};
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};
use ops::{BatchStats, NormCache};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use params::{EncoderLayer, EncoderParams, Linear, Norm, RunningStats};

/// Momentum of the batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub out_dim: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            model_dim: 256,
            num_layers: 3,
            num_heads: 8,
            ffn_dim: 1024,
            out_dim: 128,
            proj_hidden: 256,
            proj_out: 128,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("encoder config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("out_dim", self.out_dim),
            ("proj_hidden", self.proj_hidden),
            ("proj_out", self.proj_out),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("encoder {name} must be at least 1")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::config("model_dim must be even for the positional encoding"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Sine-cosine positional encoding indexed by sequence position.
pub fn positional_encoding(frames: usize, model_dim: usize) -> Result<Array2<f64>> {
    if model_dim % 2 != 0 {
        return Err(Error::config(format!("positional encoding needs an even width, got {model_dim}")));
    }
    Ok(Array2::from_shape_fn((frames, model_dim), |(t, j)| {
        let i = j / 2;
        let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / model_dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics over the frames of the input; dropout active with
    /// masks drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

/// Representations `H` and latent embeddings `Z = g(H)` of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub h: Array2<f64>,
    pub z: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    attn_norm: NormCache,
    attn_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    heads_out: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ffn_norm: NormCache,
    ffn_in: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    train: bool,
    input: Array2<f64>,
    bn1: NormCache,
    bn1_out: Array2<f64>,
    relu1: Array2<f64>,
    bn2: NormCache,
    bn2_out: Array2<f64>,
    layers: Vec<LayerCache>,
    top: Array2<f64>,
    head_pre: Array2<f64>,
    head_act: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: EmbeddingSequence,
    /// Batch statistics of the two projection-block norms (training mode).
    pub batch_stats: Option<[BatchStats; 2]>,
    cache: Option<Box<ForwardCache>>,
}

impl ForwardPass {
    /// Drops the retained activations; a later [`backward`] call fails.
    pub fn release_cache(&mut self) {
        self.cache = None;
    }

    /// Attention probabilities of each layer and head, for inspection.
    pub fn attention_maps(&self) -> Option<Vec<Vec<Array2<f64>>>> {
        self.cache
            .as_ref()
            .map(|c| c.layers.iter().map(|l| l.probs.clone()).collect())
    }
}

fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn(shape, |_| if rng.random_bool(p) { 0.0 } else { keep })
}

/// Forward pass with the standard sine-cosine positional encoding.
pub fn forward(params: &EncoderParams, cfg: &EncoderConfig, features: &Array2<f64>, mode: Mode) -> Result<ForwardPass> {
    let pe = positional_encoding(features.nrows(), cfg.model_dim)?;
    forward_with_positions(params, cfg, features, &pe, mode)
}

/// Forward pass with a caller-supplied positional encoding (T×model_dim).
pub fn forward_with_positions(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    features: &Array2<f64>,
    positions: &Array2<f64>,
    mode: Mode,
) -> Result<ForwardPass> {
    cfg.validate()?;
    let (t, d) = features.dim();
    if t == 0 {
        return Err(Error::shape("encoder input has no frames"));
    }
    if d != cfg.input_dim {
        return Err(Error::shape(format!("encoder expects {} input dims, got {d}", cfg.input_dim)));
    }
    if positions.dim() != (t, cfg.model_dim) {
        return Err(Error::shape(format!(
            "positional encoding is {:?}, expected ({t}, {})",
            positions.dim(),
            cfg.model_dim
        )));
    }
    if !params.matches(cfg) {
        return Err(Error::shape("parameters do not match the encoder configuration"));
    }

    let (train, mut drop_rng) = match mode {
        Mode::Train { dropout_seed } => (true, Some(Rng::seed_from_u64(dropout_seed))),
        Mode::Eval => (false, None),
    };
    let use_dropout = train && cfg.dropout > 0.0;

    let a1 = ops::linear(&features.view(), &params.embed_fc1);
    let (bn1_out, bn1, s1) = if train {
        let (y, c, s) = ops::batch_norm_train(&a1, &params.embed_bn1);
        (y, c, Some(s))
    } else {
        let (y, c) = ops::batch_norm_eval(&a1, &params.embed_bn1, &params.bn1_stats);
        (y, c, None)
    };
    let relu1 = ops::relu(&bn1_out);
    let a2 = ops::linear(&relu1.view(), &params.embed_fc2);
    let (bn2_out, bn2, s2) = if train {
        let (y, c, s) = ops::batch_norm_train(&a2, &params.embed_bn2);
        (y, c, Some(s))
    } else {
        let (y, c) = ops::batch_norm_eval(&a2, &params.embed_bn2, &params.bn2_stats);
        (y, c, None)
    };
    let mut x = ops::relu(&bn2_out) + positions;

    let mut layer_caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let input = x;
        let (attn_in, attn_norm) = ops::layer_norm(&input, &layer.attn_norm);
        let q = ops::linear(&attn_in.view(), &layer.query);
        let k = ops::linear(&attn_in.view(), &layer.key);
        let v = ops::linear(&attn_in.view(), &layer.value);
        let (heads_out, probs) = ops::attention(&q, &k, &v, cfg.num_heads);
        let mut attn = ops::linear(&heads_out.view(), &layer.attn_out);
        let attn_mask = match drop_rng.as_mut().filter(|_| use_dropout) {
            Some(rng) => {
                let m = dropout_mask(attn.dim(), cfg.dropout, rng);
                attn *= &m;
                Some(m)
            }
            None => None,
        };
        let mid = &input + &attn;

        let (ffn_in, ffn_norm) = ops::layer_norm(&mid, &layer.ffn_norm);
        let ffn_pre = ops::linear(&ffn_in.view(), &layer.ffn_in);
        let ffn_act = ops::gelu(&ffn_pre);
        let mut ffn = ops::linear(&ffn_act.view(), &layer.ffn_out);
        let ffn_mask = match drop_rng.as_mut().filter(|_| use_dropout) {
            Some(rng) => {
                let m = dropout_mask(ffn.dim(), cfg.dropout, rng);
                ffn *= &m;
                Some(m)
            }
            None => None,
        };
        x = &mid + &ffn;

        layer_caches.push(LayerCache {
            input,
            attn_norm,
            attn_in,
            q,
            k,
            v,
            probs,
            heads_out,
            attn_mask,
            ffn_norm,
            ffn_in,
            ffn_pre,
            ffn_act,
            ffn_mask,
        });
    }

    let h = ops::linear(&x.view(), &params.output);
    let head_pre = ops::linear(&h.view(), &params.head_fc1);
    let head_act = ops::relu(&head_pre);
    let z = ops::linear(&head_act.view(), &params.head_fc2);

    let batch_stats = match (s1, s2) {
        (Some(a), Some(b)) => Some([a, b]),
        _ => None,
    };
    Ok(ForwardPass {
        output: EmbeddingSequence { h, z },
        batch_stats,
        cache: Some(Box::new(ForwardCache {
            train,
            input: features.clone(),
            bn1,
            bn1_out,
            relu1,
            bn2,
            bn2_out,
            layers: layer_caches,
            top: x,
            head_pre,
            head_act,
        })),
    })
}

/// Evaluation-mode encoding without retained activations.
pub fn infer(params: &EncoderParams, cfg: &EncoderConfig, features: &Array2<f64>) -> Result<EmbeddingSequence> {
    forward(params, cfg, features, Mode::Eval).map(|pass| pass.output)
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: EncoderParams,
    /// Gradient with respect to the encoder input features.
    pub input: Array2<f64>,
}

/// Reverse-mode gradients of a scalar loss given its gradients on `Z` and,
/// optionally, on `H`.
pub fn backward(
    pass: &ForwardPass,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    grad_z: &Array2<f64>,
    grad_h: Option<&Array2<f64>>,
) -> Result<Gradients> {
    let cache = pass
        .cache
        .as_deref()
        .ok_or_else(|| Error::Usage("backward called on a forward pass without cached activations".into()))?;
    let out = &pass.output;
    if grad_z.dim() != out.z.dim() {
        return Err(Error::shape(format!("grad_z is {:?}, Z is {:?}", grad_z.dim(), out.z.dim())));
    }
    if let Some(g) = grad_h {
        if g.dim() != out.h.dim() {
            return Err(Error::shape(format!("grad_h is {:?}, H is {:?}", g.dim(), out.h.dim())));
        }
    }

    let mut grads = EncoderParams::zeros(cfg);
    fn view(a: &Array2<f64>) -> ArrayView2<'_, f64> {
        a.view()
    }

    let d_act = ops::linear_backward(&view(&cache.head_act), &params.head_fc2, grad_z, &mut grads.head_fc2);
    let d_pre = ops::relu_backward(&cache.head_pre, &d_act);
    let mut dh = ops::linear_backward(&view(&out.h), &params.head_fc1, &d_pre, &mut grads.head_fc1);
    if let Some(g) = grad_h {
        dh += g;
    }
    let mut dx = ops::linear_backward(&view(&cache.top), &params.output, &dh, &mut grads.output);

    for ((layer, lc), lg) in params
        .layers
        .iter()
        .zip(&cache.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        // x_out = mid + ffn(LN(mid))
        let mut d_ffn = dx.clone();
        if let Some(m) = &lc.ffn_mask {
            d_ffn *= m;
        }
        let d_act = ops::linear_backward(&view(&lc.ffn_act), &layer.ffn_out, &d_ffn, &mut lg.ffn_out);
        let d_pre = ops::gelu_backward(&lc.ffn_pre, &d_act);
        let d_in = ops::linear_backward(&view(&lc.ffn_in), &layer.ffn_in, &d_pre, &mut lg.ffn_in);
        let d_mid = dx + ops::layer_norm_backward(&lc.ffn_norm, &layer.ffn_norm, &d_in, &mut lg.ffn_norm);

        // mid = input + attn(LN(input))
        let mut d_attn = d_mid.clone();
        if let Some(m) = &lc.attn_mask {
            d_attn *= m;
        }
        let d_heads = ops::linear_backward(&view(&lc.heads_out), &layer.attn_out, &d_attn, &mut lg.attn_out);
        let (dq, dk, dv) = ops::attention_backward(&lc.q, &lc.k, &lc.v, &lc.probs, &d_heads);
        let attn_in = view(&lc.attn_in);
        let mut d_u = ops::linear_backward(&attn_in, &layer.query, &dq, &mut lg.query);
        d_u += &ops::linear_backward(&attn_in, &layer.key, &dk, &mut lg.key);
        d_u += &ops::linear_backward(&attn_in, &layer.value, &dv, &mut lg.value);
        dx = d_mid + ops::layer_norm_backward(&lc.attn_norm, &layer.attn_norm, &d_u, &mut lg.attn_norm);
        debug_assert_eq!(lc.input.dim(), dx.dim());
    }

    let d_bn2 = ops::relu_backward(&cache.bn2_out, &dx);
    let d_a2 = if cache.train {
        ops::batch_norm_train_backward(&cache.bn2, &params.embed_bn2, &d_bn2, &mut grads.embed_bn2)
    } else {
        ops::batch_norm_eval_backward(&cache.bn2, &params.embed_bn2, &d_bn2, &mut grads.embed_bn2)
    };
    let d_relu1 = ops::linear_backward(&view(&cache.relu1), &params.embed_fc2, &d_a2, &mut grads.embed_fc2);
    let d_bn1 = ops::relu_backward(&cache.bn1_out, &d_relu1);
    let d_a1 = if cache.train {
        ops::batch_norm_train_backward(&cache.bn1, &params.embed_bn1, &d_bn1, &mut grads.embed_bn1)
    } else {
        ops::batch_norm_eval_backward(&cache.bn1, &params.embed_bn1, &d_bn1, &mut grads.embed_bn1)
    };
    let input = ops::linear_backward(&view(&cache.input), &params.embed_fc1, &d_a1, &mut grads.embed_fc1);

    Ok(Gradients { params: grads, input })
}

/// Folds one training forward pass's batch statistics into the running
/// averages (unbiased variance).
pub fn update_running_stats(params: &mut EncoderParams, stats: &[BatchStats; 2]) {
    for (running, batch) in [&mut params.bn1_stats, &mut params.bn2_stats].into_iter().zip(stats) {
        let n = batch.count as f64;
        let correction = if batch.count > 1 { n / (n - 1.0) } else { 1.0 };
        running.mean.zip_mut_with(&batch.mean, |r, &b| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b);
        running
            .var
            .zip_mut_with(&batch.var, |r, &b| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * correction);
    }
}
