use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng as _;
use rand::SeedableRng;

use super::EncoderConfig;
use crate::rng::Rng;

/// Affine map `y = x W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..=bound)),
            bias: Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..=bound)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }
}

/// Scale and shift of a batch or layer normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl Norm {
    pub fn identity(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
        }
    }

    fn zeros(width: usize) -> Self {
        Self {
            gamma: Array1::zeros(width),
            beta: Array1::zeros(width),
        }
    }
}

/// Accumulated batch-normalization statistics used in evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        Self {
            mean: Array1::zeros(width),
            var: Array1::ones(width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ffn_norm: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Every weight of the encoder plus its batch-norm running statistics.
///
/// The same type doubles as a gradient container and as optimizer moment
/// storage; in those roles the running statistics are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embed_fc1: Linear,
    pub embed_bn1: Norm,
    pub embed_fc2: Linear,
    pub embed_bn2: Norm,
    pub layers: Vec<EncoderLayer>,
    pub output: Linear,
    pub head_fc1: Linear,
    pub head_fc2: Linear,
    pub bn1_stats: RunningStats,
    pub bn2_stats: RunningStats,
}

macro_rules! push_linear {
    ($out:ident, $name:expr, $lin:expr, $view:ident) => {
        $out.push((format!("{}.weight", $name), $lin.weight.$view().into_dyn()));
        $out.push((format!("{}.bias", $name), $lin.bias.$view().into_dyn()));
    };
}

macro_rules! push_norm {
    ($out:ident, $name:expr, $norm:expr, $view:ident) => {
        $out.push((format!("{}.gamma", $name), $norm.gamma.$view().into_dyn()));
        $out.push((format!("{}.beta", $name), $norm.beta.$view().into_dyn()));
    };
}

macro_rules! collect_tensors {
    ($self:ident, $view:ident, $iter:ident) => {{
        let mut out = Vec::new();
        push_linear!(out, "embed.fc1", $self.embed_fc1, $view);
        push_norm!(out, "embed.bn1", $self.embed_bn1, $view);
        push_linear!(out, "embed.fc2", $self.embed_fc2, $view);
        push_norm!(out, "embed.bn2", $self.embed_bn2, $view);
        for (i, layer) in $self.layers.$iter().enumerate() {
            let p = format!("layers.{i}");
            push_norm!(out, format!("{p}.attn_norm"), layer.attn_norm, $view);
            push_linear!(out, format!("{p}.attn.query"), layer.query, $view);
            push_linear!(out, format!("{p}.attn.key"), layer.key, $view);
            push_linear!(out, format!("{p}.attn.value"), layer.value, $view);
            push_linear!(out, format!("{p}.attn.out"), layer.attn_out, $view);
            push_norm!(out, format!("{p}.ffn_norm"), layer.ffn_norm, $view);
            push_linear!(out, format!("{p}.ffn.in"), layer.ffn_in, $view);
            push_linear!(out, format!("{p}.ffn.out"), layer.ffn_out, $view);
        }
        push_linear!(out, "output", $self.output, $view);
        push_linear!(out, "head.fc1", $self.head_fc1, $view);
        push_linear!(out, "head.fc2", $self.head_fc2, $view);
        out
    }};
}

impl EncoderParams {
    /// Uniform `±sqrt(1/fan_in)` affine weights and biases, identity norms.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        let m = cfg.model_dim;
        let mut lin = |i, o| Linear::uniform(i, o, &mut rng);
        let embed_fc1 = lin(cfg.input_dim, m);
        let embed_fc2 = lin(m, m);
        let layers = (0..cfg.num_layers)
            .map(|_| EncoderLayer {
                attn_norm: Norm::identity(m),
                query: lin(m, m),
                key: lin(m, m),
                value: lin(m, m),
                attn_out: lin(m, m),
                ffn_norm: Norm::identity(m),
                ffn_in: lin(m, cfg.ffn_dim),
                ffn_out: lin(cfg.ffn_dim, m),
            })
            .collect();
        let output = lin(m, cfg.out_dim);
        let head_fc1 = lin(cfg.out_dim, cfg.proj_hidden);
        let head_fc2 = lin(cfg.proj_hidden, cfg.proj_out);
        Self {
            embed_fc1,
            embed_bn1: Norm::identity(m),
            embed_fc2,
            embed_bn2: Norm::identity(m),
            layers,
            output,
            head_fc1,
            head_fc2,
            bn1_stats: RunningStats::new(m),
            bn2_stats: RunningStats::new(m),
        }
    }

    /// All-zero container with the shapes implied by `cfg`.
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let m = cfg.model_dim;
        Self {
            embed_fc1: Linear::zeros(cfg.input_dim, m),
            embed_bn1: Norm::zeros(m),
            embed_fc2: Linear::zeros(m, m),
            embed_bn2: Norm::zeros(m),
            layers: (0..cfg.num_layers)
                .map(|_| EncoderLayer {
                    attn_norm: Norm::zeros(m),
                    query: Linear::zeros(m, m),
                    key: Linear::zeros(m, m),
                    value: Linear::zeros(m, m),
                    attn_out: Linear::zeros(m, m),
                    ffn_norm: Norm::zeros(m),
                    ffn_in: Linear::zeros(m, cfg.ffn_dim),
                    ffn_out: Linear::zeros(cfg.ffn_dim, m),
                })
                .collect(),
            output: Linear::zeros(m, cfg.out_dim),
            head_fc1: Linear::zeros(cfg.out_dim, cfg.proj_hidden),
            head_fc2: Linear::zeros(cfg.proj_hidden, cfg.proj_out),
            bn1_stats: RunningStats {
                mean: Array1::zeros(m),
                var: Array1::zeros(m),
            },
            bn2_stats: RunningStats {
                mean: Array1::zeros(m),
                var: Array1::zeros(m),
            },
        }
    }

    /// Learnable tensors in a fixed order with stable names.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        collect_tensors!(self, view, iter)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        collect_tensors!(self, view_mut, iter_mut)
    }

    /// Non-learnable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("embed.bn1.running_mean".into(), self.bn1_stats.mean.view().into_dyn()),
            ("embed.bn1.running_var".into(), self.bn1_stats.var.view().into_dyn()),
            ("embed.bn2.running_mean".into(), self.bn2_stats.mean.view().into_dyn()),
            ("embed.bn2.running_var".into(), self.bn2_stats.var.view().into_dyn()),
        ]
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("embed.bn1.running_mean".into(), self.bn1_stats.mean.view_mut().into_dyn()),
            ("embed.bn1.running_var".into(), self.bn1_stats.var.view_mut().into_dyn()),
            ("embed.bn2.running_mean".into(), self.bn2_stats.mean.view_mut().into_dyn()),
            ("embed.bn2.running_var".into(), self.bn2_stats.var.view_mut().into_dyn()),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other` over learnable tensors.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, &b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
            && self.buffers().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn matches(&self, cfg: &EncoderConfig) -> bool {
        let reference = EncoderParams::zeros(cfg);
        let a = self.tensors();
        let b = reference.tensors();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
            && self
                .buffers()
                .iter()
                .zip(reference.buffers())
                .all(|((_, t1), (_, t2))| t1.shape() == t2.shape())
    }
}
