//! Run configuration: one JSON document covering data generation,
//! augmentation, encoder, objective, optimizer, probes and output paths.
//!
//! Every section may be partial; missing fields take their defaults and
//! unknown fields are rejected. All randomness derives from the top-level
//! `seed` through named streams (`data`, `init`, `train`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::SyntheticSpec;
use crate::encoder::EncoderConfig;
use crate::eval::ProbeConfig;
use crate::loss::SclConfig;
use crate::rng;
use crate::train::{Objective, OptimConfig};
use crate::{Error, Result};

/// The desk-scale benchmark configuration shipped with the crate.
pub const BUNDLED_CONFIG: &str = include_str!("../configs/default.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    #[default]
    Scl,
    FrameContrastive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory for alignment exports.
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub report: PathBuf,
}

impl Paths {
    pub fn under(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        Self {
            data_dir: dir.join("data"),
            checkpoint: dir.join("model.ckpt"),
            loss_csv: dir.join("loss.csv"),
            report: dir.join("report.json"),
            out_dir: dir,
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Self::under("run")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Upper bound on worker threads.
    pub threads: usize,
    pub synthetic: SyntheticSpec,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub objective: ObjectiveKind,
    /// Gaussian prior and temperature; `tau` is shared with the baseline.
    pub scl: SclConfig,
    pub optim: OptimConfig,
    pub probe: ProbeConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            synthetic: SyntheticSpec::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::default(),
            objective: ObjectiveKind::default(),
            scl: SclConfig::default(),
            optim: OptimConfig::default(),
            probe: ProbeConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_CONFIG).expect("bundled config is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Pushes the run seed into the component configs.
    pub fn resolved(mut self) -> Self {
        self.synthetic.seed = rng::stream_seed(self.seed, "data");
        self.optim.seed = self.seed;
        self
    }

    pub fn objective(&self) -> Objective {
        match self.objective {
            ObjectiveKind::Scl => Objective::Scl(self.scl),
            ObjectiveKind::FrameContrastive => Objective::FrameContrastive { tau: self.scl.tau },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.scl.validate()?;
        self.optim.validate()?;
        self.probe.validate()?;
        if self.threads == 0 {
            return Err(Error::config("threads must be at least 1"));
        }
        if self.encoder.input_dim != self.synthetic.feature_dim {
            return Err(Error::config(format!(
                "encoder.input_dim {} differs from synthetic.feature_dim {}",
                self.encoder.input_dim, self.synthetic.feature_dim
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_is_valid_and_round_trips() {
        let cfg = RunConfig::bundled();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.augment.frames, 64);
        assert_eq!(cfg.synthetic.num_videos, 63);
    }

    #[test]
    fn defaults_follow_the_reference_recipe() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.scl.sigma2, cfg.scl.tau), (10.0, 0.1));
        assert_eq!((cfg.augment.alpha, cfg.augment.beta, cfg.augment.frames), (1.5, 0.2, 240));
        assert_eq!((cfg.optim.lr, cfg.optim.weight_decay, cfg.optim.epochs), (1e-4, 1e-5, 300));
        assert_eq!(cfg.optim.videos_per_batch, 4);
        assert_eq!((cfg.encoder.num_layers, cfg.encoder.out_dim), (3, 128));
    }

    #[test]
    fn partial_sections_take_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 7, "scl": {"tau": 0.5}}"#).unwrap();
        assert_eq!(cfg.scl, SclConfig { sigma2: 10.0, tau: 0.5 });
        assert_eq!(cfg.optim.seed, 7);
        assert_eq!(cfg.synthetic.seed, rng::stream_seed(7, "data"));
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        let err = RunConfig::from_json(r#"{"optim": {"learning_rate": 1}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
        let err = RunConfig::from_json(r#"{"optim": {"seed": 1}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
    }

    #[test]
    fn mismatched_input_width_is_rejected() {
        let mut cfg = RunConfig::bundled();
        cfg.encoder.input_dim += 1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn objective_kind_selects_the_loss() {
        let mut cfg = RunConfig::bundled();
        cfg.objective = ObjectiveKind::FrameContrastive;
        assert_eq!(cfg.objective(), Objective::FrameContrastive { tau: cfg.scl.tau });
    }
}
