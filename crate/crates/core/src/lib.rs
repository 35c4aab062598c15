//! Self-supervised frame-wise representation learning for long feature
//! sequences.
//!
//! Two temporally augmented views of a video are encoded by a small
//! Transformer, and the cross-view cosine similarity distribution of every
//! frame is pulled toward a Gaussian prior over raw timestamp distance.
//! Learned representations are evaluated with linear probes (phase
//! classification and progression), Kendall's tau, AP@K retrieval and DTW
//! alignment.
//!
//! Module map:
//! - [`data`]: video records, synthetic generator, `.fseq` feature files
//! - [`augment`]: paired temporal cropping, frame sampling, feature jitter
//! - [`encoder`]: projection block, Transformer encoder, projection head with
//!   hand-written backward pass and checkpoints
//! - [`loss`]: sequence contrastive loss and the per-frame contrastive baseline
//! - [`train`]: Adam, cosine schedule, epoch loop and `fit`
//! - [`eval`]: probes, Kendall's tau, AP@K, retrieval, similarity and DTW
//! - [`config`] / [`cli`]: the run configuration and subcommand drivers

pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
