//! Command-line driver: `gen-data`, `train`, `eval`, `align`, `retrieve`.
//!
//! The run configuration comes from `--config` (or the bundled benchmark
//! config) with flag overrides on top. Failures print a single line
//! `error kind=<kind> code=<code>: <message>` to stderr and exit with the
//! code of the error class.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::augment::Sampling;
use crate::config::{ObjectiveKind, Paths, RunConfig};
use crate::data::{generate_synthetic, load_dataset, save_dataset, DatasetSplit, VideoRecord};
use crate::encoder::{load_checkpoint, EncoderConfig, EncoderParams};
use crate::eval::{self, dtw_align, path_csv, retrieve_frames, similarity_csv, similarity_matrix, similarity_pgm, EvalReport, FrameMatch};
use crate::train::{fit, FitOptions, FitResult};
use crate::{rng, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "seqcon", version, about = "Sequence contrastive representation learning for feature-sequence videos")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration (defaults to the bundled benchmark config)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Frames per augmented view
    #[arg(long, global = true, value_name = "T")]
    pub frames: Option<usize>,
    /// Maximum crop length as a multiple of the view length
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// Minimum overlap fraction between the two crops
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    /// Variance of the Gaussian timestamp prior
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub sigma2: Option<f64>,
    /// Softmax temperature
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub sampling: Option<SamplingArg>,
    /// Worker thread cap
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory; every artifact path is placed under it
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    Random,
    Even,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Scl,
    FrameContrastive,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset into the data directory
    GenData,
    /// Train the encoder; writes the checkpoint and loss curve
    Train {
        /// Continue from the checkpoint if it exists
        #[arg(long)]
        resume: bool,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
    },
    /// Evaluate the checkpoint; writes the JSON report
    Eval {
        /// Evaluate a freshly initialized encoder instead of the checkpoint
        #[arg(long)]
        random_init: bool,
    },
    /// Align two videos with DTW; writes path CSV, similarity CSV and PGM
    Align { video_a: String, video_b: String },
    /// Print the top-K frames of other videos closest to a query frame
    Retrieve {
        video: String,
        frame: usize,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
    },
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.frames {
            cfg.augment.frames = v;
        }
        if let Some(v) = self.alpha {
            cfg.augment.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.augment.beta = v;
        }
        if let Some(v) = self.sigma2 {
            cfg.scl.sigma2 = v;
        }
        if let Some(v) = self.tau {
            cfg.scl.tau = v;
        }
        if let Some(v) = self.lr {
            cfg.optim.lr = v;
        }
        if let Some(v) = self.epochs {
            cfg.optim.epochs = v;
        }
        if let Some(v) = self.sampling {
            cfg.augment.sampling = match v {
                SamplingArg::Random => Sampling::Random,
                SamplingArg::Even => Sampling::Even,
            };
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
        if let Some(dir) = &self.out {
            cfg.paths = Paths::under(dir);
        }
    }

    /// Loads the config file (or the bundled one), applies the flags and
    /// validates the result.
    pub fn effective_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::bundled(),
        };
        self.apply(&mut cfg);
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn load_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    let split = load_dataset(&cfg.paths.data_dir)?;
    if split.feature_dim != cfg.encoder.input_dim {
        return Err(Error::config(format!(
            "dataset feature_dim {} differs from encoder.input_dim {}",
            split.feature_dim, cfg.encoder.input_dim
        )));
    }
    Ok(split)
}

fn load_params(cfg: &RunConfig) -> Result<(EncoderConfig, EncoderParams)> {
    let ckpt = load_checkpoint(&cfg.paths.checkpoint)?;
    if ckpt.config != cfg.encoder {
        log::warn!("checkpoint encoder config differs from the run config; using the checkpoint's");
    }
    let params = ckpt.params()?;
    Ok((ckpt.config, params))
}

fn find_video<'a>(split: &'a DatasetSplit, id: &str) -> Result<&'a VideoRecord> {
    split
        .find(id)
        .ok_or_else(|| Error::Usage(format!("no video `{id}` in the dataset")))
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<DatasetSplit> {
    let split = generate_synthetic(&cfg.synthetic)?;
    save_dataset(&split, &cfg.paths.data_dir)?;
    log::info!(
        "wrote {} train / {} test videos to {}",
        split.train.len(),
        split.test.len(),
        cfg.paths.data_dir.display()
    );
    Ok(split)
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<FitResult> {
    let split = load_split(cfg)?;
    let opts = FitOptions {
        checkpoint: Some(cfg.paths.checkpoint.clone()),
        loss_csv: Some(cfg.paths.loss_csv.clone()),
        resume,
        threads: cfg.threads,
    };
    fit(&split.train, &cfg.encoder, &cfg.augment, &cfg.objective(), &cfg.optim, &opts)
}

pub fn cmd_eval(cfg: &RunConfig, random_init: bool) -> Result<EvalReport> {
    let split = load_split(cfg)?;
    let (enc, params) = if random_init {
        let params = EncoderParams::init(&cfg.encoder, rng::stream_seed(cfg.seed, "init"));
        (cfg.encoder.clone(), params)
    } else {
        load_params(cfg)?
    };
    let mut report = eval::evaluate(&params, &enc, &split, &cfg.probe)?;
    report.config = Some(serde_json::to_value(cfg).expect("config serializes"));
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_file(&cfg.paths.report, json.as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct AlignOutput {
    pub path_csv: PathBuf,
    pub similarity_csv: PathBuf,
    pub heatmap: PathBuf,
    pub cost: f64,
    pub steps: usize,
}

pub fn cmd_align(cfg: &RunConfig, video_a: &str, video_b: &str) -> Result<AlignOutput> {
    let split = load_split(cfg)?;
    let (enc, params) = load_params(cfg)?;
    let records = [find_video(&split, video_a)?.clone(), find_video(&split, video_b)?.clone()];
    let embedded = eval::embed_dataset(&params, &enc, &records)?;
    let (a, b) = (embedded[0].real(), embedded[1].real());
    let sim = similarity_matrix(a, b, false)?;
    let (path, cost) = dtw_align(&sim)?;

    let stem = cfg.paths.out_dir.join(format!("align_{video_a}_{video_b}"));
    let out = AlignOutput {
        path_csv: stem.with_extension("path.csv"),
        similarity_csv: stem.with_extension("sim.csv"),
        heatmap: stem.with_extension("pgm"),
        cost,
        steps: path.pairs().len(),
    };
    write_file(&out.path_csv, path_csv(&path).as_bytes())?;
    write_file(&out.similarity_csv, similarity_csv(&sim).as_bytes())?;
    write_file(&out.heatmap, &similarity_pgm(&similarity_matrix(a, b, true)?))?;
    Ok(out)
}

pub fn cmd_retrieve(cfg: &RunConfig, video: &str, frame: usize, k: usize) -> Result<Vec<FrameMatch>> {
    let split = load_split(cfg)?;
    let (enc, params) = load_params(cfg)?;
    find_video(&split, video)?;
    let records: Vec<VideoRecord> = split.train.iter().chain(&split.test).cloned().collect();
    let embedded = eval::embed_dataset(&params, &enc, &records)?;
    let query = embedded.iter().find(|v| v.id == video).expect("video was found above");
    let pool: Vec<_> = embedded
        .iter()
        .filter(|v| v.action_label == query.action_label)
        .cloned()
        .collect();
    retrieve_frames(query, frame, &pool, k)
}

fn execute(cli: &Cli, stdout: &mut dyn std::io::Write) -> Result<()> {
    let mut cfg = cli.overrides.effective_config()?;
    let io_err = |e: std::io::Error| Error::io("<stdout>", e);
    match &cli.command {
        Command::GenData => {
            let split = cmd_gen_data(&cfg)?;
            writeln!(stdout, "train={} test={} dir={}", split.train.len(), split.test.len(), cfg.paths.data_dir.display())
                .map_err(io_err)?;
        }
        Command::Train { resume, objective } => {
            if let Some(obj) = objective {
                cfg.objective = match obj {
                    ObjectiveArg::Scl => ObjectiveKind::Scl,
                    ObjectiveArg::FrameContrastive => ObjectiveKind::FrameContrastive,
                };
            }
            let res = cmd_train(&cfg, *resume)?;
            let last = res.history.last().map(|h| h.loss).unwrap_or(f64::NAN);
            writeln!(
                stdout,
                "epochs={} steps={} final_loss={last} checkpoint={}",
                res.state.epoch,
                res.state.step,
                cfg.paths.checkpoint.display()
            )
            .map_err(io_err)?;
        }
        Command::Eval { random_init } => {
            let r = cmd_eval(&cfg, *random_init)?;
            let ap: Vec<String> = r.ap_at_k.iter().map(|(k, v)| format!("ap@{k}={v:.4}")).collect();
            writeln!(
                stdout,
                "classification={:.4} progression_r2={:.4} kendalls_tau={:.4} {} report={}",
                r.classification_acc,
                r.progression_r2,
                r.kendalls_tau,
                ap.join(" "),
                cfg.paths.report.display()
            )
            .map_err(io_err)?;
        }
        Command::Align { video_a, video_b } => {
            let out = cmd_align(&cfg, video_a, video_b)?;
            writeln!(
                stdout,
                "cost={} steps={} path={} heatmap={}",
                out.cost,
                out.steps,
                out.path_csv.display(),
                out.heatmap.display()
            )
            .map_err(io_err)?;
        }
        Command::Retrieve { video, frame, k } => {
            writeln!(stdout, "rank\tvideo\tframe\tscore").map_err(io_err)?;
            for (rank, m) in cmd_retrieve(&cfg, video, *frame, *k)?.iter().enumerate() {
                writeln!(stdout, "{}\t{}\t{}\t{:.6}", rank + 1, m.video_id, m.frame, m.score).map_err(io_err)?;
            }
        }
    }
    Ok(())
}

/// One-line error report: `error kind=<kind> code=<code>: <message>`.
pub fn error_line(err: &Error) -> String {
    let message = err.to_string().replace(['\n', '\r'], " ");
    format!("error kind={} code={}: {message}", err.kind(), err.exit_code())
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let err = Error::Usage(first.trim_start_matches("error: ").to_string());
            let _ = writeln!(stderr, "{}", error_line(&err));
            return err.exit_code();
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => 0,
        Err(err) => {
            let _ = writeln!(stderr, "{}", error_line(&err));
            err.exit_code()
        }
    }
}
