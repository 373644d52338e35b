//! Command-line entry point: `generate`, `train`, `eval` and `export-latents`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::model::{ArchConfig, Fhvae};
use crate::objective::{HyperConfig, Stage};
use crate::probes::{self, ProbeConfig};
use crate::rng;
use crate::seqnet::load_checkpoint;
use crate::synthcorpus::{self, load_corpus, save_corpus, CorpusConfig, SEGMENT_FRAMES};
use crate::trainer::{self, ModelSidecar, StageConfig, CHECKPOINT_FILE};

/// Name of the run configuration copied into a generated corpus directory.
pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub hidden_size: usize,
    pub n_layers: usize,
    pub latent_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let a = ArchConfig::desk(1);
        Self {
            hidden_size: a.hidden_size,
            n_layers: a.n_layers,
            latent_dim: a.latent_dim,
        }
    }
}

/// Everything a pipeline run needs. The global `seed` replaces the seeds of
/// the nested sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub network: NetworkConfig,
    pub hyper: HyperConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            network: NetworkConfig::default(),
            hyper: HyperConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    /// Copy with every nested seed derived from the global seed and the
    /// stage fields pinned to their section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.corpus.seed = rng::derive_seed(self.seed, "corpus");
        c.stage1.seed = rng::derive_seed(self.seed, "stage1");
        c.stage2.seed = rng::derive_seed(self.seed, "stage2");
        c.probe.seed = rng::derive_seed(self.seed, "probes");
        c.stage1.stage = Stage::Plain;
        c.stage2.stage = Stage::Extended;
        c
    }

    pub fn arch(&self, n_channels: usize) -> ArchConfig {
        ArchConfig {
            n_channels,
            seg_len: SEGMENT_FRAMES,
            hidden_size: self.network.hidden_size,
            n_layers: self.network.n_layers,
            latent_dim: self.network.latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.arch(self.corpus.n_channels).validate()?;
        self.hyper.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Plain => &self.stage1,
            Stage::Extended => &self.stage2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fhvae", version, about = "Two-stage FHVAE training and disentanglement probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage 1 (plain) or stage 2 (extended, warm-started).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        corpus: PathBuf,
        /// Stage-1 checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration; defaults to the one stored with the corpus.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Probe a checkpoint and write the evaluation report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write posterior-mean latents of every segment as CSV.
    ExportLatents {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_run_config(explicit: Option<&Path>, corpus: &Path) -> Result<RunConfig> {
    let path = explicit.map_or_else(|| corpus.join(RUN_CONFIG_FILE), Path::to_path_buf);
    let cfg: RunConfig = fsio::read_json(&path)?;
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn load_model(ckpt: &Path) -> Result<(ModelSidecar, Fhvae<f32>)> {
    let sidecar = trainer::read_sidecar(ckpt)?;
    let params = load_checkpoint(ckpt)?;
    let net = Fhvae::from_store(&sidecar.arch, &params)?;
    Ok((sidecar, net))
}

fn check_channels(sidecar: &ModelSidecar, dataset: &synthcorpus::Dataset) -> Result<()> {
    if sidecar.arch.n_channels != dataset.n_channels {
        return Err(Error::Config(format!(
            "checkpoint was trained on {} channels but the corpus has {}",
            sidecar.arch.n_channels, dataset.n_channels
        )));
    }
    Ok(())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { config, out } => {
            let cfg: RunConfig = fsio::read_json(&config)?;
            cfg.validate()?;
            let resolved = cfg.resolved();
            let recordings = synthcorpus::generate_corpus(&resolved.corpus)?;
            save_corpus(&out, &resolved.corpus, &recordings)?;
            fsio::write_json(&out.join(RUN_CONFIG_FILE), &cfg)?;
            eprintln!("wrote {} recordings to {}", recordings.len(), out.display());
            Ok(())
        }
        Command::Train {
            stage,
            corpus,
            init,
            out,
            config,
        } => {
            let stage = Stage::try_from(stage).map_err(Error::Config)?;
            if stage == Stage::Extended && init.is_none() {
                return Err(Error::Config(
                    "stage 2 needs the stage-1 checkpoint: pass --init <stage-1 best.fhvz>".into(),
                ));
            }
            let cfg = load_run_config(config.as_deref(), &corpus)?;
            let stored = load_corpus(&corpus)?;
            let arch = cfg.arch(stored.dataset.n_channels);
            let init_params = match &init {
                Some(path) => {
                    let side = trainer::read_sidecar(path)?;
                    check_channels(&side, &stored.dataset)?;
                    if side.arch != arch {
                        return Err(Error::Config("initial checkpoint architecture differs from the run configuration".into()));
                    }
                    Some(load_checkpoint(path)?)
                }
                None => None,
            };
            let stage_cfg = cfg.stage(stage);
            let outcome = trainer::train_stage(&arch, &cfg.hyper, &stored.dataset, stage_cfg, init_params, |e| {
                eprintln!(
                    "stage {} epoch {:>4}  train total {:>12.3}  val bound {:>12.3}  val total {:>12.3}",
                    u8::from(stage),
                    e.epoch,
                    e.train.total,
                    e.val.bound,
                    e.val.total
                );
            })?;
            let sidecar = ModelSidecar {
                arch,
                hyper: cfg.hyper,
                tables: trainer::table_sizes(&stored.dataset),
                stage,
            };
            trainer::write_stage_artifacts(&out, &sidecar, &outcome)?;
            eprintln!(
                "best epoch {} (val {:?} {:.3}); wrote {}",
                outcome.best.best_epoch,
                outcome.best.monitor,
                outcome.best.best_val_score,
                out.join(CHECKPOINT_FILE).display()
            );
            Ok(())
        }
        Command::Eval {
            ckpt,
            corpus,
            out,
            config,
        } => {
            let stored = load_corpus(&corpus)?;
            let (sidecar, net) = load_model(&ckpt)?;
            check_channels(&sidecar, &stored.dataset)?;
            let cfg = load_run_config(config.as_deref(), &corpus)?;
            let report = probes::evaluate(&net, &stored.dataset, &cfg.probe)?;
            fsio::write_json(&out, &report)?;
            eprintln!(
                "subject z1 {:.3} z2 {:.3}; content z1 {:.3} z2 {:.3} raw {:.3}",
                report.subject.z1.accuracy,
                report.subject.z2.accuracy,
                report.content.z1.mean_accuracy,
                report.content.z2.mean_accuracy,
                report.raw_content.mean_accuracy
            );
            Ok(())
        }
        Command::ExportLatents { ckpt, corpus, out } => {
            let stored = load_corpus(&corpus)?;
            let (sidecar, net) = load_model(&ckpt)?;
            check_channels(&sidecar, &stored.dataset)?;
            let table = probes::infer_dataset_latents(&net, &stored.dataset)?;
            probes::export_latents(&table, &out)
        }
    }
}
