//! Command-line front end. Every command prints one JSON line on success.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{scoped, Error, Result};
use crate::gradcheck;
use crate::harness::{self, EmbedKind, Suite, SuiteConfig};
use crate::par::Exec;
use crate::synthdata::{self, DomainDataset};
use crate::trainer::{self, Checkpoint, TrainData};

/// The JSON config document: task, training (with loss weights and network
/// sizes) and suite settings. Unknown keys are rejected.
pub type CliConfig = SuiteConfig;

pub const SOURCE_FILE: &str = "source.lfpd";
pub const TARGET_FILE: &str = "target.lfpd";
pub const SOURCE_EVAL_FILE: &str = "source_eval.lfpd";
pub const CHECKPOINT_FILE: &str = "checkpoint.lfpc";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Parser, Debug)]
#[command(name = "lfpa", about = "Local feature patterns for adversarial domain adaptation on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run everything on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate source, target and held-out source datasets into a directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all three phases on generated data.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Directory for the checkpoint and the training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on held-out source and target data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Run an experiment suite and write its CSV table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// baselines, pattern_sweep or negative_transfer.
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random points per objective.
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
    /// Write the top two principal components of codes or local features.
    ExportEmbed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// holistic or local.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sequential: bool,
    },
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

/// Reads and validates a config; errors name the offending key.
pub fn load_config(path: Option<&Path>) -> Result<CliConfig> {
    let cfg: CliConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("config {}: {e}", p.display())))?
        }
        None => CliConfig::default(),
    };
    validate_config(&cfg)?;
    Ok(cfg)
}

pub fn validate_config(cfg: &CliConfig) -> Result<()> {
    scoped("task", cfg.task.validate())?;
    scoped("train", cfg.train.validate())?;
    if cfg.seeds.is_empty() {
        return Err(Error::Invalid("seeds must not be empty".into()));
    }
    if cfg.removed_classes >= cfg.task.classes {
        return Err(Error::Invalid(format!(
            "removed_classes must be < task.classes ({}), got {}",
            cfg.task.classes, cfg.removed_classes
        )));
    }
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn load_data(dir: &Path) -> Result<(DomainDataset, DomainDataset, DomainDataset)> {
    Ok((
        synthdata::load_dataset(&dir.join(SOURCE_FILE))?,
        synthdata::load_dataset(&dir.join(TARGET_FILE))?,
        synthdata::load_dataset(&dir.join(SOURCE_EVAL_FILE))?,
    ))
}

fn run(cmd: Command) -> Result<(serde_json::Value, bool)> {
    match cmd {
        Command::GenData { common, out } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.task.seed = s;
            }
            let task = synthdata::generate_task(&cfg.task, exec(common.sequential))?;
            std::fs::create_dir_all(&out)?;
            synthdata::save_dataset(&task.source, &out.join(SOURCE_FILE))?;
            synthdata::save_dataset(&task.target, &out.join(TARGET_FILE))?;
            synthdata::save_dataset(&task.source_eval, &out.join(SOURCE_EVAL_FILE))?;
            Ok((
                json!({
                    "seed": cfg.task.seed,
                    "n_source": task.source.len(),
                    "n_target": task.target.len(),
                    "n_source_eval": task.source_eval.len(),
                    "source_sha256": sha256_hex(&synthdata::encode_dataset(&task.source)),
                    "target_sha256": sha256_hex(&synthdata::encode_dataset(&task.target)),
                }),
                true,
            ))
        }
        Command::Train { common, data, out } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            let (source, target, source_eval) = load_data(&data)?;
            let td = TrainData {
                source: &source,
                target: &target,
                probe_source: Some(&source_eval),
                exec: exec(common.sequential),
            };
            let (ckpt, log) = trainer::train_full(&cfg.train, &td)?;
            std::fs::create_dir_all(&out)?;
            let bytes = ckpt.to_bytes();
            std::fs::write(out.join(CHECKPOINT_FILE), &bytes)?;
            log.save_csv(&out.join(LOG_FILE))?;
            let last = log.steps.last().map(|s| s.losses);
            Ok((
                json!({
                    "seed": cfg.train.seed,
                    "config_hash": cfg.train.hash(),
                    "steps": ckpt.steps,
                    "checkpoint_sha256": sha256_hex(&bytes),
                    "final_losses": last,
                }),
                true,
            ))
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            sequential,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (_, target, source_eval) = load_data(&data)?;
            let report = harness::evaluate(&ckpt.model, &source_eval, &target, exec(sequential))?;
            let value = serde_json::to_value(&report)?;
            if let Some(p) = out {
                std::fs::write(p, serde_json::to_vec_pretty(&report)?)?;
            }
            Ok((value, true))
        }
        Command::Sweep { common, suite, out } => {
            let suite: Suite = suite.parse()?;
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seeds = vec![s];
            }
            let rows = harness::run_suite(suite, &cfg, exec(common.sequential))?;
            let f = std::io::BufWriter::new(std::fs::File::create(&out)?);
            harness::write_suite_csv(&rows, f)?;
            let aborted = rows.iter().filter(|r| !r.ok()).count();
            let means: serde_json::Map<_, _> =
                harness::config_means(&rows, |r| r.report.as_ref().map(|rep| rep.target_accuracy))
                    .into_iter()
                    .map(|(k, v)| (k, json!(v)))
                    .collect();
            Ok((
                json!({
                    "suite": suite.to_string(),
                    "rows": rows.len(),
                    "aborted": aborted,
                    "mean_target_accuracy": means,
                }),
                aborted == 0,
            ))
        }
        Command::Gradcheck { seed, points } => {
            let checks = gradcheck::objective_checks(seed, points)?;
            let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
            let coords: usize = checks.iter().map(|c| c.coords).sum();
            Ok((
                json!({
                    "max_rel_err": worst,
                    "checks": coords,
                    "objectives": checks,
                }),
                worst < 1e-5,
            ))
        }
        Command::ExportEmbed {
            checkpoint,
            data,
            kind,
            out,
            sequential,
        } => {
            let kind: EmbedKind = kind.parse()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (_, target, source_eval) = load_data(&data)?;
            let rows = harness::export_embeddings(&ckpt.model, &source_eval, &target, kind, exec(sequential))?;
            let f = std::io::BufWriter::new(std::fs::File::create(&out)?);
            harness::write_embeddings_csv(&rows, kind, f)?;
            Ok((json!({ "rows": rows.len() }), true))
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status: 0 success, 1 validation or runtime
/// failure, 2 usage error.
pub fn dispatch<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    2
                }
            };
        }
    };
    match run(cli.command) {
        Ok((summary, ok)) => {
            let _ = writeln!(stdout, "{summary}");
            if ok {
                0
            } else {
                1
            }
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}
