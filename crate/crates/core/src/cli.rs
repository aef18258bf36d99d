//! Command-line front end for the `gaze` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::RunConfig;
use crate::cost_model::savings_report;
use crate::decode::{run_decode, write_decode_outputs, DecodeOptions};
use crate::snapshot::save_params;
use crate::trainer::{train, ToyModel, LOG_HEADER};
use crate::verify;

#[derive(Debug, Parser)]
#[command(name = "gaze", version, about = "Region-routed selective attention: verification, decoding, cost and training")]
pub struct Cli {
    /// Worker threads, 0 = one per core. Overrides the config; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the self-check suites; exits nonzero if any fails.
    Verify {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Synthetic decoding run: routing trace, heatmaps, transfer accounting.
    Decode {
        #[arg(long)]
        config: PathBuf,
        /// Steps to render as heatmaps, e.g. 0,3,7.
        #[arg(long, value_delimiter = ',')]
        heatmap_steps: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FLOP and KV-cache report comparing a dense and a gaze configuration.
    Cost {
        #[arg(long)]
        dense: PathBuf,
        #[arg(long)]
        gaze: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy model on the needle task.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Use the final ratio from the first step.
        #[arg(long)]
        no_schedule: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Cli {
    /// Parse arguments, with the config schema appended to `--help`.
    pub fn parse_with_schema<I, T>(args: I) -> Result<Self, clap::Error>
    where
        I: IntoIterator<Item = T>,
        T: Into<std::ffi::OsString> + Clone,
    {
        let matches = Cli::command().after_help(RunConfig::schema_help()).try_get_matches_from(args)?;
        Cli::from_arg_matches(&matches)
    }
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    match flag.or_else(|| cfg.out_dir.clone()) {
        Some(dir) => Ok(dir),
        None => bail!("no output directory: pass --out or set out_dir in the config"),
    }
}

fn write(path: PathBuf, body: &str) -> anyhow::Result<()> {
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
}

fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    Ok(pool.install(f))
}

/// Execute a parsed command. `Ok(false)` means a check failed.
pub fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Verify { seed } => {
            let results = in_pool(cli.workers.unwrap_or(1), || verify::run_all(seed))?;
            for r in &results {
                println!("{}", r.line());
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} of {} suites passed", results.len() - failed, results.len());
            Ok(failed == 0)
        }
        Command::Decode {
            config,
            heatmap_steps,
            out,
        } => {
            let cfg = load_config(&config)?;
            let dir = out_dir(out, &cfg)?;
            let opts = DecodeOptions {
                heatmap_steps,
                ..Default::default()
            };
            let run = in_pool(cli.workers.unwrap_or(cfg.workers), || run_decode(&cfg, &opts))??;
            let written = write_decode_outputs(&run, &cfg, &dir)?;
            print!("{}", run.summary_text());
            println!("wrote {} files to {}", written.len(), dir.display());
            Ok(true)
        }
        Command::Cost { dense, gaze, out } => {
            let dense_cfg = load_config(&dense)?;
            let gaze_cfg = load_config(&gaze)?;
            let report = savings_report(&dense_cfg.geometry()?, &gaze_cfg.geometry()?)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write(out.join("cost_report.txt"), &report.to_text())?;
            write(out.join("cost_report.csv"), &report.to_csv())?;
            print!("{}", report.to_text());
            Ok(true)
        }
        Command::Train {
            config,
            no_schedule,
            out,
        } => {
            let cfg = load_config(&config)?;
            let dir = out_dir(out, &cfg)?;
            let model = ToyModel::new(cfg.task_spec()?, cfg.context_tokens)?;
            let train_cfg = cfg.train_config(!no_schedule);
            let outcome = in_pool(cli.workers.unwrap_or(cfg.workers), || train(&model, &train_cfg))?
                .context("training failed")?;
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let mut log = format!("{LOG_HEADER}\n");
            for row in &outcome.log {
                log.push_str(&row.to_csv());
                log.push('\n');
            }
            write(dir.join("train_log.csv"), &log)?;
            write(dir.join("effective.conf"), &cfg.to_text())?;
            save_params(&dir.join("params.gzpm"), &outcome.params.tensors())?;
            let summary = format!(
                "initial loss {:.9}\nfinal loss {:.9}\ninitial hit rate {:.4}\nfinal hit rate {:.4} (K = {})\n",
                outcome.initial_loss, outcome.final_loss, outcome.initial_hit_rate, outcome.final_hit_rate, outcome.final_k
            );
            write(dir.join("train_summary.txt"), &summary)?;
            print!("{summary}");
            Ok(true)
        }
    }
}

/// Entry point of the binary.
pub fn main() -> ExitCode {
    let cli = match Cli::parse_with_schema(std::env::args_os()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
