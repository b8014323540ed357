//! Command line: `gen`, `train`, `rerank`, `eval`, `gradcheck` and `config`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use gcsa_core::dataset::Split;
use gcsa_core::gradcheck::check_model;
use gcsa_core::metrics::DEFAULT_KS;
use gcsa_core::train::Stage;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::format::{
    read_checkpoint, read_dataset, read_labels, read_rankings, write_checkpoint, write_dataset,
    write_metrics, write_rankings, CheckpointHeader, MetricsFile, RankingsHeader,
};
use crate::pipeline::{self, Start, METHODS};

/// Largest relative gradient errors accepted by `gradcheck`.
pub const GRADCHECK_TOL_64: f64 = 1e-5;
pub const GRADCHECK_TOL_32: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(
    name = "gcsa",
    version,
    about = "Contextual re-ranking of retrieval results with side information"
)]
pub struct Cli {
    /// Worker threads for query-parallel re-ranking.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen {
        /// Run configuration (JSON); built-in defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one stage and write a checkpoint plus a `.log.json` next to it.
    Train {
        /// `gnn` keeps the stage-1 projection frozen; `joint` trains it too.
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Run configuration (JSON); built-in defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint; required by `--stage gnn`.
        #[arg(long)]
        projection: Option<PathBuf>,
        /// Continue from the parameters of this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-rank the initial top-K of a split and write a rankings file.
    Rerank {
        /// Model checkpoint; required by `--method gcsa`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Images to re-rank.
        #[arg(long, value_enum, default_value_t = SplitArg::Query)]
        split: SplitArg,
        /// Re-ranking method; baseline parameters come from the configuration.
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(METHODS))]
        method: String,
        /// Run configuration (JSON); built-in defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Rankings file to write.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute mAP@k and Recall@k of a rankings file.
    Eval {
        /// Rankings file written by `rerank`.
        #[arg(long)]
        rankings: PathBuf,
        /// `labels.jsonl`, or a dataset directory.
        #[arg(long)]
        labels: PathBuf,
        /// Cutoffs, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        ks: Vec<usize>,
        /// Metrics file to write; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check model gradients against finite differences.
    Gradcheck {
        /// Seed of the random instance and parameters.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Floating-point width of the analytic gradients.
        #[arg(long, value_enum, default_value_t = Precision::Both)]
        precision: Precision,
    },
    /// Print a run configuration with every field filled in.
    Config {
        /// Which built-in configuration to print.
        #[arg(long, value_enum, default_value_t = Preset::Full)]
        preset: Preset,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Projection,
    Gnn,
    Joint,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Projection => Stage::Projection,
            StageArg::Gnn => Stage::Gnn,
            StageArg::Joint => Stage::Joint,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Query,
    Val,
    Database,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Query => Split::Query,
            SplitArg::Val => Split::Val,
            SplitArg::Database => Split::Database,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Positional, heading and radio blocks.
    Full,
    /// Visual affinities only.
    Visual,
}

#[derive(Serialize)]
struct TrainLog<'a> {
    config_hash: &'a str,
    seed: u64,
    stage: Stage,
    report: &'a gcsa_core::train::TrainReport,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn log_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".log.json");
    out.with_file_name(name)
}

/// Runs one parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli.command))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen { config, out, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let (ds, meta) = pipeline::generate_dataset(&cfg)?;
            write_dataset(&out, &ds, &meta)?;
            log::info!(
                "wrote {} records ({} database, {} validation, {} query) to {}",
                ds.records.len(),
                ds.rows(Split::Database).len(),
                ds.rows(Split::Val).len(),
                ds.rows(Split::Query).len(),
                out.display()
            );
        }
        Command::Train {
            stage,
            data,
            config,
            out,
            projection,
            resume,
            seed,
        } => {
            let stage = Stage::from(stage);
            if stage == Stage::Gnn && projection.is_none() && resume.is_none() {
                return Err(CliError::Usage(
                    "--stage gnn requires --projection <stage-1 checkpoint>".into(),
                ));
            }
            let cfg = load_config(config.as_deref(), seed)?;
            let (ds, _) = read_dataset(&data)?;
            let stage1 = projection.as_deref().map(read_checkpoint).transpose()?;
            if let Some((h, m)) = &stage1 {
                if m.config().gnn || m.net.projection().is_none() {
                    return Err(CliError::Usage(format!(
                        "{} is not a stage-1 checkpoint",
                        h.config_hash
                    )));
                }
            }
            let resume = resume
                .as_deref()
                .map(read_checkpoint)
                .transpose()?
                .map(|(_, m)| m);
            let start = Start {
                projection: stage1.as_ref().map(|(_, m)| m),
                resume,
            };
            let trained = pipeline::train_stage(&ds, &cfg, stage, start, |e| {
                log::info!(
                    "epoch {} lr {:.3e} loss {:.4} val mAP@10 {:.4}",
                    e.epoch,
                    e.lr,
                    e.train_loss,
                    e.val_map10
                )
            })?;
            let hash = cfg.hash();
            let header = CheckpointHeader::new(
                &trained.model,
                Some(trained.schedule.clone()),
                Some(trained.report.clone()),
                &hash,
                cfg.seed,
            );
            write_checkpoint(&out, &header, &trained.model)?;
            let log = TrainLog {
                config_hash: &hash,
                seed: cfg.seed,
                stage,
                report: &trained.report,
            };
            let path = log_path(&out);
            let text = serde_json::to_string_pretty(&log).map_err(|e| CliError::json(&path, e))?;
            std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
            log::info!(
                "best epoch {} (validation mAP@10 {:.4}); wrote {}",
                trained.report.best_epoch,
                trained.report.best_val_map10,
                out.display()
            );
        }
        Command::Rerank {
            model,
            data,
            split,
            method,
            config,
            out,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let (ds, _) = read_dataset(&data)?;
            let model = model
                .as_deref()
                .map(read_checkpoint)
                .transpose()?
                .map(|(_, m)| m);
            if method == "gcsa" && model.is_none() {
                return Err(CliError::Usage("--method gcsa requires --model".into()));
            }
            let k = model.as_ref().map_or(cfg.model.k, |m| m.config().k);
            let split = Split::from(split);
            let method = pipeline::resolve_method(&method, &ds, &cfg)?;
            let side = pipeline::side_for(
                &cfg,
                model
                    .as_ref()
                    .filter(|_| method == gcsa_core::rerank::Method::Gcsa),
            );
            let initial = pipeline::contexts(&ds, split, k)?;
            let ranked = pipeline::run_method(method, &ds, &side, &initial, model.as_ref())?;
            write_rankings(
                &out,
                &RankingsHeader::new(method, split, &cfg.hash(), cfg.seed),
                &ranked,
            )?;
        }
        Command::Eval {
            rankings,
            labels,
            ks,
            out,
        } => {
            if ks.is_empty() || ks.contains(&0) {
                return Err(CliError::Usage("--ks must list positive integers".into()));
            }
            let (header, contexts) = read_rankings(&rankings)?;
            let labels = read_labels(&labels)?;
            let report = pipeline::metrics(&contexts, &labels, &ks)?;
            let file = MetricsFile {
                config_hash: header.config_hash,
                seed: header.seed,
                method: header.method,
                split: header.split,
                report,
            };
            match out {
                Some(p) => write_metrics(&p, &file)?,
                None => println!(
                    "{}",
                    serde_json::to_string_pretty(&file).expect("metrics serialize")
                ),
            }
        }
        Command::Gradcheck { seed, precision } => {
            let runs: &[(bool, f64)] = match precision {
                Precision::F64 => &[(true, GRADCHECK_TOL_64)],
                Precision::F32 => &[(false, GRADCHECK_TOL_32)],
                Precision::Both => &[(true, GRADCHECK_TOL_64), (false, GRADCHECK_TOL_32)],
            };
            let mut failed = Vec::new();
            for &(wide, tol) in runs {
                let report = check_model(seed, wide)?;
                let err = report.max_rel_error();
                let bits = if wide { 64 } else { 32 };
                let worst = report.worst().map_or("-", |w| w.0.as_str());
                let verdict = if err < tol { "pass" } else { "FAIL" };
                println!("{bits}-bit: max rel. err {err:.3e} (worst {worst}, tolerance {tol:.0e}) {verdict}");
                if err >= tol {
                    failed.push(bits);
                }
            }
            if !failed.is_empty() {
                return Err(CliError::Numeric(format!(
                    "gradient check failed at {failed:?}-bit"
                )));
            }
        }
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Full => RunConfig::default(),
                Preset::Visual => RunConfig::visual(),
            };
            println!("{}", cfg.to_json_pretty());
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command. Help and
/// version requests print and succeed.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            Ok(())
        }
        Err(e) => Err(CliError::Usage(
            e.render()
                .to_string()
                .trim_start_matches("error: ")
                .to_string(),
        )),
    }
}

/// Process entry point; returns the exit code.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    match run(std::env::args_os()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
