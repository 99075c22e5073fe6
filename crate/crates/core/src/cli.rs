//! Command-line entry points.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, EvalMode};
use crate::metrics::{read_csv, render_delta_table, render_report, render_table, write_csv, MetricReport};
use crate::synth::{export_dataset, Condition};
use crate::trainer::{datasets, load_backbone, load_fusion, train_align, train_fuse};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CONTRACT: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "msdepth", version, about = "Multi-spectral depth: data, training, evaluation")]
pub struct Cli {
    /// JSON configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    PerSpectrum,
    Fused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Day,
    Night,
    Rain,
    All,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Renders the train/val/test splits to PNG/PFM files.
    GenData,
    /// Trains the shared backbone.
    TrainAlign,
    /// Trains the fusion module on a frozen backbone.
    TrainFuse {
        #[arg(long)]
        align_ckpt: PathBuf,
    },
    /// Evaluates on the test split.
    Eval {
        #[arg(long, value_enum, default_value = "per-spectrum")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(long)]
        align_ckpt: PathBuf,
        #[arg(long)]
        fuse_ckpt: Option<PathBuf>,
    },
    /// Renders tables, CSV and plots from metric CSV files.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Contract(_) => EXIT_CONTRACT,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    create_out(out)?;
    match &cli.command {
        Command::GenData => {
            let (train, val, test) = datasets(&cfg)?;
            for (name, data) in [("train", &train), ("val", &val), ("test", &test)] {
                export_dataset(&out.join(name), data)?;
                info!("wrote {} {name} samples", data.len());
            }
            let path = out.join("config.json");
            std::fs::write(&path, cfg.to_json()?).map_err(|e| Error::io(&path, e))?;
        }
        Command::TrainAlign => {
            let (train, val, _) = datasets(&cfg)?;
            let (_, outcome) = train_align(&cfg, &train.materialize()?, &val.materialize()?, Some(out))?;
            info!(
                "align checkpoint from epoch {} (val rmse {:.4})",
                outcome.best_epoch, outcome.best_val_rmse
            );
        }
        Command::TrainFuse { align_ckpt } => {
            let align = Checkpoint::load(align_ckpt)?;
            let (train, val, _) = datasets(&cfg)?;
            let (_, outcome) = train_fuse(&cfg, &train.materialize()?, &val.materialize()?, &align, Some(out))?;
            info!(
                "fuse checkpoint from epoch {} (val rmse {:.4})",
                outcome.best_epoch, outcome.best_val_rmse
            );
        }
        Command::Eval {
            mode,
            split,
            align_ckpt,
            fuse_ckpt,
        } => {
            let align = Checkpoint::load(align_ckpt)?;
            let net = load_backbone(&cfg, &align)?;
            let (mode, fusion) = match mode {
                ModeArg::PerSpectrum => (EvalMode::PerSpectrum, None),
                ModeArg::Fused => {
                    let path = fuse_ckpt
                        .as_ref()
                        .ok_or_else(|| Error::Config("--mode fused requires --fuse-ckpt".into()))?;
                    let fuse = Checkpoint::load(path)?;
                    (EvalMode::Fused, Some(load_fusion(&cfg, &fuse, &align)?))
                }
            };
            let (_, _, test) = datasets(&cfg)?;
            let test = match split {
                SplitArg::All => test,
                SplitArg::Day => test.with_condition(Condition::Day),
                SplitArg::Night => test.with_condition(Condition::Night),
                SplitArg::Rain => test.with_condition(Condition::Rain),
            };
            let rows = evaluate_dataset(&net, fusion.as_ref(), &test, mode, &cfg.eval, cfg.align.batch_size)?;
            write_csv(&out.join("metrics.csv"), &rows)?;
            let table = render_table(&rows);
            let path = out.join("report.txt");
            std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
            print!("{table}");
        }
        Command::Report { metrics } => {
            let mut rows: Vec<MetricReport> = Vec::new();
            for p in metrics {
                rows.extend(read_csv(p)?);
            }
            let (fused, single): (Vec<MetricReport>, Vec<MetricReport>) =
                rows.iter().cloned().partition(|r| r.modality == crate::eval::FUSED_LABEL);
            let deltas = (!fused.is_empty() && !single.is_empty()).then(|| {
                let single: Vec<MetricReport> = single
                    .into_iter()
                    .filter(|r| crate::spectrum::Spectrum::ALL.iter().any(|s| s.as_str() == r.modality))
                    .collect();
                format!("fused vs best single spectrum\n{}", render_delta_table(&single, &fused))
            });
            render_report(out, &rows, deltas.as_deref())?;
            print!("{}", render_table(&rows));
        }
    }
    Ok(())
}
