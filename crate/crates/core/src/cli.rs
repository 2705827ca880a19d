//! The `nacf` command line: dataset generation, training, rendering,
//! evaluation, few-shot sweeps and plot-data export.
//!
//! Exit codes: 0 on success, 1 on a usage error (the usage message goes to
//! standard error), 2 when the command itself fails.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetConfig, Split};
use crate::error::{invalid, io_err, NacfError, Result};
use crate::metrics::MetricErrors;
use crate::model::Model;
use crate::plots::export_plots;
use crate::room::{extract_contexts, Orientation, Query};
use crate::train::{
    run_experiment, train_stage_main, train_stage_refine, training_indices, Stage, TrainConfig, MAIN_FINAL,
};
use crate::wav;

#[derive(Debug, Parser)]
#[command(name = "nacf", version, about = "Render binaural room impulse responses with a neural acoustic context field")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Main,
    Refine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset with the image-source oracle.
    GenData {
        /// Dataset configuration (JSON); defaults to the standard scene.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the split seed of the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one stage.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Training configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Main-stage checkpoint the refine stage starts from
        /// (default: `<out>/final.ckpt`).
        #[arg(long)]
        main_ckpt: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render one response to a stereo WAVE file.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset whose room (and, with --index, query) is used.
        #[arg(long)]
        data: PathBuf,
        /// Dataset entry to render.
        #[arg(long, conflicts_with_all = ["emitter", "receiver", "orientation"])]
        index: Option<usize>,
        /// Emitter position `x,y` in metres.
        #[arg(long, value_parser = parse_point)]
        emitter: Option<[f64; 2]>,
        /// Receiver position `x,y` in metres.
        #[arg(long, value_parser = parse_point)]
        receiver: Option<[f64; 2]>,
        /// Head orientation in degrees (0, 90, 180 or 270).
        #[arg(long)]
        orientation: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Receives the three headline errors; the per-pair detail goes to
        /// a `.detail.json` file beside it.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train at several training-set fractions and record test errors.
    Fewshot {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.4,0.6")]
        fractions: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export plot data for dataset entries.
    Plot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        indices: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_point(s: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected x,y but got {s:?}"));
    }
    let num = |p: &str| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"));
    Ok([num(parts[0])?, num(parts[1])?])
}

/// One row of the few-shot summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotPoint {
    pub fraction: f64,
    pub train_items: usize,
    #[serde(flatten)]
    pub errors: MetricErrors,
}

/// `ckpt/best` names `ckpt/best.ckpt` when the bare path does not exist.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_file() {
        return path.to_path_buf();
    }
    let mut with_ext = path.as_os_str().to_os_string();
    with_ext.push(".ckpt");
    PathBuf::from(with_ext)
}

/// Path of the detailed report written next to `report`.
pub fn detail_path(report: &Path) -> PathBuf {
    let stem = report.file_stem().map(|s| s.to_os_string()).unwrap_or_else(|| "report".into());
    let mut name = stem;
    name.push(".detail.json");
    report.with_file_name(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serialises");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| NacfError::Format { path: path.to_path_buf(), reason: e.to_string() })
}

fn train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Runs a parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg: DatasetConfig = match config {
                Some(p) => read_json(&p)?,
                None => DatasetConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = Dataset::generate(&cfg)?;
            let m = ds.write(&out)?;
            eprintln!("wrote {} entries to {}", m.entries.len(), out.display());
        }
        Command::Train { stage, config, data, out, main_ckpt, seed } => {
            let mut cfg = train_config(config.as_deref(), seed)?;
            let ds = Dataset::load(&data)?;
            let outcome = match stage {
                StageArg::Main => {
                    cfg.stage = Stage::Main;
                    train_stage_main(&ds, &cfg, &out)?
                }
                StageArg::Refine => {
                    cfg.stage = Stage::Refine;
                    let main = main_ckpt.map(|p| resolve_checkpoint(&p)).unwrap_or_else(|| out.join(MAIN_FINAL));
                    train_stage_refine(&ds, &cfg, &main, &out)?
                }
            };
            let last = outcome.log.epochs.last().expect("at least one epoch");
            eprintln!(
                "{} epochs on {} items, final loss {:.6}; checkpoint {}",
                last.epoch,
                training_indices(&ds, &cfg)?.len(),
                last.loss,
                outcome.final_checkpoint.display()
            );
        }
        Command::Render { ckpt, data, index, emitter, receiver, orientation, out } => {
            let model = Model::load(&resolve_checkpoint(&ckpt))?;
            let manifest = Dataset::read_manifest(&data)?;
            let room = &manifest.config.room;
            let query = match (index, emitter, receiver, orientation) {
                (Some(i), ..) => {
                    if i >= manifest.entries.len() {
                        return Err(invalid(format!("index {i} out of range ({} entries)", manifest.entries.len())));
                    }
                    manifest.query(i)
                }
                (None, Some(e), Some(r), Some(o)) => {
                    Query { emitter: e, receiver: r, orientation: Orientation::from_degrees(o)?, z: manifest.config.z }
                }
                _ => return Err(invalid("render needs --index or all of --emitter, --receiver, --orientation")),
            };
            query.validate(room)?;
            let contexts = extract_contexts(room, &query, model.config.boundary_points, model.config.rays)?;
            let rir = crate::field::render_rir(&model, &query, &contexts, room.footprint_diagonal())?;
            wav::write(&out, &rir)?;
        }
        Command::Eval { ckpt, data, report, split } => {
            let model = Model::load(&resolve_checkpoint(&ckpt))?;
            let ds = Dataset::load(&data)?;
            let indices = match split {
                SplitArg::Train => ds.indices(Split::Train),
                SplitArg::Test => ds.indices(Split::Test),
                SplitArg::All => (0..ds.samples.len()).collect(),
            };
            if indices.is_empty() {
                return Err(invalid("the selected split is empty"));
            }
            let full = crate::train::evaluate_model(&model, &ds, &indices)?;
            write_json(&report, &full.errors)?;
            write_json(&detail_path(&report), &full)?;
        }
        Command::Fewshot { config, data, out, fractions, seed } => {
            let base = train_config(config.as_deref(), seed)?;
            let ds = Dataset::load(&data)?;
            let mut points = Vec::with_capacity(fractions.len());
            for f in fractions {
                let cfg = TrainConfig { train_fraction: f, stage: Stage::Main, ..base.clone() };
                cfg.validate()?;
                let dir = out.join(format!("fraction_{f}"));
                let run = run_experiment(&ds, &cfg, &dir)?;
                points.push(FewShotPoint {
                    fraction: f,
                    train_items: training_indices(&ds, &cfg)?.len(),
                    errors: run.report.errors,
                });
            }
            write_json(&out.join("fewshot.json"), &points)?;
        }
        Command::Plot { ckpt, data, indices, out } => {
            let model = Model::load(&resolve_checkpoint(&ckpt))?;
            let ds = Dataset::load(&data)?;
            export_plots(&model, &ds, &indices, &out)?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{}", e.render());
                    1
                }
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
