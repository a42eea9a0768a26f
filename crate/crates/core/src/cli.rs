//! Command-line front end. [`run`] returns the process exit code:
//! 0 success, 1 usage, 2 runtime failure, 3 integrity failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::bundle::{read_bundle, write_dataset_bundle, write_genmed_bundle, write_run_bundle, RunArtifacts, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::metrics::set_report;
use crate::synth::{Dataset, SynthConfig, DEFAULT_PAIRS, DEFAULT_TRAIN_PAIRS};
use crate::train::{enumerate_grid_weights, train_genmed, train_grid, train_mo, GenmedConfig, TrainConfig, WeightMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_INTEGRITY: i32 = 3;


#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        self == Toggle::On
    }
}

/// A comma separated point in objective space.
#[derive(Clone, Debug, PartialEq)]
struct Point(Vec<f64>);

fn parse_point(s: &str) -> std::result::Result<Point, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()
        .map(Point)
}

#[derive(Debug, Parser)]
#[command(name = "modir", version, about = "Multi-objective deformable image registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    Synth(SynthArgs),
    /// Train with hypervolume-derived dynamic weights.
    TrainMo(TrainArgs),
    /// Train the grid-search baseline (27 fixed weightings).
    TrainGrid(TrainArgs),
    /// Run the GenMED benchmark for one or more reference points.
    Genmed(GenmedArgs),
    /// Recompute metrics from a run bundle.
    Evaluate(EvaluateArgs),
    /// Re-render a run bundle's assets into a new directory.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_PAIRS)]
    count: usize,
    #[arg(long, default_value_t = DEFAULT_TRAIN_PAIRS)]
    train: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 27)]
    p: usize,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Reference point, comma separated (one coordinate per objective).
    #[arg(long = "ref", value_parser = parse_point)]
    reference: Option<Point>,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    guidance: Toggle,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    share_encoder: Toggle,
    #[arg(long)]
    out: PathBuf,
    /// Dataset bundle written by `synth`; defaults to the standard
    /// synthetic dataset for `--seed`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 250)]
    eval_every: usize,
    /// Evaluation pairs exported with per-solution images.
    #[arg(long, default_value_t = 2)]
    export_pairs: usize,
}

#[derive(Debug, Args)]
struct GenmedArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 25)]
    p: usize,
    #[arg(long, default_value_t = 3000)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Repeat for several reference points.
    #[arg(long = "ref", value_parser = parse_point)]
    reference: Vec<Point>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Run bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Where to write the metrics JSON (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    export_pairs: usize,
}

fn load_dataset(data: Option<&Path>, seed: u64) -> Result<Dataset> {
    match data {
        Some(dir) => read_bundle(dir)?.dataset(),
        None => Dataset::standard(seed),
    }
}

fn train(args: &TrainArgs, grid: bool) -> Result<serde_json::Value> {
    let guidance = args.guidance.on();
    let config = TrainConfig {
        p: args.p,
        iterations: args.iters,
        lr: args.lr,
        reference: args
            .reference
            .clone()
            .map(|p| p.0)
            .unwrap_or_else(|| vec![1.0; if guidance { 3 } else { 2 }]),
        guidance,
        share_encoder: args.share_encoder.on(),
        seed: args.seed,
        eval_every: args.eval_every,
        ..TrainConfig::default()
    };
    config.validate()?;
    let data = load_dataset(args.data.as_deref(), args.seed)?;
    let trained = if grid {
        train_grid(&config, &data)?
    } else {
        train_mo(&config, &data)?
    };
    let (manifest, report) = write_run_bundle(
        &RunArtifacts {
            kind: if grid { "train-grid" } else { "train-mo" },
            trace: &trained.trace,
            params: &trained.params,
            data: &data,
            export_pairs: args.export_pairs,
            grid_weights: if grid { Some(enumerate_grid_weights()?) } else { None },
        },
        &args.out,
    )?;
    Ok(json!({
        "bundle": args.out,
        "solutions": manifest.p,
        "initial_hv": trained.trace.initial().hypervolume,
        "final_hv": trained.trace.last().hypervolume,
        "pre_tre": report.pre_tre,
        "summary": report.summary,
    }))
}

fn dispatch(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Synth(a) => {
            let data = Dataset::new(
                SynthConfig {
                    seed: a.seed,
                    ..SynthConfig::default()
                },
                a.count,
                a.train,
            )?;
            let m = write_dataset_bundle(&data, &a.out)?;
            Ok(json!({"bundle": a.out, "pairs": data.count, "files": m.files.len()}))
        }
        Command::TrainMo(a) => train(&a, false),
        Command::TrainGrid(a) => train(&a, true),
        Command::Genmed(a) => {
            let mut config = GenmedConfig {
                p: a.p,
                iterations: a.iters,
                lr: a.lr,
                seed: a.seed,
                ..GenmedConfig::default()
            };
            if !a.reference.is_empty() {
                config.references = a.reference.into_iter().map(|p| p.0).collect();
            }
            let traces = train_genmed(&config)?;
            write_genmed_bundle(&config, &traces, &a.out)?;
            Ok(json!({
                "bundle": a.out,
                "traces": traces.iter().map(|t| json!({
                    "ref": t.reference,
                    "max_front_distance": t.front_distances.iter().copied().fold(0.0, f64::max),
                    "edge_statistic": t.edge_statistic,
                })).collect::<Vec<_>>(),
            }))
        }
        Command::Evaluate(a) => {
            let bundle = read_bundle(&a.data)?;
            let trace = bundle.trace()?;
            let data = bundle.dataset()?;
            let params = bundle.params()?;
            let eval = data.eval_indices().map(|i| data.pair(i)).collect::<Result<Vec<_>>>()?;
            let report = set_report(&params, &eval, &trace.config.reference, trace.config.guidance)?;
            let value = json!({"schema_version": SCHEMA_VERSION, "report": report});
            if let Some(out) = &a.out {
                let text = serde_json::to_vec_pretty(&value).expect("report serializes");
                std::fs::write(out, text).map_err(|e| Error::io(out, e))?;
            }
            Ok(json!({"pre_tre": report.pre_tre, "summary": report.summary}))
        }
        Command::Export(a) => {
            let bundle = read_bundle(&a.data)?;
            let trace = bundle.trace()?;
            let params = bundle.params()?;
            let data = bundle.dataset()?;
            let grid = matches!(trace.mode, WeightMode::Fixed(_));
            let (manifest, _) = write_run_bundle(
                &RunArtifacts {
                    kind: &bundle.manifest.kind,
                    trace: &trace,
                    params: &params,
                    data: &data,
                    export_pairs: a.export_pairs,
                    grid_weights: if grid { bundle.manifest.grid_weights.clone() } else { None },
                },
                &a.out,
            )?;
            Ok(json!({"bundle": a.out, "files": manifest.files.len()}))
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Integrity { .. } | Error::Version { .. } => EXIT_INTEGRITY,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
