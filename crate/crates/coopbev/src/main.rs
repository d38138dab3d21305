//! Experiment CLI: generate scenarios, train and evaluate model variants,
//! run latency sweeps and fusion-order ablations, and emit metric reports.
//!
//! Exit codes: 0 success, 2 usage error, 1 numeric or other runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coopbev::attention::fuse::FusionOrder;
use coopbev::config::{load_config, ExperimentConfig};
use coopbev::error::Error;
use coopbev::experiment::{run_experiment, sweep, ExperimentSpec};
use coopbev::model::Variant;
use coopbev::sim::io::{write_scenario, DEFAULT_INLINE_CAP};
use coopbev::sim::scenario::{generate_scenario, ScenarioPreset, ScenarioSpec};

const OUT_ROOT_ENV: &str = "COOPBEV_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "coopbev",
    about = "Cooperative BEV perception experiments on synthetic V2X scenarios",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonRunArgs {
    /// Model variant: CET-V, LET-V, XET-V, CET-V2X, LET-V2X, XET-V2X.
    #[arg(long)]
    variant: String,
    /// Channel delay in frames (V2X variants only).
    #[arg(long)]
    latency_frames: Option<u32>,
    /// image_first or pointcloud_first.
    #[arg(long, default_value = "image_first")]
    fusion_order: String,
    /// Scenario preset: intersection or moving.
    #[arg(long, default_value = "intersection")]
    preset: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory; defaults to $COOPBEV_OUT_ROOT or ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train a model if no checkpoint exists (default).
    #[arg(long, conflicts_with = "eval_only")]
    train: bool,
    /// Require an existing checkpoint; never train.
    #[arg(long)]
    eval_only: bool,
    /// TOML config overriding default sections (model/train/eval/payload/scenario).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load) one variant and evaluate it at one latency.
    Run(CommonRunArgs),
    /// Run the baseline grid: every variant at its applicable latencies.
    Sweep {
        #[command(flatten)]
        common: CommonRunArgs,
        /// Latencies for the V2X variants.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        latencies: Vec<u32>,
        /// Variants to include (defaults to the full baseline matrix).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Generate a scenario file without training anything.
    GenScenario {
        #[arg(long, default_value = "intersection")]
        preset: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn out_root(out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn build_config(path: Option<&PathBuf>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => load_config(p, ExperimentConfig::default()),
        None => Ok(ExperimentConfig::default()),
    }
}

fn spec_from_args(args: &CommonRunArgs) -> Result<(ExperimentSpec, ExperimentConfig), Error> {
    let variant = Variant::parse(&args.variant)?;
    let fusion_order = FusionOrder::parse(&args.fusion_order)?;
    let preset = ScenarioPreset::parse(&args.preset)?;
    let cfg = build_config(args.config.as_ref())?;
    let spec = ExperimentSpec {
        variant,
        latency_frames: args.latency_frames,
        fusion_order,
        preset,
        seed: args.seed,
        out_dir: out_root(args.out.clone()),
        train: !args.eval_only,
    };
    spec.validate()?;
    Ok((spec, cfg))
}

fn real_main() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let (spec, cfg) = spec_from_args(&args)?;
            let artifacts = run_experiment(&spec, &cfg)?;
            println!(
                "run complete: variant={} latency={:?} map={:?} amota={:?} amotp={:?}",
                artifacts.row.variant,
                artifacts.row.latency_frames,
                artifacts.row.map,
                artifacts.row.amota,
                artifacts.row.amotp
            );
            println!("artifacts: {}", artifacts.run_dir.display());
            Ok(())
        }
        Command::Sweep {
            common,
            latencies,
            variants,
        } => {
            let fusion_order = FusionOrder::parse(&common.fusion_order)?;
            let preset = ScenarioPreset::parse(&common.preset)?;
            let cfg = build_config(common.config.as_ref())?;
            let out = out_root(common.out.clone());
            let variant_list: Vec<Variant> = match variants {
                Some(names) => names
                    .iter()
                    .map(|n| Variant::parse(n))
                    .collect::<Result<Vec<_>, _>>()?,
                None => Variant::ALL.to_vec(),
            };
            let mut grid = Vec::new();
            for variant in variant_list {
                if variant.uses_other() {
                    for d in &latencies {
                        grid.push(ExperimentSpec {
                            variant,
                            latency_frames: Some(*d),
                            fusion_order,
                            preset,
                            seed: common.seed,
                            out_dir: out.clone(),
                            train: !common.eval_only,
                        });
                    }
                } else {
                    grid.push(ExperimentSpec {
                        variant,
                        latency_frames: None,
                        fusion_order,
                        preset,
                        seed: common.seed,
                        out_dir: out.clone(),
                        train: !common.eval_only,
                    });
                }
            }
            for spec in &grid {
                spec.validate()?;
            }
            let (path, rows) = sweep(&grid, &cfg, &out)?;
            println!("sweep complete: {} rows -> {}", rows.len(), path.display());
            Ok(())
        }
        Command::GenScenario {
            preset,
            seed,
            out,
            config,
        } => {
            let preset = ScenarioPreset::parse(&preset)?;
            let cfg = build_config(config.as_ref())?;
            let dir = out_root(out);
            let spec = ScenarioSpec {
                preset,
                rate_hz: cfg.scenario.rate_hz,
                duration_s: cfg.scenario.duration_s,
                seed,
            };
            let scenario = generate_scenario(&spec)?;
            let path = write_scenario(&dir, &format!("{preset}_s{seed}"), &scenario, DEFAULT_INLINE_CAP)?;
            println!("scenario written: {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) | Error::Parse(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
