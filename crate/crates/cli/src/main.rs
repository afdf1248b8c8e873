//! depthbench: generate synthetic depth datasets, train and evaluate the
//! monocular and anytime-stereo models, and emit comparison reports.

mod config;
mod experiment;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use depthbench_core::data::{
    gen_synthetic_mono, gen_synthetic_stereo, save_mono_dataset, save_stereo_dataset,
    write_file_atomic, MonoGenConfig, StereoGenConfig,
};
use depthbench_core::mono::{build_mono_model, MonoConfig, MonoStructure};
use depthbench_core::stereo::{build_anynet, AnyNetConfig};

use config::{ExperimentConfig, Task};
use experiment::{compare_models, compare_to_csv, emit_report, eval_checkpoint, run_experiment, to_json_bytes};

/// Errors with the process exit code they map to: usage problems exit 2,
/// runtime failures exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }
}

impl From<depthbench_core::Error> for CliError {
    fn from(e: depthbench_core::Error) -> Self {
        match e {
            depthbench_core::Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "depthbench", version, about = "Depth-estimation models and benchmark harness")]
struct Cli {
    /// Overrides the data and training seeds from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for generated files and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Keep artifacts bitwise reproducible (wall-clock timings excluded).
    #[arg(long, global = true, default_value_t = true, action = clap::ArgAction::Set)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth and a manifest.
    GenData {
        /// "mono" or "stereo".
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        /// Stereo only: maximum scene disparity in pixels.
        #[arg(long)]
        max_disparity: Option<usize>,
    },
    /// Run a full experiment: prepare data, train, evaluate, write reports.
    Train,
    /// Evaluate a checkpoint on a dataset and write a report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mono only: write the first test sample's predicted depth as an
        /// XYZ point cloud.
        #[arg(long)]
        pointcloud_out: Option<PathBuf>,
    },
    /// Print parameter counts for a configured model.
    CountParams {
        /// Print the built-in comparison matrix (2 mono + 5 stereo variants)
        /// instead of a configured model.
        #[arg(long)]
        matrix: bool,
    },
    /// Build a comparison table (CSV + JSON) from two or more reports.
    Compare {
        reports: Vec<PathBuf>,
    },
    /// Re-emit a report as csv or json on stdout.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "json")]
        format: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::usage("--config is required for this command"))?;
    let mut config = ExperimentConfig::load(path)?;
    config.override_seed(cli.seed);
    let base_dir = path.parent().unwrap_or_else(|| std::path::Path::new(".")).to_path_buf();
    Ok((config, base_dir))
}

fn out_dir(cli: &Cli) -> Result<PathBuf, CliError> {
    cli.out
        .clone()
        .ok_or_else(|| CliError::usage("--out is required for this command"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData { task, count, height, width, max_disparity } => {
            let dir = out_dir(&cli)?;
            let seed = cli.seed.unwrap_or(1001);
            match task.as_str() {
                "mono" => {
                    let cfg = MonoGenConfig {
                        count: *count,
                        height: height.unwrap_or(64),
                        width: width.unwrap_or(64),
                    };
                    let samples = gen_synthetic_mono(seed, &cfg)?;
                    save_mono_dataset(&dir, &samples)?;
                }
                "stereo" => {
                    let cfg = StereoGenConfig {
                        count: *count,
                        height: height.unwrap_or(48),
                        width: width.unwrap_or(96),
                        max_disparity: max_disparity.unwrap_or(20),
                    };
                    let samples = gen_synthetic_stereo(seed, &cfg)?;
                    save_stereo_dataset(&dir, &samples)?;
                }
                other => return Err(CliError::usage(format!("unknown task {other:?}"))),
            }
            println!("wrote {count} {task} samples to {}", dir.display());
            Ok(())
        }
        Command::Train => {
            let (config, base_dir) = load_config(&cli)?;
            let dir = out_dir(&cli)?;
            let output = run_experiment(&config, &base_dir, &dir, cli.deterministic)?;
            println!("report: {}", output.report_path.display());
            println!("checkpoint: {}", output.checkpoint_path.display());
            Ok(())
        }
        Command::Eval { checkpoint, pointcloud_out } => {
            let (config, base_dir) = load_config(&cli)?;
            let dir = out_dir(&cli)?;
            let report = eval_checkpoint(checkpoint, &config, &base_dir, &dir, pointcloud_out.as_deref())?;
            println!("report: {}", report.display());
            Ok(())
        }
        Command::CountParams { matrix } => {
            if *matrix {
                print_count_matrix()?;
            } else {
                let (config, _) = load_config(&cli)?;
                print_counts_for(&config)?;
            }
            Ok(())
        }
        Command::Compare { reports } => {
            let dir = out_dir(&cli)?;
            std::fs::create_dir_all(&dir).map_err(depthbench_core::Error::Io)?;
            let table = compare_models(reports)?;
            write_file_atomic(&dir.join("compare.json"), &to_json_bytes(&table)?)?;
            let csv = compare_to_csv(&table);
            write_file_atomic(&dir.join("compare.csv"), csv.as_bytes())?;
            print!("{csv}");
            Ok(())
        }
        Command::Report { input, format } => {
            let bytes = emit_report(input, format)?;
            use std::io::Write;
            std::io::stdout()
                .lock()
                .write_all(&bytes)
                .map_err(|e| CliError::runtime(e.to_string()))?;
            Ok(())
        }
    }
}

fn print_counts_for(config: &ExperimentConfig) -> Result<(), CliError> {
    let counts = match config.task()? {
        Task::Mono => build_mono_model(config.mono_config()?)?.store().counts(),
        Task::Stereo => build_anynet(config.stereo_config()?)?.store().counts(),
    };
    println!(
        "{} ({}): trainable {} non_trainable {} total {}",
        config.experiment.id,
        config.variant()?,
        counts.trainable,
        counts.non_trainable,
        counts.total
    );
    Ok(())
}

/// The built-in variant matrix with reference sizes for context.
fn print_count_matrix() -> Result<(), CliError> {
    println!("variant,trainable,non_trainable,total,reference_params");
    for (structure, reference) in
        [(MonoStructure::FourOneFour, 1_966_467u64), (MonoStructure::ThreeOneThree, 489_091)]
    {
        let model = build_mono_model(MonoConfig::new(structure))?;
        let c = model.store().counts();
        println!(
            "mono-{},{},{},{},{reference}",
            structure.as_str(),
            c.trainable,
            c.non_trainable,
            c.total
        );
    }
    for (spn, reference) in depthbench_core::stereo::ANYNET_REFERENCE_PARAMS {
        let model = build_anynet(AnyNetConfig::default().with_spn(spn))?;
        let c = model.store().counts();
        let label = spn.map(|c| c.to_string()).unwrap_or_else(|| "none".to_string());
        println!(
            "stereo-spn-{label},{},{},{},{reference}",
            c.trainable, c.non_trainable, c.total
        );
    }
    Ok(())
}
