use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rom_bayes::config::PipelineConfig;
use rom_bayes::pipeline::Pipeline;

/// Reduced order models of quadratic systems with Bayesian identification
/// of additive correction tensors.
#[derive(Parser)]
#[command(name = "rom-bayes", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct StageArgs {
    /// Pipeline configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for stage artifacts; defaults to the config's
    /// `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate full-order snapshots.
    Simulate(StageArgs),
    /// Compute the POD basis and projected coefficients.
    Pod(StageArgs),
    /// Assemble the reduced operators.
    Rom(StageArgs),
    /// Run the screening pass and freeze uninformed parameters.
    Sensitivity(StageArgs),
    /// Identify the correction by the configured smoother(s).
    Identify(StageArgs),
    /// Integrate the corrected and uncorrected models and write errors.csv.
    Validate(StageArgs),
    /// Produce quantile bands and report.json.
    Report(StageArgs),
    /// Run the full pipeline.
    Run(StageArgs),
}

impl Command {
    fn args(&self) -> &StageArgs {
        match self {
            Command::Simulate(a)
            | Command::Pod(a)
            | Command::Rom(a)
            | Command::Sensitivity(a)
            | Command::Identify(a)
            | Command::Validate(a)
            | Command::Report(a)
            | Command::Run(a) => a,
        }
    }
}

fn run(cli: Cli) -> rom_bayes::Result<()> {
    let args = cli.command.args();
    let mut config = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out_dir = match (&args.output, &config.output_dir) {
        (Some(dir), _) => dir.clone(),
        (None, Some(dir)) => PathBuf::from(dir),
        (None, None) => {
            return Err(rom_bayes::RomError::Config(
                "no output directory: pass --output or set output_dir in the config".into(),
            ))
        }
    };
    let mut pipeline = Pipeline::new(config, &out_dir)?;

    match &cli.command {
        Command::Simulate(_) => {
            let snaps = pipeline.stage_simulate()?;
            println!(
                "snapshots: {} cells x {} times -> {}",
                snaps.n_cells(),
                snaps.n_times(),
                out_dir.join("snapshots.txt").display()
            );
        }
        Command::Pod(_) => {
            let (_, basis, _) = pipeline.stage_pod()?;
            println!(
                "basis: {} modes, captured energy fraction {:.6} -> {}",
                basis.n_modes(),
                basis.energy_fraction(),
                out_dir.join("basis.txt").display()
            );
        }
        Command::Rom(_) => {
            let stage = pipeline.stage_rom()?;
            println!(
                "reduced system: {} modes, nu = {} -> {}",
                stage.system.n_modes(),
                stage.system.viscosity,
                out_dir.join("rom.txt").display()
            );
        }
        Command::Sensitivity(_) => {
            let stage = pipeline.stage_sensitivity()?;
            match &stage.report {
                Some(report) => println!(
                    "screening: {} of {} parameters retained (threshold {})",
                    report.active_set.len(),
                    report.ratio.len(),
                    report.threshold
                ),
                None => println!("screening disabled; all parameters active"),
            }
        }
        Command::Identify(_) => {
            let stage = pipeline.stage_identify()?;
            if let Some(enkf) = &stage.enkf {
                println!(
                    "enkf posterior: {} members, gain rank {}",
                    enkf.n_used, enkf.gain_rank
                );
            }
            if let Some(pce) = &stage.pce {
                let mean_active: f64 = pce.sparsity.iter().map(|r| r.n_active as f64).sum::<f64>()
                    / pce.sparsity.len().max(1) as f64;
                println!(
                    "pce posterior: gain rank {}, mean active coefficients {:.1}",
                    pce.gain_rank, mean_active
                );
            }
        }
        Command::Validate(_) => {
            let stage = pipeline.stage_validate()?;
            println!(
                "errors.csv written with {} rows -> {}",
                stage.table.times.len(),
                out_dir.join("errors.csv").display()
            );
        }
        Command::Report(_) | Command::Run(_) => {
            let report = pipeline.stage_report()?;
            println!("report -> {}", out_dir.join("report.json").display());
            for stage in &report.stages {
                println!(
                    "  stage {:<12} {} ({})",
                    stage.name, stage.hash, stage.status
                );
            }
            if !report.warnings.is_empty() {
                println!("warnings:");
                for w in &report.warnings {
                    println!("  - {w}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
