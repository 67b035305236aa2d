use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use contraction_gp::synthesis::SynthesisMode;
use contraction_gp_cli::config::PipelineConfig;
use contraction_gp_cli::pipeline::Pipeline;
use contraction_gp_cli::{exit_code, EXIT_NOT_CERTIFIED};

#[derive(Parser)]
#[command(name = "contraction-gp", version, about = "Contraction-certified controllers from Gaussian-process models")]
struct Cli {
    /// Pipeline configuration (JSON). Defaults to the built-in oscillator setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for data noise and simulation, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    TwoStep,
    Joint,
    Polytopic,
}

impl From<Mode> for SynthesisMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::TwoStep => SynthesisMode::TwoStep,
            Mode::Joint => SynthesisMode::Joint,
            Mode::Polytopic => SynthesisMode::Polytopic,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample noisy drift data from the true system.
    GenData,
    /// Fit the drift model to the sampled data.
    Learn,
    /// Synthesize the metric and controller.
    Synth {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Certify the closed loop on a dense grid.
    Verify,
    /// Roll out the closed loop and the baseline.
    Simulate,
    /// Run every stage of the oscillator pipeline.
    ReproduceOscillator,
    /// Print the default configuration.
    DefaultConfig,
}

fn run(cli: Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::oscillator(),
    };
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
        cfg.simulation.seed = seed;
    }
    if let Command::Synth { mode: Some(m) } = cli.command {
        cfg.synthesis.mode = m.into();
    }
    cfg.validate()?;
    let pipeline = Pipeline::new(cfg, cli.quiet);
    match cli.command {
        Command::GenData => {
            pipeline.gen_data()?;
        }
        Command::Learn => {
            pipeline.learn()?;
        }
        Command::Synth { .. } => {
            pipeline.synth()?;
        }
        Command::Verify => {
            let v = pipeline.verify()?;
            if !v.report.passed() {
                eprintln!(
                    "not certified: min margin {:.6e} at {:?}",
                    v.report.min_margin, v.report.worst_point
                );
                return Ok(EXIT_NOT_CERTIFIED);
            }
        }
        Command::Simulate => {
            pipeline.simulate()?;
        }
        Command::ReproduceOscillator => {
            let s = pipeline.reproduce()?;
            if !s.passed() {
                eprintln!("reproduction did not certify the closed loop");
                return Ok(EXIT_NOT_CERTIFIED);
            }
        }
        Command::DefaultConfig => println!("{}", pipeline.config().to_json()?),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
