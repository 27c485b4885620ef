use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmvae_lab::experiments::{self, Log};
use dmvae_lab::{ExperimentConfig, ExperimentKind};

#[derive(Parser)]
#[command(name = "dmvae", version, about = "Run DMVAE experiments from a TOML config")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load) the teacher and report its fidelity.
    Teach(Common),
    /// Compare the alignment objectives side by side.
    Panels(Common),
    /// Plot the DM update direction on a 2-D grid.
    Field(Common),
    /// Run the full pipeline for each reference distribution.
    Sweep(Common),
    /// Vary lambda, guidance, timestep sampler and net size.
    Ablate(Common),
    /// Joint training, decoder refinement and latent prior.
    Pipeline(Common),
    /// Print the fully resolved configuration.
    ShowConfig(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults apply to anything it leaves out.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Run this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, relative to the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `section.key=value` with a TOML value; may be repeated.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// No progress lines on stderr.
    #[arg(short, long)]
    quiet: bool,
}

impl Common {
    fn load(&self) -> dmvae_lab::LabResult<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common) = match &cli.command {
        Command::Teach(c) => (ExperimentKind::Teach, c),
        Command::Panels(c) => (ExperimentKind::ObjectivePanel, c),
        Command::Field(c) => (ExperimentKind::DirectionField, c),
        Command::Sweep(c) => (ExperimentKind::RefSweep, c),
        Command::Ablate(c) => (ExperimentKind::Ablation, c),
        Command::Pipeline(c) => (ExperimentKind::Pipeline, c),
        Command::ShowConfig(c) => {
            return match c.load().and_then(|cfg| cfg.to_toml()) {
                Ok(text) => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            };
        }
    };
    let result = common
        .load()
        .and_then(|cfg| experiments::run(kind, &cfg, Log { quiet: common.quiet }));
    match result {
        Ok(summary) => {
            let failed: Vec<_> = summary.cells.iter().filter(|c| !c.ok).collect();
            for c in &failed {
                eprintln!("cell {} (seed {}) {}: {}", c.name, c.seed, c.status, c.error.as_deref().unwrap_or(""));
            }
            println!("{}", summary.out.join("summary.json").display());
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
