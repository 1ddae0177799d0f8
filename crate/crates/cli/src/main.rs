//! Command-line front end of the forecasting pipeline.
//!
//! On failure a single line `error: category=<name> message=<text>` goes to
//! stderr and the exit code is nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trajcast::config::ExperimentConfig;
use trajcast::env::EnvId;
use trajcast::pipeline::{Pipeline, Stage};
use trajcast::Error;

#[derive(Parser)]
#[command(
    name = "trajcast",
    version,
    about = "Trajectory forecasting with separated epistemic and aleatoric uncertainty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a preset config file.
    InitConfig {
        #[arg(long, value_parser = parse_env)]
        env: EnvId,
        /// The smallest config that still runs every stage.
        #[arg(long)]
        minimal: bool,
        /// Destination file; stdout when absent.
        #[arg(long)]
        path: Option<PathBuf>,
    },
    /// Generate training data and ground-truth evaluation rollouts.
    GenerateData(Common),
    /// Train the dynamics ensemble at both epistemic levels.
    TrainEnsemble(Common),
    /// Train the residual CVAE on top of each ensemble.
    TrainAleatoric(Common),
    /// Train the full-VAE and probabilistic-MLP baselines.
    TrainBaseline(Common),
    /// Forecast every evaluation scenario with every model.
    Forecast(Common),
    /// Score forecasts with trajectory MMD and the Brier score.
    Evaluate(Common),
    /// Write the Brier table, MMD curves, summary and digest.
    Report(Common),
    /// Run every stage, or those up to `--stage`.
    RunAll(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, value_parser = parse_env, default_value = "drone-lite")]
    preset: EnvId,
    /// Overrides the output directory of the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides every seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// With run-all: last stage to run.
    #[arg(long, value_parser = parse_stage)]
    stage: Option<Stage>,
}

fn parse_env(s: &str) -> Result<EnvId, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Common {
    fn config(&self) -> trajcast::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::preset(self.preset),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        Ok(cfg)
    }
}

fn run_stages(common: &Common, stages: &[Stage]) -> trajcast::Result<()> {
    let mut p = Pipeline::open(common.config()?)?;
    for &stage in stages {
        p.run_stage(stage)?;
        let rec = &p.manifest().stages[&stage];
        println!(
            "ok stage={stage} wall_time_s={:.3} artifacts={}",
            rec.wall_time_s,
            rec.artifacts.len()
        );
    }
    println!(
        "manifest={}",
        p.root().join(trajcast::pipeline::MANIFEST_FILE).display()
    );
    Ok(())
}

fn run(cli: Cli) -> trajcast::Result<()> {
    let (common, stages) = match &cli.command {
        Command::InitConfig { env, minimal, path } => {
            let cfg = if *minimal {
                ExperimentConfig::minimal(*env)
            } else {
                ExperimentConfig::preset(*env)
            };
            let text = cfg.to_toml()?;
            match path {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
            return Ok(());
        }
        Command::GenerateData(c) => (c, vec![Stage::Generate]),
        Command::TrainEnsemble(c) => (c, vec![Stage::TrainEnsemble]),
        Command::TrainAleatoric(c) => (c, vec![Stage::TrainAleatoric]),
        Command::TrainBaseline(c) => (c, vec![Stage::TrainBaselines]),
        Command::Forecast(c) => (c, vec![Stage::Forecast]),
        Command::Evaluate(c) => (c, vec![Stage::Evaluate]),
        Command::Report(c) => (c, vec![Stage::Report]),
        Command::RunAll(c) => {
            let last = c.stage.unwrap_or(Stage::Report);
            (c, Stage::ALL.into_iter().filter(|s| *s <= last).collect())
        }
    };
    if common.stage.is_some() && !matches!(cli.command, Command::RunAll(_)) {
        return Err(Error::Config(vec!["--stage only applies to run-all".into()]));
    }
    run_stages(common, &stages)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error: category=usage message={}", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: category={} message={}", e.category(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
