//! Command-line driver for the staged verification pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use gpverify::config::RunConfig;
use gpverify::pipeline::{run_stage, sha256_hex, Stage};
use gpverify::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Generate,
    Fit,
    Abstract,
    Verify,
    McCheck,
    Pipeline,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Generate => Stage::Generate,
            StageArg::Fit => Stage::Fit,
            StageArg::Abstract => Stage::Abstract,
            StageArg::Verify => Stage::Verify,
            StageArg::McCheck => Stage::McCheck,
            StageArg::Pipeline => Stage::Pipeline,
        }
    }
}

/// Learn, abstract and verify the safety of a sampled dynamical system.
#[derive(Debug, Parser)]
#[command(name = "gpverify", version)]
struct Cli {
    /// Stage to run; `pipeline` runs every stage in order.
    #[arg(value_enum)]
    stage: StageArg,
    /// Run configuration (TOML, flat `section.key = value` lines).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set verify.horizon=inf`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn run(cli: &Cli) -> Result<(), Error> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| Error::Config(format!("cannot read configuration {}: {e}", cli.config.display())))?;
    let cfg = RunConfig::from_toml_str_with(&text, &cli.overrides)?;
    let mut digest_input = text.into_bytes();
    for o in &cli.overrides {
        digest_input.push(b'\n');
        digest_input.extend_from_slice(o.as_bytes());
    }
    for report in run_stage(&cfg, cli.stage.into(), &sha256_hex(&digest_input))? {
        let outputs: Vec<String> = report.outputs.iter().map(|p| p.display().to_string()).collect();
        println!("{}: {} -> {}", report.stage, report.summary, outputs.join(", "));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
