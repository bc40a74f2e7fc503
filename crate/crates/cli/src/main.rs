use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use pflow_cli::{verify, ExperimentConfig, Run};

#[derive(Parser)]
#[command(name = "pflow", version, about = "Diffusion purification experiments for speaker verification")]
struct Cli {
    /// Experiment config (TOML); defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Experiment seed, mixed into every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override, e.g. `--set attack.steps=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the speaker corpus and sample trial lists.
    SynthData,
    /// Train the speaker encoder.
    TrainAsv,
    /// Attack the evaluation and validation trials.
    Attack,
    /// Train the diffusion denoiser.
    TrainDap,
    /// Select t* and resolve the defense list.
    Defend,
    /// Score every (condition, defense) cell.
    Evaluate,
    /// Build the report tables from the score files.
    Report,
    /// Run the built-in oracle checks.
    Verify,
    /// All stages from synth-data through report.
    Run,
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("out_dir={}", toml::Value::String(o.display().to_string())));
    }
    ExperimentConfig::load(cli.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<bool> {
    let stage = match cli.command {
        Command::Verify => {
            let mut ok = true;
            for c in verify::run_all() {
                match &c.outcome {
                    Ok(detail) => println!("PASS {:<16} {detail}", c.name),
                    Err(why) => {
                        ok = false;
                        println!("FAIL {:<16} {why}", c.name);
                    }
                }
            }
            return Ok(ok);
        }
        Command::SynthData => "synth-data",
        Command::TrainAsv => "train-asv",
        Command::Attack => "attack",
        Command::TrainDap => "train-dap",
        Command::Defend => "defend",
        Command::Evaluate => "evaluate",
        Command::Report => "report",
        Command::Run => {
            let r = Run::open(load(&cli)?)?.run_all()?;
            print!("{}", r.summary());
            return Ok(true);
        }
    };
    let run = Run::open(load(&cli)?)?;
    run.stage(stage)?;
    if stage == "report" {
        print!("{}", std::fs::read_to_string(run.dir.report("summary.txt"))?);
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
