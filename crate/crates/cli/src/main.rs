//! Experiment runner.
//!
//! One experiment per invocation; all randomness flows from a single
//! `--seed`. Exit codes: 0 success, 2 configuration error, 3 runtime
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use chguide_core::config::{parse_config, ExperimentConfig, ExperimentKind};
use chguide_core::error::Error;
use chguide_core::experiment::run_experiment;

const USAGE: &str = "\
chguide - guided-diffusion sampling laboratory

Usage:
  chguide <experiment> [--config FILE] [--out DIR] [--seed N] [--paired]
  chguide help

Experiments:
  gaussian    2-D Gaussian pair: guided sampling + fitted-Gaussian KL
  mixture     three-component mixture: guided sampling + mixture KL
  magnet      lattice cooling: MH datasets, kernel-score sampling, NLL
  diagnose    finite-difference mixing-error study on the Gaussian pair
  iterstudy   solver-iteration counts per timestep over a tolerance sweep
  mh          generate lattice datasets and magnetization histograms

Flags:
  --config FILE   key=value configuration (defaults per experiment)
  --out DIR       output directory (overrides the config)
  --seed N        top-level seed (overrides the config)
  --paired        also run the counterpart guidance method on the same
                  seed, schedule, and sampler, and emit the comparison

Outputs (in the run directory):
  samples.csv     one sample per row; header carries run metadata
  metrics.json    flat report keyed by sampler/guidance/omega
  traces.json     per-timestep solver iteration and residual summaries
  config_echo.txt canonical configuration echo (reparses identically)
";

struct CliArgs {
    experiment: ExperimentKind,
    config_path: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    paired: bool,
}

fn parse_args(args: &[String]) -> Result<CliArgs, String> {
    let mut positional = None;
    let mut config_path = None;
    let mut out = None;
    let mut seed = None;
    let mut paired = false;
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        match arg.as_str() {
            "--config" => {
                let v = iter.next().ok_or("--config needs a file path")?;
                config_path = Some(PathBuf::from(v));
            }
            "--out" => {
                let v = iter.next().ok_or("--out needs a directory")?;
                out = Some(PathBuf::from(v));
            }
            "--seed" => {
                let v = iter.next().ok_or("--seed needs an integer")?;
                seed = Some(v.parse().map_err(|_| format!("bad seed `{v}`"))?);
            }
            "--paired" => paired = true,
            "-h" | "--help" | "help" => return Err(String::new()),
            other if other.starts_with('-') => {
                return Err(format!("unknown flag `{other}`"));
            }
            other => {
                if positional.is_some() {
                    return Err(format!("unexpected argument `{other}`"));
                }
                positional = Some(other.to_string());
            }
        }
    }
    let name = positional.ok_or("missing experiment name")?;
    let experiment =
        ExperimentKind::parse(&name).ok_or_else(|| format!("unknown experiment `{name}`"))?;
    Ok(CliArgs {
        experiment,
        config_path,
        out,
        seed,
        paired,
    })
}

fn load_config(args: &CliArgs) -> Result<ExperimentConfig, Error> {
    let text = match &args.config_path {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?,
        None => String::new(),
    };
    let mut config = parse_config(&text, Some(args.experiment))?;
    if let Some(out) = &args.out {
        config.run.out = out.clone();
    }
    if let Some(seed) = args.seed {
        config.run.seed = seed;
    }
    if args.paired {
        config.run.paired = true;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().skip(1).collect();
    if raw.is_empty() {
        eprint!("{USAGE}");
        return ExitCode::from(2);
    }
    let args = match parse_args(&raw) {
        Ok(args) => args,
        Err(msg) => {
            if msg.is_empty() {
                print!("{USAGE}");
                return ExitCode::SUCCESS;
            }
            eprintln!("error: {msg}");
            eprint!("{USAGE}");
            return ExitCode::from(2);
        }
    };
    let config = match load_config(&args) {
        Ok(config) => config,
        Err(err) => {
            eprintln!("configuration error: {err}");
            return ExitCode::from(2);
        }
    };
    match run_experiment(&config) {
        Ok(report) => {
            println!(
                "{} finished; artifacts in {}",
                config.experiment.name(),
                report.out_dir.display()
            );
            if let Some(paired) = report.metrics.get("paired") {
                println!(
                    "paired comparison: kl_ch={} kl_cf={}",
                    paired["kl_ch"], paired["kl_cf"]
                );
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("run failed: {err}");
            ExitCode::from(3)
        }
    }
}
