use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use stdim_cli::commands;
use stdim_cli::config::{RunConfig, KEYS};
use stdim_cli::selfcheck;
use stdim_cli::table::Metric;
use stdim_cli::{exit_code, UsageError};
use stdim_core::autograd::OpKind;

#[derive(Parser)]
#[command(name = "stdim", version, about = "Train and probe state representations on SpriteWorld")]
struct Cli {
    /// Output root; every file a command writes goes here.
    #[arg(long, global = true, env = "STDIM_OUT", default_value = "stdim-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect a labelled frame dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Collection seed (the `data_seed` key).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Train an encoder and write its checkpoint and log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        method: Option<String>,
        /// Encoder seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fit linear probes on a frozen checkpoint and write its report.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare probe reports in one table (CSV and aligned text).
    Report {
        /// `*.report.json` files.
        files: Vec<PathBuf>,
        /// One row per category instead of per variable.
        #[arg(long)]
        per_category: bool,
        /// f1 | f1_macro | accuracy
        #[arg(long, default_value = "f1")]
        metric: String,
    },
    /// Run the gradient, loss, metric and probing-protocol suites.
    Selfcheck {
        /// Only these suites (1-4); repeatable.
        #[arg(long = "suite")]
        suites: Vec<u8>,
        /// Corrupt one op's backward rule, e.g. `relu`.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// List every configuration key with its default.
    Keys,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override; repeatable, applied in order after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, named: &[(&str, Option<String>)]) -> Result<RunConfig, UsageError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for pair in &self.set {
            cfg.set_pair(pair)?;
        }
        for (k, v) in named {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn ensure_exists(p: &Path, what: &str) -> Result<(), UsageError> {
    if p.exists() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} {} does not exist", p.display())))
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let out = cli.out;
    match cli.command {
        Command::GenData {
            config,
            seed,
            policy,
            epsilon,
        } => {
            let cfg = config.resolve(&[("data_seed", s(&seed)), ("policy", policy), ("epsilon", s(&epsilon))])?;
            let path = commands::gen_data(&cfg, &out)?;
            println!("{}", path.display());
        }
        Command::Train {
            data,
            config,
            method,
            seed,
            steps,
        } => {
            let cfg = config.resolve(&[("method", method), ("seed", s(&seed)), ("steps", s(&steps))])?;
            ensure_exists(&data, "dataset")?;
            let path = commands::train(&cfg, &data, &out)?;
            println!("{}", path.display());
        }
        Command::Probe {
            checkpoint,
            data,
            config,
        } => {
            let cfg = config.resolve(&[])?;
            ensure_exists(&checkpoint, "checkpoint")?;
            ensure_exists(&data, "dataset")?;
            let o = commands::probe(&cfg, &checkpoint, &data, &out)?;
            print!("{}", std::fs::read_to_string(&o.text).context("reading report text")?);
            println!("{}", o.json.display());
        }
        Command::Report {
            files,
            per_category,
            metric,
        } => {
            let metric = Metric::from_name(&metric).ok_or_else(|| UsageError(format!("unknown metric `{metric}`")))?;
            for f in &files {
                ensure_exists(f, "report")?;
            }
            let table = commands::report(&files, per_category, metric, Some(&out))?;
            print!("{}", table.to_text());
        }
        Command::Selfcheck {
            suites,
            inject_fault,
        } => {
            let inject_fault = match inject_fault {
                None => None,
                Some(name) => match OpKind::from_name(&name) {
                    Some(OpKind::Leaf) | None => {
                        return Err(UsageError(format!("cannot inject a fault into `{name}`")).into())
                    }
                    Some(k) => Some(k),
                },
            };
            if let Some(bad) = suites.iter().find(|&&k| !(1..=4).contains(&k)) {
                return Err(UsageError(format!("no suite {bad}; suites are 1-4")).into());
            }
            let summary = selfcheck::run(&selfcheck::Options { inject_fault, suites });
            print!("{}", summary.render());
            return Ok(summary.passed());
        }
        Command::Keys => {
            let cfg = RunConfig::default().to_kv();
            for ((k, doc), line) in KEYS.iter().zip(cfg.lines()) {
                println!("{line:<36} # {doc}");
                debug_assert!(line.starts_with(k));
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
