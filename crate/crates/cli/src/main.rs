use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use clap::{Parser, Subcommand};
use log::info;

use fedcache::config::{preset, Algorithm, ExperimentPreset, RunConfig, PRESET_NAMES};
use fedcache::engine::{run_experiment, RunResult};
use fedcache::output::{emit_outputs, EmitOptions};
use fedcache::Error;

#[derive(Parser)]
#[command(name = "fedcache", version, about = "Knowledge-cache federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (algorithm x seed x sweep value) cell of an experiment.
    Run {
        /// Key-value config file applied on top of the preset.
        config: Option<PathBuf>,
        /// Override a setting, e.g. `--set tau=0.3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, env = "FEDCACHE_OUT", default_value = "fedcache-out")]
        out: PathBuf,
        /// Start from a shipped preset instead of the defaults.
        #[arg(long)]
        preset: Option<String>,
        /// Also write the final cache contents.
        #[arg(long)]
        export_cache: bool,
    },
    /// List shipped presets with their settings.
    ListPresets,
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

fn build_experiment(
    config: Option<&Path>,
    overrides: &[String],
    preset_name: Option<&str>,
) -> Result<ExperimentPreset, Error> {
    let mut exp = match preset_name {
        Some(name) => preset(name)?,
        None => ExperimentPreset::new("run", RunConfig::default(), Algorithm::ALL.to_vec()),
    };
    if let Some(path) = config {
        exp.apply_file(path)?;
    }
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
            key: o.clone(),
            msg: "override must look like key=value".into(),
        })?;
        exp.set(k.trim(), v.trim())?;
    }
    exp.validate()?;
    Ok(exp)
}

fn run(
    config: Option<&Path>,
    overrides: &[String],
    out: &Path,
    preset_name: Option<&str>,
    export_cache: bool,
) -> Result<(), Failure> {
    let exp = build_experiment(config, overrides, preset_name).map_err(Failure::Config)?;
    let root = out.join(&exp.name);
    for cell in exp.cells().map_err(Failure::Config)? {
        info!("cell {}: {}", cell.label, cell.algorithms.len());
        let results: Vec<RunResult> = thread::scope(|s| {
            let handles: Vec<_> = cell
                .algorithms
                .iter()
                .map(|&a| {
                    let cfg = &cell.cfg;
                    s.spawn(move || run_experiment(cfg, a))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect::<Result<_, _>>()
        })
        .map_err(Failure::Runtime)?;
        let dir = root.join(&cell.label);
        emit_outputs(&results, &dir, EmitOptions { export_cache }).map_err(Failure::Runtime)?;
        for r in &results {
            println!(
                "{}\t{}\tfinal_ua={:.4}\tbytes={}",
                cell.label,
                r.algorithm,
                r.final_average_ua(),
                r.ledger.entries().iter().map(|e| e.bytes).sum::<u64>()
            );
        }
    }
    println!("wrote {}", root.display());
    Ok(())
}

fn list_presets() {
    for name in PRESET_NAMES {
        let p = preset(name).expect("shipped preset");
        println!("[{name}]");
        for (k, v) in p.to_pairs() {
            println!("{k} = {v}");
        }
        println!();
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::ListPresets => {
            list_presets();
            ExitCode::SUCCESS
        }
        Command::Run {
            config,
            overrides,
            out,
            preset,
            export_cache,
        } => match run(config.as_deref(), &overrides, &out, preset.as_deref(), export_cache) {
            Ok(()) => ExitCode::SUCCESS,
            Err(Failure::Config(e)) => {
                eprintln!("config error: {e}");
                ExitCode::from(2)
            }
            Err(Failure::Runtime(e)) => {
                eprintln!("error: {e}");
                ExitCode::from(3)
            }
        },
    }
}
