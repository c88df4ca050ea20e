use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attestfl_core::data::{self, SyntheticParams};
use attestfl_core::experiment::{self, ExperimentConfig};
use attestfl_core::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "attestfl",
    version,
    about = "Attested federated learning simulator for vehicular traffic forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config or a named preset.
    Run {
        /// Path to the experiment config.
        #[arg(required_unless_present = "preset", conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Built-in preset, e.g. `static-afl1`.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Pair the loss curves of two completed runs and write compare.json.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        /// Where to write the report (default: <RUN_B>/compare.json).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a synthetic link-speed CSV.
    GenData {
        #[arg(long, default_value_t = 6)]
        links: usize,
        #[arg(long, default_value_t = 7)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2.0)]
        noise_sd: f64,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Inspect the built-in presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    /// Print a preset as a TOML config.
    Show {
        name: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else if e.is_divergence() {
        3
    } else {
        1
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run { config, preset } => {
            let cfg = match (config, preset) {
                (Some(path), _) => ExperimentConfig::load(&path)?,
                (None, Some(name)) => lookup_preset(&name)?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            run(&cfg)
        }
        Command::Compare { run_a, run_b, output } => {
            let cmp = experiment::compare_runs(&run_a, &run_b)?;
            let path = output.unwrap_or_else(|| run_b.join(experiment::COMPARE_FILE));
            experiment::write_comparison(&path, &cmp)?;
            println!(
                "{} vs {}: final loss {:.6} vs {:.6}, ratio {:.4}",
                cmp.run_a, cmp.run_b, cmp.mean_final_loss_a, cmp.mean_final_loss_b, cmp.final_loss_ratio
            );
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::GenData {
            links,
            days,
            seed,
            noise_sd,
            output,
        } => gen_data(
            &SyntheticParams {
                links,
                days,
                seed,
                noise_sd,
            },
            &output,
        ),
        Command::Presets { action } => {
            match action {
                PresetAction::List => {
                    for name in experiment::preset_names() {
                        println!("{name}");
                    }
                }
                PresetAction::Show { name } => print!("{}", lookup_preset(&name)?.to_toml()),
            }
            Ok(())
        }
    }
}

fn lookup_preset(name: &str) -> Result<ExperimentConfig, Error> {
    experiment::preset(name).ok_or_else(|| Error::Config {
        field: "preset".into(),
        message: format!("unknown preset `{name}` (see `attestfl presets list`)"),
    })
}

fn run(cfg: &ExperimentConfig) -> Result<(), Error> {
    cfg.validate()?;
    let dir = cfg.resolved_output_dir();
    let output = experiment::run_experiment(cfg)?;
    experiment::write_outputs(&dir, cfg, &output)?;
    let s = &output.summary;
    for seed in &s.seeds {
        println!(
            "seed {:>3}: loss {:.6} -> {:.6}, stalled rounds {}",
            seed.seed, seed.first_round_loss, seed.final_loss, seed.stalled_rounds
        );
    }
    let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.1}%", 100.0 * v));
    println!(
        "{}: mean final loss {:.6}, attacker recall {}, benign false positives {}",
        s.name,
        s.mean_final_loss,
        pct(s.detection.recall),
        pct(s.detection.false_positive_rate)
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn gen_data(params: &SyntheticParams, output: &Path) -> Result<(), Error> {
    let series = data::generate_synthetic(params)?;
    data::write_csv(&series, output)?;
    let speeds: Vec<f64> = series.iter().flat_map(|s| s.speeds.iter().copied()).collect();
    let mean = speeds.iter().sum::<f64>() / speeds.len().max(1) as f64;
    let min = speeds.iter().copied().fold(f64::INFINITY, f64::min);
    let max = speeds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let stats = serde_json::json!({
        "path": output,
        "links": series.len(),
        "rows": speeds.len(),
        "mean_speed_kmh": mean,
        "min_speed_kmh": min,
        "max_speed_kmh": max,
    });
    println!("{stats}");
    Ok(())
}
