//! Command-line front end for the paired DR/fully-informed SMPC experiments.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use drsmpc::harness::{
    conservatism_report, export, prepare, run_monte_carlo, run_paired_prepared,
    ExperimentConfig, QualitativeChecks, StarMode,
};
use drsmpc::regret::convergence_report;
use drsmpc::tightening::{psi_dr, psi_gaussian};

#[derive(Parser)]
#[command(
    name = "drsmpc",
    about = "Distributionally robust stochastic MPC: paired simulation, violation studies, conservatism and tightening tables",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Dr,
    Gaussian,
    Empirical,
}

impl From<Mode> for StarMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Dr => StarMode::Dr,
            Mode::Gaussian => StarMode::Gaussian,
            Mode::Empirical => StarMode::Empirical,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// One paired closed-loop run plus its regret series, exported as CSV
    /// and a JSON summary.
    Simulate {
        /// JSON experiment config; omitted means the built-in
        /// double-integrator benchmark.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the reference controller's tightening mode.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Output directory for run.csv and summary.json.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Trailing window for the regret-increment diagnostic.
        #[arg(long, default_value_t = 20)]
        tail_window: usize,
    },
    /// Monte-Carlo violation study over independent paired runs.
    MonteCarlo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Number of runs; omitted means the config value.
        #[arg(long)]
        runs: Option<usize>,
        /// Optional output directory for the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Conservatism volume of the tightened horizon constraint sets.
    Conservatism {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Monte-Carlo samples when the sets are not axis-aligned.
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prints the tightening constants over a grid of risk levels.
    Tightening {
        /// Comma-separated risk levels in (0, 0.5]; omitted means a default
        /// grid.
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>, mode: Option<Mode>) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::double_integrator_benchmark(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(m) = mode {
        config.star_mode = m.into();
    }
    Ok(config)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate {
            config,
            seed,
            mode,
            out,
            tail_window,
        } => {
            let config = load_config(&config, seed, mode)?;
            let prep = prepare(&config)?;
            let run = run_paired_prepared(&prep, config.seed)?;
            let series = run.series(&prep.model)?;
            let report = match series.phi_entry {
                Some(_) => Some(convergence_report(&series, tail_window)?),
                None => None,
            };
            let (csv, json) = export(&run, &series, report.as_ref(), &prep, &out)?;
            if let Some((kind, k)) = run.infeasible_at {
                eprintln!("warning: QP infeasible for {kind:?} at step {k}; run truncated");
            }
            let checks = QualitativeChecks::evaluate(&series, tail_window);
            println!("wrote {} and {}", csv.display(), json.display());
            println!(
                "final regret {:.6}, phi entry {:?}, gap slope {:?}, tail increment {:.3e}",
                series.closed_loop.last().copied().unwrap_or(0.0),
                series.phi_entry,
                checks.gap_log_slope,
                checks.regret_increment_tail_max,
            );
        }
        Command::MonteCarlo {
            config,
            seed,
            mode,
            runs,
            out,
        } => {
            let config = load_config(&config, seed, mode)?;
            let n_runs = runs.unwrap_or(config.monte_carlo_runs);
            let stats = run_monte_carlo(&config, n_runs)?;
            let text = serde_json::to_string_pretty(&stats)?;
            println!("{text}");
            if stats.dagger_rate > config.risk_budget {
                bail!(
                    "DR violation rate {:.4} exceeds the risk budget {}",
                    stats.dagger_rate,
                    config.risk_budget
                );
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("violations.json"), text)?;
            }
        }
        Command::Conservatism {
            config,
            seed,
            samples,
            out,
        } => {
            let config = load_config(&config, seed, None)?;
            let prep = prepare(&config)?;
            let estimate = conservatism_report(&prep, samples, config.seed)?;
            let text = serde_json::to_string_pretty(&estimate)?;
            println!("{text}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("conservatism.json"), text)?;
            }
        }
        Command::Tightening { deltas } => {
            let grid = deltas.unwrap_or_else(|| {
                vec![
                    0.5, 0.4, 0.3, 0.25, 0.2, 0.15, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001,
                ]
            });
            println!("{:>10}  {:>12}  {:>12}  {:>8}", "delta", "psi_dr", "psi_gauss", "ratio");
            for d in grid {
                let dr = psi_dr(d)?;
                let ga = psi_gaussian(d)?;
                if ga > 0.0 {
                    println!("{d:>10.4}  {dr:>12.6}  {ga:>12.6}  {:>8.3}", dr / ga);
                } else {
                    println!("{d:>10.4}  {dr:>12.6}  {ga:>12.6}  {:>8}", "-");
                }
            }
        }
    }
    Ok(())
}
