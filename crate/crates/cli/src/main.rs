use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use olfc_cli::runner::{self, CliError, RunOptions};

#[derive(Parser)]
#[command(
    name = "olfc",
    about = "Simulate and certify distributed optimal load-frequency control scenarios",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario: simulate, analyze, and write CSV/report/plot data.
    Run {
        /// Scenario JSON file.
        scenario: PathBuf,
        /// Output directory (a per-scenario subdirectory is created).
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the integration step (s).
        #[arg(long)]
        dt: Option<f64>,
        /// Override the simulation horizon (s).
        #[arg(long)]
        horizon: Option<f64>,
        /// Turn assumption-check warnings into errors.
        #[arg(long)]
        strict: bool,
        /// Emit certificates and the dispatch optimum without simulating.
        #[arg(long)]
        certify_only: bool,
        /// Exit with code 2 if the simulation diverges.
        #[arg(long)]
        expect_stable: bool,
    },
    /// Run several scenarios, optionally in parallel, and print a summary.
    Batch {
        /// Scenario JSON files.
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Number of concurrent runs.
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        #[arg(long)]
        strict: bool,
    },
    /// Droop certificates (both readings of the droop figure), comm-graph
    /// connectivity, and the dispatch optimum, without simulating.
    Certify {
        scenario: PathBuf,
        /// Also write the certification report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        strict: bool,
    },
    /// Closed-form economic dispatch compared against the brute-force
    /// oracle.
    Dispatch {
        scenario: PathBuf,
        /// Total load to dispatch (defaults to the scenario's terminal
        /// scheduled loads).
        #[arg(long)]
        load: Option<f64>,
        /// Oracle grid resolution.
        #[arg(long, default_value_t = 1e-5)]
        resolution: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Run {
            scenario,
            out,
            dt,
            horizon,
            strict,
            certify_only,
            expect_stable,
        } => {
            let opts = RunOptions {
                out_dir: out,
                dt,
                horizon,
                strict,
                certify_only,
            };
            let report = runner::run(&scenario, &opts)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print_run_summary(&report);
            if expect_stable && report.diverged {
                eprintln!("error: scenario diverged but --expect-stable was set");
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Batch {
            scenarios,
            out,
            parallelism,
            strict,
        } => {
            let opts = RunOptions {
                out_dir: out,
                strict,
                ..RunOptions::default()
            };
            let results = runner::batch(&scenarios, &opts, parallelism);
            println!(
                "{:<24} {:>9} {:>12} {:>12} {:>12}",
                "scenario", "diverged", "settling(s)", "P_m error", "max dV/dt"
            );
            let mut failures = 0;
            for (path, outcome) in &results {
                match outcome {
                    Ok(r) => {
                        let m = r.metrics.as_ref();
                        println!(
                            "{:<24} {:>9} {:>12} {:>12} {:>12}",
                            r.name,
                            if r.diverged { "yes" } else { "no" },
                            m.and_then(|m| m.settling_time)
                                .map_or("-".into(), |v| format!("{v:.2}")),
                            m.and_then(|m| m.terminal_dispatch_error)
                                .map_or("-".into(), |v| format!("{v:.2e}")),
                            r.storage
                                .as_ref()
                                .map_or("-".into(), |s| format!("{:.2e}", s.max_rate)),
                        );
                    }
                    Err(e) => {
                        failures += 1;
                        println!("{:<24} failed: {e}", path.display());
                    }
                }
            }
            Ok(if failures == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Certify {
            scenario,
            out,
            strict,
        } => {
            let report = runner::certify(&scenario, strict)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print_certify(&report);
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Dispatch {
            scenario,
            load,
            resolution,
        } => {
            let cmp = runner::dispatch_compare(&scenario, load, resolution)?;
            println!(
                "total load {:.6} pu -> marginal price {:.6}",
                cmp.total_load, cmp.closed_form.marginal_price
            );
            println!(
                "{:<6} {:>14} {:>14} {:>12}",
                "bus", "closed form", "oracle", "gap"
            );
            for (bus, closed) in &cmp.closed_form.generation {
                let oracle = cmp.oracle_generation[bus];
                println!(
                    "{:<6} {:>14.8} {:>14.8} {:>12.2e}",
                    bus,
                    closed,
                    oracle,
                    (closed - oracle).abs()
                );
            }
            println!(
                "max deviation {:.3e} at oracle resolution {:.1e}",
                cmp.max_deviation, cmp.oracle_resolution
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn print_run_summary(report: &olfc_cli::RunReport) {
    println!("scenario: {}", report.name);
    if report.diverged {
        println!(
            "diverged at t = {:.3} s",
            report.divergence_time.unwrap_or(f64::NAN)
        );
    }
    if let Some(m) = &report.metrics {
        match m.settling_time {
            Some(t) => println!(
                "frequency settled below {:.0e} pu at t = {:.2} s",
                m.freq_threshold, t
            ),
            None => println!(
                "frequency did not settle below {:.0e} pu",
                m.freq_threshold
            ),
        }
        if let Some(err) = m.terminal_dispatch_error {
            println!("terminal generation is {err:.2e} pu from the dispatch optimum");
        }
        if let Some(spread) = m.terminal_marginal_spread {
            println!("terminal marginal-cost spread {spread:.2e}");
        }
    }
    if let Some(s) = &report.storage {
        println!(
            "storage rate: max {:.2e} (slack {:.1e}) -> {}",
            s.max_rate,
            s.slack,
            if s.monotone {
                "dissipation certificate holds"
            } else {
                "certificate violated"
            }
        );
    }
    if let Some(csv) = &report.outputs.trajectory_csv {
        println!("trajectory: {}", csv.display());
    }
    println!("report: {}", report.outputs.report.display());
}

fn print_certify(report: &olfc_cli::CertifyReport) {
    println!("scenario: {}", report.name);
    if let Some(f) = report.comm_fiedler_value {
        println!("communication graph connected (Fiedler value {f:.3})");
    }
    println!(
        "{:<5} {:>24} {:>12} {:>8} {:>12} {:>8}",
        "bus", "admissible droop range", "configured", "holds", "reciprocal", "holds"
    );
    for u in &report.units {
        let interval = u
            .configured
            .interval
            .map_or("(prerequisites fail)".to_string(), |(lo, hi)| {
                format!("({lo:.4}, {hi:.4})")
            });
        println!(
            "{:<5} {:>24} {:>12.4} {:>8} {:>12.4} {:>8}",
            u.bus,
            interval,
            u.configured.droop,
            if u.configured.holds() { "yes" } else { "no" },
            u.reciprocal.droop,
            if u.reciprocal.holds() { "yes" } else { "no" },
        );
    }
    println!(
        "dispatch optimum for terminal loads {:.4} pu: price {:.6}",
        report.dispatch_terminal.total_load, report.dispatch_terminal.marginal_price
    );
    for (bus, p) in &report.dispatch_terminal.generation {
        println!("  bus {bus}: {p:.6} pu");
    }
}
