//! Scenario execution: single runs, parallel batches, certification, and
//! dispatch verification.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

use olfc_core::analysis::{default_slack, dissipation_check, run_metrics, AnalysisError, StorageSummary};
use olfc_core::control::ControllerFamily;
use olfc_core::dispatch::{brute_force_dispatch, optimal_dispatch, DispatchError};
use olfc_core::sim::{equilibrium, simulate, Equilibrium, SimError};

use crate::report::{CertifyReport, DispatchComparison, DispatchSummary, OutputPaths, RunReport};
use crate::schema::{load_scenario, LoadedScenario, SchemaError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub strict: bool,
    pub certify_only: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            dt: None,
            horizon: None,
            strict: false,
            certify_only: false,
        }
    }
}

fn reference_for(loaded: &LoadedScenario) -> Result<Equilibrium, SimError> {
    let scenario = &loaded.scenario;
    let loads = match loaded.file.analysis.reference.as_str() {
        "initial" => scenario.schedule.initial().clone(),
        _ => scenario.schedule.entries().last().unwrap().1.clone(),
    };
    equilibrium(scenario, &loads)
}

/// Writes `value` to `path` atomically (temp file + rename).
fn write_json_atomic<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads, validates, simulates, analyzes, and writes all artifacts for one
/// scenario. With `certify_only` the simulation and its outputs are skipped.
pub fn run(path: &Path, opts: &RunOptions) -> Result<RunReport, CliError> {
    let mut loaded = load_scenario(path, opts.strict)?;
    if let Some(dt) = opts.dt {
        loaded.scenario.integrator.dt = dt;
        loaded.file.integrator.dt = dt;
    }
    if let Some(horizon) = opts.horizon {
        let last_event = loaded.scenario.schedule.last_event_time();
        if horizon < last_event {
            return Err(SchemaError::Build(format!(
                "requested horizon {horizon} ends before the last scheduled event at {last_event}"
            ))
            .into());
        }
        loaded.scenario.integrator.horizon = horizon;
        loaded.file.integrator.horizon = horizon;
    }

    let run_dir = opts.out_dir.join(&loaded.file.name);
    std::fs::create_dir_all(&run_dir)?;
    let report_path = run_dir.join("report.json");

    let dispatch_initial = DispatchSummary::from_equilibrium(
        &loaded,
        &equilibrium(&loaded.scenario, loaded.scenario.schedule.initial())?,
    );
    let terminal_loads = loaded.scenario.schedule.entries().last().unwrap().1.clone();
    let dispatch_terminal = match equilibrium(&loaded.scenario, &terminal_loads) {
        Ok(eq) => DispatchSummary::from_equilibrium(&loaded, &eq),
        Err(_) => dispatch_initial.clone(),
    };

    let mut warnings = loaded.warnings.clone();
    let mut report = RunReport {
        name: loaded.file.name.clone(),
        strict: opts.strict,
        warnings: Vec::new(),
        scenario: loaded.file.clone(),
        droop_certificates: loaded.certificates.clone(),
        comm_fiedler_value: loaded.comm_fiedler_value,
        dispatch_initial,
        dispatch_terminal,
        metrics: None,
        storage: None,
        diverged: false,
        divergence_time: None,
        outputs: OutputPaths {
            trajectory_csv: None,
            report: report_path.clone(),
            plot_data: Vec::new(),
        },
    };

    if !opts.certify_only {
        let trajectory = simulate(&loaded.scenario)?;
        report.diverged = trajectory.diverged.is_some();
        report.divergence_time = trajectory.diverged.map(|d| d.time);

        let csv_path = run_dir.join("trajectory.csv");
        crate::output::write_trajectory_csv(&csv_path, &trajectory, &loaded)?;
        report.outputs.trajectory_csv = Some(csv_path);
        report.outputs.plot_data =
            crate::output::write_plot_data(&run_dir.join("plots"), &trajectory, &loaded)?;

        report.metrics = Some(run_metrics(
            &trajectory,
            &loaded.scenario,
            loaded.file.analysis.freq_threshold,
        )?);

        if loaded.scenario.control.family != ControllerFamily::OpenLoop {
            let slack = loaded
                .file
                .analysis
                .storage_slack
                .unwrap_or_else(|| default_slack(loaded.scenario.integrator.dt));
            match reference_for(&loaded)
                .map_err(CliError::from)
                .and_then(|reference| {
                    dissipation_check(&trajectory, &loaded.scenario, &reference, slack)
                        .map_err(CliError::from)
                }) {
                Ok(storage) => report.storage = Some(StorageSummary::from(&storage)),
                Err(e) => warnings.push(format!("storage check skipped: {e}")),
            }
        }
    }

    report.warnings = warnings;
    write_json_atomic(&report_path, &report)?;
    Ok(report)
}

/// Runs several scenarios concurrently with a bounded worker pool. Results
/// come back in input order; per-scenario failures do not abort the batch.
pub fn batch(
    paths: &[PathBuf],
    opts: &RunOptions,
    parallelism: usize,
) -> Vec<(PathBuf, Result<RunReport, CliError>)> {
    let workers = parallelism.max(1).min(paths.len().max(1));
    let next = Mutex::new(0usize);
    let results: Vec<Mutex<Option<Result<RunReport, CliError>>>> =
        paths.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = {
                    let mut guard = next.lock().unwrap();
                    if *guard >= paths.len() {
                        return;
                    }
                    let i = *guard;
                    *guard += 1;
                    i
                };
                let outcome = run(&paths[index], opts);
                *results[index].lock().unwrap() = Some(outcome);
            });
        }
    });
    paths
        .iter()
        .cloned()
        .zip(
            results
                .into_iter()
                .map(|cell| cell.into_inner().unwrap().expect("worker filled the slot")),
        )
        .collect()
}

/// Certification without simulation: droop certificates under both readings
/// of the tabulated droop figure, communication connectivity, and the
/// dispatch optimum for the scheduled loads.
pub fn certify(path: &Path, strict: bool) -> Result<CertifyReport, CliError> {
    let loaded = load_scenario(path, strict)?;
    let dispatch_initial = DispatchSummary::from_equilibrium(
        &loaded,
        &equilibrium(&loaded.scenario, loaded.scenario.schedule.initial())?,
    );
    let terminal_loads = loaded.scenario.schedule.entries().last().unwrap().1.clone();
    let dispatch_terminal = match equilibrium(&loaded.scenario, &terminal_loads) {
        Ok(eq) => DispatchSummary::from_equilibrium(&loaded, &eq),
        Err(_) => dispatch_initial.clone(),
    };
    Ok(CertifyReport {
        name: loaded.file.name.clone(),
        warnings: loaded.warnings.clone(),
        units: loaded.certificates.clone(),
        comm_fiedler_value: loaded.comm_fiedler_value,
        dispatch_initial,
        dispatch_terminal,
    })
}

/// Closed-form dispatch against the brute-force oracle for the scenario's
/// terminal loads (or an explicit total load).
pub fn dispatch_compare(
    path: &Path,
    total_load: Option<f64>,
    resolution: f64,
) -> Result<DispatchComparison, CliError> {
    let loaded = load_scenario(path, false)?;
    let costs: Vec<_> = loaded.scenario.units.iter().map(|u| u.cost).collect();
    let load = total_load
        .unwrap_or_else(|| loaded.scenario.schedule.entries().last().unwrap().1.sum());
    let closed = optimal_dispatch(&costs, load)?;
    let oracle = brute_force_dispatch(&costs, load, resolution)?;
    let max_deviation = closed
        .generation
        .iter()
        .zip(&oracle.generation)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    let closed_form = DispatchSummary {
        total_load: load,
        marginal_price: closed.marginal_price,
        generation: loaded
            .gen_bus_ids
            .iter()
            .copied()
            .zip(closed.generation.iter().copied())
            .collect(),
        flexible_load: Default::default(),
    };
    Ok(DispatchComparison {
        total_load: load,
        closed_form,
        oracle_generation: loaded
            .gen_bus_ids
            .iter()
            .copied()
            .zip(oracle.generation.iter().copied())
            .collect(),
        oracle_resolution: resolution,
        max_deviation,
    })
}
