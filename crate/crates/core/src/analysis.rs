//! Numerical verification of the closed loop's dissipation certificates.
//!
//! The composite storage function combines a Bregman-type energy of the grid
//! (kinetic term plus the broken line potential) with per-generator storage
//! for the turbine-governor/controller blocks and, when active, the extra
//! storage of the primal-dual or controllable-load states. Its time
//! derivative is estimated by central differences over the stored trajectory
//! so the check stays independent of the right-hand-side implementation, and
//! it is also compared against the analytically decomposed dissipation terms
//! wherever the trajectory runs under the reference loads.

use nalgebra::DVector;
#[cfg(test)]
use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::control::ControllerFamily;
use crate::governor::assemble_w;
use crate::grid::{GridError, NetworkModel, SECURITY_ANGLE};
use crate::sim::{
    rk4_step, Equilibrium, Scenario, SimError, StackedSystem, Trajectory,
};

/// Central-difference error coefficient of the slack model, calibrated on
/// the linear test system x' = -x (storage x^2, third derivative bounded by
/// 8, finite-difference error dt^2/6 * 8 rounded up).
pub const FD_ERROR_COEFF: f64 = 1.4;

/// Inequality slack for dissipation checks at the given step size.
pub fn default_slack(dt: f64) -> f64 {
    1e-6 + FD_ERROR_COEFF * dt * dt
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("reference is not a steady state of the closed loop (residual {residual:.3e})")]
    NotSteadyState { residual: f64 },
    #[error("trajectory holds fewer than three rows; nothing to differentiate")]
    TooShort,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Incremental grid storage: kinetic energy of the frequency deviations plus
/// the Bregman distance of the line potential from the reference angles.
pub fn grid_storage(
    model: &NetworkModel,
    line_angle: &DVector<f64>,
    gen_freq: &DVector<f64>,
    ref_angle: &DVector<f64>,
    ref_freq: &DVector<f64>,
) -> f64 {
    let mut kinetic = 0.0;
    for i in 0..model.gen_count() {
        let d = gen_freq[i] - ref_freq[i];
        kinetic += 0.5 * model.inertia()[i] * d * d;
    }
    let mut potential = 0.0;
    for k in 0..model.line_count() {
        potential += model.coupling()[k]
            * (-line_angle[k].cos() + ref_angle[k].cos()
                - ref_angle[k].sin() * (line_angle[k] - ref_angle[k]));
    }
    kinetic + potential
}

/// Storage of a first-order turbine-governor with its setpoint controller.
/// The droop gain is inverted back into the droop constant the quadratic
/// form is weighted with.
pub fn tg1_storage(
    unit: &crate::governor::GeneratorUnit,
    setpoint: f64,
    mech: f64,
    ref_value: f64,
) -> f64 {
    let k = 1.0 / unit.droop;
    0.5 * unit.control_time * k * (setpoint - ref_value).powi(2)
        + 0.5 * unit.turbine_time * k * (mech - ref_value).powi(2)
}

/// Storage of a second-order turbine-governor with its setpoint controller.
pub fn tg2_storage(
    unit: &crate::governor::GeneratorUnit,
    setpoint: f64,
    steam: f64,
    mech: f64,
    ref_value: f64,
) -> f64 {
    let steam_time = unit.steam_time().expect("second-order unit");
    0.5 * unit.control_time * (setpoint - ref_value).powi(2)
        + 0.5 * steam_time * (steam - ref_value).powi(2)
        + 0.5 * steam_time * (mech - steam).powi(2)
}

/// Composite storage report over a trajectory.
#[derive(Debug, Clone)]
pub struct StorageReport {
    pub times: Vec<f64>,
    /// Grid storage series.
    pub grid: Vec<f64>,
    /// Per-generator storage series, indexed [unit][row].
    pub units: Vec<Vec<f64>>,
    /// Extra storage of the primal-dual or controllable-load states.
    pub extra: Option<Vec<f64>>,
    /// Composite storage series.
    pub total: Vec<f64>,
    /// Central-difference derivative of the composite storage at interior
    /// rows (aligned with times[1..rows-1]).
    pub total_rate: Vec<f64>,
    /// Largest derivative sample (positive excursions reveal certificate
    /// violations).
    pub max_rate: f64,
    /// First interior time where the derivative exceeds the slack.
    pub first_positive_rate: Option<f64>,
    /// Largest mismatch between the measured derivative and the analytically
    /// decomposed dissipation terms, over rows under the reference loads.
    pub decomposition_residual: f64,
    /// Slack used for the monotonicity verdict.
    pub slack: f64,
}

impl StorageReport {
    pub fn monotone(&self) -> bool {
        self.max_rate <= self.slack
    }
}

/// Serializable one-line summary for run reports.
#[derive(Debug, Clone, Serialize)]
pub struct StorageSummary {
    pub max_rate: f64,
    pub first_positive_rate: Option<f64>,
    pub decomposition_residual: f64,
    pub slack: f64,
    pub monotone: bool,
}

impl From<&StorageReport> for StorageSummary {
    fn from(r: &StorageReport) -> Self {
        Self {
            max_rate: r.max_rate,
            first_positive_rate: r.first_positive_rate,
            decomposition_residual: r.decomposition_residual,
            slack: r.slack,
            monotone: r.monotone(),
        }
    }
}

fn reference_slices(reference: &Equilibrium) -> (DVector<f64>, DVector<f64>) {
    let layout = &reference.state.layout;
    (
        reference.state.slice(layout.line_angle),
        reference.state.slice(layout.gen_freq),
    )
}

/// Composite storage value at one trajectory row.
fn storage_parts(
    trajectory: &Trajectory,
    row: usize,
    scenario: &Scenario,
    reference: &Equilibrium,
) -> (f64, Vec<f64>, Option<f64>) {
    let lay = &trajectory.layout;
    let (ref_angle, ref_freq) = reference_slices(reference);
    let eta = trajectory.slice(row, lay.line_angle);
    let omega = trajectory.slice(row, lay.gen_freq);
    let u = grid_storage(&scenario.model, &eta, &omega, &ref_angle, &ref_freq);

    let mut units = Vec::with_capacity(scenario.units.len());
    if scenario.control.family != ControllerFamily::OpenLoop {
        let setpoint = trajectory.slice(row, lay.setpoint);
        let mech = trajectory.slice(row, lay.mech_power);
        for (i, unit) in scenario.units.iter().enumerate() {
            let z = match lay.steam_slot[i] {
                Some(slot) => tg2_storage(
                    unit,
                    setpoint[i],
                    trajectory.states[row][lay.steam_power.offset + slot],
                    mech[i],
                    reference.mech_power[i],
                ),
                None => tg1_storage(unit, setpoint[i], mech[i], reference.mech_power[i]),
            };
            units.push(z);
        }
    }

    let extra = match scenario.control.family {
        ControllerFamily::PrimalDual => {
            let vflow = trajectory.slice(row, lay.virtual_flow);
            let lambda = trajectory.slice(row, lay.multiplier);
            let ref_vflow = reference.state.slice(lay.virtual_flow);
            let ref_lambda = reference.state.slice(lay.multiplier);
            Some(
                0.5 / scenario.control.flow_gain * (vflow - ref_vflow).norm_squared()
                    + 0.5 / scenario.control.price_gain
                        * (lambda - ref_lambda).norm_squared(),
            )
        }
        ControllerFamily::Consensus if !scenario.control.load_control.is_empty() => {
            let mut z = 0.0;
            for (slot, lc) in scenario.control.load_control.iter().enumerate() {
                let d = trajectory.states[row][lay.load_setpoint.offset + slot]
                    - reference.flexible_load[slot];
                z += 0.5 * lc.control_time * d * d;
            }
            Some(z)
        }
        _ => None,
    };
    (u, units, extra)
}

/// Analytically decomposed dissipation rate at one trajectory row: load and
/// generator damping, actuation quadratic forms, the consensus Laplacian
/// term (or its primal-dual counterpart), and the gain-override correction.
fn decomposed_rate(
    trajectory: &Trajectory,
    row: usize,
    scenario: &Scenario,
    reference: &Equilibrium,
) -> f64 {
    let lay = &trajectory.layout;
    let model = &scenario.model;
    let omega = trajectory.slice(row, lay.gen_freq);
    let omega_l = trajectory.load_freq(row, scenario);
    let mut rate = 0.0;
    for i in 0..model.load_count() {
        rate -= model.load_damping()[i] * omega_l[i] * omega_l[i];
    }
    if scenario.control.family == ControllerFamily::OpenLoop {
        // Open loop: damping plus the supply term from the injected power.
        for i in 0..model.gen_count() {
            rate -= model.gen_damping()[i] * omega[i] * omega[i];
        }
        return rate;
    }
    let setpoint = trajectory.slice(row, lay.setpoint);
    let mech = trajectory.slice(row, lay.mech_power);
    let gains = scenario.control.gain_multipliers(scenario.units.len());
    for (i, unit) in scenario.units.iter().enumerate() {
        match lay.steam_slot[i] {
            Some(slot) => {
                let steam = trajectory.states[row][lay.steam_power.offset + slot];
                let w = assemble_w(
                    unit.steam_time().unwrap(),
                    unit.turbine_time,
                    model.gen_damping()[i],
                    unit.droop,
                );
                let y = nalgebra::Vector3::new(omega[i], steam - mech[i], steam - setpoint[i]);
                rate += (y.transpose() * w * y)[(0, 0)];
                // A gain override perturbs the setpoint law away from the
                // certified one; the equality keeps an explicit record of it.
                rate -= (gains[i] - 1.0)
                    * (1.0 - unit.droop)
                    * omega[i]
                    * (setpoint[i] - reference.mech_power[i]);
            }
            None => {
                let k = 1.0 / unit.droop;
                rate -= model.gen_damping()[i] * omega[i] * omega[i];
                rate -= k * (setpoint[i] - mech[i]).powi(2);
            }
        }
    }
    match scenario.control.family {
        ControllerFamily::Consensus => {
            let comm = scenario.control.comm.as_ref().expect("validated");
            let mut marginals = Vec::with_capacity(comm.node_count());
            let mut ref_marginals = Vec::with_capacity(comm.node_count());
            for (i, unit) in scenario.units.iter().enumerate() {
                marginals.push(unit.cost.marginal(setpoint[i]));
                ref_marginals.push(unit.cost.marginal(reference.mech_power[i]));
            }
            for (slot, lc) in scenario.control.load_control.iter().enumerate() {
                marginals.push(
                    lc.benefit
                        .marginal(trajectory.states[row][lay.load_setpoint.offset + slot]),
                );
                ref_marginals.push(lc.benefit.marginal(reference.flexible_load[slot]));
            }
            let dev = DVector::from_fn(marginals.len(), |i, _| marginals[i] - ref_marginals[i]);
            rate -= (dev.transpose() * comm.laplacian() * &dev)[(0, 0)];
        }
        ControllerFamily::PrimalDual => {
            for (i, unit) in scenario.units.iter().enumerate() {
                let d = setpoint[i] - reference.mech_power[i];
                rate -= unit.cost.quadratic * d * d;
            }
        }
        ControllerFamily::OpenLoop => unreachable!(),
    }
    rate
}

/// Verifies both faces of the closed-loop dissipation certificate along a
/// trajectory: the composite storage derivative must stay below the slack,
/// and it must agree with the analytically decomposed dissipation terms
/// wherever the run operates under the reference loads.
pub fn dissipation_check(
    trajectory: &Trajectory,
    scenario: &Scenario,
    reference: &Equilibrium,
    slack: f64,
) -> Result<StorageReport, AnalysisError> {
    if trajectory.rows() < 3 {
        return Err(AnalysisError::TooShort);
    }
    // The reference must be a fixed point of the closed loop under its own
    // loads.
    let system = StackedSystem::new(scenario)?;
    let residual = system
        .rhs(0.0, &reference.state.values, &reference.loads)
        .amax();
    if residual > 1e-8 {
        return Err(AnalysisError::NotSteadyState { residual });
    }

    let rows = trajectory.rows();
    let mut grid = Vec::with_capacity(rows);
    let mut units: Vec<Vec<f64>> = if scenario.control.family == ControllerFamily::OpenLoop {
        Vec::new()
    } else {
        vec![Vec::with_capacity(rows); scenario.units.len()]
    };
    let mut extra_series: Option<Vec<f64>> = None;
    let mut total = Vec::with_capacity(rows);
    for row in 0..rows {
        let (u, z_units, z_extra) = storage_parts(trajectory, row, scenario, reference);
        let mut v = u;
        grid.push(u);
        // z_units is empty for open-loop runs.
        for (i, z) in z_units.iter().enumerate() {
            units[i].push(*z);
            v += z;
        }
        if let Some(z) = z_extra {
            extra_series.get_or_insert_with(Vec::new).push(z);
            v += z;
        }
        total.push(v);
    }

    let dt = trajectory.dt;
    let mut total_rate = Vec::with_capacity(rows - 2);
    let mut max_rate = f64::NEG_INFINITY;
    let mut first_positive_rate = None;
    let mut decomposition_residual: f64 = 0.0;
    for i in 1..rows - 1 {
        let rate = (total[i + 1] - total[i - 1]) / (2.0 * dt);
        total_rate.push(rate);
        if rate > max_rate {
            max_rate = rate;
        }
        if first_positive_rate.is_none() && rate > slack {
            first_positive_rate = Some(trajectory.times[i]);
        }
        let under_reference = trajectory.loads[i - 1] == reference.loads
            && trajectory.loads[i] == reference.loads
            && trajectory.loads[i + 1] == reference.loads;
        if under_reference && scenario.control.family != ControllerFamily::OpenLoop {
            let analytic = decomposed_rate(trajectory, i, scenario, reference);
            decomposition_residual = decomposition_residual.max((rate - analytic).abs());
        }
    }

    Ok(StorageReport {
        times: trajectory.times.clone(),
        grid,
        units,
        extra: extra_series,
        total,
        total_rate,
        max_rate,
        first_positive_rate,
        decomposition_residual,
        slack,
    })
}

/// Open-loop passivity probe result.
#[derive(Debug, Clone)]
pub struct PassivityReport {
    pub times: Vec<f64>,
    /// Grid storage along the probe.
    pub storage: Vec<f64>,
    /// Pointwise residual of the supply-rate identity at interior samples.
    pub residual: Vec<f64>,
    pub max_residual: f64,
}

/// Drives the open-loop grid with a mechanical-power signal around a steady
/// state and checks the supply-rate identity: the storage derivative must
/// equal damping losses plus the deviation power injected at the generators.
pub fn passivity_probe(
    model: &NetworkModel,
    loads: &DVector<f64>,
    base_mech: &DVector<f64>,
    signal: impl Fn(f64) -> DVector<f64>,
    dt: f64,
    horizon: f64,
) -> Result<PassivityReport, AnalysisError> {
    let steady = model.solve_steady_state(base_mech, loads)?;
    let ref_angle = steady.line_angle.clone();
    let ref_freq = DVector::repeat(model.gen_count(), steady.omega_star);
    let ref_load_freq = DVector::repeat(model.load_count(), steady.omega_star);

    let gen_count = model.gen_count();
    let m = model.line_count();
    let rhs = |t: f64, state: &DVector<f64>| -> DVector<f64> {
        let eta = state.rows(0, m).into_owned();
        let omega = state.rows(m, gen_count).into_owned();
        let mech = base_mech + signal(t);
        let gs = crate::grid::GridState::new(eta, omega);
        let dot = model.grid_rhs(&gs, &mech, loads);
        let mut out = DVector::zeros(m + gen_count);
        out.rows_mut(0, m).copy_from(&dot.line_angle);
        out.rows_mut(m, gen_count).copy_from(&dot.gen_freq);
        out
    };

    let steps = ((horizon / dt) + 1e-9).floor() as usize;
    let mut state = DVector::zeros(m + gen_count);
    state.rows_mut(0, m).copy_from(&ref_angle);
    state.rows_mut(m, gen_count).copy_from(&ref_freq);

    let mut times = Vec::with_capacity(steps + 1);
    let mut storage = Vec::with_capacity(steps + 1);
    let mut supply = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = i as f64 * dt;
        let eta = state.rows(0, m).into_owned();
        let omega = state.rows(m, gen_count).into_owned();
        times.push(t);
        storage.push(grid_storage(model, &eta, &omega, &ref_angle, &ref_freq));
        // Analytic right side of the identity at this sample.
        let omega_l = model.load_freq(&eta, loads);
        let mut rate = 0.0;
        for j in 0..gen_count {
            let d = omega[j] - ref_freq[j];
            rate -= model.gen_damping()[j] * d * d;
            rate += d * signal(t)[j];
        }
        for j in 0..model.load_count() {
            let d = omega_l[j] - ref_load_freq[j];
            rate -= model.load_damping()[j] * d * d;
        }
        supply.push(rate);
        if i < steps {
            state = rk4_step(&state, t, dt, rhs);
        }
    }

    let mut residual = Vec::with_capacity(steps.saturating_sub(1));
    let mut max_residual: f64 = 0.0;
    for i in 1..times.len().saturating_sub(1) {
        let fd = (storage[i + 1] - storage[i - 1]) / (2.0 * dt);
        let r = fd - supply[i];
        residual.push(r);
        max_residual = max_residual.max(r.abs());
    }
    Ok(PassivityReport {
        times,
        storage,
        residual,
        max_residual,
    })
}

/// Quantitative summary of one simulation run.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    /// First time after the last load event from which the frequency
    /// deviation stays below the threshold everywhere. None when the run
    /// diverged or never settles.
    pub settling_time: Option<f64>,
    /// Frequency threshold used for the settling time (pu).
    pub freq_threshold: f64,
    /// max - min of the generator marginal costs at the final row.
    pub terminal_marginal_spread: Option<f64>,
    /// Infinity-norm gap between the final mechanical power and the dispatch
    /// optimum for the terminal loads.
    pub terminal_dispatch_error: Option<f64>,
    pub diverged: bool,
    pub divergence_time: Option<f64>,
    /// Number of stored rows with a line angle at or beyond the security
    /// limit.
    pub security_violations: usize,
}

/// Computes settling, optimality, and security metrics for a trajectory.
pub fn run_metrics(
    trajectory: &Trajectory,
    scenario: &Scenario,
    freq_threshold: f64,
) -> Result<RunMetrics, AnalysisError> {
    let diverged = trajectory.diverged.is_some();
    let divergence_time = trajectory.diverged.map(|d| d.time);
    let rows = trajectory.rows();
    if rows == 0 {
        return Err(AnalysisError::TooShort);
    }

    let mut security_violations = 0;
    for row in 0..rows {
        let eta = trajectory.slice(row, trajectory.layout.line_angle);
        if eta.iter().any(|a| a.abs() >= SECURITY_ANGLE) {
            security_violations += 1;
        }
    }

    let settling_time = if diverged {
        None
    } else {
        let last_event = scenario.schedule.last_event_time();
        let start = trajectory
            .times
            .iter()
            .position(|&t| t >= last_event - 1e-12)
            .unwrap_or(0);
        let mut last_violation = None;
        for row in start..rows {
            if trajectory.freq_inf_norm(row, scenario) >= freq_threshold {
                last_violation = Some(row);
            }
        }
        match last_violation {
            None => Some(trajectory.times[start]),
            Some(v) if v + 1 < rows => Some(trajectory.times[v + 1]),
            Some(_) => None,
        }
    };

    let (terminal_marginal_spread, terminal_dispatch_error) = if diverged
        || scenario.control.family == ControllerFamily::OpenLoop
    {
        (None, None)
    } else {
        let last = rows - 1;
        let marginals = trajectory.marginals(last, &scenario.units);
        let spread = marginals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - marginals.iter().cloned().fold(f64::INFINITY, f64::min);
        let eq = crate::sim::equilibrium(scenario, &trajectory.loads[last])?;
        let mech = trajectory.slice(last, trajectory.layout.mech_power);
        let error = (mech - eq.mech_power).amax();
        (Some(spread), Some(error))
    };

    Ok(RunMetrics {
        settling_time,
        freq_threshold,
        terminal_marginal_spread,
        terminal_dispatch_error,
        diverged,
        divergence_time,
        security_violations,
    })
}

/// Finite-difference Hessian of a scalar function, used by the tests as an
/// oracle for the storage function's curvature.
#[cfg(test)]
fn fd_hessian(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut xpp = x.clone();
            let mut xpm = x.clone();
            let mut xmp = x.clone();
            let mut xmm = x.clone();
            xpp[i] += h;
            xpp[j] += h;
            xpm[i] += h;
            xpm[j] -= h;
            xmp[i] -= h;
            xmp[j] += h;
            xmm[i] -= h;
            xmm[j] -= h;
            hess[(i, j)] = (f(&xpp) - f(&xpm) - f(&xmp) + f(&xmm)) / (4.0 * h * h);
        }
    }
    hess
}
