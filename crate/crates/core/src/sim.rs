//! Stacked closed-loop system and fixed-step integration.
//!
//! The grid, turbine-governor, and controller states are packed into one
//! contiguous vector described by a [`StateLayout`]. Integration is classical
//! fourth-order Runge-Kutta with a fixed step; piecewise-constant load events
//! split the step they fall into so every switch lands exactly on an
//! integration boundary while the stored time grid stays uniform.

use std::sync::Arc;

use nalgebra::DVector;
use thiserror::Error;

use crate::control::{
    consensus_rhs_order1, consensus_rhs_order2, load_consensus_rhs, multiplier_rhs,
    primal_dual_rhs_order1, primal_dual_rhs_order2, ControlConfig, ControlError, ControllerFamily,
};
use crate::dispatch::{optimal_dispatch, social_welfare_dispatch, DispatchError};
use crate::governor::{tg1_rhs, tg2_rhs, GeneratorUnit, GovernorError};
use crate::grid::{GridError, NetworkModel, SteadyState};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Governor(#[from] GovernorError),
    #[error("scenario needs {expected} generator units, got {got}")]
    UnitCountMismatch { expected: usize, got: usize },
    #[error("schedule must start at time 0 with strictly increasing event times")]
    BadSchedule,
    #[error("schedule entry {index} has {got} loads, expected {expected}")]
    ScheduleLoadMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("integration step must be positive (got {0})")]
    NonPositiveDt(f64),
    #[error("horizon {horizon} ends before the last scheduled event at {last_event}")]
    HorizonBeforeLastEvent { horizon: f64, last_event: f64 },
    #[error("load bus {load_index} has more than one controllable-load controller")]
    DuplicateLoadController { load_index: usize },
    #[error("primal-dual initialization failed: {0}")]
    PrimalDualInit(String),
}

/// Contiguous slice of the stacked state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    fn next(cursor: &mut usize, len: usize) -> Self {
        let span = Span {
            offset: *cursor,
            len,
        };
        *cursor += len;
        span
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Names the slices of the stacked state vector. Slices for controller
/// families that are not active have zero length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateLayout {
    /// Per-line angle differences.
    pub line_angle: Span,
    /// Generator frequency deviations.
    pub gen_freq: Span,
    /// Mechanical power per generator.
    pub mech_power: Span,
    /// Governor (steam) power, second-order units only.
    pub steam_power: Span,
    /// Controller setpoint per generator.
    pub setpoint: Span,
    /// Virtual line flows (primal-dual).
    pub virtual_flow: Span,
    /// Bus multipliers (primal-dual).
    pub multiplier: Span,
    /// Controllable-load setpoints.
    pub load_setpoint: Span,
    /// Total state dimension.
    pub dim: usize,
    /// Per-generator index into the steam span (None for first-order units).
    pub steam_slot: Vec<Option<usize>>,
}

impl StateLayout {
    pub fn build(model: &NetworkModel, units: &[GeneratorUnit], control: &ControlConfig) -> Self {
        let m = model.line_count();
        let gen_count = model.gen_count();
        let mut steam_slot = Vec::with_capacity(units.len());
        let mut steam_count = 0;
        for u in units {
            if u.is_second_order() {
                steam_slot.push(Some(steam_count));
                steam_count += 1;
            } else {
                steam_slot.push(None);
            }
        }
        let mut cursor = 0;
        let line_angle = Span::next(&mut cursor, m);
        let gen_freq = Span::next(&mut cursor, gen_count);
        let (mech, steam, setp) = match control.family {
            ControllerFamily::OpenLoop => (0, 0, 0),
            _ => (gen_count, steam_count, gen_count),
        };
        let mech_power = Span::next(&mut cursor, mech);
        let steam_power = Span::next(&mut cursor, steam);
        let setpoint = Span::next(&mut cursor, setp);
        let (vflow, mult) = if control.family == ControllerFamily::PrimalDual {
            (m, model.bus_count())
        } else {
            (0, 0)
        };
        let virtual_flow = Span::next(&mut cursor, vflow);
        let multiplier = Span::next(&mut cursor, mult);
        let load_setpoint = Span::next(&mut cursor, control.load_control.len());
        StateLayout {
            line_angle,
            gen_freq,
            mech_power,
            steam_power,
            setpoint,
            virtual_flow,
            multiplier,
            load_setpoint,
            dim: cursor,
            steam_slot,
        }
    }

    pub fn spans(&self) -> [(&'static str, Span); 8] {
        [
            ("line_angle", self.line_angle),
            ("gen_freq", self.gen_freq),
            ("mech_power", self.mech_power),
            ("steam_power", self.steam_power),
            ("setpoint", self.setpoint),
            ("virtual_flow", self.virtual_flow),
            ("multiplier", self.multiplier),
            ("load_setpoint", self.load_setpoint),
        ]
    }
}

/// Stacked state vector together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub values: DVector<f64>,
    pub layout: StateLayout,
}

impl SystemState {
    pub fn slice(&self, span: Span) -> DVector<f64> {
        self.values.rows(span.offset, span.len).into_owned()
    }
}

/// Piecewise-constant load schedule. The first entry fixes the initial loads
/// at time zero; later entries are step events.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSchedule {
    entries: Vec<(f64, DVector<f64>)>,
}

impl LoadSchedule {
    pub fn new(entries: Vec<(f64, DVector<f64>)>) -> Result<Self, SimError> {
        if entries.is_empty() || entries[0].0 != 0.0 {
            return Err(SimError::BadSchedule);
        }
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(SimError::BadSchedule);
            }
        }
        Ok(Self { entries })
    }

    /// Constant loads for the whole horizon.
    pub fn constant(loads: DVector<f64>) -> Self {
        Self {
            entries: vec![(0.0, loads)],
        }
    }

    pub fn entries(&self) -> &[(f64, DVector<f64>)] {
        &self.entries
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.entries[0].1
    }

    pub fn last_event_time(&self) -> f64 {
        self.entries.last().unwrap().0
    }

    /// Loads after the latest scheduled time as the ones in effect.
    pub fn value_at(&self, t: f64) -> &DVector<f64> {
        let mut current = &self.entries[0].1;
        for (time, loads) in &self.entries {
            if *time <= t + 1e-9 {
                current = loads;
            } else {
                break;
            }
        }
        current
    }

    /// Event times strictly inside the open interval.
    fn events_within(&self, t0: f64, t1: f64) -> Vec<f64> {
        let eps = 1e-9 * (t1 - t0).abs().max(1.0);
        self.entries
            .iter()
            .map(|(t, _)| *t)
            .filter(|&t| t > t0 + eps && t < t1 - eps)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    /// Fixed integration step (s).
    pub dt: f64,
    /// Simulation horizon (s).
    pub horizon: f64,
    /// State magnitude beyond which the run is declared diverged.
    pub divergence_bound: f64,
}

impl IntegratorConfig {
    pub fn new(dt: f64, horizon: f64) -> Self {
        Self {
            dt,
            horizon,
            divergence_bound: 1e6,
        }
    }
}

/// Optional time-varying injection, added on top of the scheduled loads or
/// the frozen open-loop mechanical power.
pub type SignalHook = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// Complete simulation scenario.
#[derive(Clone)]
pub struct Scenario {
    pub name: String,
    pub model: NetworkModel,
    pub units: Vec<GeneratorUnit>,
    pub control: ControlConfig,
    pub schedule: LoadSchedule,
    pub integrator: IntegratorConfig,
    /// Additive load injection (bounded, per load bus), for experiments with
    /// time-varying demand. Not part of the serialized scenario format.
    pub load_hook: Option<SignalHook>,
    /// Additive mechanical-power injection at the generator buses, open-loop
    /// runs only.
    pub mech_hook: Option<SignalHook>,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("units", &self.units)
            .field("control", &self.control)
            .field("integrator", &self.integrator)
            .field("load_hook", &self.load_hook.is_some())
            .field("mech_hook", &self.mech_hook.is_some())
            .finish()
    }
}

impl Scenario {
    pub fn new(
        name: impl Into<String>,
        model: NetworkModel,
        units: Vec<GeneratorUnit>,
        control: ControlConfig,
        schedule: LoadSchedule,
        integrator: IntegratorConfig,
    ) -> Result<Self, SimError> {
        if units.len() != model.gen_count() {
            return Err(SimError::UnitCountMismatch {
                expected: model.gen_count(),
                got: units.len(),
            });
        }
        for (i, u) in units.iter().enumerate() {
            u.validate(i)?;
        }
        control.validate(&units, model.load_count())?;
        let mut targeted = std::collections::HashSet::new();
        for lc in &control.load_control {
            if !targeted.insert(lc.load_index) {
                return Err(SimError::DuplicateLoadController {
                    load_index: lc.load_index,
                });
            }
        }
        for (index, (_, loads)) in schedule.entries().iter().enumerate() {
            if loads.len() != model.load_count() {
                return Err(SimError::ScheduleLoadMismatch {
                    index,
                    expected: model.load_count(),
                    got: loads.len(),
                });
            }
        }
        if integrator.dt.is_nan() || integrator.dt <= 0.0 {
            return Err(SimError::NonPositiveDt(integrator.dt));
        }
        if integrator.horizon < schedule.last_event_time() {
            return Err(SimError::HorizonBeforeLastEvent {
                horizon: integrator.horizon,
                last_event: schedule.last_event_time(),
            });
        }
        Ok(Self {
            name: name.into(),
            model,
            units,
            control,
            schedule,
            integrator,
            load_hook: None,
            mech_hook: None,
        })
    }

    pub fn with_load_hook(mut self, hook: SignalHook) -> Self {
        self.load_hook = Some(hook);
        self
    }

    pub fn with_mech_hook(mut self, hook: SignalHook) -> Self {
        self.mech_hook = Some(hook);
        self
    }

    /// Scheduled plus injected uncontrollable load at time `t`.
    pub fn load_at(&self, t: f64) -> DVector<f64> {
        let mut load = self.schedule.value_at(t).clone();
        if let Some(hook) = &self.load_hook {
            load += hook(t);
        }
        load
    }
}

/// Steady closed-loop operating point for a given load vector.
#[derive(Debug, Clone)]
pub struct Equilibrium {
    /// Uncontrollable loads this equilibrium was computed for.
    pub loads: DVector<f64>,
    pub mech_power: DVector<f64>,
    pub flexible_load: DVector<f64>,
    pub marginal_price: f64,
    pub steady: SteadyState,
    pub state: SystemState,
}

/// The stacked right-hand side of the closed loop.
pub struct StackedSystem {
    model: NetworkModel,
    units: Vec<GeneratorUnit>,
    control: ControlConfig,
    layout: StateLayout,
    gain: Vec<f64>,
    /// Constant mechanical power for open-loop runs.
    frozen_mech: DVector<f64>,
    mech_hook: Option<SignalHook>,
}

impl StackedSystem {
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        let layout = StateLayout::build(&scenario.model, &scenario.units, &scenario.control);
        let gain = scenario.control.gain_multipliers(scenario.units.len());
        let frozen_mech = if scenario.control.family == ControllerFamily::OpenLoop {
            let costs: Vec<_> = scenario.units.iter().map(|u| u.cost).collect();
            let d = optimal_dispatch(&costs, scenario.schedule.initial().sum())?;
            DVector::from_vec(d.generation)
        } else {
            DVector::zeros(0)
        };
        Ok(Self {
            model: scenario.model.clone(),
            units: scenario.units.clone(),
            control: scenario.control.clone(),
            layout,
            gain,
            frozen_mech,
            mech_hook: scenario.mech_hook.clone(),
        })
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    /// Extra consumption per load bus implied by the controllable-load
    /// setpoints in `values`.
    fn flexible_load(&self, values: &DVector<f64>) -> DVector<f64> {
        let mut u = DVector::zeros(self.model.load_count());
        for (slot, lc) in self.control.load_control.iter().enumerate() {
            u[lc.load_index] += values[self.layout.load_setpoint.offset + slot];
        }
        u
    }

    /// Time derivative of the stacked state under the given uncontrollable
    /// load vector.
    pub fn rhs(&self, t: f64, values: &DVector<f64>, load: &DVector<f64>) -> DVector<f64> {
        let lay = &self.layout;
        let mut out = DVector::zeros(lay.dim);
        let eta = values.rows(lay.line_angle.offset, lay.line_angle.len);
        let omega = values.rows(lay.gen_freq.offset, lay.gen_freq.len);

        let flow = DVector::from_fn(self.model.line_count(), |k, _| {
            self.model.coupling()[k] * eta[k].sin()
        });
        // Total demand at the load buses includes any controllable loads.
        let total_load = load + self.flexible_load(values);
        let drawn_load = self.model.incidence_load() * &flow;
        let omega_l = DVector::from_fn(self.model.load_count(), |i, _| {
            (-drawn_load[i] - total_load[i]) / self.model.load_damping()[i]
        });

        // Network angles and swing dynamics.
        let eta_dot = self.model.incidence_gen().transpose() * omega
            + self.model.incidence_load().transpose() * &omega_l;
        out.rows_mut(lay.line_angle.offset, lay.line_angle.len)
            .copy_from(&eta_dot);

        let mech: DVector<f64> = if self.control.family == ControllerFamily::OpenLoop {
            let mut p = self.frozen_mech.clone();
            if let Some(hook) = &self.mech_hook {
                p += hook(t);
            }
            p
        } else {
            values
                .rows(lay.mech_power.offset, lay.mech_power.len)
                .into_owned()
        };
        let drawn_gen = self.model.incidence_gen() * &flow;
        for i in 0..self.model.gen_count() {
            out[lay.gen_freq.offset + i] = (-self.model.gen_damping()[i] * omega[i] - drawn_gen[i]
                + mech[i])
                / self.model.inertia()[i];
        }

        if self.control.family == ControllerFamily::OpenLoop {
            return out;
        }

        let setpoint = values.rows(lay.setpoint.offset, lay.setpoint.len);

        // Turbine-governor chains.
        for (i, unit) in self.units.iter().enumerate() {
            match lay.steam_slot[i] {
                Some(slot) => {
                    let steam = values[lay.steam_power.offset + slot];
                    let (steam_dot, mech_dot) =
                        tg2_rhs(steam, mech[i], omega[i], setpoint[i], unit);
                    out[lay.steam_power.offset + slot] = steam_dot;
                    out[lay.mech_power.offset + i] = mech_dot;
                }
                None => {
                    out[lay.mech_power.offset + i] =
                        tg1_rhs(mech[i], omega[i], setpoint[i], unit);
                }
            }
        }

        match self.control.family {
            ControllerFamily::Consensus => {
                // Marginal costs of the generators, marginal benefits of the
                // controllable loads, diffused over the communication graph.
                let comm = self.control.comm.as_ref().expect("validated");
                let gen_count = self.units.len();
                let mut marginals = Vec::with_capacity(comm.node_count());
                for (i, unit) in self.units.iter().enumerate() {
                    marginals.push(unit.cost.marginal(setpoint[i]));
                }
                for (slot, lc) in self.control.load_control.iter().enumerate() {
                    let u = values[lay.load_setpoint.offset + slot];
                    marginals.push(lc.benefit.marginal(u));
                }
                let coupling = comm.coupling(&marginals);
                for (i, unit) in self.units.iter().enumerate() {
                    out[lay.setpoint.offset + i] = match lay.steam_slot[i] {
                        Some(slot) => consensus_rhs_order2(
                            setpoint[i],
                            values[lay.steam_power.offset + slot],
                            omega[i],
                            coupling[i],
                            unit,
                            self.gain[i],
                        ),
                        None => {
                            consensus_rhs_order1(setpoint[i], mech[i], coupling[i], unit)
                        }
                    };
                }
                for (slot, lc) in self.control.load_control.iter().enumerate() {
                    out[lay.load_setpoint.offset + slot] = load_consensus_rhs(
                        omega_l[lc.load_index],
                        coupling[gen_count + slot],
                        lc,
                    );
                }
            }
            ControllerFamily::PrimalDual => {
                let vflow = values
                    .rows(lay.virtual_flow.offset, lay.virtual_flow.len)
                    .into_owned();
                let lambda = values
                    .rows(lay.multiplier.offset, lay.multiplier.len)
                    .into_owned();
                for (i, unit) in self.units.iter().enumerate() {
                    let gap = unit.cost.marginal(setpoint[i]) - lambda[i];
                    out[lay.setpoint.offset + i] = match lay.steam_slot[i] {
                        Some(slot) => primal_dual_rhs_order2(
                            setpoint[i],
                            values[lay.steam_power.offset + slot],
                            omega[i],
                            gap,
                            unit,
                        ),
                        None => primal_dual_rhs_order1(setpoint[i], mech[i], gap, unit),
                    };
                }
                let (flow_dot, price_dot) = multiplier_rhs(
                    self.model.incidence(),
                    &vflow,
                    &lambda,
                    &setpoint.into_owned(),
                    load,
                    self.control.flow_gain,
                    self.control.price_gain,
                );
                out.rows_mut(lay.virtual_flow.offset, lay.virtual_flow.len)
                    .copy_from(&flow_dot);
                out.rows_mut(lay.multiplier.offset, lay.multiplier.len)
                    .copy_from(&price_dot);
            }
            ControllerFamily::OpenLoop => unreachable!(),
        }
        out
    }
}

/// One classical fourth-order Runge-Kutta step.
pub fn rk4_step<F>(state: &DVector<f64>, t: f64, dt: f64, rhs: F) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = rhs(t, state);
    let k2 = rhs(t + 0.5 * dt, &(state + 0.5 * dt * &k1));
    let k3 = rhs(t + 0.5 * dt, &(state + 0.5 * dt * &k2));
    let k4 = rhs(t + dt, &(state + dt * &k3));
    state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Closed-loop equilibrium for the given uncontrollable loads: economic
/// dispatch (social-welfare dispatch when controllable loads participate)
/// followed by a network steady-state solve, packed into a full state vector.
pub fn equilibrium(scenario: &Scenario, loads: &DVector<f64>) -> Result<Equilibrium, SimError> {
    let costs: Vec<_> = scenario.units.iter().map(|u| u.cost).collect();
    let (mech, flexible, price) = if scenario.control.load_control.is_empty() {
        let d = optimal_dispatch(&costs, loads.sum())?;
        (
            DVector::from_vec(d.generation),
            DVector::zeros(0),
            d.marginal_price,
        )
    } else {
        let benefits: Vec<_> = scenario
            .control
            .load_control
            .iter()
            .map(|lc| lc.benefit)
            .collect();
        let w = social_welfare_dispatch(&costs, &benefits, loads.sum())?;
        (
            DVector::from_vec(w.generation),
            DVector::from_vec(w.flexible_load),
            w.marginal_price,
        )
    };
    let mut effective = loads.clone();
    for (slot, lc) in scenario.control.load_control.iter().enumerate() {
        effective[lc.load_index] += flexible[slot];
    }
    let steady = scenario.model.solve_steady_state(&mech, &effective)?;

    let layout = StateLayout::build(&scenario.model, &scenario.units, &scenario.control);
    let mut values = DVector::zeros(layout.dim);
    values
        .rows_mut(layout.line_angle.offset, layout.line_angle.len)
        .copy_from(&steady.line_angle);
    // gen_freq stays zero: dispatch balances generation and demand.
    if scenario.control.family != ControllerFamily::OpenLoop {
        values
            .rows_mut(layout.mech_power.offset, layout.mech_power.len)
            .copy_from(&mech);
        values
            .rows_mut(layout.setpoint.offset, layout.setpoint.len)
            .copy_from(&mech);
        for (i, slot) in layout.steam_slot.iter().enumerate() {
            if let Some(slot) = slot {
                values[layout.steam_power.offset + slot] = mech[i];
            }
        }
    }
    if scenario.control.family == ControllerFamily::PrimalDual {
        let n = scenario.model.bus_count();
        let target = DVector::from_fn(n, |i, _| {
            if i < scenario.model.gen_count() {
                mech[i]
            } else {
                -effective[i - scenario.model.gen_count()]
            }
        });
        let vflow = scenario
            .model
            .incidence()
            .clone()
            .svd(true, true)
            .solve(&target, 1e-12)
            .map_err(|e| SimError::PrimalDualInit(e.to_string()))?;
        values
            .rows_mut(layout.virtual_flow.offset, layout.virtual_flow.len)
            .copy_from(&vflow);
        values
            .rows_mut(layout.multiplier.offset, layout.multiplier.len)
            .copy_from(&DVector::repeat(n, price));
    }
    for slot in 0..scenario.control.load_control.len() {
        values[layout.load_setpoint.offset + slot] = flexible[slot];
    }
    Ok(Equilibrium {
        loads: loads.clone(),
        mech_power: mech,
        flexible_load: flexible,
        marginal_price: price,
        steady,
        state: SystemState { values, layout },
    })
}

/// Initial condition: the closed-loop equilibrium at the scheduled initial
/// loads.
pub fn initialize(scenario: &Scenario) -> Result<SystemState, SimError> {
    Ok(equilibrium(scenario, scenario.schedule.initial())?.state)
}

/// Advances one uniform grid step, splitting at any scheduled event that
/// falls strictly inside so the load switch happens exactly at its time.
pub fn step(
    system: &StackedSystem,
    scenario: &Scenario,
    values: &DVector<f64>,
    t0: f64,
    t1: f64,
) -> DVector<f64> {
    let mut state = values.clone();
    let mut t = t0;
    for event in scenario.schedule.events_within(t0, t1) {
        state = integrate_span(system, scenario, &state, t, event);
        t = event;
    }
    integrate_span(system, scenario, &state, t, t1)
}

fn integrate_span(
    system: &StackedSystem,
    scenario: &Scenario,
    values: &DVector<f64>,
    t0: f64,
    t1: f64,
) -> DVector<f64> {
    // The load is constant on the span; sample it at the midpoint.
    let load = scenario.load_at(0.5 * (t0 + t1));
    if scenario.load_hook.is_none() {
        rk4_step(values, t0, t1 - t0, |t, v| system.rhs(t, v, &load))
    } else {
        rk4_step(values, t0, t1 - t0, |t, v| {
            system.rhs(t, v, &scenario.load_at(t))
        })
    }
}

/// Divergence record: the first uniform-grid time at which the state left
/// the admissible region (or stopped being finite).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub time: f64,
    pub max_abs: f64,
}

/// Simulated trajectory on a uniform time grid. Rows after a divergence are
/// not stored.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub layout: StateLayout,
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Uncontrollable load in effect at each stored time.
    pub loads: Vec<DVector<f64>>,
    pub diverged: Option<Divergence>,
}

impl Trajectory {
    pub fn rows(&self) -> usize {
        self.states.len()
    }

    pub fn slice(&self, row: usize, span: Span) -> DVector<f64> {
        self.states[row].rows(span.offset, span.len).into_owned()
    }

    /// Derived load-bus frequency at a stored row.
    pub fn load_freq(&self, row: usize, scenario: &Scenario) -> DVector<f64> {
        let eta = self.slice(row, self.layout.line_angle);
        let mut load = self.loads[row].clone();
        for (slot, lc) in scenario.control.load_control.iter().enumerate() {
            load[lc.load_index] += self.states[row][self.layout.load_setpoint.offset + slot];
        }
        scenario.model.load_freq(&eta, &load)
    }

    /// Largest frequency deviation magnitude over generator and load buses.
    pub fn freq_inf_norm(&self, row: usize, scenario: &Scenario) -> f64 {
        let gen = self.slice(row, self.layout.gen_freq).amax();
        let load = self.load_freq(row, scenario).amax();
        gen.max(load)
    }

    /// Generator marginal costs at the controller setpoints, the quantity
    /// the consensus controllers exchange and equalize.
    pub fn marginals(&self, row: usize, units: &[GeneratorUnit]) -> Vec<f64> {
        let setpoint = self.slice(row, self.layout.setpoint);
        units
            .iter()
            .zip(setpoint.iter())
            .map(|(u, &p)| u.cost.marginal(p))
            .collect()
    }
}

/// Runs the scenario from its equilibrium initial condition over the full
/// horizon.
pub fn simulate(scenario: &Scenario) -> Result<Trajectory, SimError> {
    let system = StackedSystem::new(scenario)?;
    let initial = initialize(scenario)?;
    simulate_from(scenario, &system, initial.values)
}

/// Runs the scenario from an explicit initial state vector.
pub fn simulate_from(
    scenario: &Scenario,
    system: &StackedSystem,
    initial: DVector<f64>,
) -> Result<Trajectory, SimError> {
    let dt = scenario.integrator.dt;
    let steps = ((scenario.integrator.horizon / dt) + 1e-9).floor() as usize;
    let bound = scenario.integrator.divergence_bound;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut loads = Vec::with_capacity(steps + 1);
    let mut diverged = None;

    let mut current = initial;
    times.push(0.0);
    loads.push(scenario.load_at(0.0));
    states.push(current.clone());
    for i in 0..steps {
        let t0 = i as f64 * dt;
        let t1 = (i + 1) as f64 * dt;
        let next = step(system, scenario, &current, t0, t1);
        let max_abs = next.amax();
        if !max_abs.is_finite() || max_abs > bound {
            diverged = Some(Divergence { time: t1, max_abs });
            break;
        }
        current = next;
        times.push(t1);
        loads.push(scenario.load_at(t1));
        states.push(current.clone());
    }
    Ok(Trajectory {
        layout: system.layout().clone(),
        dt,
        times,
        states,
        loads,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;

    #[test]
    fn layout_covers_vector_without_overlap() {
        for scenario in [
            cases::case6_nominal(),
            cases::case6_unstable(),
            cases::case6_open_loop(),
            cases::case6_primal_dual(),
            cases::case6_load_control(),
        ] {
            let layout = StateLayout::build(&scenario.model, &scenario.units, &scenario.control);
            let mut cursor = 0;
            for (_, span) in layout.spans() {
                assert_eq!(span.offset, cursor, "span out of order in {}", scenario.name);
                cursor += span.len;
            }
            assert_eq!(cursor, layout.dim);
        }
    }

    #[test]
    fn initial_state_is_equilibrium() {
        let scenario = cases::case6_nominal();
        let system = StackedSystem::new(&scenario).unwrap();
        let state = initialize(&scenario).unwrap();
        let rhs = system.rhs(0.0, &state.values, &scenario.load_at(0.0));
        assert!(
            rhs.amax() < 1e-8,
            "equilibrium residual too large: {}",
            rhs.amax()
        );
    }

    #[test]
    fn initial_state_secure() {
        let scenario = cases::case6_nominal();
        let eq = equilibrium(&scenario, scenario.schedule.initial()).unwrap();
        assert!(eq.steady.secure);
        assert!(eq.steady.line_angle.amax() < std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn zero_load_network_rests_at_origin() {
        let mut scenario = cases::case6_nominal();
        // Zero loads with zero-cost-minimum units: all-zero equilibrium.
        for u in &mut scenario.units {
            u.cost.linear = 0.0;
        }
        scenario.schedule = LoadSchedule::constant(DVector::zeros(3));
        let state = initialize(&scenario).unwrap();
        assert!(state.values.amax() < 1e-12);
    }

    #[test]
    fn equilibrium_state_is_held() {
        let mut scenario = cases::case6_nominal();
        scenario.schedule = LoadSchedule::constant(scenario.schedule.initial().clone());
        scenario.integrator = IntegratorConfig::new(1e-3, 1.0);
        let traj = simulate(&scenario).unwrap();
        let drift = (&traj.states[traj.rows() - 1] - &traj.states[0]).amax();
        assert!(drift < 1e-9, "drift {drift}");
    }

    #[test]
    fn rk4_matches_exponential_locally() {
        // One step of x' = -x from 1.0 has local error O(dt^5).
        let mut prev_err = f64::NAN;
        for k in 0..4 {
            let dt = 0.1 / 2f64.powi(k);
            let state = DVector::from_vec(vec![1.0]);
            let next = rk4_step(&state, 0.0, dt, |_, v| -v.clone());
            let err = (next[0] - (-dt).exp()).abs();
            if k > 0 {
                assert!(
                    err < prev_err / 20.0,
                    "local error ratio too small: {prev_err} -> {err}"
                );
            }
            prev_err = err;
        }
    }

    #[test]
    fn load_channel_switches_exactly_at_event() {
        // dt = 5e-3 keeps the stiff consensus mode inside the RK4 stability
        // region (spectral radius of the coupled setpoint block is ~430/s).
        let mut scenario = cases::case6_nominal();
        scenario.integrator = IntegratorConfig::new(5e-3, 11.0);
        let traj = simulate(&scenario).unwrap();
        let event_row = (10.0_f64 / 5e-3).round() as usize;
        let pre = scenario.schedule.entries()[0].1.clone();
        let post = scenario.schedule.entries()[1].1.clone();
        for row in 0..traj.rows() {
            let expected = if row < event_row { &pre } else { &post };
            assert_eq!(
                &traj.loads[row], expected,
                "load channel wrong at row {row}"
            );
        }
    }

    #[test]
    fn off_grid_event_is_integrated_exactly() {
        // dt = 0.03 does not divide the event time 10.0; the crossing step
        // is split internally. Compare against a run whose grid hits the
        // event exactly: terminal states must agree to integration accuracy.
        // The open-loop variant keeps the dynamics slow enough for the
        // coarse step.
        let mut a = cases::case6_open_loop();
        a.integrator = IntegratorConfig::new(0.03, 12.0);
        let ta = simulate(&a).unwrap();
        let mut b = cases::case6_open_loop();
        b.integrator = IntegratorConfig::new(0.01, 12.0);
        let tb = simulate(&b).unwrap();
        let last_a = &ta.states[ta.rows() - 1];
        let last_b = &tb.states[tb.rows() - 1];
        assert!(ta.diverged.is_none());
        assert!(
            (last_a - last_b).amax() < 1e-3,
            "terminal gap {}",
            (last_a - last_b).amax()
        );
    }

    #[test]
    fn dt_halving_shows_fourth_order_self_consistency() {
        let run = |dt: f64| {
            let mut s = cases::case6_nominal();
            s.integrator = IntegratorConfig::new(dt, 5.0);
            // Move the event before the window so the dynamics are smooth.
            s.schedule = LoadSchedule::new(vec![
                (0.0, DVector::from_vec(vec![1.01, 1.20, 1.18])),
                (1.0, DVector::from_vec(vec![1.15, 1.25, 1.21])),
            ])
            .unwrap();
            let t = simulate(&s).unwrap();
            t.states[t.rows() - 1].clone()
        };
        let coarse = run(4e-3);
        let mid = run(2e-3);
        let fine = run(1e-3);
        let e1 = (&coarse - &mid).amax();
        let e2 = (&mid - &fine).amax();
        assert!(
            e1 / e2 >= 8.0,
            "self-consistency ratio {} below fourth-order expectation",
            e1 / e2
        );
    }

    #[test]
    fn bounded_load_injection_hook() {
        // The additive load hook perturbs the demand between scheduled
        // events; frequencies stay bounded near the equilibrium for a small
        // bounded injection.
        let mut scenario = cases::case6_nominal();
        scenario.schedule = LoadSchedule::constant(scenario.schedule.initial().clone());
        scenario.integrator = IntegratorConfig::new(1e-3, 5.0);
        let scenario = scenario.with_load_hook(std::sync::Arc::new(|t: f64| {
            DVector::from_vec(vec![0.02 * (0.8 * t).sin(), 0.0, -0.01 * (1.3 * t).sin()])
        }));
        let traj = simulate(&scenario).unwrap();
        assert!(traj.diverged.is_none());
        let max_freq = (0..traj.rows())
            .map(|r| traj.freq_inf_norm(r, &scenario))
            .fold(0.0_f64, f64::max);
        assert!(max_freq > 1e-4, "injection should move the frequency");
        assert!(max_freq < 0.05, "bounded injection must stay near equilibrium");
        // The stored load channel tracks the injected demand.
        let mid = traj.rows() / 2;
        let expected = scenario.load_at(traj.times[mid]);
        assert_eq!(traj.loads[mid], expected);
    }

    #[test]
    fn horizon_zero_yields_initial_row_only() {
        let mut scenario = cases::case6_nominal();
        scenario.schedule = LoadSchedule::constant(scenario.schedule.initial().clone());
        scenario.integrator = IntegratorConfig::new(1e-3, 0.0);
        let traj = simulate(&scenario).unwrap();
        assert_eq!(traj.rows(), 1);
        assert_eq!(traj.times, vec![0.0]);
    }

    #[test]
    fn trajectory_row_count_matches_grid() {
        let mut scenario = cases::case6_nominal();
        scenario.integrator = IntegratorConfig::new(5e-3, 15.0);
        let traj = simulate(&scenario).unwrap();
        assert_eq!(traj.rows(), 3001);
        let uniform = traj
            .times
            .windows(2)
            .all(|w| ((w[1] - w[0]) - 5e-3).abs() < 1e-12);
        assert!(uniform);
    }

    #[test]
    fn rhs_matches_trajectory_finite_difference() {
        let mut scenario = cases::case6_nominal();
        scenario.integrator = IntegratorConfig::new(1e-3, 12.0);
        let system = StackedSystem::new(&scenario).unwrap();
        let traj = simulate(&scenario).unwrap();
        // Mid-transient row, away from the event.
        let row = (10.5 / 1e-3) as usize;
        let fd = (&traj.states[row + 1] - &traj.states[row - 1]) / (2.0 * 1e-3);
        let analytic = system.rhs(traj.times[row], &traj.states[row], &traj.loads[row]);
        assert!(
            (fd - analytic).amax() < 1e-4,
            "finite difference disagrees with the stacked derivative"
        );
    }

    #[test]
    fn simulation_is_deterministic() {
        let mut scenario = cases::case6_nominal();
        scenario.integrator = IntegratorConfig::new(1e-3, 12.0);
        let a = simulate(&scenario).unwrap();
        let b = simulate(&scenario).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.times, b.times);
    }

    #[test]
    fn scenario_validation_errors() {
        let good = cases::case6_nominal();
        assert!(LoadSchedule::new(vec![(1.0, DVector::zeros(3))]).is_err());
        assert!(LoadSchedule::new(vec![
            (0.0, DVector::zeros(3)),
            (0.0, DVector::zeros(3)),
        ])
        .is_err());
        let bad = Scenario::new(
            "bad",
            good.model.clone(),
            good.units[..2].to_vec(),
            good.control.clone(),
            good.schedule.clone(),
            good.integrator,
        );
        assert!(matches!(bad, Err(SimError::UnitCountMismatch { .. })));
        let bad = Scenario::new(
            "bad",
            good.model.clone(),
            good.units.clone(),
            good.control.clone(),
            good.schedule.clone(),
            IntegratorConfig::new(1e-3, 5.0),
        );
        assert!(matches!(bad, Err(SimError::HorizonBeforeLastEvent { .. })));
    }
}
