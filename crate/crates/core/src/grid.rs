//! Lossless structure-preserving network model.
//!
//! Buses are split into generator buses (swing dynamics with inertia) and
//! load buses (frequency-dependent demand with zero inertia). The load-bus
//! frequency is algebraic and eliminated from the integrated state: the state
//! consists of the per-line angle differences together with the generator
//! frequency deviations. All quantities are per-unit on a common base.
//!
//! Bus ordering convention: generator buses first (`0..gen_count`), load
//! buses after (`gen_count..gen_count + load_count`).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Steady-state line angles are considered secure when strictly inside
/// (-pi/2, pi/2) on every line (phase cohesiveness).
pub const SECURITY_ANGLE: f64 = std::f64::consts::FRAC_PI_2;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("network must contain at least one generator bus and one line")]
    EmptyNetwork,
    #[error("line {index} connects bus {from} to {to}, which is invalid for {bus_count} buses")]
    InvalidLine {
        index: usize,
        from: usize,
        to: usize,
        bus_count: usize,
    },
    #[error("network graph is disconnected; components: {components:?}")]
    Disconnected { components: Vec<Vec<usize>> },
    #[error("{what} must be positive at bus {bus} (got {value})")]
    NonPositiveParam {
        what: &'static str,
        bus: usize,
        value: f64,
    },
    #[error("line {index} has zero susceptance")]
    ZeroSusceptance { index: usize },
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("synchronous frequency undefined: total damping is not positive")]
    ZeroDamping,
    #[error(
        "steady-state solve did not converge after {iterations} iterations \
         (residual {residual:.3e}); the requested operating point may not be transferable"
    )]
    SteadyStateDiverged { iterations: usize, residual: f64 },
}

/// Undirected connected graph over generator and load buses.
///
/// Each line is stored with an orientation (`from` is the positive end),
/// which fixes the sign convention of the incidence matrix and of the
/// per-line angle differences.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTopology {
    gen_count: usize,
    load_count: usize,
    lines: Vec<(usize, usize)>,
}

impl NetworkTopology {
    /// Validates bus indices and connectivity.
    pub fn new(
        gen_count: usize,
        load_count: usize,
        lines: Vec<(usize, usize)>,
    ) -> Result<Self, GridError> {
        let n = gen_count + load_count;
        if gen_count == 0 || lines.is_empty() {
            return Err(GridError::EmptyNetwork);
        }
        for (k, &(a, b)) in lines.iter().enumerate() {
            if a >= n || b >= n || a == b {
                return Err(GridError::InvalidLine {
                    index: k,
                    from: a,
                    to: b,
                    bus_count: n,
                });
            }
        }
        let components = connected_components(n, &lines);
        if components.len() != 1 {
            return Err(GridError::Disconnected { components });
        }
        Ok(Self {
            gen_count,
            load_count,
            lines,
        })
    }

    pub fn gen_count(&self) -> usize {
        self.gen_count
    }

    pub fn load_count(&self) -> usize {
        self.load_count
    }

    pub fn bus_count(&self) -> usize {
        self.gen_count + self.load_count
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn lines(&self) -> &[(usize, usize)] {
        &self.lines
    }

    /// Bus-by-line incidence matrix: +1 at the positive end of each line,
    /// -1 at the negative end. Every column sums to zero.
    pub fn incidence(&self) -> DMatrix<f64> {
        let n = self.bus_count();
        let mut b = DMatrix::zeros(n, self.line_count());
        for (k, &(from, to)) in self.lines.iter().enumerate() {
            b[(from, k)] = 1.0;
            b[(to, k)] = -1.0;
        }
        b
    }
}

fn connected_components(n: usize, lines: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in lines {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut components = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    comp.push(v);
                    stack.push(v);
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    components
}

/// Integrated grid state: per-line angle differences and generator frequency
/// deviations. The load-bus frequency is algebraic, see
/// [`NetworkModel::load_freq`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    /// Angle difference across each line (rad), positive end minus negative end.
    pub line_angle: DVector<f64>,
    /// Frequency deviation at each generator bus (pu).
    pub gen_freq: DVector<f64>,
}

impl GridState {
    pub fn new(line_angle: DVector<f64>, gen_freq: DVector<f64>) -> Self {
        Self {
            line_angle,
            gen_freq,
        }
    }

    /// All-zero state (flat angles, nominal frequency).
    pub fn flat(topology: &NetworkTopology) -> Self {
        Self {
            line_angle: DVector::zeros(topology.line_count()),
            gen_freq: DVector::zeros(topology.gen_count()),
        }
    }
}

/// Converged steady state of the network equations.
#[derive(Debug, Clone)]
pub struct SteadyState {
    /// Per-line angle differences (lies in the row space of the incidence matrix).
    pub line_angle: DVector<f64>,
    /// Common frequency deviation across all buses.
    pub omega_star: f64,
    /// True when every line angle is strictly inside (-pi/2, pi/2).
    pub secure: bool,
    /// Infinity norm of the power-balance residual at the solution.
    pub residual: f64,
}

/// Immutable network data: topology, bus parameters, and line couplings.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    topology: NetworkTopology,
    incidence: DMatrix<f64>,
    incidence_gen: DMatrix<f64>,
    incidence_load: DMatrix<f64>,
    inertia: DVector<f64>,
    gen_damping: DVector<f64>,
    load_damping: DVector<f64>,
    voltage: DVector<f64>,
    susceptance: DVector<f64>,
    coupling: DVector<f64>,
}

impl NetworkModel {
    /// Builds the model from per-bus parameters and per-line susceptances.
    ///
    /// `inertia` and `gen_damping` index the generator buses, `load_damping`
    /// the load buses, `voltage` all buses, `susceptance` the lines (in the
    /// order of `topology.lines()`). Susceptances may carry the conventional
    /// negative sign; the line coupling is normalized to
    /// `V_i * V_j * |B_ij| > 0`.
    pub fn new(
        topology: NetworkTopology,
        inertia: Vec<f64>,
        gen_damping: Vec<f64>,
        load_damping: Vec<f64>,
        voltage: Vec<f64>,
        susceptance: Vec<f64>,
    ) -> Result<Self, GridError> {
        check_len("inertia", &inertia, topology.gen_count())?;
        check_len("gen_damping", &gen_damping, topology.gen_count())?;
        check_len("load_damping", &load_damping, topology.load_count())?;
        check_len("voltage", &voltage, topology.bus_count())?;
        check_len("susceptance", &susceptance, topology.line_count())?;
        for (bus, &m) in inertia.iter().enumerate() {
            check_positive("inertia", bus, m)?;
        }
        for (bus, &d) in gen_damping.iter().enumerate() {
            check_positive("generator damping", bus, d)?;
        }
        for (bus, &d) in load_damping.iter().enumerate() {
            check_positive("load damping", topology.gen_count() + bus, d)?;
        }
        for (bus, &v) in voltage.iter().enumerate() {
            check_positive("voltage", bus, v)?;
        }
        let mut coupling = DVector::zeros(topology.line_count());
        for (k, &(i, j)) in topology.lines().iter().enumerate() {
            if susceptance[k] == 0.0 {
                return Err(GridError::ZeroSusceptance { index: k });
            }
            coupling[k] = voltage[i] * voltage[j] * susceptance[k].abs();
        }
        let incidence = topology.incidence();
        let incidence_gen = incidence.rows(0, topology.gen_count()).into_owned();
        let incidence_load = incidence
            .rows(topology.gen_count(), topology.load_count())
            .into_owned();
        Ok(Self {
            topology,
            incidence,
            incidence_gen,
            incidence_load,
            inertia: DVector::from_vec(inertia),
            gen_damping: DVector::from_vec(gen_damping),
            load_damping: DVector::from_vec(load_damping),
            voltage: DVector::from_vec(voltage),
            susceptance: DVector::from_vec(susceptance),
            coupling,
        })
    }

    pub fn topology(&self) -> &NetworkTopology {
        &self.topology
    }

    pub fn gen_count(&self) -> usize {
        self.topology.gen_count()
    }

    pub fn load_count(&self) -> usize {
        self.topology.load_count()
    }

    pub fn bus_count(&self) -> usize {
        self.topology.bus_count()
    }

    pub fn line_count(&self) -> usize {
        self.topology.line_count()
    }

    /// Full bus-by-line incidence matrix.
    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.incidence
    }

    /// Generator-bus rows of the incidence matrix.
    pub fn incidence_gen(&self) -> &DMatrix<f64> {
        &self.incidence_gen
    }

    /// Load-bus rows of the incidence matrix.
    pub fn incidence_load(&self) -> &DMatrix<f64> {
        &self.incidence_load
    }

    pub fn inertia(&self) -> &DVector<f64> {
        &self.inertia
    }

    pub fn gen_damping(&self) -> &DVector<f64> {
        &self.gen_damping
    }

    pub fn load_damping(&self) -> &DVector<f64> {
        &self.load_damping
    }

    pub fn voltage(&self) -> &DVector<f64> {
        &self.voltage
    }

    pub fn susceptance(&self) -> &DVector<f64> {
        &self.susceptance
    }

    /// Per-line coupling `V_i * V_j * |B_ij|`.
    pub fn coupling(&self) -> &DVector<f64> {
        &self.coupling
    }

    /// Per-line electrical power flow at the given angles.
    pub fn line_flow(&self, line_angle: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.line_count(), |k, _| {
            self.coupling[k] * line_angle[k].sin()
        })
    }

    /// Electrical power drawn from each bus by the network at the given
    /// angles. Sums to zero over all buses (lossless lines).
    pub fn bus_injection(&self, line_angle: &DVector<f64>) -> DVector<f64> {
        &self.incidence * self.line_flow(line_angle)
    }

    /// Load-bus frequency recovered from the algebraic load-bus balance:
    /// the damping response absorbs whatever power the network and the
    /// constant demand do not.
    pub fn load_freq(&self, line_angle: &DVector<f64>, load: &DVector<f64>) -> DVector<f64> {
        let drawn = &self.incidence_load * self.line_flow(line_angle);
        DVector::from_fn(self.load_count(), |i, _| {
            (-drawn[i] - load[i]) / self.load_damping[i]
        })
    }

    /// Time derivative of the grid state under the given mechanical power and
    /// load. Pure function of its inputs.
    pub fn grid_rhs(
        &self,
        state: &GridState,
        mech_power: &DVector<f64>,
        load: &DVector<f64>,
    ) -> GridState {
        let flow = self.line_flow(&state.line_angle);
        let load_freq = {
            let drawn = &self.incidence_load * &flow;
            DVector::from_fn(self.load_count(), |i, _| {
                (-drawn[i] - load[i]) / self.load_damping[i]
            })
        };
        let line_angle_dot =
            self.incidence_gen.transpose() * &state.gen_freq + self.incidence_load.transpose() * load_freq;
        let drawn_gen = &self.incidence_gen * &flow;
        let gen_freq_dot = DVector::from_fn(self.gen_count(), |i, _| {
            (-self.gen_damping[i] * state.gen_freq[i] - drawn_gen[i] + mech_power[i])
                / self.inertia[i]
        });
        GridState::new(line_angle_dot, gen_freq_dot)
    }

    /// Solves the network steady-state equations for the given constant
    /// mechanical power and load by damped Newton iteration on the bus
    /// angles (reference bus pinned to zero). The common steady-state
    /// frequency is known in closed form and solved for separately.
    pub fn solve_steady_state(
        &self,
        mech_power: &DVector<f64>,
        load: &DVector<f64>,
    ) -> Result<SteadyState, GridError> {
        check_len("mech_power", mech_power.as_slice(), self.gen_count())?;
        check_len("load", load.as_slice(), self.load_count())?;
        let omega_star = synchronous_frequency(
            mech_power.as_slice(),
            load.as_slice(),
            self.gen_damping.as_slice(),
            self.load_damping.as_slice(),
        )?;
        // Net injection each bus must push into the network at steady state.
        let n = self.bus_count();
        let target = DVector::from_fn(n, |i, _| {
            if i < self.gen_count() {
                mech_power[i] - self.gen_damping[i] * omega_star
            } else {
                let j = i - self.gen_count();
                -load[j] - self.load_damping[j] * omega_star
            }
        });

        match self.newton_angles(&target, &DVector::zeros(n)) {
            Ok((eta, residual)) => Ok(self.package_steady_state(eta, omega_star, residual)),
            Err(_) => {
                // Retry from the linearized (DC) power-flow solution.
                let guess = self
                    .dc_angles(&target)
                    .ok_or(GridError::SteadyStateDiverged {
                        iterations: 0,
                        residual: f64::INFINITY,
                    })?;
                let (eta, residual) = self.newton_angles(&target, &guess)?;
                Ok(self.package_steady_state(eta, omega_star, residual))
            }
        }
    }

    fn package_steady_state(
        &self,
        line_angle: DVector<f64>,
        omega_star: f64,
        residual: f64,
    ) -> SteadyState {
        let secure = line_angle.iter().all(|a| a.abs() < SECURITY_ANGLE);
        SteadyState {
            line_angle,
            omega_star,
            secure,
            residual,
        }
    }

    /// Damped Newton iteration for bus angles with `target` the required net
    /// bus injections (must sum to zero). Returns line angles and residual.
    fn newton_angles(
        &self,
        target: &DVector<f64>,
        initial: &DVector<f64>,
    ) -> Result<(DVector<f64>, f64), GridError> {
        const MAX_ITER: usize = 100;
        const TOL: f64 = 1e-10;
        let n = self.bus_count();
        let mut delta = initial.clone();
        let residual = |d: &DVector<f64>| -> DVector<f64> {
            let eta = self.incidence.transpose() * d;
            &self.incidence * self.line_flow(&eta) - target
        };
        let mut res = residual(&delta);
        let mut res_norm = res.amax();
        for iter in 0..MAX_ITER {
            if res_norm <= TOL {
                return Ok((self.incidence.transpose() * delta, res_norm));
            }
            let eta = self.incidence.transpose() * &delta;
            // Jacobian: weighted Laplacian with weights gamma_k * cos(eta_k),
            // reduced by pinning bus 0.
            let weights = DVector::from_fn(self.line_count(), |k, _| {
                self.coupling[k] * eta[k].cos()
            });
            let jac_full = &self.incidence
                * DMatrix::from_diagonal(&weights)
                * self.incidence.transpose();
            let jac = jac_full.view((1, 1), (n - 1, n - 1)).into_owned();
            let rhs = -DVector::from_fn(n - 1, |i, _| res[i + 1]);
            let step = jac
                .lu()
                .solve(&rhs)
                .ok_or(GridError::SteadyStateDiverged {
                    iterations: iter,
                    residual: res_norm,
                })?;
            // Backtracking line search on the residual norm.
            let mut t = 1.0;
            loop {
                let mut trial = delta.clone();
                for i in 0..n - 1 {
                    trial[i + 1] += t * step[i];
                }
                let trial_res = residual(&trial);
                let trial_norm = trial_res.amax();
                if trial_norm < res_norm || t < 1e-4 {
                    delta = trial;
                    res = trial_res;
                    res_norm = trial_norm;
                    break;
                }
                t *= 0.5;
            }
        }
        if res_norm <= TOL {
            Ok((self.incidence.transpose() * delta, res_norm))
        } else {
            Err(GridError::SteadyStateDiverged {
                iterations: MAX_ITER,
                residual: res_norm,
            })
        }
    }

    /// Linearized power-flow angles (sin eta ~ eta), used as a Newton fallback.
    fn dc_angles(&self, target: &DVector<f64>) -> Option<DVector<f64>> {
        let n = self.bus_count();
        let lap = &self.incidence
            * DMatrix::from_diagonal(&self.coupling)
            * self.incidence.transpose();
        let reduced = lap.view((1, 1), (n - 1, n - 1)).into_owned();
        let rhs = DVector::from_fn(n - 1, |i, _| target[i + 1]);
        let sol = reduced.lu().solve(&rhs)?;
        let mut delta = DVector::zeros(n);
        for i in 0..n - 1 {
            delta[i + 1] = sol[i];
        }
        Some(delta)
    }
}

fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<(), GridError> {
    if v.len() != expected {
        Err(GridError::DimensionMismatch {
            what,
            expected,
            got: v.len(),
        })
    } else {
        Ok(())
    }
}

fn check_positive(what: &'static str, bus: usize, value: f64) -> Result<(), GridError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(GridError::NonPositiveParam { what, bus, value })
    }
}

/// Common steady-state frequency deviation forced by the generation/demand
/// imbalance and the total damping.
pub fn synchronous_frequency(
    mech_power: &[f64],
    load: &[f64],
    gen_damping: &[f64],
    load_damping: &[f64],
) -> Result<f64, GridError> {
    let total_damping: f64 = gen_damping.iter().sum::<f64>() + load_damping.iter().sum::<f64>();
    if total_damping <= 0.0 {
        return Err(GridError::ZeroDamping);
    }
    let imbalance: f64 = mech_power.iter().sum::<f64>() - load.iter().sum::<f64>();
    Ok(imbalance / total_damping)
}
