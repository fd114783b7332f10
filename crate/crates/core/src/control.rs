//! Distributed setpoint controllers and their communication graph.
//!
//! The consensus family augments each setpoint controller with a diffusive
//! coupling over a communication graph: every participant compares its
//! marginal cost (marginal benefit for controllable loads) with its
//! neighbors', so the network settles where all marginals agree, which is
//! exactly the economic optimum. A primal-dual family is provided as an
//! alternative; it trades the marginal-cost exchange for explicit Lagrange
//! multiplier dynamics on the physical network and needs the load vector as
//! an input.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::BenefitFunction;
use crate::governor::GeneratorUnit;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("communication edge {index} connects node {from} to {to}, invalid for {node_count} nodes")]
    InvalidEdge {
        index: usize,
        from: usize,
        to: usize,
        node_count: usize,
    },
    #[error("duplicate communication edge between {from} and {to}")]
    DuplicateEdge { from: usize, to: usize },
    #[error("communication graph is disconnected; components: {components:?}")]
    Disconnected { components: Vec<Vec<usize>> },
    #[error("gain override targets generator {unit}, but only {gen_count} generators exist")]
    OverrideOutOfRange { unit: usize, gen_count: usize },
    #[error("gain override targets generator {unit}, which has a first-order governor (no frequency gain)")]
    OverrideOnFirstOrder { unit: usize },
    #[error("controller family {family:?} does not accept {what}")]
    UnsupportedFeature {
        family: ControllerFamily,
        what: &'static str,
    },
    #[error("controller family {family:?} requires a communication graph")]
    MissingCommGraph { family: ControllerFamily },
    #[error(
        "communication graph has {got} nodes but {expected} controllers participate \
         (generators first, then controllable loads)"
    )]
    CommSizeMismatch { expected: usize, got: usize },
    #[error("load controller {index} targets load bus {load_index}, but only {load_count} load buses exist")]
    LoadControllerOutOfRange {
        index: usize,
        load_index: usize,
        load_count: usize,
    },
    #[error("load controller {index} must have positive time constant and benefit curvature")]
    InvalidLoadController { index: usize },
}

/// Graph Laplacian for arbitrary (possibly disconnected) edge lists.
pub fn laplacian_from_edges(node_count: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(node_count, node_count);
    for &(a, b) in edges {
        l[(a, a)] += 1.0;
        l[(b, b)] += 1.0;
        l[(a, b)] -= 1.0;
        l[(b, a)] -= 1.0;
    }
    l
}

/// Undirected connected communication graph over the controller nodes.
///
/// Node ordering: generator controllers first (in generator order), then
/// controllable-load controllers (in load-controller order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommGraph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
}

impl CommGraph {
    pub fn new(node_count: usize, edges: Vec<(usize, usize)>) -> Result<Self, ControlError> {
        for (index, &(a, b)) in edges.iter().enumerate() {
            if a >= node_count || b >= node_count || a == b {
                return Err(ControlError::InvalidEdge {
                    index,
                    from: a,
                    to: b,
                    node_count,
                });
            }
        }
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in &edges {
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(ControlError::DuplicateEdge { from: a, to: b });
            }
        }
        let components = components_of(node_count, &edges);
        if components.len() != 1 {
            return Err(ControlError::Disconnected { components });
        }
        Ok(Self { node_count, edges })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Symmetric positive semidefinite Laplacian with zero row sums.
    pub fn laplacian(&self) -> DMatrix<f64> {
        laplacian_from_edges(self.node_count, &self.edges)
    }

    /// Second-smallest Laplacian eigenvalue; positive for connected graphs.
    pub fn fiedler_value(&self) -> f64 {
        let mut eigs: Vec<f64> = self
            .laplacian()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if eigs.len() > 1 {
            eigs[1]
        } else {
            f64::INFINITY
        }
    }

    /// Diffusive coupling `sum_j (mu_i - mu_j)` for every node, i.e. the
    /// Laplacian applied to the marginal vector, evaluated edge by edge the
    /// way the distributed controllers would.
    pub fn coupling(&self, marginals: &[f64]) -> Vec<f64> {
        debug_assert_eq!(marginals.len(), self.node_count);
        let mut out = vec![0.0; self.node_count];
        for &(a, b) in &self.edges {
            let diff = marginals[a] - marginals[b];
            out[a] += diff;
            out[b] -= diff;
        }
        out
    }
}

fn components_of(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
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
        out.push(comp);
    }
    out
}

/// Which control law closes the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerFamily {
    /// No turbine-governor or setpoint dynamics: mechanical power is held
    /// constant at its initial dispatch.
    OpenLoop,
    /// Marginal-cost consensus over the communication graph.
    Consensus,
    /// Primal-dual multiplier dynamics on the physical network.
    PrimalDual,
}

/// Multiplies the frequency gain of one generator's setpoint controller;
/// `multiplier = 1` recovers the nominal law. Second-order units only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainOverride {
    pub unit: usize,
    pub multiplier: f64,
}

/// Controllable load participating in the consensus: its extra consumption
/// tracks a setpoint driven by the local frequency and the marginal-benefit
/// exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadController {
    /// Index among the load buses (0-based).
    pub load_index: usize,
    pub benefit: BenefitFunction,
    pub control_time: f64,
}

/// Full controller configuration of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub family: ControllerFamily,
    pub comm: Option<CommGraph>,
    #[serde(default)]
    pub gain_overrides: Vec<GainOverride>,
    /// Integration gain of the virtual line-flow dynamics (primal-dual).
    #[serde(default = "default_gain")]
    pub flow_gain: f64,
    /// Integration gain of the multiplier dynamics (primal-dual).
    #[serde(default = "default_gain")]
    pub price_gain: f64,
    #[serde(default)]
    pub load_control: Vec<LoadController>,
}

fn default_gain() -> f64 {
    1.0
}

impl ControlConfig {
    pub fn open_loop() -> Self {
        Self {
            family: ControllerFamily::OpenLoop,
            comm: None,
            gain_overrides: Vec::new(),
            flow_gain: 1.0,
            price_gain: 1.0,
            load_control: Vec::new(),
        }
    }

    pub fn consensus(comm: CommGraph) -> Self {
        Self {
            family: ControllerFamily::Consensus,
            comm: Some(comm),
            gain_overrides: Vec::new(),
            flow_gain: 1.0,
            price_gain: 1.0,
            load_control: Vec::new(),
        }
    }

    pub fn primal_dual() -> Self {
        Self {
            family: ControllerFamily::PrimalDual,
            comm: None,
            gain_overrides: Vec::new(),
            flow_gain: 1.0,
            price_gain: 1.0,
            load_control: Vec::new(),
        }
    }

    /// Frequency-gain multipliers per generator, 1.0 unless overridden.
    pub fn gain_multipliers(&self, gen_count: usize) -> Vec<f64> {
        let mut g = vec![1.0; gen_count];
        for o in &self.gain_overrides {
            if o.unit < gen_count {
                g[o.unit] = o.multiplier;
            }
        }
        g
    }

    pub fn validate(&self, units: &[GeneratorUnit], load_count: usize) -> Result<(), ControlError> {
        match self.family {
            ControllerFamily::OpenLoop => {
                if !self.gain_overrides.is_empty() {
                    return Err(ControlError::UnsupportedFeature {
                        family: self.family,
                        what: "gain overrides",
                    });
                }
                if !self.load_control.is_empty() {
                    return Err(ControlError::UnsupportedFeature {
                        family: self.family,
                        what: "load control",
                    });
                }
            }
            ControllerFamily::Consensus => {
                let comm = self
                    .comm
                    .as_ref()
                    .ok_or(ControlError::MissingCommGraph {
                        family: self.family,
                    })?;
                let expected = units.len() + self.load_control.len();
                if comm.node_count() != expected {
                    return Err(ControlError::CommSizeMismatch {
                        expected,
                        got: comm.node_count(),
                    });
                }
                for o in &self.gain_overrides {
                    if o.unit >= units.len() {
                        return Err(ControlError::OverrideOutOfRange {
                            unit: o.unit,
                            gen_count: units.len(),
                        });
                    }
                    if !units[o.unit].is_second_order() {
                        return Err(ControlError::OverrideOnFirstOrder { unit: o.unit });
                    }
                }
                for (index, lc) in self.load_control.iter().enumerate() {
                    if lc.load_index >= load_count {
                        return Err(ControlError::LoadControllerOutOfRange {
                            index,
                            load_index: lc.load_index,
                            load_count,
                        });
                    }
                    let bad = |v: f64| v.is_nan() || v <= 0.0;
                    if bad(lc.control_time) || bad(lc.benefit.quadratic) {
                        return Err(ControlError::InvalidLoadController { index });
                    }
                }
            }
            ControllerFamily::PrimalDual => {
                if !self.gain_overrides.is_empty() {
                    return Err(ControlError::UnsupportedFeature {
                        family: self.family,
                        what: "gain overrides",
                    });
                }
                if !self.load_control.is_empty() {
                    return Err(ControlError::UnsupportedFeature {
                        family: self.family,
                        what: "load control",
                    });
                }
            }
        }
        Ok(())
    }
}

/// Consensus setpoint law for a first-order unit. `coupling` is the node's
/// Laplacian-weighted marginal-cost sum `sum_j (mu_i - mu_j)`.
pub fn consensus_rhs_order1(
    setpoint: f64,
    mech_power: f64,
    coupling: f64,
    unit: &GeneratorUnit,
) -> f64 {
    (-setpoint + mech_power - unit.droop * unit.cost.quadratic * coupling) / unit.control_time
}

/// Consensus setpoint law for a second-order unit with an optional
/// frequency-gain multiplier (`1.0` nominal).
pub fn consensus_rhs_order2(
    setpoint: f64,
    steam_power: f64,
    gen_freq: f64,
    coupling: f64,
    unit: &GeneratorUnit,
    freq_gain_multiplier: f64,
) -> f64 {
    (-setpoint + steam_power - freq_gain_multiplier * (1.0 - unit.droop) * gen_freq
        - unit.cost.quadratic * coupling)
        / unit.control_time
}

/// Consensus law for a controllable load: the setpoint is the extra
/// consumption, driven by the local frequency deviation and the
/// marginal-benefit exchange. The benefit's negative curvature flips the
/// coupling sign relative to the generator law.
pub fn load_consensus_rhs(load_freq: f64, coupling: f64, controller: &LoadController) -> f64 {
    (load_freq + controller.benefit.quadratic * coupling) / controller.control_time
}

/// Primal-dual setpoint law for a first-order unit. `price_gap` is the
/// difference between the unit's marginal cost at the setpoint and its bus
/// multiplier.
pub fn primal_dual_rhs_order1(
    setpoint: f64,
    mech_power: f64,
    price_gap: f64,
    unit: &GeneratorUnit,
) -> f64 {
    (-setpoint + mech_power - unit.droop * price_gap) / unit.control_time
}

/// Primal-dual setpoint law for a second-order unit.
pub fn primal_dual_rhs_order2(
    setpoint: f64,
    steam_power: f64,
    gen_freq: f64,
    price_gap: f64,
    unit: &GeneratorUnit,
) -> f64 {
    (-setpoint + steam_power - (1.0 - unit.droop) * gen_freq - price_gap) / unit.control_time
}

/// Dynamics of the primal-dual virtual flows and bus multipliers:
/// flows descend the multiplier differences, multipliers integrate the
/// per-bus mismatch between virtual flow divergence and the claimed
/// injections (setpoints at generator buses, negated loads at load buses).
pub fn multiplier_rhs(
    incidence: &DMatrix<f64>,
    virtual_flow: &DVector<f64>,
    multiplier: &DVector<f64>,
    setpoints: &DVector<f64>,
    load: &DVector<f64>,
    flow_gain: f64,
    price_gain: f64,
) -> (DVector<f64>, DVector<f64>) {
    let gen_count = setpoints.len();
    let flow_dot = -flow_gain * (incidence.transpose() * multiplier);
    let divergence = incidence * virtual_flow;
    let price_dot = DVector::from_fn(multiplier.len(), |i, _| {
        let claimed = if i < gen_count {
            setpoints[i]
        } else {
            -load[i - gen_count]
        };
        price_gain * (divergence[i] - claimed)
    });
    (flow_dot, price_dot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::dispatch::{marginal_costs, CostFunction};
    use crate::governor::GovernorModel;

    #[test]
    fn path_graph_laplacian() {
        let g = CommGraph::new(3, vec![(0, 1), (1, 2)]).unwrap();
        let l = g.laplacian();
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0],
        );
        assert_eq!(l, expected);
    }

    #[test]
    fn laplacian_annihilates_ones() {
        let g = CommGraph::new(4, vec![(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let ones = DVector::repeat(4, 1.0);
        assert!((g.laplacian() * ones).amax() < 1e-15);
    }

    #[test]
    fn zero_eigenvalue_count_equals_component_count() {
        // Component-count oracle by graph search vs Laplacian spectrum.
        let graphs: Vec<(usize, Vec<(usize, usize)>)> = vec![
            (5, vec![(0, 1), (1, 2), (3, 4)]),
            (4, vec![]),
            (6, vec![(0, 1), (2, 3), (4, 5), (1, 2)]),
            (3, vec![(0, 1), (1, 2), (0, 2)]),
        ];
        for (n, edges) in graphs {
            let l = laplacian_from_edges(n, &edges);
            let zero_eigs = l
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .filter(|e| e.abs() < 1e-9)
                .count();
            assert_eq!(zero_eigs, components_of(n, &edges).len());
        }
    }

    #[test]
    fn disconnected_comm_graph_rejected() {
        let err = CommGraph::new(4, vec![(0, 1), (2, 3)]).unwrap_err();
        assert!(matches!(err, ControlError::Disconnected { .. }));
    }

    #[test]
    fn fiedler_value_positive_when_connected() {
        let g = CommGraph::new(3, vec![(0, 1), (1, 2)]).unwrap();
        assert!(g.fiedler_value() > 1e-9);
    }

    fn test_unit(order2: bool, droop: f64, q: f64, r: f64) -> GeneratorUnit {
        GeneratorUnit {
            governor: if order2 {
                GovernorModel::SecondOrder { steam_time: 4.0 }
            } else {
                GovernorModel::FirstOrder
            },
            turbine_time: 5.0,
            droop,
            control_time: 0.1,
            cost: CostFunction::new(q, r, 0.0),
        }
    }

    #[test]
    fn consensus_order1_fixed_point() {
        let unit = test_unit(false, 2.0, 2.4, 10.5);
        assert_eq!(consensus_rhs_order1(0.8, 0.8, 0.0, &unit), 0.0);
    }

    #[test]
    fn consensus_pulls_marginals_together() {
        // Two identical units, unequal setpoints: the one with the higher
        // marginal cost must decrease its setpoint, the other increase it.
        let unit = test_unit(false, 2.0, 2.0, 1.0);
        let comm = CommGraph::new(2, vec![(0, 1)]).unwrap();
        let thetas = [1.0, 0.4];
        let marginals: Vec<f64> = thetas.iter().map(|&t| unit.cost.marginal(t)).collect();
        let coupling = comm.coupling(&marginals);
        let d0 = consensus_rhs_order1(thetas[0], thetas[0], coupling[0], &unit);
        let d1 = consensus_rhs_order1(thetas[1], thetas[1], coupling[1], &unit);
        assert!(d0 < 0.0);
        assert!(d1 > 0.0);
    }

    #[test]
    fn stacked_coupling_matches_dense_laplacian_product() {
        let units = cases::case6_units(0.5);
        let comm = CommGraph::new(3, vec![(0, 1), (1, 2)]).unwrap();
        let thetas = [0.9, 1.4, 1.1];
        let marginals = marginal_costs(&thetas, &cases::case6_costs());
        let coupling = comm.coupling(&marginals);

        let q = DMatrix::from_diagonal(&DVector::from_iterator(
            3,
            units.iter().map(|u| u.cost.quadratic),
        ));
        let mu = DVector::from_vec(marginals.clone());
        // Order-2 stacked form: -Q L (Q theta + R).
        let dense2 = -&q * comm.laplacian() * &mu;
        for i in 0..3 {
            let term = -units[i].cost.quadratic * coupling[i];
            assert!((term - dense2[i]).abs() < 1e-12);
        }
        // Order-1 stacked form carries the droop factor as well.
        for i in 0..3 {
            let term = -units[i].droop * units[i].cost.quadratic * coupling[i];
            let dense1 = -units[i].droop * units[i].cost.quadratic * (comm.laplacian() * &mu)[i];
            assert!((term - dense1).abs() < 1e-12);
        }
    }

    #[test]
    fn override_multiplier_shifts_rhs_linearly() {
        let unit = test_unit(true, 0.5, 3.4, 8.9);
        let (theta, steam, freq, coupling) = (1.0, 1.1, 0.02, 0.3);
        let nominal = consensus_rhs_order2(theta, steam, freq, coupling, &unit, 1.0);
        let boosted = consensus_rhs_order2(theta, steam, freq, coupling, &unit, 5.0);
        let expected_gap = -4.0 * (1.0 - unit.droop) * freq / unit.control_time;
        assert!((boosted - nominal - expected_gap).abs() < 1e-15);
    }

    #[test]
    fn consensus_order2_equilibrium() {
        let unit = test_unit(true, 0.5, 3.4, 8.9);
        assert_eq!(consensus_rhs_order2(0.8, 0.8, 0.0, 0.0, &unit, 1.0), 0.0);
    }

    #[test]
    fn load_consensus_fixed_point() {
        let lc = LoadController {
            load_index: 0,
            benefit: BenefitFunction::new(3.0, 14.0, 0.0),
            control_time: 0.1,
        };
        assert_eq!(load_consensus_rhs(0.0, 0.0, &lc), 0.0);
    }

    #[test]
    fn primal_dual_saddle_point_is_stationary() {
        let model = cases::case6_model();
        let costs = cases::case6_costs();
        let units = cases::case6_units(0.5);
        let load = DVector::from_vec(vec![1.15, 1.25, 1.21]);
        let d = crate::dispatch::optimal_dispatch(&costs, load.sum()).unwrap();
        let theta = DVector::from_vec(d.generation.clone());
        let lambda = DVector::repeat(6, d.marginal_price);
        // Any flow satisfying the per-bus claims: min-norm least squares.
        let target = DVector::from_fn(6, |i, _| {
            if i < 3 {
                theta[i]
            } else {
                -load[i - 3]
            }
        });
        let flow = model
            .incidence()
            .clone()
            .svd(true, true)
            .solve(&target, 1e-12)
            .unwrap();
        let (flow_dot, price_dot) =
            multiplier_rhs(model.incidence(), &flow, &lambda, &theta, &load, 1.0, 1.0);
        assert!(flow_dot.amax() < 1e-10);
        assert!(price_dot.amax() < 1e-10);
        for i in 0..3 {
            let gap = units[i].cost.marginal(theta[i]) - lambda[i];
            let rhs = primal_dual_rhs_order2(theta[i], theta[i], 0.0, gap, &units[i]);
            assert!(rhs.abs() < 1e-10);
        }
    }

    #[test]
    fn config_validation_catches_misuse() {
        let units = cases::case6_units(0.5);
        let mut cfg = ControlConfig::consensus(CommGraph::new(3, vec![(0, 1), (1, 2)]).unwrap());
        assert!(cfg.validate(&units, 3).is_ok());

        cfg.gain_overrides.push(GainOverride {
            unit: 7,
            multiplier: 5.0,
        });
        assert!(matches!(
            cfg.validate(&units, 3),
            Err(ControlError::OverrideOutOfRange { .. })
        ));

        let mut first_order_units = units.clone();
        first_order_units[0].governor = GovernorModel::FirstOrder;
        let cfg = ControlConfig {
            family: ControllerFamily::Consensus,
            comm: Some(CommGraph::new(3, vec![(0, 1), (1, 2)]).unwrap()),
            gain_overrides: vec![GainOverride {
                unit: 0,
                multiplier: 5.0,
            }],
            flow_gain: 1.0,
            price_gain: 1.0,
            load_control: Vec::new(),
        };
        assert!(matches!(
            cfg.validate(&first_order_units, 3),
            Err(ControlError::OverrideOnFirstOrder { .. })
        ));

        let cfg = ControlConfig {
            family: ControllerFamily::Consensus,
            comm: Some(CommGraph::new(2, vec![(0, 1)]).unwrap()),
            gain_overrides: Vec::new(),
            flow_gain: 1.0,
            price_gain: 1.0,
            load_control: Vec::new(),
        };
        assert!(matches!(
            cfg.validate(&units, 3),
            Err(ControlError::CommSizeMismatch { .. })
        ));
    }
}
