//! Bundled 6-bus demonstration system: three generator buses, three load
//! buses, eleven lines, marginal-cost communication along the generator
//! chain. Used by the scenario files shipped with the CLI and by the test
//! suites.

use nalgebra::DVector;

use crate::control::{CommGraph, ControlConfig, GainOverride, LoadController};
use crate::dispatch::{BenefitFunction, CostFunction};
use crate::governor::{GeneratorUnit, GovernorModel};
use crate::grid::{NetworkModel, NetworkTopology};
use crate::sim::{IntegratorConfig, LoadSchedule, Scenario};

/// Default droop gain: the tabulated droop value read as the feedback gain
/// itself. Under this reading the droop certificate holds for all three
/// generators; the reciprocal reading (2.0) is kept as a labeled alternate
/// scenario because it fails the certificate at generators 2 and 3.
pub const DEFAULT_DROOP: f64 = 0.5;

/// Reciprocal reading of the tabulated droop value.
pub const ALTERNATE_DROOP: f64 = 2.0;

/// Network data: per-unit susceptances on a 100 MVA base.
pub fn case6_model() -> NetworkModel {
    let lines = vec![
        (0, 1),
        (0, 3),
        (0, 4),
        (1, 2),
        (1, 3),
        (1, 4),
        (1, 5),
        (2, 4),
        (2, 5),
        (3, 4),
        (4, 5),
    ];
    let susceptance = vec![
        -4.0, -4.7, -3.1, -3.8, -8.0, -3.0, -4.5, -3.2, -9.6, -2.0, -3.0,
    ];
    let topology = NetworkTopology::new(3, 3, lines).expect("static topology");
    NetworkModel::new(
        topology,
        vec![4.6, 6.2, 5.1],
        vec![3.4, 3.0, 4.2],
        vec![1.0, 1.6, 1.2],
        vec![1.05, 0.98, 1.04, 1.01, 1.03, 1.00],
        susceptance,
    )
    .expect("static model")
}

pub fn case6_costs() -> Vec<CostFunction> {
    vec![
        CostFunction::new(2.4, 10.5, 9.1),
        CostFunction::new(3.8, 5.7, 14.4),
        CostFunction::new(3.4, 8.9, 13.2),
    ]
}

/// Second-order turbine-governor units with the case-study time constants.
pub fn case6_units(droop: f64) -> Vec<GeneratorUnit> {
    let steam_times = [4.0, 4.6, 5.0];
    let turbine_times = [5.0, 6.7, 10.0];
    case6_costs()
        .into_iter()
        .enumerate()
        .map(|(i, cost)| GeneratorUnit {
            governor: GovernorModel::SecondOrder {
                steam_time: steam_times[i],
            },
            turbine_time: turbine_times[i],
            droop,
            control_time: 0.1,
            cost,
        })
        .collect()
}

/// First-order variant of the units (same turbine time constants), used to
/// exercise the first-order control path.
pub fn case6_units_first_order(droop: f64) -> Vec<GeneratorUnit> {
    case6_units(droop)
        .into_iter()
        .map(|mut u| {
            u.governor = GovernorModel::FirstOrder;
            u
        })
        .collect()
}

/// Load step: 1.01/1.20/1.18 pu initially, raised to 1.15/1.25/1.21 pu after
/// ten seconds.
pub fn case6_schedule() -> LoadSchedule {
    LoadSchedule::new(vec![
        (0.0, DVector::from_vec(vec![1.01, 1.20, 1.18])),
        (10.0, DVector::from_vec(vec![1.15, 1.25, 1.21])),
    ])
    .expect("static schedule")
}

fn gen_chain_comm() -> CommGraph {
    CommGraph::new(3, vec![(0, 1), (1, 2)]).expect("static comm graph")
}

fn build(name: &str, units: Vec<GeneratorUnit>, control: ControlConfig) -> Scenario {
    Scenario::new(
        name,
        case6_model(),
        units,
        control,
        case6_schedule(),
        IntegratorConfig::new(1e-3, 80.0),
    )
    .expect("static scenario")
}

/// Nominal consensus-controlled run.
pub fn case6_nominal() -> Scenario {
    build(
        "case6_nominal",
        case6_units(DEFAULT_DROOP),
        ControlConfig::consensus(gen_chain_comm()),
    )
}

/// Instability demonstration: the alternate droop reading (under which the
/// droop certificate fails at generators 2 and 3) combined with a five-fold
/// frequency gain at generator 3's setpoint controller. The closed loop has
/// a positive Lyapunov exponent and the oscillation amplitude grows after
/// the load step; the same scenario with the nominal multiplier converges.
/// Under the certificate-passing droop reading the boosted gain does not
/// destabilize the network at all.
pub fn case6_unstable() -> Scenario {
    let mut control = ControlConfig::consensus(gen_chain_comm());
    control.gain_overrides.push(GainOverride {
        unit: 2,
        multiplier: 5.0,
    });
    build("case6_unstable", case6_units(ALTERNATE_DROOP), control)
}

/// Alternate droop reading (reciprocal of the tabulated value). The droop
/// certificate fails at generators 2 and 3 under this reading.
pub fn case6_droop_alternate() -> Scenario {
    build(
        "case6_droop_alternate",
        case6_units(ALTERNATE_DROOP),
        ControlConfig::consensus(gen_chain_comm()),
    )
}

/// Controllers disabled: mechanical power frozen at the dispatch optimum for
/// the initial loads, so the post-step frequency settles at the synchronous
/// deviation predicted by the damping.
pub fn case6_open_loop() -> Scenario {
    build(
        "case6_open_loop",
        case6_units(DEFAULT_DROOP),
        ControlConfig::open_loop(),
    )
}

/// Primal-dual controlled run (multiplier dynamics on the physical network).
pub fn case6_primal_dual() -> Scenario {
    build(
        "case6_primal_dual",
        case6_units(DEFAULT_DROOP),
        ControlConfig::primal_dual(),
    )
}

/// First-order turbine-governor variant under consensus control.
pub fn case6_first_order() -> Scenario {
    build(
        "case6_first_order",
        case6_units_first_order(DEFAULT_DROOP),
        ControlConfig::consensus(gen_chain_comm()),
    )
}

/// Consensus run with a controllable load at bus 5: its controller joins the
/// communication chain after generator 3 and the closed loop settles at the
/// social-welfare optimum.
pub fn case6_load_control() -> Scenario {
    let comm = CommGraph::new(4, vec![(0, 1), (1, 2), (2, 3)]).expect("static comm graph");
    let mut control = ControlConfig::consensus(comm);
    control.load_control.push(LoadController {
        load_index: 1,
        benefit: BenefitFunction::new(3.0, 14.0, 0.0),
        control_time: 0.1,
    });
    build("case6_load_control", case6_units(DEFAULT_DROOP), control)
}
