//! Simulation and numerical verification toolkit for distributed optimal
//! load-frequency control (OLFC) of lossless structure-preserving power
//! networks.
//!
//! The crate models a transmission network with distinct generator and load
//! buses, first- and second-order turbine-governor dynamics, and distributed
//! controllers that regulate frequency while driving the generators to the
//! economic-dispatch optimum by exchanging marginal costs over a
//! communication graph. Alongside the simulation engine it provides the
//! storage-function machinery used to check the closed loop's dissipation
//! certificates numerically, and droop-constant certificates for the
//! second-order turbine-governor model.
//!
//! Modules:
//! - [`grid`]: network topology, swing/load-bus dynamics, steady states.
//! - [`dispatch`]: linear-quadratic costs, closed-form economic dispatch and
//!   its brute-force verification oracle, social-welfare variant.
//! - [`governor`]: turbine-governor dynamics and droop certificates.
//! - [`control`]: communication graph and the distributed controller laws.
//! - [`sim`]: stacked state layout, fixed-step RK4 integration, scenarios.
//! - [`analysis`]: storage functions, dissipation checks, run metrics.
//! - [`cases`]: the bundled 6-bus demonstration system.
//!
//! # Example
//!
//! Simulate the bundled 6-bus system through its load step and check that
//! the frequency settles:
//!
//! ```
//! use olfc_core::{analysis, cases, sim};
//!
//! let scenario = cases::case6_nominal();
//! let trajectory = sim::simulate(&scenario).unwrap();
//! assert!(trajectory.diverged.is_none());
//!
//! let metrics = analysis::run_metrics(&trajectory, &scenario, 1e-3).unwrap();
//! assert!(metrics.settling_time.is_some());
//! assert!(metrics.terminal_dispatch_error.unwrap() < 1e-3);
//! ```

pub mod analysis;
pub mod cases;
pub mod control;
pub mod dispatch;
pub mod governor;
pub mod grid;
pub mod sim;

pub use control::{CommGraph, ControlConfig, ControllerFamily, GainOverride, LoadController};
pub use dispatch::{BenefitFunction, CostFunction, DispatchResult};
pub use governor::{DroopCertificate, GeneratorUnit, GovernorModel};
pub use grid::{GridState, NetworkModel, NetworkTopology, SteadyState};
pub use sim::{IntegratorConfig, LoadSchedule, Scenario, StateLayout, SystemState, Trajectory};
