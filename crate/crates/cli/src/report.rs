//! Run report structures. A report restates the scenario document verbatim
//! together with everything the run produced, so results can be audited
//! without re-simulation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Serialize;

use olfc_core::analysis::{RunMetrics, StorageSummary};
use olfc_core::sim::Equilibrium;

use crate::schema::{LoadedScenario, ScenarioFile, UnitCertificates};

#[derive(Debug, Clone, Serialize)]
pub struct DispatchSummary {
    pub total_load: f64,
    pub marginal_price: f64,
    /// Optimal generation keyed by bus id.
    pub generation: BTreeMap<u32, f64>,
    /// Optimal controllable-load consumption keyed by bus id, when present.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub flexible_load: BTreeMap<u32, f64>,
}

impl DispatchSummary {
    pub fn from_equilibrium(loaded: &LoadedScenario, eq: &Equilibrium) -> Self {
        let generation = loaded
            .gen_bus_ids
            .iter()
            .copied()
            .zip(eq.mech_power.iter().copied())
            .collect();
        let flexible_load = loaded
            .scenario
            .control
            .load_control
            .iter()
            .zip(eq.flexible_load.iter())
            .map(|(lc, &u)| (loaded.load_bus_ids[lc.load_index], u))
            .collect();
        DispatchSummary {
            total_load: eq.loads.sum(),
            marginal_price: eq.marginal_price,
            generation,
            flexible_load,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory_csv: Option<PathBuf>,
    pub report: PathBuf,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub plot_data: Vec<PathBuf>,
}

/// Complete record of one scenario run.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub name: String,
    pub strict: bool,
    pub warnings: Vec<String>,
    /// The scenario document as executed (after any command-line overrides).
    pub scenario: ScenarioFile,
    /// Droop certificates per second-order unit, for the configured droop
    /// and its reciprocal reading.
    pub droop_certificates: Vec<UnitCertificates>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comm_fiedler_value: Option<f64>,
    pub dispatch_initial: DispatchSummary,
    pub dispatch_terminal: DispatchSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RunMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub storage: Option<StorageSummary>,
    pub diverged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence_time: Option<f64>,
    pub outputs: OutputPaths,
}

/// Output of the certify command: both droop readings per generator plus
/// the dispatch optimum, no simulation.
#[derive(Debug, Clone, Serialize)]
pub struct CertifyReport {
    pub name: String,
    pub warnings: Vec<String>,
    pub units: Vec<UnitCertificates>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comm_fiedler_value: Option<f64>,
    pub dispatch_initial: DispatchSummary,
    pub dispatch_terminal: DispatchSummary,
}

/// Output of the dispatch command: closed form against the brute-force
/// oracle.
#[derive(Debug, Clone, Serialize)]
pub struct DispatchComparison {
    pub total_load: f64,
    pub closed_form: DispatchSummary,
    pub oracle_generation: BTreeMap<u32, f64>,
    pub oracle_resolution: f64,
    pub max_deviation: f64,
}
