//! JSON scenario format: parsing, cross-reference validation, and conversion
//! into the in-memory scenario. Validation errors carry the path of the
//! offending field. Loading also runs the modeling-assumption checks: the
//! communication graph must be connected (hard error), droop certificates
//! and steady-state solvability produce warnings by default and errors under
//! strict mode.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use olfc_core::control::{CommGraph, ControlConfig, ControllerFamily, GainOverride, LoadController};
use olfc_core::dispatch::{BenefitFunction, CostFunction};
use olfc_core::governor::{droop_certificate, DroopCertificate, GeneratorUnit, GovernorModel};
use olfc_core::grid::{NetworkModel, NetworkTopology};
use olfc_core::sim::{equilibrium, IntegratorConfig, LoadSchedule, Scenario};

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("scenario fails a strict assumption check: {0}")]
    Strict(String),
    #[error("scenario cannot be built: {0}")]
    Build(String),
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> SchemaError {
    SchemaError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// System power base (MVA); all powers are per-unit on this base.
    #[serde(default = "default_base_mva")]
    pub base_mva: f64,
    /// Nominal frequency the per-unit deviations refer to. Informational:
    /// the dynamics are expressed entirely in per-unit deviations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency_base_hz: Option<f64>,
    pub network: NetworkSection,
    pub units: Vec<UnitSection>,
    pub costs: Vec<CostSection>,
    pub controllers: ControllerSection,
    pub schedule: Vec<ScheduleEntry>,
    pub integrator: IntegratorSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

fn default_base_mva() -> f64 {
    100.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub buses: Vec<BusSection>,
    pub lines: Vec<LineSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Generator,
    Load,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusSection {
    pub id: u32,
    pub kind: BusKind,
    /// Rotational inertia, generator buses only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertia: Option<f64>,
    pub damping: f64,
    pub voltage: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSection {
    pub from: u32,
    pub to: u32,
    pub susceptance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitSection {
    pub bus: u32,
    /// Turbine-governor model order: 1 or 2.
    pub order: u8,
    /// Governor time constant, second-order units only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub governor_time: Option<f64>,
    pub turbine_time: f64,
    /// Droop feedback gain (frequency deviation into the governor).
    pub droop: f64,
    pub control_time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub bus: u32,
    pub quadratic: f64,
    pub linear: f64,
    #[serde(default)]
    pub offset: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    /// consensus | destabilized | load | primal-dual | open-loop
    pub family: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comm_edges: Vec<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<OverrideSection>,
    #[serde(default = "default_gain")]
    pub flow_gain: f64,
    #[serde(default = "default_gain")]
    pub price_gain: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub load_control: Vec<LoadControlSection>,
}

fn default_gain() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverrideSection {
    pub bus: u32,
    pub multiplier: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadControlSection {
    pub bus: u32,
    pub benefit: BenefitSection,
    #[serde(default = "default_control_time")]
    pub control_time: f64,
}

fn default_control_time() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenefitSection {
    pub quadratic: f64,
    pub linear: f64,
    #[serde(default)]
    pub offset: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub time: f64,
    /// One value per load bus, in bus-list order.
    pub loads: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    pub dt: f64,
    pub horizon: f64,
    #[serde(default = "default_divergence_bound")]
    pub divergence_bound: f64,
}

fn default_divergence_bound() -> f64 {
    1e6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Reference operating point for the storage checks:
    /// "post-event-optimum" (default) or "initial".
    #[serde(default = "default_reference")]
    pub reference: String,
    /// Settling threshold on the frequency deviation (pu).
    #[serde(default = "default_freq_threshold")]
    pub freq_threshold: f64,
    /// Slack for the storage-rate check; derived from dt when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage_slack: Option<f64>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            reference: default_reference(),
            freq_threshold: default_freq_threshold(),
            storage_slack: None,
        }
    }
}

fn default_reference() -> String {
    "post-event-optimum".to_string()
}

fn default_freq_threshold() -> f64 {
    1e-3
}

/// Droop certificates for one generator under both readings of a tabulated
/// droop figure: as the feedback gain itself and as its reciprocal.
#[derive(Debug, Clone, Serialize)]
pub struct UnitCertificates {
    pub bus: u32,
    pub configured: DroopCertificate,
    pub reciprocal: DroopCertificate,
}

/// A parsed, validated scenario together with its source document and the
/// assumption-check outcomes.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub file: ScenarioFile,
    pub scenario: Scenario,
    pub warnings: Vec<String>,
    /// Certificates for every second-order unit.
    pub certificates: Vec<UnitCertificates>,
    /// Second-smallest eigenvalue of the communication Laplacian.
    pub comm_fiedler_value: Option<f64>,
    pub gen_bus_ids: Vec<u32>,
    pub load_bus_ids: Vec<u32>,
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path, strict: bool) -> Result<LoadedScenario, SchemaError> {
    let text = std::fs::read_to_string(path).map_err(|source| SchemaError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: ScenarioFile = serde_json::from_str(&text)?;
    build_scenario(file, strict)
}

/// Validates a parsed document and builds the in-memory scenario.
pub fn build_scenario(file: ScenarioFile, strict: bool) -> Result<LoadedScenario, SchemaError> {
    let mut warnings = Vec::new();

    // Bus table: generators first internally, loads after, in file order.
    let mut gen_bus_ids = Vec::new();
    let mut load_bus_ids = Vec::new();
    let mut seen = HashSet::new();
    for (i, bus) in file.network.buses.iter().enumerate() {
        if !seen.insert(bus.id) {
            return Err(invalid(
                format!("network.buses[{i}].id"),
                format!("duplicate bus id {}", bus.id),
            ));
        }
        match bus.kind {
            BusKind::Generator => {
                if bus.inertia.is_none() {
                    return Err(invalid(
                        format!("network.buses[{i}].inertia"),
                        "generator buses require an inertia",
                    ));
                }
                gen_bus_ids.push(bus.id);
            }
            BusKind::Load => {
                if bus.inertia.is_some() {
                    return Err(invalid(
                        format!("network.buses[{i}].inertia"),
                        "load buses must not carry an inertia",
                    ));
                }
                load_bus_ids.push(bus.id);
            }
        }
    }
    let bus_index = |id: u32, path: String| -> Result<usize, SchemaError> {
        gen_bus_ids
            .iter()
            .position(|&b| b == id)
            .or_else(|| {
                load_bus_ids
                    .iter()
                    .position(|&b| b == id)
                    .map(|i| gen_bus_ids.len() + i)
            })
            .ok_or_else(|| invalid(path, format!("unknown bus id {id}")))
    };

    let mut lines = Vec::new();
    let mut susceptance = Vec::new();
    for (k, line) in file.network.lines.iter().enumerate() {
        let from = bus_index(line.from, format!("network.lines[{k}].from"))?;
        let to = bus_index(line.to, format!("network.lines[{k}].to"))?;
        lines.push((from, to));
        susceptance.push(line.susceptance);
    }
    let topology = NetworkTopology::new(gen_bus_ids.len(), load_bus_ids.len(), lines)
        .map_err(|e| invalid("network.lines", e.to_string()))?;

    let gen_buses: Vec<&BusSection> = file
        .network
        .buses
        .iter()
        .filter(|b| b.kind == BusKind::Generator)
        .collect();
    let load_buses: Vec<&BusSection> = file
        .network
        .buses
        .iter()
        .filter(|b| b.kind == BusKind::Load)
        .collect();
    let model = NetworkModel::new(
        topology,
        gen_buses.iter().map(|b| b.inertia.unwrap()).collect(),
        gen_buses.iter().map(|b| b.damping).collect(),
        load_buses.iter().map(|b| b.damping).collect(),
        file.network.buses.iter().map(|b| b.voltage).collect(),
        susceptance,
    )
    .map_err(|e| invalid("network", e.to_string()))?;

    // Units and costs: exactly one of each per generator bus.
    let mut costs_by_bus: BTreeMap<u32, CostFunction> = BTreeMap::new();
    for (i, c) in file.costs.iter().enumerate() {
        if !gen_bus_ids.contains(&c.bus) {
            return Err(invalid(
                format!("costs[{i}].bus"),
                format!("bus {} is not a generator bus", c.bus),
            ));
        }
        if costs_by_bus
            .insert(c.bus, CostFunction::new(c.quadratic, c.linear, c.offset))
            .is_some()
        {
            return Err(invalid(
                format!("costs[{i}].bus"),
                format!("duplicate cost entry for bus {}", c.bus),
            ));
        }
    }
    let mut units_by_bus: BTreeMap<u32, GeneratorUnit> = BTreeMap::new();
    for (i, u) in file.units.iter().enumerate() {
        if !gen_bus_ids.contains(&u.bus) {
            return Err(invalid(
                format!("units[{i}].bus"),
                format!("bus {} is not a generator bus", u.bus),
            ));
        }
        let governor = match (u.order, u.governor_time) {
            (1, None) => GovernorModel::FirstOrder,
            (1, Some(_)) => {
                return Err(invalid(
                    format!("units[{i}].governor_time"),
                    "first-order units must not set a governor time constant",
                ))
            }
            (2, Some(steam_time)) => GovernorModel::SecondOrder { steam_time },
            (2, None) => {
                return Err(invalid(
                    format!("units[{i}].governor_time"),
                    "second-order units require a governor time constant",
                ))
            }
            (order, _) => {
                return Err(invalid(
                    format!("units[{i}].order"),
                    format!("unsupported turbine-governor order {order}"),
                ))
            }
        };
        let cost = *costs_by_bus.get(&u.bus).ok_or_else(|| {
            invalid(
                format!("units[{i}].bus"),
                format!("no cost entry for bus {}", u.bus),
            )
        })?;
        let unit = GeneratorUnit {
            governor,
            turbine_time: u.turbine_time,
            droop: u.droop,
            control_time: u.control_time,
            cost,
        };
        if units_by_bus.insert(u.bus, unit).is_some() {
            return Err(invalid(
                format!("units[{i}].bus"),
                format!("duplicate unit entry for bus {}", u.bus),
            ));
        }
    }
    for &bus in &gen_bus_ids {
        if !units_by_bus.contains_key(&bus) {
            return Err(invalid("units", format!("no unit for generator bus {bus}")));
        }
        if !costs_by_bus.contains_key(&bus) {
            return Err(invalid("costs", format!("no cost for generator bus {bus}")));
        }
    }
    let units: Vec<GeneratorUnit> = gen_bus_ids.iter().map(|b| units_by_bus[b].clone()).collect();

    let control = build_control(&file.controllers, &gen_bus_ids, &load_bus_ids, &units)?;

    // Schedule.
    let mut entries = Vec::new();
    for (i, entry) in file.schedule.iter().enumerate() {
        if entry.loads.len() != load_bus_ids.len() {
            return Err(invalid(
                format!("schedule[{i}].loads"),
                format!(
                    "expected {} load values (one per load bus), got {}",
                    load_bus_ids.len(),
                    entry.loads.len()
                ),
            ));
        }
        entries.push((entry.time, DVector::from_vec(entry.loads.clone())));
    }
    let schedule =
        LoadSchedule::new(entries).map_err(|e| invalid("schedule", e.to_string()))?;

    if file.integrator.dt.is_nan() || file.integrator.dt <= 0.0 {
        return Err(invalid("integrator.dt", "must be positive"));
    }
    let integrator = IntegratorConfig {
        dt: file.integrator.dt,
        horizon: file.integrator.horizon,
        divergence_bound: file.integrator.divergence_bound,
    };

    match file.analysis.reference.as_str() {
        "post-event-optimum" | "initial" => {}
        other => {
            return Err(invalid(
                "analysis.reference",
                format!("unknown reference policy {other:?}"),
            ))
        }
    }

    let scenario = Scenario::new(
        file.name.clone(),
        model,
        units,
        control,
        schedule,
        integrator,
    )
    .map_err(|e| SchemaError::Build(e.to_string()))?;

    // Assumption checks.
    let mut certificates = Vec::new();
    for (i, unit) in scenario.units.iter().enumerate() {
        if let Some(steam_time) = unit.steam_time() {
            let damping = scenario.model.gen_damping()[i];
            let configured =
                droop_certificate(steam_time, unit.turbine_time, damping, unit.droop);
            let reciprocal =
                droop_certificate(steam_time, unit.turbine_time, damping, 1.0 / unit.droop);
            if !configured.holds() {
                let msg = format!(
                    "droop certificate fails at bus {}: droop {} outside admissible range {:?}",
                    gen_bus_ids[i], unit.droop, configured.interval
                );
                if strict {
                    return Err(SchemaError::Strict(msg));
                }
                warnings.push(msg);
            }
            certificates.push(UnitCertificates {
                bus: gen_bus_ids[i],
                configured,
                reciprocal,
            });
        }
    }
    if !scenario.control.gain_overrides.is_empty() {
        warnings.push(format!(
            "destabilization override active: {:?}",
            scenario.control.gain_overrides
        ));
    }
    let comm_fiedler_value = scenario.control.comm.as_ref().map(CommGraph::fiedler_value);

    // Solvability at the initial loads is required to even start.
    let initial_eq = equilibrium(&scenario, scenario.schedule.initial())
        .map_err(|e| SchemaError::Build(format!("initial steady state: {e}")))?;
    if !initial_eq.steady.secure {
        let msg = "initial steady state violates the line-angle security range".to_string();
        if strict {
            return Err(SchemaError::Strict(msg));
        }
        warnings.push(msg);
    }
    // Later events: solvability failures are survivable experiments.
    for (time, loads) in scenario.schedule.entries().iter().skip(1) {
        match equilibrium(&scenario, loads) {
            Ok(eq) if !eq.steady.secure => {
                let msg = format!(
                    "steady state for the loads scheduled at t={time} violates the security range"
                );
                if strict {
                    return Err(SchemaError::Strict(msg));
                }
                warnings.push(msg);
            }
            Ok(_) => {}
            Err(e) => {
                let msg = format!("no steady state for the loads scheduled at t={time}: {e}");
                if strict {
                    return Err(SchemaError::Strict(msg));
                }
                warnings.push(msg);
            }
        }
    }

    Ok(LoadedScenario {
        file,
        scenario,
        warnings,
        certificates,
        comm_fiedler_value,
        gen_bus_ids,
        load_bus_ids,
    })
}

fn build_control(
    section: &ControllerSection,
    gen_bus_ids: &[u32],
    load_bus_ids: &[u32],
    units: &[GeneratorUnit],
) -> Result<ControlConfig, SchemaError> {
    let family = match section.family.as_str() {
        "open-loop" => ControllerFamily::OpenLoop,
        "consensus" | "destabilized" | "load" => ControllerFamily::Consensus,
        "primal-dual" => ControllerFamily::PrimalDual,
        other => {
            return Err(invalid(
                "controllers.family",
                format!("unknown controller family {other:?}"),
            ))
        }
    };
    match section.family.as_str() {
        "consensus" => {
            if !section.overrides.is_empty() {
                return Err(invalid(
                    "controllers.overrides",
                    "gain overrides require the \"destabilized\" family",
                ));
            }
            if !section.load_control.is_empty() {
                return Err(invalid(
                    "controllers.load_control",
                    "controllable loads require the \"load\" family",
                ));
            }
        }
        "destabilized" => {
            if section.overrides.is_empty() {
                return Err(invalid(
                    "controllers.overrides",
                    "the \"destabilized\" family requires at least one gain override",
                ));
            }
        }
        "load" => {
            if section.load_control.is_empty() {
                return Err(invalid(
                    "controllers.load_control",
                    "the \"load\" family requires at least one controllable load",
                ));
            }
        }
        "open-loop" | "primal-dual" => {
            if !section.comm_edges.is_empty() {
                return Err(invalid(
                    "controllers.comm_edges",
                    format!(
                        "the {:?} family does not use a communication graph",
                        section.family
                    ),
                ));
            }
        }
        _ => unreachable!(),
    }

    let mut load_control = Vec::new();
    for (i, lc) in section.load_control.iter().enumerate() {
        let load_index = load_bus_ids.iter().position(|&b| b == lc.bus).ok_or_else(|| {
            invalid(
                format!("controllers.load_control[{i}].bus"),
                format!("bus {} is not a load bus", lc.bus),
            )
        })?;
        load_control.push(LoadController {
            load_index,
            benefit: BenefitFunction::new(
                lc.benefit.quadratic,
                lc.benefit.linear,
                lc.benefit.offset,
            ),
            control_time: lc.control_time,
        });
    }

    let mut gain_overrides = Vec::new();
    for (i, o) in section.overrides.iter().enumerate() {
        let unit = gen_bus_ids.iter().position(|&b| b == o.bus).ok_or_else(|| {
            invalid(
                format!("controllers.overrides[{i}].bus"),
                format!("bus {} is not a generator bus", o.bus),
            )
        })?;
        gain_overrides.push(GainOverride {
            unit,
            multiplier: o.multiplier,
        });
    }

    let comm = if family == ControllerFamily::Consensus {
        // Communication nodes: generator controllers in generator order,
        // then controllable-load controllers in list order.
        let node_of = |bus: u32, path: String| -> Result<usize, SchemaError> {
            if let Some(g) = gen_bus_ids.iter().position(|&b| b == bus) {
                return Ok(g);
            }
            section
                .load_control
                .iter()
                .position(|lc| lc.bus == bus)
                .map(|i| gen_bus_ids.len() + i)
                .ok_or_else(|| {
                    invalid(
                        path,
                        format!("bus {bus} has no controller participating in the consensus"),
                    )
                })
        };
        let mut edges = Vec::new();
        for (k, [a, b]) in section.comm_edges.iter().enumerate() {
            edges.push((
                node_of(*a, format!("controllers.comm_edges[{k}][0]"))?,
                node_of(*b, format!("controllers.comm_edges[{k}][1]"))?,
            ));
        }
        let node_count = gen_bus_ids.len() + section.load_control.len();
        Some(
            CommGraph::new(node_count, edges)
                .map_err(|e| invalid("controllers.comm_edges", e.to_string()))?,
        )
    } else {
        None
    };

    let config = ControlConfig {
        family,
        comm,
        gain_overrides,
        flow_gain: section.flow_gain,
        price_gain: section.price_gain,
        load_control,
    };
    config
        .validate(units, load_bus_ids.len())
        .map_err(|e| invalid("controllers", e.to_string()))?;
    Ok(config)
}
