//! Command-line front end: scenario files, run execution, artifact
//! emission, and certification reports.

pub mod output;
pub mod report;
pub mod runner;
pub mod schema;

pub use report::{CertifyReport, DispatchComparison, RunReport};
pub use runner::{batch, certify, dispatch_compare, run, CliError, RunOptions};
pub use schema::{build_scenario, load_scenario, LoadedScenario, ScenarioFile, SchemaError};
