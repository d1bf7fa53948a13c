//! Scenario files, concurrent campaigns and reporting on top of
//! `gridrelief-core`.

pub mod campaign;
pub mod scenario;
pub mod summary;

pub use campaign::{execute, run_campaign, CampaignReport, TimingReport};
pub use scenario::{Campaign, Prepared, RunSpec, Scenario, ScenarioError};
