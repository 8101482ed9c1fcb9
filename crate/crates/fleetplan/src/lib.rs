//! Scenario files, plan backends, the evaluation harness and the mission
//! service built on `fleetplan-core`.

pub mod backend;
pub mod harness;
pub mod pipeline;
pub mod scenario;
pub mod service;
