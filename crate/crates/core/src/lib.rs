#![no_std]

//! Dependency-aware multi-robot mission core.
//!
//! Everything here is pure and allocation-only: the breakdown-function plan
//! model and its tolerant parser, the dependency graph and dispatcher, the
//! fleet skill registry, the object map, a discrete-event construction-site
//! simulator with per-robot costmaps, prompt assembly and the evaluation
//! metric math. File formats, model backends, the CLI and the HTTP service
//! live in the `fleetplan` crate.

extern crate alloc;

pub mod dag;
pub mod geometry;
pub mod metrics;
pub mod objects;
pub mod plan;
pub mod prompt;
pub mod queue;
pub mod sim;
pub mod skills;

mod math;

pub use dag::{
    build_graph, execute, execute_observed, ready_set, ActuationPort, Completion, DependencyGraph,
    ExecMode, ExecuteError, ExecutionObserver, ExecutionTrace, TaskState, TaskStatus, TraceEvent,
};
pub use geometry::{Point, Polygon, Pose};
pub use objects::{DetectionRecord, KeywordMatch, ObjectEntry, ObjectMap, ObjectSource, Shape};
pub use plan::{
    parse_plan, resolve_dependencies, serialize_plan, validate_plan, ErrorCode, PlanIssue,
    Subtask, TaskPlan, ValidationReport,
};
pub use skills::{
    FunctionSpec, RobotDescriptor, RobotKind, RobotSelector, SkillCategory, SkillId, SkillRegistry,
    Team,
};
