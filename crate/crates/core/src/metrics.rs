//! Evaluation metric math: SR, IPA, DSR and SGSR.
//!
//! All functions are pure. The harness in the std crate feeds them trial
//! outcomes and execution traces.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dag::{DependencyGraph, ExecutionTrace};
use crate::objects::ObjectMap;
use crate::plan::{Subtask, TaskPlan};
use crate::sim::Simulator;
use crate::skills::normalize_token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PipelineStage {
    Generation,
    Parse,
    Validate,
}

/// First failing pipeline stage, with the error code that stopped it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineFailure {
    pub stage: PipelineStage,
    pub code: String,
    pub detail: String,
    /// Validation failures only: whether any error was structural.
    #[serde(default)]
    pub structural: bool,
}

impl PipelineFailure {
    /// Whether this trial still counts as grounded for SGSR: only
    /// non-structural validation failures (skill gaps, unknown objects) do.
    pub fn grounded(&self) -> bool {
        self.stage == PipelineStage::Validate && !self.structural
    }
}

/// Everything the metric functions need about one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<PipelineFailure>,
    pub ipa: f64,
    pub dsr: f64,
    pub success: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub makespan: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub case_id: String,
    #[serde(rename = "SR")]
    pub sr: f64,
    #[serde(rename = "IPA")]
    pub ipa: f64,
    #[serde(rename = "DSR")]
    pub dsr: f64,
    #[serde(rename = "SGSR")]
    pub sgsr: f64,
    pub trials: u32,
    pub makespan_mean: f64,
}

impl MetricsRecord {
    pub fn from_trials(case_id: &str, trials: &[TrialOutcome]) -> Self {
        let n = trials.len();
        let mean = |f: &dyn Fn(&TrialOutcome) -> f64| {
            if n == 0 {
                0.0
            } else {
                trials.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let spans: Vec<f64> = trials.iter().filter_map(|t| t.makespan).collect();
        MetricsRecord {
            case_id: case_id.into(),
            sr: mean(&|t| if t.success { 1.0 } else { 0.0 }),
            ipa: mean(&|t| t.ipa),
            dsr: mean(&|t| t.dsr),
            sgsr: compute_sgsr(&trials.iter().map(|t| t.failure.clone()).collect::<Vec<_>>()),
            trials: n as u32,
            makespan_mean: if spans.is_empty() {
                0.0
            } else {
                spans.iter().sum::<f64>() / spans.len() as f64
            },
        }
    }
}

/// Share of trials whose output got through parsing, dependency resolution
/// and structural validation.
pub fn compute_sgsr(trials: &[Option<PipelineFailure>]) -> f64 {
    if trials.is_empty() {
        return 0.0;
    }
    let ok = trials
        .iter()
        .filter(|t| t.as_ref().is_none_or(|f| f.grounded()))
        .count();
    ok as f64 / trials.len() as f64
}

/// Canonical target set of a subtask: each keyword resolved through the
/// object map, or its normalized token when unknown.
pub fn target_set(task: &Subtask, objects: &ObjectMap) -> BTreeSet<String> {
    task.object_keywords
        .iter()
        .map(|k| match objects.resolve(k) {
            Some(e) => e.name.clone(),
            None => normalize_token(k),
        })
        .collect()
}

/// Order-respecting greedy alignment. Each parsed subtask (in order) takes
/// the first unmatched reference subtask after the previous match that has
/// the same function name and target set. Returns `(parsed, reference)`
/// index pairs.
pub fn align(parsed: &TaskPlan, reference: &TaskPlan, objects: &ObjectMap) -> Vec<(usize, usize)> {
    let key = |t: &Subtask| (t.function_name.clone(), target_set(t, objects));
    let ref_keys: Vec<_> = reference.tasks.iter().map(key).collect();
    let mut out = Vec::new();
    let mut next = 0;
    for (pi, t) in parsed.tasks.iter().enumerate() {
        let k = key(t);
        if let Some(off) = ref_keys[next..].iter().position(|r| *r == k) {
            out.push((pi, next + off));
            next += off + 1;
        }
    }
    out
}

/// Matched subtasks over the longer plan's length.
pub fn compute_ipa(parsed: &TaskPlan, reference: &TaskPlan, objects: &ObjectMap) -> f64 {
    let denom = parsed.tasks.len().max(reference.tasks.len());
    if denom == 0 {
        return 1.0;
    }
    align(parsed, reference, objects).len() as f64 / denom as f64
}

/// Share of subtasks that started after every one of their dependencies
/// ended. Never-started subtasks count as unsatisfied.
pub fn compute_dsr(trace: &ExecutionTrace, graph: &DependencyGraph) -> f64 {
    let ids: BTreeMap<String, String> = graph
        .tasks()
        .iter()
        .map(|t| (t.task_id.clone(), t.task_id.clone()))
        .collect();
    compute_dsr_mapped(trace, graph, &ids)
}

/// [`compute_dsr`] over `graph` where the trace uses other task ids:
/// `mapping` sends a graph task id to its id in the trace. Graph tasks
/// without a mapping are unsatisfied.
pub fn compute_dsr_mapped(
    trace: &ExecutionTrace,
    graph: &DependencyGraph,
    mapping: &BTreeMap<String, String>,
) -> f64 {
    let n = graph.len();
    if n == 0 {
        return 1.0;
    }
    let spans = trace.intervals();
    let span = |graph_idx: usize| {
        mapping
            .get(&graph.tasks()[graph_idx].task_id)
            .and_then(|id| spans.get(id))
            .copied()
    };
    let satisfied = (0..n)
        .filter(|&i| {
            let Some((Some(start), _)) = span(i) else {
                return false;
            };
            graph.dependencies_of(i).iter().all(|&d| match span(d) {
                Some((_, Some(end))) => end <= start,
                _ => false,
            })
        })
        .count();
    satisfied as f64 / n as f64
}

/// Case-specific end-state checks for SR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GoalPredicate {
    /// Some robot (or the named one) ended within `tolerance` of the
    /// standoff goal for `object`.
    RobotReached {
        object: String,
        #[serde(default)]
        robot: Option<String>,
        #[serde(default = "default_tolerance")]
        tolerance: f64,
    },
    /// Soil mass held by `object` is at least `kg`.
    MassAtLeast { object: String, kg: f64 },
    /// Soil mass held by `object` is at most `kg`.
    MassAtMost { object: String, kg: f64 },
    /// Some robot (or the named one) carries at least `kg` in its bed.
    LoadAtLeast {
        #[serde(default)]
        robot: Option<String>,
        kg: f64,
    },
}

fn default_tolerance() -> f64 {
    0.5
}

impl GoalPredicate {
    pub fn holds(&self, sim: &Simulator) -> bool {
        match self {
            GoalPredicate::RobotReached {
                object,
                robot,
                tolerance,
            } => {
                let Some(entry) = sim.objects().resolve(object) else {
                    return false;
                };
                let standoff = sim.config().standoff;
                sim.robots()
                    .iter()
                    .filter(|r| robot.as_ref().is_none_or(|id| *id == r.robot_id))
                    .any(|r| {
                        let p = r.pose.position();
                        p.distance(&entry.standoff_goal(&p, standoff)) <= *tolerance
                    })
            }
            GoalPredicate::MassAtLeast { object, kg } => sim.soil(&resolved(sim, object)) >= *kg,
            GoalPredicate::MassAtMost { object, kg } => sim.soil(&resolved(sim, object)) <= *kg,
            GoalPredicate::LoadAtLeast { robot, kg } => sim
                .robots()
                .iter()
                .filter(|r| robot.as_ref().is_none_or(|id| *id == r.robot_id))
                .any(|r| r.load >= *kg),
        }
    }
}

fn resolved(sim: &Simulator, keyword: &str) -> String {
    sim.objects()
        .resolve(keyword)
        .map(|e| e.name.clone())
        .unwrap_or_else(|| normalize_token(keyword))
}

/// SR for one trial.
pub fn compute_sr(pipeline_ok: bool, trace: Option<&ExecutionTrace>, goals_hold: bool) -> bool {
    pipeline_ok && trace.is_some_and(|t| t.all_done()) && goals_hold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{build_graph, ExecMode, TaskState, TaskStatus, TraceEvent};
    use crate::geometry::Point;
    use crate::objects::{ObjectEntry, ObjectSource};
    use alloc::string::ToString;
    use alloc::vec;

    fn plan(spec: &[(&str, &[&str], &[&str])]) -> TaskPlan {
        TaskPlan::new(
            spec.iter()
                .enumerate()
                .map(|(i, (f, d, k))| {
                    Subtask::new(
                        i,
                        f,
                        d.iter().map(|s| s.to_string()).collect(),
                        k.iter().map(|s| s.to_string()).collect(),
                    )
                })
                .collect(),
        )
    }

    fn objects() -> ObjectMap {
        let mut m = ObjectMap::new();
        for (n, x) in [("soil_pile", 10.0), ("puddle", 30.0)] {
            m.upsert(ObjectEntry::point(n, Point::new(x, 0.0), ObjectSource::Scenario))
                .unwrap();
        }
        m
    }

    fn failure(stage: PipelineStage, structural: bool) -> Option<PipelineFailure> {
        Some(PipelineFailure {
            stage,
            code: "X".into(),
            detail: String::new(),
            structural,
        })
    }

    #[test]
    fn sgsr_counts() {
        let mut t = vec![None; 11];
        t.push(failure(PipelineStage::Parse, true));
        assert_eq!(compute_sgsr(&t), 11.0 / 12.0);
        assert_eq!(compute_sgsr(&vec![None; 4]), 1.0);
        assert_eq!(compute_sgsr(&vec![failure(PipelineStage::Parse, true); 3]), 0.0);
        // an unknown object is a grounding-quality miss, not a parse failure
        assert_eq!(compute_sgsr(&[failure(PipelineStage::Validate, false)]), 1.0);
        assert_eq!(compute_sgsr(&[failure(PipelineStage::Validate, true)]), 0.0);
    }

    #[test]
    fn ipa_examples() {
        let reference = plan(&[
            ("excavator_digging", &[], &["soil_pile"]),
            ("target_area_for_specific_robots", &[], &["dump_truck", "soil_pile"]),
            ("dump_loading", &["task_1"], &["soil_pile"]),
            ("excavator_unloading", &["task_0", "task_2"], &["dump_truck"]),
            ("target_area_for_specific_robots", &["task_3"], &["dump_truck", "puddle"]),
            ("dump_unloading", &["task_4"], &["puddle"]),
        ]);
        let o = objects();
        assert_eq!(compute_ipa(&reference, &reference, &o), 1.0);
        let mut wrong = reference.clone();
        wrong.tasks[2].function_name = "dump_unloading".to_string();
        assert_eq!(compute_ipa(&wrong, &reference, &o), 5.0 / 6.0);
        let empty = TaskPlan::new(Vec::new());
        let dig: (&str, &[&str], &[&str]) = ("excavator_digging", &[], &["soil_pile"]);
        assert_eq!(compute_ipa(&empty, &plan(&[dig; 4]), &o), 0.0);
    }

    #[test]
    fn ipa_resolves_keyword_spelling() {
        let o = objects();
        let a = plan(&[("excavator_digging", &[], &["Soil Pile"])]);
        let b = plan(&[("excavator_digging", &[], &["soil_pile"])]);
        assert_eq!(compute_ipa(&a, &b, &o), 1.0);
    }

    fn trace(rows: &[(&str, Option<f64>, Option<f64>, TaskStatus)]) -> ExecutionTrace {
        let mut events = Vec::new();
        let mut states = Vec::new();
        for (id, s, e, st) in rows {
            if let Some(s) = s {
                events.push(TraceEvent { t: *s, task: id.to_string(), to: TaskStatus::Running });
            }
            if let Some(e) = e {
                events.push(TraceEvent { t: *e, task: id.to_string(), to: *st });
            }
            states.push(TaskState {
                task_id: id.to_string(),
                status: *st,
                start_time: *s,
                end_time: *e,
                assigned_robots: Vec::new(),
            });
        }
        ExecutionTrace { events, makespan: 0.0, mode: ExecMode::DepAware, states }
    }

    #[test]
    fn dsr_out_of_order() {
        let p = plan(&[
            ("excavator_digging", &[], &["soil_pile"]),
            ("excavator_digging", &["task_0"], &["soil_pile"]),
            ("excavator_digging", &["task_1"], &["soil_pile"]),
        ]);
        let g = build_graph(&p).unwrap();
        let t = trace(&[
            ("task_0", Some(0.0), Some(10.0), TaskStatus::Done),
            ("task_1", Some(10.0), Some(20.0), TaskStatus::Done),
            ("task_2", Some(15.0), Some(25.0), TaskStatus::Done),
        ]);
        assert_eq!(compute_dsr(&t, &g), 2.0 / 3.0);
    }

    #[test]
    fn dsr_blocked_chain() {
        let p = plan(&[
            ("excavator_digging", &[], &["soil_pile"]),
            ("excavator_digging", &["task_0"], &["soil_pile"]),
            ("excavator_digging", &["task_1"], &["soil_pile"]),
            ("excavator_digging", &["task_2"], &["soil_pile"]),
        ]);
        let g = build_graph(&p).unwrap();
        let t = trace(&[
            ("task_0", Some(0.0), Some(0.0), TaskStatus::Failed),
            ("task_1", None, None, TaskStatus::Blocked),
            ("task_2", None, None, TaskStatus::Blocked),
            ("task_3", None, None, TaskStatus::Blocked),
        ]);
        assert_eq!(compute_dsr(&t, &g), 0.25);
    }

    #[test]
    fn record_aggregates() {
        let mut trials: Vec<TrialOutcome> = (0..12)
            .map(|i| TrialOutcome {
                trial: i,
                failure: None,
                ipa: 1.0,
                dsr: 1.0,
                success: true,
                makespan: Some(64.0),
            })
            .collect();
        trials[3].success = false;
        let r = MetricsRecord::from_trials("x", &trials);
        assert_eq!(r.sr, 11.0 / 12.0);
        assert_eq!(r.sgsr, 1.0);
        assert_eq!(r.makespan_mean, 64.0);
        assert!(r.sr <= r.sgsr);
    }
}
