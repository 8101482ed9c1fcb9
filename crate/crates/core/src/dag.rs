//! Dependency graph over plan subtasks and the mission dispatcher.
//!
//! The dispatcher owns all task state. Tasks whose dependencies are done and
//! whose robots are free start together (dependency-aware mode) or strictly
//! one after another in plan order (linear mode). Completions come back from
//! an [`ActuationPort`]; a failure blocks every transitive dependent while
//! unrelated branches keep running.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::{find_cycle, ErrorCode, PlanIssue, Subtask, TaskPlan};
use crate::queue::EventQueue;
use crate::skills::{AssignContext, AssignError, SkillRegistry};

#[derive(Debug, Clone, PartialEq)]
pub struct DependencyGraph {
    tasks: Vec<Subtask>,
    index: BTreeMap<String, usize>,
    /// `deps[i]` are the indices task `i` waits for.
    deps: Vec<Vec<usize>>,
    dependents: Vec<Vec<usize>>,
    topo_order: Vec<String>,
    topo_pos: Vec<usize>,
}

impl DependencyGraph {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Tasks in plan order.
    pub fn tasks(&self) -> &[Subtask] {
        &self.tasks
    }

    pub fn node(&self, id: &str) -> Option<&Subtask> {
        self.index.get(id).map(|&i| &self.tasks[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// `(from, to)` pairs: `to` depends on `from`.
    pub fn edges(&self) -> BTreeSet<(String, String)> {
        let mut out = BTreeSet::new();
        for (i, ds) in self.deps.iter().enumerate() {
            for &d in ds {
                out.insert((self.tasks[d].task_id.clone(), self.tasks[i].task_id.clone()));
            }
        }
        out
    }

    pub fn topo_order(&self) -> &[String] {
        &self.topo_order
    }

    pub fn dependencies_of(&self, i: usize) -> &[usize] {
        &self.deps[i]
    }

    pub fn dependents_of(&self, i: usize) -> &[usize] {
        &self.dependents[i]
    }

    /// Every task reachable through dependent edges from `i`.
    pub fn transitive_dependents(&self, i: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<usize> = self.dependents[i].clone();
        while let Some(n) = stack.pop() {
            if seen.insert(n) {
                stack.extend(self.dependents[n].iter().copied());
            }
        }
        seen
    }

    /// Ancestors breadth-first, nearest first.
    fn ancestors_bfs(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        let mut q: VecDeque<usize> = self.deps[i].iter().copied().collect();
        while let Some(n) = q.pop_front() {
            if seen.insert(n) {
                out.push(n);
                q.extend(self.deps[n].iter().copied());
            }
        }
        out
    }
}

/// Builds the graph with Kahn's algorithm, breaking ties by task index.
pub fn build_graph(plan: &TaskPlan) -> Result<DependencyGraph, PlanIssue> {
    let n = plan.tasks.len();
    let mut index = BTreeMap::new();
    for (i, t) in plan.tasks.iter().enumerate() {
        if index.insert(t.task_id.clone(), i).is_some() {
            return Err(PlanIssue::new(
                ErrorCode::DuplicateId,
                Some(&t.task_id),
                "duplicate task id",
            ));
        }
    }
    let mut deps = alloc::vec![Vec::new(); n];
    let mut dependents = alloc::vec![Vec::new(); n];
    for (i, t) in plan.tasks.iter().enumerate() {
        for d in &t.dependencies {
            let Some(&j) = index.get(d) else {
                return Err(PlanIssue::new(
                    ErrorCode::UnresolvedDependency,
                    Some(&t.task_id),
                    format!("unknown dependency `{d}`"),
                ));
            };
            if !deps[i].contains(&j) {
                deps[i].push(j);
                dependents[j].push(i);
            }
        }
    }
    if let Some(cycle) = find_cycle(&deps) {
        return Err(PlanIssue::new(
            ErrorCode::Cycle,
            Some(&plan.tasks[cycle[0]].task_id),
            "dependency cycle",
        ));
    }
    let mut indegree: Vec<usize> = deps.iter().map(Vec::len).collect();
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut topo = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        topo.push(i);
        for &d in &dependents[i] {
            indegree[d] -= 1;
            if indegree[d] == 0 {
                ready.insert(d);
            }
        }
    }
    let mut topo_pos = alloc::vec![0; n];
    for (p, &i) in topo.iter().enumerate() {
        topo_pos[i] = p;
    }
    Ok(DependencyGraph {
        topo_order: topo.iter().map(|&i| plan.tasks[i].task_id.clone()).collect(),
        tasks: plan.tasks.clone(),
        index,
        deps,
        dependents,
        topo_pos,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskStatus {
    Pending,
    Ready,
    Running,
    Done,
    Failed,
    Blocked,
}

impl TaskStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(self, TaskStatus::Done | TaskStatus::Failed | TaskStatus::Blocked)
    }

    /// Legal single-step transitions.
    pub fn can_become(&self, next: TaskStatus) -> bool {
        use TaskStatus::*;
        matches!(
            (self, next),
            (Pending, Ready)
                | (Ready, Running)
                | (Running, Done)
                | (Running, Failed)
                | (Pending, Blocked)
                | (Ready, Blocked)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub task_id: String,
    pub status: TaskStatus,
    pub start_time: Option<f64>,
    pub end_time: Option<f64>,
    pub assigned_robots: Vec<String>,
}

impl TaskState {
    pub fn pending(task_id: &str) -> Self {
        TaskState {
            task_id: task_id.to_string(),
            status: TaskStatus::Pending,
            start_time: None,
            end_time: None,
            assigned_robots: Vec::new(),
        }
    }
}

/// One line of the trace export: `{"t": .., "task": .., "to": ..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: f64,
    pub task: String,
    pub to: TaskStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExecMode {
    DepAware,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub events: Vec<TraceEvent>,
    pub makespan: f64,
    pub mode: ExecMode,
    /// Final state per task, plan order.
    pub states: Vec<TaskState>,
}

impl ExecutionTrace {
    pub fn all_done(&self) -> bool {
        self.states.iter().all(|s| s.status == TaskStatus::Done)
    }

    pub fn state(&self, id: &str) -> Option<&TaskState> {
        self.states.iter().find(|s| s.task_id == id)
    }

    /// Rebuilds per-task start/end times from the event list alone.
    pub fn intervals(&self) -> BTreeMap<String, (Option<f64>, Option<f64>)> {
        let mut out: BTreeMap<String, (Option<f64>, Option<f64>)> = BTreeMap::new();
        for ev in &self.events {
            let e = out.entry(ev.task.clone()).or_default();
            match ev.to {
                TaskStatus::Running => e.0 = Some(ev.t),
                TaskStatus::Done | TaskStatus::Failed => {
                    e.1 = Some(ev.t);
                    if e.0.is_none() {
                        e.0 = Some(ev.t);
                    }
                }
                _ => {}
            }
        }
        out
    }
}

/// Result of one subtask execution.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub task_id: String,
    pub time: f64,
    pub outcome: Result<(), String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecuteError {
    #[error("executor unavailable: {0}")]
    ExecutorUnavailable(String),
}

/// Command/completion boundary to whatever actually moves robots.
///
/// `dispatch` must not block; precondition failures are reported later as a
/// failed [`Completion`]. An `Err` means the port itself is gone.
pub trait ActuationPort {
    fn now(&self) -> f64;
    fn dispatch(&mut self, task: &Subtask, robots: &[String]) -> Result<(), ExecuteError>;
    /// Next completion in time order, `Ok(None)` when nothing is in flight.
    fn next_completion(&mut self) -> Result<Option<Completion>, ExecuteError>;
}

pub trait RobotAssigner {
    fn assign(
        &mut self,
        task: &Subtask,
        ctx: AssignContext<'_>,
    ) -> Result<Option<Vec<String>>, AssignError>;
}

impl RobotAssigner for SkillRegistry {
    fn assign(
        &mut self,
        task: &Subtask,
        ctx: AssignContext<'_>,
    ) -> Result<Option<Vec<String>>, AssignError> {
        self.assign_robots(task, ctx)
    }
}

/// Hooks into a running dispatch.
pub trait ExecutionObserver {
    fn on_transition(&mut self, _event: &TraceEvent, _state: &TaskState) {}
    /// Polled before every dispatch round. Once true, running tasks finish and
    /// everything not yet started is blocked.
    fn cancel_requested(&mut self) -> bool {
        false
    }
}

struct NoopObserver;

impl ExecutionObserver for NoopObserver {}

/// Tasks that are pending and whose dependencies are all done.
pub fn ready_set(graph: &DependencyGraph, states: &BTreeMap<String, TaskState>) -> BTreeSet<String> {
    graph
        .tasks
        .iter()
        .enumerate()
        .filter(|(_, t)| states.get(&t.task_id).map(|s| s.status) == Some(TaskStatus::Pending))
        .filter(|(i, _)| {
            graph.deps[*i].iter().all(|&d| {
                states.get(&graph.tasks[d].task_id).map(|s| s.status) == Some(TaskStatus::Done)
            })
        })
        .map(|(_, t)| t.task_id.clone())
        .collect()
}

struct Dispatcher<'g, O> {
    graph: &'g DependencyGraph,
    states: Vec<TaskState>,
    events: Vec<TraceEvent>,
    busy: BTreeSet<String>,
    running: usize,
    observer: O,
}

impl<O: ExecutionObserver> Dispatcher<'_, O> {
    fn transition(&mut self, i: usize, to: TaskStatus, t: f64) {
        let st = &mut self.states[i];
        debug_assert!(st.status.can_become(to), "{:?} -> {:?}", st.status, to);
        st.status = to;
        match to {
            TaskStatus::Running => st.start_time = Some(t),
            TaskStatus::Done | TaskStatus::Failed => {
                if st.start_time.is_none() {
                    st.start_time = Some(t);
                }
                st.end_time = Some(t);
            }
            _ => {}
        }
        let ev = TraceEvent {
            t,
            task: st.task_id.clone(),
            to,
        };
        self.observer.on_transition(&ev, &self.states[i]);
        self.events.push(ev);
    }

    fn fail(&mut self, i: usize, t: f64) {
        if self.states[i].status == TaskStatus::Ready {
            // a task that never got robots still passes through RUNNING
            self.transition(i, TaskStatus::Running, t);
        }
        self.transition(i, TaskStatus::Failed, t);
        for d in self.graph.transitive_dependents(i) {
            if matches!(self.states[d].status, TaskStatus::Pending | TaskStatus::Ready) {
                self.transition(d, TaskStatus::Blocked, t);
            }
        }
    }

    fn promote(&mut self, t: f64) -> bool {
        let mut changed = false;
        for i in 0..self.graph.len() {
            if self.states[i].status == TaskStatus::Pending
                && self.graph.deps[i]
                    .iter()
                    .all(|&d| self.states[d].status == TaskStatus::Done)
            {
                self.transition(i, TaskStatus::Ready, t);
                changed = true;
            }
        }
        changed
    }

    fn preferred_robots(&self, i: usize) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for a in self.graph.ancestors_bfs(i) {
            for r in &self.states[a].assigned_robots {
                if !out.contains(r) {
                    out.push(r.clone());
                }
            }
        }
        out
    }

    fn candidates(&self, mode: ExecMode) -> Vec<usize> {
        match mode {
            ExecMode::DepAware => {
                let mut c: Vec<usize> = (0..self.graph.len())
                    .filter(|&i| self.states[i].status == TaskStatus::Ready)
                    .collect();
                c.sort_by_key(|&i| (self.graph.topo_pos[i], i));
                c
            }
            ExecMode::Linear => {
                if self.running > 0 {
                    return Vec::new();
                }
                (0..self.graph.len())
                    .find(|&i| !self.states[i].status.is_terminal())
                    .filter(|&i| self.states[i].status == TaskStatus::Ready)
                    .into_iter()
                    .collect()
            }
        }
    }
}

/// Runs the graph to completion. See [`execute_observed`].
pub fn execute(
    graph: &DependencyGraph,
    port: &mut dyn ActuationPort,
    assigner: &mut dyn RobotAssigner,
    mode: ExecMode,
) -> Result<ExecutionTrace, ExecuteError> {
    execute_observed(graph, port, assigner, mode, NoopObserver)
}

/// Runs the graph to completion, reporting each transition to `observer`.
pub fn execute_observed<O: ExecutionObserver>(
    graph: &DependencyGraph,
    port: &mut dyn ActuationPort,
    assigner: &mut dyn RobotAssigner,
    mode: ExecMode,
    observer: O,
) -> Result<ExecutionTrace, ExecuteError> {
    let mut d = Dispatcher {
        graph,
        states: graph.tasks.iter().map(|t| TaskState::pending(&t.task_id)).collect(),
        events: Vec::new(),
        busy: BTreeSet::new(),
        running: 0,
        observer,
    };
    let mut cancelled = false;

    loop {
        let now = port.now();
        if !cancelled && d.observer.cancel_requested() {
            cancelled = true;
            for i in 0..graph.len() {
                if matches!(d.states[i].status, TaskStatus::Pending | TaskStatus::Ready) {
                    d.transition(i, TaskStatus::Blocked, now);
                }
            }
        }

        let mut changed = d.promote(now);
        for i in d.candidates(mode) {
            if d.states[i].status != TaskStatus::Ready {
                continue;
            }
            let preferred = d.preferred_robots(i);
            let ctx = AssignContext {
                busy: Some(&d.busy),
                preferred: &preferred,
            };
            match assigner.assign(&graph.tasks[i], ctx) {
                Ok(Some(robots)) => {
                    d.states[i].assigned_robots = robots.clone();
                    d.transition(i, TaskStatus::Running, now);
                    d.busy.extend(robots.iter().cloned());
                    d.running += 1;
                    port.dispatch(&graph.tasks[i], &robots)?;
                    changed = true;
                    if mode == ExecMode::Linear {
                        break;
                    }
                }
                Ok(None) => {}
                Err(_) => {
                    d.fail(i, now);
                    changed = true;
                }
            }
        }

        if d.running == 0 {
            if changed {
                continue;
            }
            break;
        }

        let Some(c) = port.next_completion()? else {
            return Err(ExecuteError::ExecutorUnavailable(
                "port reported no completion while tasks were running".into(),
            ));
        };
        let Some(i) = graph.index_of(&c.task_id) else {
            continue;
        };
        if d.states[i].status != TaskStatus::Running {
            continue;
        }
        d.running -= 1;
        for r in d.states[i].assigned_robots.clone() {
            d.busy.remove(&r);
        }
        match c.outcome {
            Ok(()) => d.transition(i, TaskStatus::Done, c.time),
            Err(_) => d.fail(i, c.time),
        }
    }

    // anything still waiting can no longer start
    let end = port.now();
    for i in 0..graph.len() {
        if matches!(d.states[i].status, TaskStatus::Pending | TaskStatus::Ready) {
            d.transition(i, TaskStatus::Blocked, end);
        }
    }

    let makespan = d
        .states
        .iter()
        .filter_map(|s| s.end_time)
        .fold(0.0_f64, f64::max);
    Ok(ExecutionTrace {
        events: d.events,
        makespan,
        mode,
        states: d.states,
    })
}

/// Port with scripted per-task durations and failures, for tests and for
/// timing studies that need no world model.
#[derive(Default)]
pub struct TimedPort {
    now: f64,
    pub default_duration: f64,
    pub durations: BTreeMap<String, f64>,
    pub failures: BTreeSet<String>,
    pub closed: bool,
    queue: EventQueue<(String, bool)>,
    /// `(task, robots, start, end)` for every dispatch, in dispatch order.
    pub log: Vec<(String, Vec<String>, f64, f64)>,
}

impl TimedPort {
    pub fn uniform(duration: f64) -> Self {
        TimedPort {
            default_duration: duration,
            ..Default::default()
        }
    }
}

impl ActuationPort for TimedPort {
    fn now(&self) -> f64 {
        self.now
    }

    fn dispatch(&mut self, task: &Subtask, robots: &[String]) -> Result<(), ExecuteError> {
        if self.closed {
            return Err(ExecuteError::ExecutorUnavailable("port closed".into()));
        }
        let dur = self
            .durations
            .get(&task.task_id)
            .copied()
            .unwrap_or(self.default_duration);
        let end = self.now + dur;
        let ok = !self.failures.contains(&task.task_id);
        self.queue.push(end, (task.task_id.clone(), ok));
        self.log.push((task.task_id.clone(), robots.to_vec(), self.now, end));
        Ok(())
    }

    fn next_completion(&mut self) -> Result<Option<Completion>, ExecuteError> {
        if self.closed {
            return Err(ExecuteError::ExecutorUnavailable("port closed".into()));
        }
        Ok(self.queue.pop().map(|(t, (task_id, ok))| {
            self.now = t;
            Completion {
                task_id,
                time: t,
                outcome: if ok { Ok(()) } else { Err("injected failure".into()) },
            }
        }))
    }
}
