//! Long-running mission service.
//!
//! Requests are handled by axum; missions run one at a time on a worker
//! thread that owns the simulator. Every state change is published on a
//! broadcast channel that backs the `/stream` endpoint.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fleetplan_core::dag::{execute_observed, ExecutionObserver};
use fleetplan_core::metrics::{PipelineFailure, PipelineStage};
use fleetplan_core::prompt::FewShot;
use fleetplan_core::sim::Simulator;
use fleetplan_core::{
    build_graph, ActuationPort, Completion, DetectionRecord, ExecMode, ExecuteError, ObjectMap,
    Subtask, TaskPlan, TaskState, TaskStatus, TraceEvent, ValidationReport,
};
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;

use crate::backend::BackendConfig;
use crate::pipeline::{plan_pipeline_observed, PlanContext};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Planning,
    Validating,
    Executing,
    Done,
    Failed,
    Rejected,
}

impl Phase {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Phase::Done | Phase::Failed | Phase::Rejected)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagNode {
    pub id: String,
    pub function_name: String,
    pub status: TaskStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagEdge {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dag {
    pub nodes: Vec<DagNode>,
    pub edges: Vec<DagEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mission {
    pub mission_id: String,
    pub instruction: String,
    pub phase: Phase,
    pub plan: Option<TaskPlan>,
    pub tasks: Vec<TaskState>,
    pub dag: Dag,
    pub report: Option<ValidationReport>,
    pub failure: Option<PipelineFailure>,
    pub cancel_requested: bool,
    pub makespan: Option<f64>,
}

impl Mission {
    fn new(id: &str, instruction: &str) -> Self {
        Mission {
            mission_id: id.into(),
            instruction: instruction.into(),
            phase: Phase::Planning,
            plan: None,
            tasks: Vec::new(),
            dag: Dag::default(),
            report: None,
            failure: None,
            cancel_requested: false,
            makespan: None,
        }
    }

    fn set_plan(&mut self, plan: &TaskPlan) {
        self.tasks = plan.tasks.iter().map(|t| TaskState::pending(&t.task_id)).collect();
        self.dag = Dag {
            nodes: plan
                .tasks
                .iter()
                .map(|t| DagNode {
                    id: t.task_id.clone(),
                    function_name: t.function_name.clone(),
                    status: TaskStatus::Pending,
                })
                .collect(),
            edges: plan
                .tasks
                .iter()
                .flat_map(|t| {
                    t.dependencies.iter().map(|d| DagEdge {
                        from: d.clone(),
                        to: t.task_id.clone(),
                    })
                })
                .collect(),
        };
        self.plan = Some(plan.clone());
    }

    fn update_task(&mut self, state: &TaskState) {
        if let Some(t) = self.tasks.iter_mut().find(|t| t.task_id == state.task_id) {
            *t = state.clone();
        }
        if let Some(n) = self.dag.nodes.iter_mut().find(|n| n.id == state.task_id) {
            n.status = state.status;
        }
    }
}

/// One server-push message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    #[serde(rename = "type")]
    pub kind: String,
    pub time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mission_id: Option<String>,
    pub payload: Value,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub scenario: Scenario,
    pub backend: BackendConfig,
    pub few_shot: Vec<FewShot>,
    /// Simulated seconds per wall-clock second; 0 runs unpaced.
    pub time_scale: f64,
    pub mode: ExecMode,
}

struct Slot {
    mission: Mission,
    cancel: Arc<AtomicBool>,
}

struct Shared {
    config: ServiceConfig,
    missions: Mutex<BTreeMap<String, Slot>>,
    objects: Mutex<ObjectMap>,
    frames: broadcast::Sender<Frame>,
    queue: Mutex<mpsc::Sender<String>>,
    ids: Mutex<ulid::Generator>,
    started: Instant,
}

impl Shared {
    fn publish(&self, kind: &str, time: f64, mission_id: Option<&str>, payload: Value) {
        // no subscribers is fine
        let _ = self.frames.send(Frame {
            kind: kind.into(),
            time,
            mission_id: mission_id.map(str::to_string),
            payload,
        });
    }

    fn with_mission<R>(&self, id: &str, f: impl FnOnce(&mut Mission) -> R) -> Option<R> {
        let mut m = self.missions.lock().unwrap();
        m.get_mut(id).map(|s| f(&mut s.mission))
    }

    fn set_phase(&self, id: &str, phase: Phase, time: f64) {
        self.with_mission(id, |m| m.phase = phase);
        self.publish("mission", time, Some(id), json!({ "phase": phase }));
    }
}

/// Handle to a running service.
#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn new(config: ServiceConfig) -> anyhow::Result<Self> {
        let objects = config.scenario.object_map()?;
        config.scenario.registry()?;
        let (tx, _) = broadcast::channel(4096);
        let (qtx, qrx) = mpsc::channel::<String>();
        let shared = Arc::new(Shared {
            config,
            missions: Mutex::new(BTreeMap::new()),
            objects: Mutex::new(objects),
            frames: tx,
            queue: Mutex::new(qtx),
            ids: Mutex::new(ulid::Generator::new()),
            started: Instant::now(),
        });
        let worker = Arc::downgrade(&shared);
        std::thread::Builder::new()
            .name("mission-worker".into())
            .spawn(move || {
                // FIFO: one mission at a time, in submission order
                while let Ok(id) = qrx.recv() {
                    let Some(shared) = worker.upgrade() else { break };
                    run_mission(&shared, &id);
                }
            })?;
        Ok(AppState(shared))
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Frame> {
        self.0.frames.subscribe()
    }

    pub fn mission(&self, id: &str) -> Option<Mission> {
        self.0.missions.lock().unwrap().get(id).map(|s| s.mission.clone())
    }

    /// Queues a mission; returns its id.
    pub fn submit(&self, instruction: &str) -> String {
        let id = self
            .0
            .ids
            .lock()
            .unwrap()
            .generate()
            .map(|u| u.to_string())
            .unwrap_or_else(|_| ulid::Ulid::new().to_string());
        self.0.missions.lock().unwrap().insert(
            id.clone(),
            Slot {
                mission: Mission::new(&id, instruction),
                cancel: Arc::new(AtomicBool::new(false)),
            },
        );
        self.0.publish("mission", 0.0, Some(&id), json!({ "phase": Phase::Planning }));
        let _ = self.0.queue.lock().unwrap().send(id.clone());
        id
    }

    /// `None` for unknown ids, `Some(false)` when already terminal.
    pub fn cancel(&self, id: &str) -> Option<bool> {
        let mut m = self.0.missions.lock().unwrap();
        let slot = m.get_mut(id)?;
        if slot.mission.phase.is_terminal() {
            return Some(false);
        }
        slot.cancel.store(true, Ordering::SeqCst);
        slot.mission.cancel_requested = true;
        Some(true)
    }
}

// ---------------------------------------------------------------------------
// worker

/// Simulator port that paces simulated time against the wall clock and
/// streams poses and simulator events.
struct LivePort<'a> {
    sim: Simulator,
    shared: &'a Shared,
    mission_id: &'a str,
    pose_interval: f64,
    last_pose: f64,
    events_sent: usize,
}

impl LivePort<'_> {
    fn flush_events(&mut self) {
        let events = self.sim.events();
        for ev in &events[self.events_sent..] {
            self.shared.publish(
                "sim_event",
                ev.time,
                Some(self.mission_id),
                serde_json::to_value(ev).unwrap_or(Value::Null),
            );
        }
        self.events_sent = events.len();
    }

    fn publish_poses(&self, t: f64) {
        let poses: Vec<Value> = self
            .sim
            .robots()
            .iter()
            .map(|r| {
                json!({
                    "robot_id": r.robot_id,
                    "kind": r.kind,
                    "pose": self.sim.pose_at(&r.robot_id, t),
                    "status": r.status,
                    "load": r.load,
                    "bucket": r.bucket,
                })
            })
            .collect();
        self.shared.publish("poses", t, Some(self.mission_id), json!({ "robots": poses }));
    }

    fn sleep_sim(&self, dt: f64) {
        let scale = self.shared.config.time_scale;
        if scale > 0.0 && dt > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(dt / scale));
        }
    }

    /// Emits pose frames on the tick grid up to (not including) `until`.
    fn pace_to(&mut self, until: f64) {
        let mut now = self.sim.now();
        while self.last_pose + self.pose_interval < until {
            let tick = self.last_pose + self.pose_interval;
            self.sleep_sim(tick - now);
            self.publish_poses(tick);
            self.last_pose = tick;
            now = tick;
        }
        self.sleep_sim(until - now);
    }
}

impl ActuationPort for LivePort<'_> {
    fn now(&self) -> f64 {
        self.sim.now()
    }

    fn dispatch(&mut self, task: &Subtask, robots: &[String]) -> Result<(), ExecuteError> {
        let r = self.sim.dispatch(task, robots);
        self.flush_events();
        r
    }

    fn next_completion(&mut self) -> Result<Option<Completion>, ExecuteError> {
        loop {
            if let Some(c) = self.sim.pop_completion() {
                return Ok(Some(c));
            }
            if let Some(t) = self.sim.next_event_time() {
                self.pace_to(t.min(self.sim.config().horizon));
            }
            let more = self.sim.advance();
            self.flush_events();
            if !more {
                return Ok(None);
            }
        }
    }
}

struct MissionObserver<'a> {
    shared: &'a Shared,
    mission_id: &'a str,
    cancel: Arc<AtomicBool>,
}

impl ExecutionObserver for MissionObserver<'_> {
    fn on_transition(&mut self, event: &TraceEvent, state: &TaskState) {
        self.shared.with_mission(self.mission_id, |m| m.update_task(state));
        self.shared.publish(
            "task",
            event.t,
            Some(self.mission_id),
            json!({ "task_id": event.task, "status": event.to, "state": state }),
        );
    }

    fn cancel_requested(&mut self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }
}

fn run_mission(shared: &Shared, id: &str) {
    let Some((instruction, cancel)) = shared
        .missions
        .lock()
        .unwrap()
        .get(id)
        .map(|s| (s.mission.instruction.clone(), s.cancel.clone()))
    else {
        return;
    };
    if cancel.load(Ordering::SeqCst) {
        shared.set_phase(id, Phase::Failed, 0.0);
        return;
    }
    let cfg = &shared.config;
    let objects = shared.objects.lock().unwrap().clone();
    let (mut registry, sim) = match cfg
        .scenario
        .registry()
        .and_then(|r| Ok((r, cfg.scenario.simulator(objects.clone(), 0)?)))
    {
        Ok(x) => x,
        Err(e) => {
            shared.with_mission(id, |m| {
                m.failure = Some(PipelineFailure {
                    stage: PipelineStage::Generation,
                    code: "SCENARIO".into(),
                    detail: format!("{e:#}"),
                    structural: true,
                })
            });
            shared.set_phase(id, Phase::Failed, 0.0);
            return;
        }
    };
    let ctx = PlanContext {
        registry: &registry,
        objects: &objects,
        few_shot: &cfg.few_shot,
        backend: &cfg.backend,
    };
    let mut on_stage = |stage: PipelineStage| {
        if stage == PipelineStage::Validate {
            shared.set_phase(id, Phase::Validating, 0.0);
        }
    };
    let out = match plan_pipeline_observed(&instruction, &ctx, 0, &mut on_stage) {
        Ok(out) => out,
        Err(e) => {
            let phase = if e.failure.stage == PipelineStage::Generation {
                Phase::Failed
            } else {
                Phase::Rejected
            };
            shared.with_mission(id, |m| {
                if let Some(p) = &e.parsed {
                    m.set_plan(p);
                }
                m.report = Some(e.report.clone());
                m.failure = Some(e.failure.clone());
            });
            shared.set_phase(id, phase, 0.0);
            return;
        }
    };
    let Ok(graph) = build_graph(&out.plan) else {
        shared.set_phase(id, Phase::Rejected, 0.0);
        return;
    };
    shared.with_mission(id, |m| {
        m.set_plan(&out.plan);
        m.report = Some(out.report.clone());
    });
    shared.set_phase(id, Phase::Executing, 0.0);

    let scale = cfg.time_scale;
    let mut port = LivePort {
        sim,
        shared,
        mission_id: id,
        // at least two pose frames per wall-clock second
        pose_interval: if scale > 0.0 { 0.5 * scale.min(1.0) } else { 0.5 },
        last_pose: 0.0,
        events_sent: 0,
    };
    port.publish_poses(0.0);
    let observer = MissionObserver {
        shared,
        mission_id: id,
        cancel,
    };
    let result = execute_observed(&graph, &mut port, &mut registry, cfg.mode, observer);
    let end = port.sim.now();
    port.publish_poses(end);
    let phase = match result {
        Ok(trace) => {
            let done = trace.all_done();
            shared.with_mission(id, |m| {
                for s in &trace.states {
                    m.update_task(s);
                }
                m.makespan = Some(trace.makespan);
            });
            if done {
                Phase::Done
            } else {
                Phase::Failed
            }
        }
        Err(_) => Phase::Failed,
    };
    shared.set_phase(id, phase, end);
}

// ---------------------------------------------------------------------------
// HTTP

fn error(status: StatusCode, code: &str, detail: impl Into<String>) -> Response {
    (status, Json(json!({ "error": code, "detail": detail.into() }))).into_response()
}

#[derive(Deserialize)]
struct SubmitBody {
    instruction: String,
}

async fn post_mission(State(app): State<AppState>, body: Bytes) -> Response {
    let Ok(req) = serde_json::from_slice::<SubmitBody>(&body) else {
        return error(StatusCode::BAD_REQUEST, "MALFORMED_BODY", "expected {\"instruction\": string}");
    };
    if req.instruction.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "EMPTY_INSTRUCTION", "instruction is empty");
    }
    let id = app.submit(&req.instruction);
    (StatusCode::ACCEPTED, Json(json!({ "mission_id": id }))).into_response()
}

async fn list_missions(State(app): State<AppState>) -> Response {
    let all: Vec<Mission> = app
        .0
        .missions
        .lock()
        .unwrap()
        .values()
        .map(|s| s.mission.clone())
        .collect();
    Json(all).into_response()
}

async fn get_mission(State(app): State<AppState>, Path(id): Path<String>) -> Response {
    match app.mission(&id) {
        None => error(StatusCode::NOT_FOUND, "UNKNOWN_MISSION", id),
        Some(m) if m.phase == Phase::Rejected => {
            let report = m.report.clone();
            (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({ "mission": m, "report": report }))).into_response()
        }
        Some(m) => Json(m).into_response(),
    }
}

async fn cancel_mission(State(app): State<AppState>, Path(id): Path<String>) -> Response {
    match app.cancel(&id) {
        None => error(StatusCode::NOT_FOUND, "UNKNOWN_MISSION", id),
        Some(false) => error(StatusCode::CONFLICT, "MISSION_TERMINAL", id),
        Some(true) => {
            (StatusCode::ACCEPTED, Json(json!({ "mission_id": id, "cancel_requested": true }))).into_response()
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DetectionBody {
    Wrapped {
        detections: Vec<DetectionRecord>,
        #[serde(default)]
        min_confidence: Option<f64>,
    },
    Bare(Vec<DetectionRecord>),
}

async fn post_detections(State(app): State<AppState>, body: Bytes) -> Response {
    let Ok(req) = serde_json::from_slice::<DetectionBody>(&body) else {
        return error(StatusCode::BAD_REQUEST, "MALFORMED_BODY", "expected a list of detections");
    };
    let (records, min_conf) = match req {
        DetectionBody::Wrapped {
            detections,
            min_confidence,
        } => (detections, min_confidence.unwrap_or(0.5)),
        DetectionBody::Bare(d) => (d, 0.5),
    };
    let now = app.0.started.elapsed().as_secs_f64();
    let n = app.0.objects.lock().unwrap().ingest_detections(&records, min_conf, now);
    app.0.publish("objects", now, None, json!({ "ingested": n }));
    Json(json!({ "ingested": n, "received": records.len() })).into_response()
}

async fn get_objects(State(app): State<AppState>) -> Response {
    let all: Vec<_> = app.0.objects.lock().unwrap().entries().cloned().collect();
    Json(all).into_response()
}

fn frame_stream(rx: broadcast::Receiver<Frame>) -> impl Stream<Item = Result<Event, Infallible>> {
    futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(frame) => {
                    let data = serde_json::to_string(&frame).unwrap_or_default();
                    return Some((Ok(Event::default().event(frame.kind.clone()).data(data)), rx));
                }
                // slow subscribers skip ahead rather than stall the worker
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    })
}

async fn stream(State(app): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    Sse::new(frame_stream(app.subscribe())).keep_alive(KeepAlive::default())
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/missions", post(post_mission).get(list_missions))
        .route("/missions/{id}", get(get_mission))
        .route("/missions/{id}/cancel", post(cancel_mission))
        .route("/objects/detections", post(post_detections))
        .route("/objects", get(get_objects))
        .route("/stream", get(stream))
        .with_state(app)
}

/// Serves until the listener fails or ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: AppState) -> anyhow::Result<()> {
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
