//! Discrete-event construction-site simulator.
//!
//! Robots move kinematically along A* paths over their own costmap view and
//! run timed work actions. All state lives in one [`Simulator`]; commands are
//! started synchronously and finish through the event queue. The simulator is
//! also an [`ActuationPort`], so the dispatcher can drive it directly.

pub mod costmap;

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{ActuationPort, Completion, ExecuteError};
use crate::geometry::{point_along, polyline_length, Point, Polygon, Pose};
use crate::math;
use crate::objects::{ObjectEntry, ObjectMap, Shape};
use crate::plan::Subtask;
use crate::queue::EventQueue;
use crate::skills::{ActionKind, FunctionSpec, RobotKind, RobotRef, SkillRegistry};

pub use costmap::{AppliesTo, AreaMode, AreaRule, Costmap, Overlays};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub bounds_min: Point,
    pub bounds_max: Point,
    /// Meters per cell.
    pub resolution: f64,
    /// Meters per second.
    pub speed: f64,
    pub standoff: f64,
    pub arrive_tolerance: f64,
    /// Half-size of the square used when a point object is avoided.
    pub point_area_half: f64,
    pub excavator_range: f64,
    pub truck_range: f64,
    pub dig_duration: f64,
    pub excavator_unload_duration: f64,
    pub dump_load_duration: f64,
    pub dump_unload_duration: f64,
    pub bucket_mass: f64,
    pub truck_capacity: f64,
    pub horizon: f64,
    /// Relative duration jitter (0.1 means ±10%); 0 disables it.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            bounds_min: Point::new(-50.0, -50.0),
            bounds_max: Point::new(50.0, 50.0),
            resolution: 0.5,
            speed: 1.0,
            standoff: 2.0,
            arrive_tolerance: 0.5,
            point_area_half: 1.0,
            excavator_range: 5.0,
            truck_range: 3.0,
            dig_duration: 8.0,
            excavator_unload_duration: 16.0,
            dump_load_duration: 4.0,
            dump_unload_duration: 8.0,
            bucket_mass: 500.0,
            truck_capacity: 2000.0,
            horizon: 3600.0,
            jitter: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum SimError {
    #[error("UNKNOWN_OBJECT: {0}")]
    UnknownObject(String),
    #[error("UNKNOWN_ROBOT: {0}")]
    UnknownRobot(String),
    #[error("NO_PATH: {0} cannot reach its goal")]
    NoPath(String),
    #[error("OUT_OF_RANGE: {robot} is {distance} from {target}")]
    OutOfRange {
        robot: String,
        target: String,
        distance: String,
    },
    #[error("WRONG_ROBOT_KIND: {0}")]
    WrongRobotKind(String),
    #[error("BUCKET_FULL: {0}")]
    BucketFull(String),
    #[error("BUCKET_EMPTY: {0}")]
    BucketEmpty(String),
    #[error("EMPTY_LOAD: {0}")]
    EmptyLoad(String),
    #[error("TRUCK_FULL: {0}")]
    TruckFull(String),
    #[error("ROBOT_BUSY: {0}")]
    RobotBusy(String),
    #[error("NO_TARGET: {0}")]
    NoTarget(String),
    #[error("DEADLINE_EXCEEDED at {0} sim-s")]
    DeadlineExceeded(String),
}

impl SimError {
    pub fn code(&self) -> &'static str {
        match self {
            SimError::UnknownObject(_) => "UNKNOWN_OBJECT",
            SimError::UnknownRobot(_) => "UNKNOWN_ROBOT",
            SimError::NoPath(_) => "NO_PATH",
            SimError::OutOfRange { .. } => "OUT_OF_RANGE",
            SimError::WrongRobotKind(_) => "WRONG_ROBOT_KIND",
            SimError::BucketFull(_) => "BUCKET_FULL",
            SimError::BucketEmpty(_) => "BUCKET_EMPTY",
            SimError::EmptyLoad(_) => "EMPTY_LOAD",
            SimError::TruckFull(_) => "TRUCK_FULL",
            SimError::RobotBusy(_) => "ROBOT_BUSY",
            SimError::NoTarget(_) => "NO_TARGET",
            SimError::DeadlineExceeded(_) => "DEADLINE_EXCEEDED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SimEventKind {
    NavDone,
    ActionDone,
    NavFailed,
    LoadChanged,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimPayload {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pose: Option<Pose>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub load_kg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    pub kind: SimEventKind,
    pub robot_id: String,
    pub payload: SimPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RobotStatus {
    Idle,
    Moving,
    Working,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Bucket {
    Empty,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
struct Motion {
    path: Vec<Point>,
    length: f64,
    t0: f64,
    goal: Point,
    gen: u64,
    command: CommandId,
    avoid: Vec<Polygon>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobotSimState {
    pub robot_id: String,
    pub kind: RobotKind,
    pub pose: Pose,
    pub start_pose: Pose,
    pub speed: f64,
    pub status: RobotStatus,
    /// Dump trucks only.
    pub load: f64,
    /// Excavators only.
    pub bucket: Bucket,
    pub bucket_kg: f64,
    #[serde(skip)]
    motion: Option<Motion>,
}

/// Path actually driven, with the avoid areas active while driving it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutedLeg {
    pub robot_id: String,
    pub points: Vec<Point>,
    pub t_start: f64,
    pub t_end: f64,
    pub avoid: Vec<Polygon>,
}

pub type CommandId = u64;

#[derive(Debug, Clone, PartialEq)]
enum Target {
    Object(ObjectEntry),
    Robot(String),
}

impl Target {
    fn label(&self) -> String {
        match self {
            Target::Object(e) => e.name.clone(),
            Target::Robot(r) => r.clone(),
        }
    }
}

#[derive(Debug, Clone)]
enum Scheduled {
    Arrive { robot: String, gen: u64 },
    Work { robot: String, command: CommandId, action: ActionKind, target: Target },
    Instant { robot: String, command: CommandId, action: ActionKind, target: Option<String> },
}

#[derive(Debug, Clone)]
struct CommandState {
    pending: BTreeSet<String>,
    error: Option<SimError>,
}

/// Outcome of a finished command.
pub type CommandResult = Result<f64, SimError>;

#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
    now: f64,
    robots: Vec<RobotSimState>,
    objects: ObjectMap,
    catalog: Vec<FunctionSpec>,
    base: Costmap,
    overlays: Overlays,
    soil: BTreeMap<String, f64>,
    queue: EventQueue<Scheduled>,
    commands: BTreeMap<CommandId, CommandState>,
    finished: VecDeque<(CommandId, f64, Result<(), SimError>)>,
    results: BTreeMap<CommandId, CommandResult>,
    next_command: CommandId,
    next_gen: u64,
    log: Vec<SimEvent>,
    legs: Vec<ExecutedLeg>,
    rng: ChaCha8Rng,
    task_of: BTreeMap<CommandId, String>,
}

impl Simulator {
    /// World with the registry's robots at their start poses.
    pub fn new(config: SimConfig, registry: &SkillRegistry, objects: ObjectMap) -> Self {
        let robots = registry
            .robots()
            .iter()
            .map(|r| RobotSimState {
                robot_id: r.robot_id.clone(),
                kind: r.kind,
                pose: r.start_pose,
                start_pose: r.start_pose,
                speed: config.speed,
                status: RobotStatus::Idle,
                load: 0.0,
                bucket: Bucket::Empty,
                bucket_kg: 0.0,
                motion: None,
            })
            .collect();
        Simulator {
            base: Costmap::new(config.bounds_min, config.bounds_max, config.resolution),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            now: 0.0,
            robots,
            objects,
            catalog: registry.catalog().to_vec(),
            overlays: Overlays::default(),
            soil: BTreeMap::new(),
            queue: EventQueue::new(),
            commands: BTreeMap::new(),
            finished: VecDeque::new(),
            results: BTreeMap::new(),
            next_command: 0,
            next_gen: 0,
            log: Vec::new(),
            legs: Vec::new(),
            task_of: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn objects(&self) -> &ObjectMap {
        &self.objects
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.log
    }

    pub fn executed_legs(&self) -> &[ExecutedLeg] {
        &self.legs
    }

    pub fn robots(&self) -> &[RobotSimState] {
        &self.robots
    }

    pub fn robot(&self, id: &str) -> Option<&RobotSimState> {
        self.robots.iter().find(|r| r.robot_id == id)
    }

    fn robot_idx(&self, id: &str) -> Result<usize, SimError> {
        self.robots
            .iter()
            .position(|r| r.robot_id == id)
            .ok_or_else(|| SimError::UnknownRobot(id.into()))
    }

    /// Sets soil mass held by a site object.
    pub fn set_soil(&mut self, object: &str, kg: f64) {
        self.soil.insert(object.into(), kg.max(0.0));
    }

    pub fn soil(&self, object: &str) -> f64 {
        self.soil.get(object).copied().unwrap_or(0.0)
    }

    /// Soil in objects, buckets and truck beds.
    pub fn total_mass(&self) -> f64 {
        self.soil.values().sum::<f64>()
            + self.robots.iter().map(|r| r.load + r.bucket_kg).sum::<f64>()
    }

    pub fn command_result(&self, id: CommandId) -> Option<&CommandResult> {
        self.results.get(&id)
    }

    /// Interpolated pose, including robots mid-path.
    pub fn pose_at(&self, id: &str, t: f64) -> Option<Pose> {
        let r = self.robot(id)?;
        let Some(m) = &r.motion else {
            return Some(r.pose);
        };
        let s = ((t - m.t0) * r.speed).clamp(0.0, m.length);
        let p = point_along(&m.path, s);
        let ahead = point_along(&m.path, (s + 1e-3).min(m.length));
        let d = ahead.sub(&p);
        let heading = if d.norm() > 1e-12 {
            math::atan2(d.y, d.x)
        } else {
            r.pose.heading
        };
        Some(Pose::new(p.x, p.y, heading))
    }

    /// Costmap as seen by one robot.
    pub fn costmap_for(&self, robot: &str) -> Costmap {
        self.overlays.view(&self.base, robot)
    }

    pub fn avoided_areas(&self, robot: &str) -> Vec<Polygon> {
        self.overlays.avoided(robot)
    }

    /// Plans (without moving) a path for `robot` to `goal` under its costmap.
    pub fn plan_path(&self, robot: &str, goal: &Point) -> Result<Vec<Point>, SimError> {
        let r = self.robot(robot).ok_or_else(|| SimError::UnknownRobot(robot.into()))?;
        self.costmap_for(robot)
            .plan(&r.pose.position(), goal)
            .ok_or_else(|| SimError::NoPath(robot.into()))
    }

    fn emit(&mut self, kind: SimEventKind, robot: &str, payload: SimPayload) {
        self.log.push(SimEvent {
            time: self.now,
            kind,
            robot_id: robot.into(),
            payload,
        });
    }

    fn jittered(&mut self, d: f64) -> f64 {
        if self.config.jitter > 0.0 {
            let j = self.config.jitter;
            d * (1.0 + self.rng.random_range(-j..=j))
        } else {
            d
        }
    }

    fn new_command(&mut self, robots: &[String]) -> CommandId {
        self.next_command += 1;
        let id = self.next_command;
        self.commands.insert(
            id,
            CommandState {
                pending: robots.iter().cloned().collect(),
                error: None,
            },
        );
        id
    }

    fn robot_finished(&mut self, command: CommandId, robot: &str, result: Result<(), SimError>) {
        let Some(st) = self.commands.get_mut(&command) else {
            return;
        };
        st.pending.remove(robot);
        if let Err(e) = result {
            st.error.get_or_insert(e);
        }
        if st.pending.is_empty() {
            let st = self.commands.remove(&command).unwrap();
            let outcome = match st.error {
                Some(e) => Err(e),
                None => Ok(()),
            };
            self.results.insert(
                command,
                outcome.clone().map(|_| self.now),
            );
            self.finished.push_back((command, self.now, outcome));
        }
    }

    fn ensure_idle(&self, idx: usize) -> Result<(), SimError> {
        if self.robots[idx].status != RobotStatus::Idle {
            return Err(SimError::RobotBusy(self.robots[idx].robot_id.clone()));
        }
        Ok(())
    }

    fn resolve_object(&self, keyword: &str) -> Result<ObjectEntry, SimError> {
        self.objects
            .resolve(keyword)
            .cloned()
            .ok_or_else(|| SimError::UnknownObject(keyword.into()))
    }

    fn area_polygon(&self, entry: &ObjectEntry) -> Polygon {
        match &entry.shape {
            Shape::Polygon(p) => p.clone(),
            Shape::Point => Polygon::square(entry.location, self.config.point_area_half)
                .unwrap_or_else(|_| unreachable!("positive half-size")),
        }
    }

    // -----------------------------------------------------------------------
    // navigation

    /// Applies an avoid/allow rule; robots whose remaining path now crosses a
    /// lethal cell are re-planned from where they are.
    pub fn apply_area_rule(&mut self, rule: AreaRule) -> Result<(), SimError> {
        let poly = match rule.polygon {
            Some(p) => p,
            None => {
                let e = self.resolve_object(&rule.area_name)?;
                self.area_polygon(&e)
            }
        };
        let targets: Vec<String> = match &rule.applies_to {
            AppliesTo::All => self.robots.iter().map(|r| r.robot_id.clone()).collect(),
            AppliesTo::Robots(ids) => {
                for id in ids {
                    self.robot_idx(id)?;
                }
                ids.clone()
            }
        };
        for id in &targets {
            self.overlays.set(id, &rule.area_name, rule.mode, poly.clone());
        }
        for id in targets {
            self.replan_if_blocked(&id);
        }
        Ok(())
    }

    fn close_leg(&mut self, idx: usize, upto: f64) {
        let r = &self.robots[idx];
        let Some(m) = &r.motion else {
            return;
        };
        let s = ((upto - m.t0) * r.speed).clamp(0.0, m.length);
        let mut pts = Vec::new();
        let mut acc = 0.0;
        pts.push(m.path[0]);
        for w in m.path.windows(2) {
            let seg = w[0].distance(&w[1]);
            if acc + seg <= s + 1e-12 {
                pts.push(w[1]);
                acc += seg;
            } else {
                pts.push(point_along(&m.path, s));
                break;
            }
        }
        pts.dedup_by(|a, b| a.distance(b) < 1e-12);
        self.legs.push(ExecutedLeg {
            robot_id: r.robot_id.clone(),
            points: pts,
            t_start: m.t0,
            t_end: upto,
            avoid: m.avoid.clone(),
        });
    }

    fn replan_if_blocked(&mut self, id: &str) {
        let Ok(idx) = self.robot_idx(id) else {
            return;
        };
        let Some(m) = self.robots[idx].motion.clone() else {
            return;
        };
        let here = self.pose_at(id, self.now).unwrap().position();
        let s = ((self.now - m.t0) * self.robots[idx].speed).clamp(0.0, m.length);
        let mut rest = alloc::vec![here];
        let mut acc = 0.0;
        for w in m.path.windows(2) {
            acc += w[0].distance(&w[1]);
            if acc > s {
                rest.push(w[1]);
            }
        }
        let view = self.costmap_for(id);
        if !view.polyline_blocked(&rest) {
            // the remaining route is still legal; future legs record the new rules
            return;
        }
        self.close_leg(idx, self.now);
        let heading = self.pose_at(id, self.now).unwrap().heading;
        self.robots[idx].pose = Pose::new(here.x, here.y, heading);
        self.robots[idx].motion = None;
        match view.plan(&here, &m.goal) {
            Some(path) => self.begin_motion(idx, path, m.goal, m.command),
            None => {
                self.robots[idx].status = RobotStatus::Idle;
                let err = SimError::NoPath(id.into());
                self.emit(
                    SimEventKind::NavFailed,
                    id,
                    SimPayload {
                        error: Some(err.to_string()),
                        pose: Some(self.robots[idx].pose),
                        ..Default::default()
                    },
                );
                self.robot_finished(m.command, id, Err(err));
            }
        }
    }

    fn begin_motion(&mut self, idx: usize, path: Vec<Point>, goal: Point, command: CommandId) {
        self.next_gen += 1;
        let gen = self.next_gen;
        let length = polyline_length(&path);
        let id = self.robots[idx].robot_id.clone();
        let avoid = self.overlays.avoided(&id);
        let speed = self.robots[idx].speed;
        self.robots[idx].status = RobotStatus::Moving;
        self.robots[idx].motion = Some(Motion {
            path,
            length,
            t0: self.now,
            goal,
            gen,
            command,
            avoid,
        });
        self.queue.push(self.now + length / speed, Scheduled::Arrive { robot: id, gen });
    }

    fn navigate(&mut self, robots: &[String], goals: Vec<Point>) -> Result<CommandId, SimError> {
        let mut plans = Vec::with_capacity(robots.len());
        for (id, goal) in robots.iter().zip(&goals) {
            let idx = self.robot_idx(id)?;
            self.ensure_idle(idx)?;
            let here = self.robots[idx].pose.position();
            if here.distance(goal) <= self.config.arrive_tolerance {
                plans.push((idx, None, *goal));
                continue;
            }
            match self.costmap_for(id).plan(&here, goal) {
                Some(p) => plans.push((idx, Some(p), *goal)),
                None => {
                    let err = SimError::NoPath(id.clone());
                    self.emit(
                        SimEventKind::NavFailed,
                        id,
                        SimPayload {
                            error: Some(err.to_string()),
                            ..Default::default()
                        },
                    );
                    return Err(err);
                }
            }
        }
        let command = self.new_command(robots);
        for (idx, path, goal) in plans {
            match path {
                Some(p) => self.begin_motion(idx, p, goal, command),
                None => {
                    // already there
                    self.robots[idx].status = RobotStatus::Moving;
                    self.next_gen += 1;
                    let gen = self.next_gen;
                    let here = self.robots[idx].pose.position();
                    self.robots[idx].motion = Some(Motion {
                        path: alloc::vec![here],
                        length: 0.0,
                        t0: self.now,
                        goal: here,
                        gen,
                        command,
                        avoid: Vec::new(),
                    });
                    let robot = self.robots[idx].robot_id.clone();
                    self.queue.push(self.now, Scheduled::Arrive { robot, gen });
                }
            }
        }
        Ok(command)
    }

    /// Sends robots to standoff points outside the named area.
    pub fn goto_area(&mut self, robots: &[String], area: &str) -> Result<CommandId, SimError> {
        let entry = self.resolve_object(area)?;
        let mut goals = Vec::with_capacity(robots.len());
        for id in robots {
            let idx = self.robot_idx(id)?;
            goals.push(entry.standoff_goal(&self.robots[idx].pose.position(), self.config.standoff));
        }
        self.navigate(robots, goals)
    }

    pub fn return_to_start(&mut self, robots: &[String]) -> Result<CommandId, SimError> {
        let mut goals = Vec::with_capacity(robots.len());
        for id in robots {
            let idx = self.robot_idx(id)?;
            goals.push(self.robots[idx].start_pose.position());
        }
        self.navigate(robots, goals)
    }

    // -----------------------------------------------------------------------
    // work actions

    fn resolve_target(&self, actor: usize, keyword: &str) -> Result<Target, SimError> {
        let lookup = |k: &str| -> Option<RobotRef> {
            let norm = crate::skills::normalize_token(k);
            if let Some(r) = self.robots.iter().find(|r| crate::skills::normalize_token(&r.robot_id) == norm) {
                return Some(RobotRef::Id(r.robot_id.clone()));
            }
            RobotKind::from_keyword(&norm).map(|(kind, every)| RobotRef::Kind { kind, every })
        };
        match lookup(keyword) {
            Some(RobotRef::Id(id)) => Ok(Target::Robot(id)),
            Some(RobotRef::Kind { kind, .. }) => {
                let here = self.robots[actor].pose.position();
                self.robots
                    .iter()
                    .enumerate()
                    .filter(|(i, r)| *i != actor && r.kind == kind)
                    .min_by(|a, b| {
                        a.1.pose
                            .position()
                            .distance(&here)
                            .total_cmp(&b.1.pose.position().distance(&here))
                    })
                    .map(|(_, r)| Target::Robot(r.robot_id.clone()))
                    .ok_or_else(|| SimError::NoTarget(keyword.into()))
            }
            None => self.resolve_object(keyword).map(Target::Object),
        }
    }

    fn target_distance(&self, actor: usize, target: &Target) -> f64 {
        let here = self.robots[actor].pose.position();
        match target {
            Target::Object(e) => e.distance_to(&here),
            Target::Robot(id) => self
                .robot(id)
                .map(|r| r.pose.position().distance(&here))
                .unwrap_or(f64::INFINITY),
        }
    }

    fn check_range(&self, actor: usize, target: &Target, range: f64) -> Result<(), SimError> {
        let d = self.target_distance(actor, target);
        if d > range + 1e-9 {
            return Err(SimError::OutOfRange {
                robot: self.robots[actor].robot_id.clone(),
                target: target.label(),
                distance: format!("{d:.2} m"),
            });
        }
        Ok(())
    }

    fn require_kind(&self, actor: usize, kind: RobotKind) -> Result<(), SimError> {
        if self.robots[actor].kind != kind {
            return Err(SimError::WrongRobotKind(format!(
                "{} is a {}, needs a {}",
                self.robots[actor].robot_id, self.robots[actor].kind, kind
            )));
        }
        Ok(())
    }

    fn start_work(&mut self, actor: usize, action: ActionKind, target: Target, duration: f64) -> CommandId {
        let robot = self.robots[actor].robot_id.clone();
        let command = self.new_command(core::slice::from_ref(&robot));
        self.robots[actor].status = RobotStatus::Working;
        let d = self.jittered(duration);
        self.queue.push(
            self.now + d,
            Scheduled::Work {
                robot,
                command,
                action,
                target,
            },
        );
        command
    }

    pub fn excavator_digging(&mut self, robot: &str, target: &str) -> Result<CommandId, SimError> {
        let a = self.robot_idx(robot)?;
        self.require_kind(a, RobotKind::Excavator)?;
        self.ensure_idle(a)?;
        if self.robots[a].bucket == Bucket::Full {
            return Err(SimError::BucketFull(robot.into()));
        }
        let t = self.resolve_target(a, target)?;
        self.check_range(a, &t, self.config.excavator_range)?;
        Ok(self.start_work(a, ActionKind::Dig, t, self.config.dig_duration))
    }

    pub fn excavator_unloading(&mut self, robot: &str, target: &str) -> Result<CommandId, SimError> {
        let a = self.robot_idx(robot)?;
        self.require_kind(a, RobotKind::Excavator)?;
        self.ensure_idle(a)?;
        if self.robots[a].bucket == Bucket::Empty {
            return Err(SimError::BucketEmpty(robot.into()));
        }
        let t = self.resolve_target(a, target)?;
        self.check_range(a, &t, self.config.excavator_range)?;
        if let Target::Robot(id) = &t {
            let r = self.robot(id).ok_or_else(|| SimError::UnknownRobot(id.clone()))?;
            if r.kind != RobotKind::DumpTruck {
                return Err(SimError::WrongRobotKind(format!("{id} cannot receive soil")));
            }
            if r.load + self.robots[a].bucket_kg > self.config.truck_capacity + 1e-9 {
                return Err(SimError::TruckFull(id.clone()));
            }
        }
        Ok(self.start_work(a, ActionKind::ExcavatorUnload, t, self.config.excavator_unload_duration))
    }

    pub fn dump_loading(&mut self, robot: &str, target: &str) -> Result<CommandId, SimError> {
        let a = self.robot_idx(robot)?;
        self.require_kind(a, RobotKind::DumpTruck)?;
        self.ensure_idle(a)?;
        let t = self.resolve_target(a, target)?;
        self.check_range(a, &t, self.config.truck_range)?;
        Ok(self.start_work(a, ActionKind::DumpLoad, t, self.config.dump_load_duration))
    }

    pub fn dump_unloading(&mut self, robot: &str, target: &str) -> Result<CommandId, SimError> {
        let a = self.robot_idx(robot)?;
        self.require_kind(a, RobotKind::DumpTruck)?;
        self.ensure_idle(a)?;
        if self.robots[a].load <= 0.0 {
            return Err(SimError::EmptyLoad(robot.into()));
        }
        let t = self.resolve_target(a, target)?;
        self.check_range(a, &t, self.config.truck_range)?;
        Ok(self.start_work(a, ActionKind::DumpUnload, t, self.config.dump_unload_duration))
    }

    // -----------------------------------------------------------------------
    // event loop

    fn finish_work(&mut self, robot: &str, command: CommandId, action: ActionKind, target: Target) {
        let Ok(a) = self.robot_idx(robot) else {
            return;
        };
        self.robots[a].status = RobotStatus::Idle;
        let label = target.label();
        match action {
            ActionKind::Dig => {
                let available = self.soil(&label);
                let taken = available.min(self.config.bucket_mass);
                if let Target::Object(_) = target {
                    self.soil.insert(label.clone(), available - taken);
                }
                self.robots[a].bucket = Bucket::Full;
                self.robots[a].bucket_kg = taken;
            }
            ActionKind::ExcavatorUnload => {
                let kg = self.robots[a].bucket_kg;
                self.robots[a].bucket = Bucket::Empty;
                self.robots[a].bucket_kg = 0.0;
                match &target {
                    Target::Robot(id) => {
                        if let Ok(t) = self.robot_idx(id) {
                            self.robots[t].load += kg;
                            let load = self.robots[t].load;
                            let id = id.clone();
                            self.emit(
                                SimEventKind::LoadChanged,
                                &id,
                                SimPayload {
                                    load_kg: Some(load),
                                    ..Default::default()
                                },
                            );
                        }
                    }
                    Target::Object(_) => {
                        *self.soil.entry(label.clone()).or_insert(0.0) += kg;
                    }
                }
            }
            ActionKind::DumpUnload => {
                let kg = self.robots[a].load;
                self.robots[a].load = 0.0;
                *self.soil.entry(label.clone()).or_insert(0.0) += kg;
                self.emit(
                    SimEventKind::LoadChanged,
                    robot,
                    SimPayload {
                        load_kg: Some(0.0),
                        ..Default::default()
                    },
                );
            }
            _ => {}
        }
        self.emit(
            SimEventKind::ActionDone,
            robot,
            SimPayload {
                action: Some(action),
                target: Some(label),
                ..Default::default()
            },
        );
        self.robot_finished(command, robot, Ok(()));
    }

    fn process(&mut self, item: Scheduled) {
        match item {
            Scheduled::Arrive { robot, gen } => {
                let Ok(idx) = self.robot_idx(&robot) else {
                    return;
                };
                let Some(m) = self.robots[idx].motion.clone() else {
                    return;
                };
                if m.gen != gen {
                    return;
                }
                if m.length > 0.0 {
                    self.close_leg(idx, self.now);
                }
                let from = if m.path.len() >= 2 {
                    m.path[m.path.len() - 2]
                } else {
                    self.robots[idx].pose.position()
                };
                let pose = Pose::new(from.x, from.y, self.robots[idx].pose.heading).facing(m.goal);
                self.robots[idx].pose = if m.length > 0.0 { pose } else { self.robots[idx].pose };
                self.robots[idx].motion = None;
                self.robots[idx].status = RobotStatus::Idle;
                let p = self.robots[idx].pose;
                self.emit(
                    SimEventKind::NavDone,
                    &robot,
                    SimPayload {
                        pose: Some(p),
                        ..Default::default()
                    },
                );
                self.robot_finished(m.command, &robot, Ok(()));
            }
            Scheduled::Work {
                robot,
                command,
                action,
                target,
            } => self.finish_work(&robot, command, action, target),
            Scheduled::Instant {
                robot,
                command,
                action,
                target,
            } => {
                self.emit(
                    SimEventKind::ActionDone,
                    &robot,
                    SimPayload {
                        action: Some(action),
                        target,
                        ..Default::default()
                    },
                );
                self.robot_finished(command, &robot, Ok(()));
            }
        }
    }

    /// Processes the next queued event. Returns its time, or `None` when the
    /// queue is empty.
    pub fn step(&mut self) -> Result<Option<f64>, SimError> {
        let Some(t) = self.queue.peek_time() else {
            return Ok(None);
        };
        if t > self.config.horizon {
            return Err(SimError::DeadlineExceeded(format!("{}", self.config.horizon)));
        }
        let (t, item) = self.queue.pop().unwrap();
        debug_assert!(t >= self.now);
        self.now = t;
        self.process(item);
        Ok(Some(t))
    }

    /// Runs until the queue drains; returns the final time.
    pub fn run_until_idle(&mut self) -> Result<f64, SimError> {
        while self.step()?.is_some() {}
        Ok(self.now)
    }

    /// Runs every event up to and including `t`, then advances the clock to `t`.
    pub fn run_until(&mut self, t: f64) -> Result<(), SimError> {
        while self.queue.peek_time().is_some_and(|next| next <= t) {
            self.step()?;
        }
        if t > self.now {
            self.now = t.min(self.config.horizon);
        }
        Ok(())
    }

    /// Time of the next queued event.
    pub fn next_event_time(&self) -> Option<f64> {
        self.queue.peek_time()
    }

    /// Next finished dispatched task, without advancing time.
    pub fn pop_completion(&mut self) -> Option<Completion> {
        while let Some((cmd, time, outcome)) = self.finished.pop_front() {
            if let Some(task_id) = self.task_of.remove(&cmd) {
                return Some(Completion {
                    task_id,
                    time,
                    outcome: outcome.map_err(|e| e.to_string()),
                });
            }
        }
        None
    }

    /// Processes one event; past the horizon everything in flight fails.
    /// Returns false once nothing is left to do.
    pub fn advance(&mut self) -> bool {
        match self.step() {
            Ok(Some(_)) => true,
            Ok(None) => false,
            Err(_) => {
                self.expire();
                true
            }
        }
    }

    /// Fails everything in flight at the horizon.
    fn expire(&mut self) {
        self.now = self.config.horizon;
        self.queue = EventQueue::new();
        let ids: Vec<CommandId> = self.commands.keys().copied().collect();
        for id in ids {
            let robots: Vec<String> = self.commands[&id].pending.iter().cloned().collect();
            for r in robots {
                if let Ok(idx) = self.robot_idx(&r) {
                    if self.robots[idx].motion.is_some() {
                        self.close_leg(idx, self.now);
                        if let Some(p) = self.pose_at(&r, self.now) {
                            self.robots[idx].pose = p;
                        }
                        self.robots[idx].motion = None;
                    }
                    self.robots[idx].status = RobotStatus::Idle;
                }
                self.robot_finished(id, &r, Err(SimError::DeadlineExceeded(format!("{}", self.config.horizon))));
            }
        }
    }

    /// Starts the action behind a catalog function for the given robots.
    pub fn start_function(
        &mut self,
        function: &str,
        robots: &[String],
        keywords: &[String],
    ) -> Result<CommandId, SimError> {
        let spec = self
            .catalog
            .iter()
            .find(|f| f.name == function)
            .cloned()
            .ok_or_else(|| SimError::NoTarget(format!("unknown function {function}")))?;
        let is_robot = |k: &String| {
            let n = crate::skills::normalize_token(k);
            self.robots.iter().any(|r| crate::skills::normalize_token(&r.robot_id) == n)
                || RobotKind::from_keyword(&n).is_some()
        };
        let objects: Vec<String> = keywords.iter().filter(|k| !is_robot(k)).cloned().collect();
        let first_object = || {
            objects
                .first()
                .cloned()
                .ok_or_else(|| SimError::NoTarget(format!("{function} has no target object")))
        };
        let actor = || {
            robots
                .first()
                .cloned()
                .ok_or_else(|| SimError::NoTarget(format!("{function} has no robot")))
        };
        // kind functions accept a robot keyword as their target, but not one
        // naming the acting robot's own kind
        let own_kind = spec.robot_kind;
        let work_target = || -> Result<String, SimError> {
            keywords
                .iter()
                .find(|k| {
                    let n = crate::skills::normalize_token(k);
                    match RobotKind::from_keyword(&n) {
                        Some((kind, _)) => Some(kind) != own_kind,
                        None => !robots.iter().any(|r| crate::skills::normalize_token(r) == n),
                    }
                })
                .cloned()
                .ok_or_else(|| SimError::NoTarget(format!("{function} has no target")))
        };
        match spec.action {
            ActionKind::AvoidArea | ActionKind::AllowArea => {
                if objects.is_empty() {
                    return Err(SimError::NoTarget(format!("{function} names no area")));
                }
                let mode = if spec.action == ActionKind::AvoidArea {
                    AreaMode::Avoid
                } else {
                    AreaMode::Allow
                };
                for area in &objects {
                    let name = self.resolve_object(area)?.name;
                    self.apply_area_rule(AreaRule {
                        area_name: name,
                        polygon: None,
                        mode,
                        applies_to: AppliesTo::Robots(robots.to_vec()),
                    })?;
                }
                let command = self.new_command(robots);
                let label = objects.join(",");
                for r in robots {
                    self.queue.push(
                        self.now,
                        Scheduled::Instant {
                            robot: r.clone(),
                            command,
                            action: spec.action,
                            target: Some(label.clone()),
                        },
                    );
                }
                Ok(command)
            }
            ActionKind::TargetArea => {
                let area = first_object()?;
                self.goto_area(robots, &area)
            }
            ActionKind::ReturnToStart => self.return_to_start(robots),
            ActionKind::Dig => self.excavator_digging(&actor()?, &work_target()?),
            ActionKind::ExcavatorUnload => self.excavator_unloading(&actor()?, &work_target()?),
            ActionKind::DumpLoad => self.dump_loading(&actor()?, &work_target()?),
            ActionKind::DumpUnload => self.dump_unloading(&actor()?, &work_target()?),
        }
    }
}

impl ActuationPort for Simulator {
    fn now(&self) -> f64 {
        self.now
    }

    fn dispatch(&mut self, task: &Subtask, robots: &[String]) -> Result<(), ExecuteError> {
        match self.start_function(&task.function_name, robots, &task.object_keywords) {
            Ok(cmd) => {
                self.task_of.insert(cmd, task.task_id.clone());
            }
            Err(e) => {
                // surfaces as a failed completion at the current time
                self.next_command += 1;
                let cmd = self.next_command;
                self.task_of.insert(cmd, task.task_id.clone());
                self.results.insert(cmd, Err(e.clone()));
                self.finished.push_back((cmd, self.now, Err(e)));
            }
        }
        Ok(())
    }

    fn next_completion(&mut self) -> Result<Option<Completion>, ExecuteError> {
        loop {
            if let Some(c) = self.pop_completion() {
                return Ok(Some(c));
            }
            if !self.advance() {
                return Ok(None);
            }
        }
    }
}

#[cfg(test)]
mod tests;
