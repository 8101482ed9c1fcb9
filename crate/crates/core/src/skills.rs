//! Fleet, skills and the atomic action function catalog.
//!
//! Navigation skills `N1`..`N4` are shared by every robot; `FE*` belong to
//! excavators and `FD*` to dump trucks. Each catalog function maps to exactly
//! one skill. Coverage is checked against the union of all registered skill
//! sets, which also subsumes the navigation-only check.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::plan::{Scalar, Subtask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SkillCategory {
    Navigation,
    RobotSpecific,
}

/// Element of the universal skill set, e.g. `N2` or `FE1`.
///
/// Serialized as its bare id; the category is derived from the id prefix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct SkillId {
    pub id: String,
    pub category: SkillCategory,
}

impl SkillId {
    pub fn new(id: &str) -> Self {
        let category = if id.starts_with('N') {
            SkillCategory::Navigation
        } else {
            SkillCategory::RobotSpecific
        };
        SkillId {
            id: id.to_string(),
            category,
        }
    }

    pub fn is_navigation(&self) -> bool {
        self.category == SkillCategory::Navigation
    }
}

impl From<String> for SkillId {
    fn from(s: String) -> Self {
        SkillId::new(&s)
    }
}

impl From<SkillId> for String {
    fn from(s: SkillId) -> Self {
        s.id
    }
}

impl fmt::Display for SkillId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id)
    }
}

/// Builds a skill set from ids.
pub fn skill_set(ids: &[&str]) -> BTreeSet<SkillId> {
    ids.iter().map(|s| SkillId::new(s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotKind {
    Excavator,
    DumpTruck,
}

impl RobotKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RobotKind::Excavator => "excavator",
            RobotKind::DumpTruck => "dump_truck",
        }
    }

    pub fn default_skills(&self) -> BTreeSet<SkillId> {
        match self {
            RobotKind::Excavator => skill_set(&["N1", "N2", "N3", "N4", "FE1", "FE2"]),
            RobotKind::DumpTruck => skill_set(&["N1", "N2", "N3", "N4", "FD1", "FD2"]),
        }
    }

    /// Recognizes a kind in a normalized keyword. Plural forms return `true`
    /// in the second slot ("every robot of that kind").
    pub fn from_keyword(normalized: &str) -> Option<(RobotKind, bool)> {
        match normalized {
            "excavator" => Some((RobotKind::Excavator, false)),
            "excavators" => Some((RobotKind::Excavator, true)),
            "dump_truck" | "truck" => Some((RobotKind::DumpTruck, false)),
            "dump_trucks" | "trucks" => Some((RobotKind::DumpTruck, true)),
            _ => None,
        }
    }
}

impl fmt::Display for RobotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotDescriptor {
    pub robot_id: String,
    pub kind: RobotKind,
    pub skills: BTreeSet<SkillId>,
    pub start_pose: Pose,
    pub current_pose: Pose,
}

impl RobotDescriptor {
    /// Robot with the default skill set of its kind, parked at `start`.
    pub fn new(robot_id: &str, kind: RobotKind, start: Pose) -> Self {
        RobotDescriptor {
            robot_id: robot_id.to_string(),
            kind,
            skills: kind.default_skills(),
            start_pose: start,
            current_pose: start,
        }
    }

    pub fn has_skill(&self, skill: &SkillId) -> bool {
        self.skills.contains(skill)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Team {
    pub members: Vec<String>,
    pub combined_skills: BTreeSet<SkillId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RobotSelector {
    All,
    SpecificByKind,
    SpecificById,
}

/// What the simulator does when a function runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    AvoidArea,
    AllowArea,
    TargetArea,
    ReturnToStart,
    Dig,
    ExcavatorUnload,
    DumpLoad,
    DumpUnload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    pub name: String,
    pub required_skill: SkillId,
    pub robot_selector: RobotSelector,
    pub needs_target: bool,
    pub robot_kind: Option<RobotKind>,
    pub action: ActionKind,
    pub description: String,
}

fn spec(
    name: &str,
    skill: &str,
    selector: RobotSelector,
    needs_target: bool,
    kind: Option<RobotKind>,
    action: ActionKind,
    description: &str,
) -> FunctionSpec {
    FunctionSpec {
        name: name.to_string(),
        required_skill: SkillId::new(skill),
        robot_selector: selector,
        needs_target,
        robot_kind: kind,
        action,
        description: description.to_string(),
    }
}

/// The twelve atomic action functions (eight navigation, four robot-specific).
pub fn default_catalog() -> Vec<FunctionSpec> {
    use ActionKind::*;
    use RobotSelector::*;
    let ex = Some(RobotKind::Excavator);
    let dt = Some(RobotKind::DumpTruck);
    alloc::vec![
        spec("avoid_areas_for_all_robots", "N1", All, true, None, AvoidArea,
            "Sets the cost map to make all robots avoid specified areas."),
        spec("avoid_areas_for_specific_robots", "N1", SpecificById, true, None, AvoidArea,
            "Sets the cost map for selected robots to avoid specified areas."),
        spec("target_area_for_all_robots", "N2", All, true, None, TargetArea,
            "Guides all robots to target points near the specified area."),
        spec("target_area_for_specific_robots", "N2", SpecificById, true, None, TargetArea,
            "Guides selected robots to target points near the specified area."),
        spec("allow_areas_for_all_robots", "N3", All, true, None, AllowArea,
            "Configures the cost map to allow all robots to access specified areas."),
        spec("allow_areas_for_specific_robots", "N3", SpecificById, true, None, AllowArea,
            "Configures the cost map for selected robots to access specified areas."),
        spec("return_to_start_for_all_robots", "N4", All, false, None, ReturnToStart,
            "Instructs all robots to return to their initial starting position."),
        spec("return_to_start_for_specific_robots", "N4", SpecificById, false, None, ReturnToStart,
            "Instructs selected robots to return to their initial starting position."),
        spec("excavator_digging", "FE1", SpecificByKind, true, ex, Dig,
            "Instructs the excavator to dig at the specified target location."),
        spec("excavator_unloading", "FE2", SpecificByKind, true, ex, ExcavatorUnload,
            "Instructs the excavator to unload at the specified target location."),
        spec("dump_loading", "FD1", SpecificByKind, true, dt, DumpLoad,
            "Instructs the dump truck to load materials at the specified target location."),
        spec("dump_unloading", "FD2", SpecificByKind, true, dt, DumpUnload,
            "Instructs the dump truck to unload materials at the specified target location."),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("robot `{0}` is already registered")]
    DuplicateRobot(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AssignError {
    #[error("function `{0}` is not in the catalog")]
    UnknownFunction(String),
    #[error("no registered robot holds skill {skill} required by `{function}`")]
    NoCapableRobot { function: String, skill: SkillId },
    #[error("robot `{robot}` cannot run `{function}`")]
    IncapableRobot { function: String, robot: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coverage {
    pub ok: bool,
    pub missing: BTreeSet<SkillId>,
}

/// Inputs to a robot assignment decision.
#[derive(Debug, Default, Clone, Copy)]
pub struct AssignContext<'a> {
    /// Robots currently executing another subtask.
    pub busy: Option<&'a BTreeSet<String>>,
    /// Robots used by the task's ancestors, nearest ancestor first.
    pub preferred: &'a [String],
}

impl AssignContext<'_> {
    fn is_busy(&self, robot: &str) -> bool {
        self.busy.is_some_and(|b| b.contains(robot))
    }
}

/// Lowercases and joins alphanumeric runs with `_`.
pub fn normalize_token(s: &str) -> String {
    let mut out = String::new();
    for part in s
        .split(|c: char| !c.is_alphanumeric())
        .filter(|p| !p.is_empty())
    {
        if !out.is_empty() {
            out.push('_');
        }
        for c in part.chars() {
            out.extend(c.to_lowercase());
        }
    }
    out
}

/// Fleet registry plus function catalog. Assignment keeps least-recently-used
/// stamps so equal candidates rotate.
#[derive(Debug, Clone)]
pub struct SkillRegistry {
    robots: Vec<RobotDescriptor>,
    catalog: Vec<FunctionSpec>,
    last_used: BTreeMap<String, u64>,
    clock: u64,
}

impl Default for SkillRegistry {
    fn default() -> Self {
        SkillRegistry::new(default_catalog())
    }
}

/// A robot reference extracted from a keyword or parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RobotRef {
    Id(String),
    Kind { kind: RobotKind, every: bool },
}

impl SkillRegistry {
    pub fn new(catalog: Vec<FunctionSpec>) -> Self {
        SkillRegistry {
            robots: Vec::new(),
            catalog,
            last_used: BTreeMap::new(),
            clock: 0,
        }
    }

    pub fn register_robot(&mut self, descriptor: RobotDescriptor) -> Result<(), RegistryError> {
        if self.robot(&descriptor.robot_id).is_some() {
            return Err(RegistryError::DuplicateRobot(descriptor.robot_id));
        }
        self.last_used.insert(descriptor.robot_id.clone(), 0);
        self.robots.push(descriptor);
        Ok(())
    }

    pub fn robots(&self) -> &[RobotDescriptor] {
        &self.robots
    }

    pub fn robot(&self, id: &str) -> Option<&RobotDescriptor> {
        self.robots.iter().find(|r| r.robot_id == id)
    }

    pub fn robot_mut(&mut self, id: &str) -> Option<&mut RobotDescriptor> {
        self.robots.iter_mut().find(|r| r.robot_id == id)
    }

    pub fn catalog(&self) -> &[FunctionSpec] {
        &self.catalog
    }

    pub fn function(&self, name: &str) -> Option<&FunctionSpec> {
        self.catalog.iter().find(|f| f.name == name)
    }

    /// Union of every registered robot's skills.
    pub fn union_skills(&self) -> BTreeSet<SkillId> {
        self.robots
            .iter()
            .flat_map(|r| r.skills.iter().cloned())
            .collect()
    }

    /// Navigation part of the union.
    pub fn navigation_skills(&self) -> BTreeSet<SkillId> {
        self.union_skills()
            .into_iter()
            .filter(SkillId::is_navigation)
            .collect()
    }

    pub fn coverage_check(&self, required: &BTreeSet<SkillId>) -> Coverage {
        let have = self.union_skills();
        let missing: BTreeSet<SkillId> = required.difference(&have).cloned().collect();
        Coverage {
            ok: missing.is_empty(),
            missing,
        }
    }

    /// Team view over the given members; unknown ids contribute nothing.
    pub fn team(&self, members: &[&str]) -> Team {
        let combined_skills = members
            .iter()
            .filter_map(|m| self.robot(m))
            .flat_map(|r| r.skills.iter().cloned())
            .collect();
        Team {
            members: members.iter().map(|m| m.to_string()).collect(),
            combined_skills,
        }
    }

    /// Interprets a keyword as a robot reference (id or kind), if it is one.
    pub fn robot_ref(&self, keyword: &str) -> Option<RobotRef> {
        let norm = normalize_token(keyword);
        if let Some(r) = self
            .robots
            .iter()
            .find(|r| normalize_token(&r.robot_id) == norm)
        {
            return Some(RobotRef::Id(r.robot_id.clone()));
        }
        RobotKind::from_keyword(&norm).map(|(kind, every)| RobotRef::Kind { kind, every })
    }

    fn explicit_refs(&self, task: &Subtask, spec: &FunctionSpec) -> Vec<RobotRef> {
        if let Some(Scalar::String(list)) = task.raw_params.get("robots") {
            return list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .filter_map(|s| self.robot_ref(s))
                .collect();
        }
        if spec.robot_selector == RobotSelector::SpecificById {
            return task
                .object_keywords
                .iter()
                .filter_map(|k| self.robot_ref(k))
                .collect();
        }
        Vec::new()
    }

    /// Picks robots for `task`.
    ///
    /// `Ok(None)` means capable robots exist but the chosen ones are busy; the
    /// caller retries at the next completion.
    pub fn assign_robots(
        &mut self,
        task: &Subtask,
        ctx: AssignContext<'_>,
    ) -> Result<Option<Vec<String>>, AssignError> {
        let spec = self
            .function(&task.function_name)
            .cloned()
            .ok_or_else(|| AssignError::UnknownFunction(task.function_name.clone()))?;
        let capable: Vec<&RobotDescriptor> = self
            .robots
            .iter()
            .filter(|r| r.has_skill(&spec.required_skill))
            .filter(|r| spec.robot_kind.is_none_or(|k| r.kind == k))
            .collect();
        if capable.is_empty() {
            return Err(AssignError::NoCapableRobot {
                function: spec.name.clone(),
                skill: spec.required_skill.clone(),
            });
        }

        let refs = self.explicit_refs(task, &spec);
        let chosen: Vec<String> = if spec.robot_selector == RobotSelector::All && refs.is_empty() {
            capable.iter().map(|r| r.robot_id.clone()).collect()
        } else if !refs.is_empty() {
            let mut out: Vec<String> = Vec::new();
            for r in &refs {
                match r {
                    RobotRef::Id(id) => {
                        if !capable.iter().any(|c| &c.robot_id == id) {
                            return Err(AssignError::IncapableRobot {
                                function: spec.name.clone(),
                                robot: id.clone(),
                            });
                        }
                        if !out.contains(id) {
                            out.push(id.clone());
                        }
                    }
                    RobotRef::Kind { kind, every } => {
                        let of_kind: Vec<&RobotDescriptor> =
                            capable.iter().copied().filter(|c| c.kind == *kind).collect();
                        if of_kind.is_empty() {
                            return Err(AssignError::NoCapableRobot {
                                function: spec.name.clone(),
                                skill: spec.required_skill.clone(),
                            });
                        }
                        if *every {
                            for c in of_kind {
                                if !out.contains(&c.robot_id) {
                                    out.push(c.robot_id.clone());
                                }
                            }
                        } else {
                            match self.pick_one(&of_kind, &ctx, &out) {
                                Some(id) => out.push(id),
                                None => return Ok(None),
                            }
                        }
                    }
                }
            }
            out
        } else {
            match self.pick_one(&capable, &ctx, &[]) {
                Some(id) => alloc::vec![id],
                None => return Ok(None),
            }
        };

        if chosen.iter().any(|id| ctx.is_busy(id)) {
            return Ok(None);
        }
        self.clock += 1;
        for id in &chosen {
            self.last_used.insert(id.clone(), self.clock);
        }
        Ok(Some(chosen))
    }

    /// Idle ancestor robot first, then least recently used idle robot.
    fn pick_one(
        &self,
        candidates: &[&RobotDescriptor],
        ctx: &AssignContext<'_>,
        exclude: &[String],
    ) -> Option<String> {
        let usable = |id: &str| !ctx.is_busy(id) && !exclude.iter().any(|e| e == id);
        for p in ctx.preferred {
            if candidates.iter().any(|c| &c.robot_id == p) && usable(p) {
                return Some(p.clone());
            }
        }
        candidates
            .iter()
            .filter(|c| usable(&c.robot_id))
            .min_by_key(|c| self.last_used.get(&c.robot_id).copied().unwrap_or(0))
            .map(|c| c.robot_id.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn fleet() -> SkillRegistry {
        let mut reg = SkillRegistry::default();
        reg.register_robot(RobotDescriptor::new("zx120", RobotKind::Excavator, Pose::new(0.0, 0.0, 0.0)))
            .unwrap();
        reg.register_robot(RobotDescriptor::new("c30r_1", RobotKind::DumpTruck, Pose::new(5.0, 0.0, 0.0)))
            .unwrap();
        reg.register_robot(RobotDescriptor::new("c30r_2", RobotKind::DumpTruck, Pose::new(9.0, 0.0, 0.0)))
            .unwrap();
        reg
    }

    fn task(name: &str, keywords: &[&str]) -> Subtask {
        Subtask::new(0, name, vec![], keywords.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut reg = fleet();
        assert_eq!(reg.robots().len(), 3);
        let err = reg
            .register_robot(RobotDescriptor::new("zx120", RobotKind::Excavator, Pose::new(0.0, 0.0, 0.0)))
            .unwrap_err();
        assert_eq!(err, RegistryError::DuplicateRobot("zx120".into()));
    }

    #[test]
    fn catalog_has_twelve_functions_one_skill_each() {
        let cat = default_catalog();
        assert_eq!(cat.len(), 12);
        let names: BTreeSet<&str> = cat.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names.len(), 12);
        let nav = cat.iter().filter(|f| f.required_skill.is_navigation()).count();
        assert_eq!(nav, 8);
    }

    #[test]
    fn coverage_default_fleet_full_task_row() {
        let reg = fleet();
        let req = skill_set(&["N1", "N2", "N3", "N4", "FE1", "FD1", "FE2", "FD2"]);
        let cov = reg.coverage_check(&req);
        assert!(cov.ok);
        assert!(cov.missing.is_empty());
    }

    #[test]
    fn coverage_missing_is_set_difference() {
        let mut reg = SkillRegistry::default();
        reg.register_robot(RobotDescriptor::new("c30r_1", RobotKind::DumpTruck, Pose::new(0.0, 0.0, 0.0)))
            .unwrap();
        let cov = reg.coverage_check(&skill_set(&["FE1"]));
        assert!(!cov.ok);
        assert_eq!(cov.missing, skill_set(&["FE1"]));
        assert!(reg.coverage_check(&BTreeSet::new()).ok);
    }

    #[test]
    fn empty_fleet_fails_nonempty_requirement() {
        let reg = SkillRegistry::default();
        assert!(!reg.coverage_check(&skill_set(&["N1"])).ok);
        assert!(reg.coverage_check(&BTreeSet::new()).ok);
    }

    #[test]
    fn all_selector_returns_every_robot() {
        let mut reg = fleet();
        let got = reg
            .assign_robots(&task("avoid_areas_for_all_robots", &["puddle"]), AssignContext::default())
            .unwrap()
            .unwrap();
        assert_eq!(got, vec!["zx120", "c30r_1", "c30r_2"]);
    }

    #[test]
    fn kind_selector_picks_unique_excavator() {
        let mut reg = fleet();
        let got = reg
            .assign_robots(&task("excavator_digging", &["soil_pile"]), AssignContext::default())
            .unwrap()
            .unwrap();
        assert_eq!(got, vec!["zx120"]);
    }

    #[test]
    fn lru_rotation_across_parallel_loads() {
        // oracle: scripted LRU queue, pop front and push back on use
        let mut queue = vec!["c30r_1", "c30r_2"];
        let mut reg = fleet();
        let mut busy = BTreeSet::new();
        let t = task("dump_loading", &["soil_pile"]);
        for _ in 0..2 {
            let got = reg
                .assign_robots(&t, AssignContext { busy: Some(&busy), preferred: &[] })
                .unwrap()
                .unwrap();
            let expect = queue.remove(0);
            queue.push(expect);
            assert_eq!(got, vec![expect]);
            busy.insert(got[0].clone());
        }
        // both busy: wait
        assert_eq!(
            reg.assign_robots(&t, AssignContext { busy: Some(&busy), preferred: &[] }).unwrap(),
            None
        );
        // both idle again: least recently used is c30r_1
        let got = reg.assign_robots(&t, AssignContext::default()).unwrap().unwrap();
        assert_eq!(got, vec![queue[0]]);
    }

    #[test]
    fn explicit_robot_param_overrides() {
        let mut reg = fleet();
        let mut t = task("dump_unloading", &["puddle"]);
        t.raw_params.insert("robots".into(), Scalar::String("c30r_2".into()));
        let got = reg.assign_robots(&t, AssignContext::default()).unwrap().unwrap();
        assert_eq!(got, vec!["c30r_2"]);
        t.raw_params.insert("robots".into(), Scalar::String("zx120".into()));
        assert!(matches!(
            reg.assign_robots(&t, AssignContext::default()),
            Err(AssignError::IncapableRobot { .. })
        ));
    }

    #[test]
    fn specific_keywords_select_robots() {
        let mut reg = fleet();
        let t = task("target_area_for_specific_robots", &["dump_trucks", "puddle"]);
        let got = reg.assign_robots(&t, AssignContext::default()).unwrap().unwrap();
        assert_eq!(got, vec!["c30r_1", "c30r_2"]);
        let t = task("target_area_for_specific_robots", &["Excavator", "puddle"]);
        let got = reg.assign_robots(&t, AssignContext::default()).unwrap().unwrap();
        assert_eq!(got, vec!["zx120"]);
    }

    #[test]
    fn idle_ancestor_robot_preferred() {
        let mut reg = fleet();
        let t = task("dump_unloading", &["puddle"]);
        let pref = vec!["c30r_2".to_string()];
        let got = reg
            .assign_robots(&t, AssignContext { busy: None, preferred: &pref })
            .unwrap()
            .unwrap();
        assert_eq!(got, vec!["c30r_2"]);
    }

    #[test]
    fn no_capable_robot() {
        let mut reg = SkillRegistry::default();
        reg.register_robot(RobotDescriptor::new("c30r_1", RobotKind::DumpTruck, Pose::new(0.0, 0.0, 0.0)))
            .unwrap();
        let err = reg
            .assign_robots(&task("excavator_digging", &["soil_pile"]), AssignContext::default())
            .unwrap_err();
        assert!(matches!(err, AssignError::NoCapableRobot { .. }));
    }

    #[test]
    fn normalize_folds_case_and_separators() {
        assert_eq!(normalize_token("Soil Pile"), "soil_pile");
        assert_eq!(normalize_token("  dump-truck "), "dump_truck");
        assert_eq!(normalize_token("C30R_1"), "c30r_1");
    }
}
