//! Breakdown-function plans: the wire formats a model emits, canonical
//! serialization, dependency resolution and validation against a fleet and an
//! object map.
//!
//! Two input shapes are accepted:
//!
//! ```text
//! {"tasks": [{"instruction_function": {"name": .., "dependencies": [..]},
//!             "object_keywords": [..]}, ..]}
//! ```
//!
//! and the flat form that repeats `instruction_function` / `object_keywords`
//! keys inside one object. The flat form is read as an ordered stream of map
//! entries, so repeated keys are kept rather than collapsed.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::de::{self, IgnoredAny, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::objects::ObjectMap;
use crate::skills::{normalize_token, RobotRef, RobotSelector, SkillId, SkillRegistry};

/// Extra parameter value carried verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Number(f64),
    String(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subtask {
    pub task_id: String,
    pub function_name: String,
    pub dependencies: Vec<String>,
    pub object_keywords: Vec<String>,
    pub raw_params: BTreeMap<String, Scalar>,
}

pub fn task_id(index: usize) -> String {
    format!("task_{index}")
}

impl Subtask {
    pub fn new(
        index: usize,
        function_name: &str,
        dependencies: Vec<String>,
        object_keywords: Vec<String>,
    ) -> Self {
        Subtask {
            task_id: task_id(index),
            function_name: function_name.to_string(),
            dependencies,
            object_keywords,
            raw_params: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskPlan {
    pub tasks: Vec<Subtask>,
    pub source_text: String,
    pub instruction: String,
}

impl TaskPlan {
    pub fn new(tasks: Vec<Subtask>) -> Self {
        TaskPlan {
            tasks,
            ..Default::default()
        }
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.task_id == id)
    }

    pub fn task(&self, id: &str) -> Option<&Subtask> {
        self.tasks.iter().find(|t| t.task_id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    UnknownFunction,
    UnresolvedDependency,
    Cycle,
    DuplicateId,
    MalformedJson,
    SkillGap,
    UnknownObject,
}

impl ErrorCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::UnknownFunction => "UNKNOWN_FUNCTION",
            ErrorCode::UnresolvedDependency => "UNRESOLVED_DEPENDENCY",
            ErrorCode::Cycle => "CYCLE",
            ErrorCode::DuplicateId => "DUPLICATE_ID",
            ErrorCode::MalformedJson => "MALFORMED_JSON",
            ErrorCode::SkillGap => "SKILL_GAP",
            ErrorCode::UnknownObject => "UNKNOWN_OBJECT",
        }
    }

    /// Problems with the generated plan itself, as opposed to the fleet or
    /// the site not supporting it.
    pub fn is_structural(&self) -> bool {
        !matches!(self, ErrorCode::SkillGap | ErrorCode::UnknownObject)
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}{}: {detail}", task_id.as_ref().map(|t| format!(" ({t})")).unwrap_or_default())]
pub struct PlanIssue {
    pub code: ErrorCode,
    pub task_id: Option<String>,
    pub detail: String,
}

impl PlanIssue {
    pub fn new(code: ErrorCode, task_id: Option<&str>, detail: impl Into<String>) -> Self {
        PlanIssue {
            code,
            task_id: task_id.map(str::to_string),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub errors: Vec<PlanIssue>,
    pub required_skills: BTreeSet<SkillId>,
}

impl ValidationReport {
    pub fn codes(&self) -> Vec<ErrorCode> {
        self.errors.iter().map(|e| e.code).collect()
    }

    pub fn has(&self, code: ErrorCode) -> bool {
        self.errors.iter().any(|e| e.code == code)
    }
}

// ---------------------------------------------------------------------------
// wire format

#[derive(Debug, Default, Deserialize)]
struct WireFunctionIn {
    name: Option<String>,
    #[serde(default)]
    dependencies: Option<Vec<String>>,
    #[serde(default)]
    parameters: Option<BTreeMap<String, Scalar>>,
}

#[derive(Debug, Deserialize)]
struct WireTaskIn {
    instruction_function: WireFunctionIn,
    #[serde(default)]
    object_keywords: Option<Vec<String>>,
}

#[derive(Debug)]
struct RawTask {
    function: WireFunctionIn,
    keywords: Option<Vec<String>>,
}

/// Ordered view over a plan object, keeping repeated keys.
#[derive(Debug)]
struct PlanDoc {
    tasks: Vec<RawTask>,
    saw_plan_key: bool,
}

impl<'de> Deserialize<'de> for PlanDoc {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct DocVisitor;

        impl<'de> Visitor<'de> for DocVisitor {
            type Value = PlanDoc;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a plan object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<PlanDoc, A::Error> {
                let mut doc = PlanDoc {
                    tasks: Vec::new(),
                    saw_plan_key: false,
                };
                let mut canonical = false;
                while let Some(key) = map.next_key::<String>()? {
                    match key.as_str() {
                        "tasks" => {
                            if doc.saw_plan_key {
                                return Err(de::Error::custom("`tasks` mixed with flat entries"));
                            }
                            let tasks: Vec<WireTaskIn> = map.next_value()?;
                            doc.tasks = tasks
                                .into_iter()
                                .map(|t| RawTask {
                                    function: t.instruction_function,
                                    keywords: t.object_keywords,
                                })
                                .collect();
                            canonical = true;
                            doc.saw_plan_key = true;
                        }
                        "instruction_function" if !canonical => {
                            let function: WireFunctionIn = map.next_value()?;
                            doc.tasks.push(RawTask {
                                function,
                                keywords: None,
                            });
                            doc.saw_plan_key = true;
                        }
                        "object_keywords" if !canonical => {
                            let kws: Vec<String> = map.next_value()?;
                            match doc.tasks.last_mut() {
                                Some(t) if t.keywords.is_none() => t.keywords = Some(kws),
                                _ => {
                                    return Err(de::Error::custom(
                                        "`object_keywords` without a preceding `instruction_function`",
                                    ))
                                }
                            }
                        }
                        _ => {
                            map.next_value::<IgnoredAny>()?;
                        }
                    }
                }
                Ok(doc)
            }
        }

        deserializer.deserialize_map(DocVisitor)
    }
}

#[derive(Serialize)]
struct WireFunctionOut<'a> {
    name: &'a str,
    dependencies: &'a [String],
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    parameters: &'a BTreeMap<String, Scalar>,
}

#[derive(Serialize)]
struct WireTaskOut<'a> {
    instruction_function: WireFunctionOut<'a>,
    object_keywords: &'a [String],
}

#[derive(Serialize)]
struct WirePlanOut<'a> {
    tasks: Vec<WireTaskOut<'a>>,
}

fn wire(plan: &TaskPlan) -> WirePlanOut<'_> {
    WirePlanOut {
        tasks: plan
            .tasks
            .iter()
            .map(|t| WireTaskOut {
                instruction_function: WireFunctionOut {
                    name: &t.function_name,
                    dependencies: &t.dependencies,
                    parameters: &t.raw_params,
                },
                object_keywords: &t.object_keywords,
            })
            .collect(),
    }
}

/// Serializes in the nested wire form.
impl Serialize for TaskPlan {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        wire(self).serialize(s)
    }
}

/// Canonical plan file text: `{"tasks": [...]}` with 2-space indentation.
pub fn serialize_plan(plan: &TaskPlan) -> String {
    let wire = wire(plan);
    // serializing owned strings and finite floats cannot fail
    serde_json::to_string_pretty(&wire).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// extraction

fn strip_code_fences(s: &str) -> &str {
    let t = s.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    // drop the info string (e.g. `json`) on the opening line
    let rest = match rest.find('\n') {
        Some(nl) => &rest[nl + 1..],
        None => rest,
    };
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

/// Byte ranges of balanced `{..}` / `[..]` values in scan order, string-aware.
fn balanced_candidates(s: &str) -> Vec<(usize, usize)> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    while let Some(off) = bytes[start..].iter().position(|&b| b == b'{' || b == b'[') {
        let open = start + off;
        if let Some(end) = match_balanced(bytes, open) {
            out.push((open, end));
        }
        start = open + 1;
    }
    out
}

fn match_balanced(bytes: &[u8], open: usize) -> Option<usize> {
    let mut stack: Vec<u8> = Vec::new();
    let mut in_str = false;
    let mut esc = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_str {
            if esc {
                esc = false;
            } else if b == b'\\' {
                esc = true;
            } else if b == b'"' {
                in_str = false;
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' | b'[' => stack.push(b),
            b'}' | b']' => {
                let want = if b == b'}' { b'{' } else { b'[' };
                if stack.pop() != Some(want) {
                    return None;
                }
                if stack.is_empty() {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn doc_to_plan(doc: PlanDoc, text: &str) -> Result<TaskPlan, PlanIssue> {
    let mut tasks = Vec::with_capacity(doc.tasks.len());
    for (i, raw) in doc.tasks.into_iter().enumerate() {
        let id = task_id(i);
        let name = raw
            .function
            .name
            .map(|n| n.trim().to_string())
            .ok_or_else(|| {
                PlanIssue::new(
                    ErrorCode::MalformedJson,
                    Some(&id),
                    "instruction_function has no `name`",
                )
            })?;
        tasks.push(Subtask {
            task_id: id,
            function_name: name,
            dependencies: raw
                .function
                .dependencies
                .unwrap_or_default()
                .into_iter()
                .map(|d| d.trim().to_string())
                .filter(|d| !d.is_empty())
                .collect(),
            object_keywords: raw.keywords.unwrap_or_default(),
            raw_params: raw.function.parameters.unwrap_or_default(),
        });
    }
    Ok(TaskPlan {
        tasks,
        source_text: text.to_string(),
        instruction: String::new(),
    })
}

/// Parses raw model output into a plan with canonical task ids.
///
/// Surrounding prose and markdown fences are tolerated; the first balanced
/// JSON value that reads as a plan object is used.
pub fn parse_plan(text: &str) -> Result<TaskPlan, PlanIssue> {
    let body = strip_code_fences(text);
    let mut last_err: Option<PlanIssue> = None;
    for (a, b) in balanced_candidates(body) {
        let slice = &body[a..b];
        match serde_json::from_str::<PlanDoc>(slice) {
            Ok(doc) if doc.saw_plan_key => return doc_to_plan(doc, text),
            Ok(_) => {}
            Err(e) => {
                if last_err.is_none() {
                    last_err = Some(PlanIssue::new(
                        ErrorCode::MalformedJson,
                        None,
                        format!("invalid plan JSON: {e}"),
                    ));
                }
            }
        }
    }
    Err(last_err.unwrap_or_else(|| {
        PlanIssue::new(ErrorCode::MalformedJson, None, "no plan object found in output")
    }))
}

// ---------------------------------------------------------------------------
// resolution and validation

fn duplicate_ids(plan: &TaskPlan) -> Vec<PlanIssue> {
    let mut seen = BTreeSet::new();
    plan.tasks
        .iter()
        .filter(|t| !seen.insert(t.task_id.as_str()))
        .map(|t| {
            PlanIssue::new(
                ErrorCode::DuplicateId,
                Some(&t.task_id),
                format!("task id `{}` appears more than once", t.task_id),
            )
        })
        .collect()
}

/// Rewrites every dependency into a canonical task id.
///
/// A reference that is not a task id may name the function of an earlier
/// task; it binds to the nearest such task before the dependent.
pub fn resolve_dependencies(plan: &TaskPlan) -> Result<TaskPlan, PlanIssue> {
    if let Some(dup) = duplicate_ids(plan).into_iter().next() {
        return Err(dup);
    }
    let ids: Vec<String> = plan.tasks.iter().map(|t| normalize_token(&t.task_id)).collect();
    let mut out = plan.clone();
    for (i, task) in plan.tasks.iter().enumerate() {
        let mut resolved: Vec<String> = Vec::new();
        for dep in &task.dependencies {
            let norm = normalize_token(dep);
            let target = if let Some(j) = ids.iter().position(|id| *id == norm) {
                if j >= i {
                    return Err(PlanIssue::new(
                        ErrorCode::UnresolvedDependency,
                        Some(&task.task_id),
                        format!("`{dep}` does not precede `{}`", task.task_id),
                    ));
                }
                j
            } else if let Some(j) = (0..i)
                .rev()
                .find(|&j| normalize_token(&plan.tasks[j].function_name) == norm)
            {
                j
            } else {
                return Err(PlanIssue::new(
                    ErrorCode::UnresolvedDependency,
                    Some(&task.task_id),
                    format!("`{dep}` matches no earlier task id or function"),
                ));
            };
            let id = plan.tasks[target].task_id.clone();
            if !resolved.contains(&id) {
                resolved.push(id);
            }
        }
        out.tasks[i].dependencies = resolved;
    }
    Ok(out)
}

/// Finds one cycle in the dependency relation, as task indices.
pub(crate) fn find_cycle(deps: &[Vec<usize>]) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let n = deps.len();
    let mut mark = alloc::vec![Mark::New; n];
    let mut parent = alloc::vec![usize::MAX; n];
    for root in 0..n {
        if mark[root] != Mark::New {
            continue;
        }
        // iterative DFS: (node, next edge index)
        let mut stack = alloc::vec![(root, 0usize)];
        mark[root] = Mark::Active;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if *next < deps[node].len() {
                let d = deps[node][*next];
                *next += 1;
                match mark[d] {
                    Mark::New => {
                        mark[d] = Mark::Active;
                        parent[d] = node;
                        stack.push((d, 0));
                    }
                    Mark::Active => {
                        let mut cyc = alloc::vec![d];
                        let mut cur = node;
                        while cur != d {
                            cyc.push(cur);
                            cur = parent[cur];
                        }
                        cyc.reverse();
                        return Some(cyc);
                    }
                    Mark::Done => {}
                }
            } else {
                mark[node] = Mark::Done;
                stack.pop();
            }
        }
    }
    None
}

fn reachable(deps: &[Vec<usize>], from: usize, to: usize) -> bool {
    let mut seen = alloc::vec![false; deps.len()];
    let mut stack = alloc::vec![from];
    while let Some(n) = stack.pop() {
        if n == to {
            return true;
        }
        if core::mem::replace(&mut seen[n], true) {
            continue;
        }
        stack.extend(deps[n].iter().copied());
    }
    false
}

/// Checks a resolved plan against the catalog, the fleet and the object map.
/// Every problem is reported; nothing is thrown.
pub fn validate_plan(
    plan: &TaskPlan,
    registry: &SkillRegistry,
    object_map: &ObjectMap,
) -> ValidationReport {
    let mut errors = duplicate_ids(plan);
    let mut required_skills = BTreeSet::new();

    for task in &plan.tasks {
        let Some(spec) = registry.function(&task.function_name) else {
            let detail = if task.function_name.is_empty() {
                "empty function name".to_string()
            } else {
                format!("`{}` is not an atomic action function", task.function_name)
            };
            errors.push(PlanIssue::new(ErrorCode::UnknownFunction, Some(&task.task_id), detail));
            continue;
        };
        required_skills.insert(spec.required_skill.clone());

        if !spec.needs_target {
            continue;
        }
        let mut targets = 0;
        for kw in &task.object_keywords {
            if let Some(r) = registry.robot_ref(kw) {
                // robot keywords select robots for the *_for_specific_robots
                // functions and name a receiving robot for the others
                let known = match &r {
                    RobotRef::Id(_) => true,
                    RobotRef::Kind { kind, .. } => registry.robots().iter().any(|x| x.kind == *kind),
                };
                if spec.robot_selector == RobotSelector::SpecificByKind && known {
                    targets += 1;
                }
                continue;
            }
            if object_map.resolve(kw).is_some() {
                targets += 1;
            } else {
                errors.push(PlanIssue::new(
                    ErrorCode::UnknownObject,
                    Some(&task.task_id),
                    format!("no object matches keyword `{kw}`"),
                ));
            }
        }
        if targets == 0 && !errors.iter().any(|e| e.task_id.as_deref() == Some(&task.task_id) && e.code == ErrorCode::UnknownObject) {
            errors.push(PlanIssue::new(
                ErrorCode::UnknownObject,
                Some(&task.task_id),
                format!("`{}` needs a target object keyword", task.function_name),
            ));
        }
    }

    let coverage = registry.coverage_check(&required_skills);
    if !coverage.ok {
        for task in &plan.tasks {
            if let Some(spec) = registry.function(&task.function_name) {
                if coverage.missing.contains(&spec.required_skill) {
                    errors.push(PlanIssue::new(
                        ErrorCode::SkillGap,
                        Some(&task.task_id),
                        format!("no robot in the fleet has skill {}", spec.required_skill),
                    ));
                }
            }
        }
    }

    // dependency structure
    let index: BTreeMap<&str, usize> = plan
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| (t.task_id.as_str(), i))
        .collect();
    let mut deps: Vec<Vec<usize>> = alloc::vec![Vec::new(); plan.tasks.len()];
    for (i, task) in plan.tasks.iter().enumerate() {
        for d in &task.dependencies {
            match index.get(d.as_str()) {
                Some(&j) => deps[i].push(j),
                None => errors.push(PlanIssue::new(
                    ErrorCode::UnresolvedDependency,
                    Some(&task.task_id),
                    format!("dependency `{d}` is not a task id in this plan"),
                )),
            }
        }
    }
    if let Some(cycle) = find_cycle(&deps) {
        let names: Vec<&str> = cycle.iter().map(|&i| plan.tasks[i].task_id.as_str()).collect();
        errors.push(PlanIssue::new(
            ErrorCode::Cycle,
            Some(names[0]),
            format!("dependency cycle through {}", names.join(" -> ")),
        ));
    }
    for (i, task) in plan.tasks.iter().enumerate() {
        for &j in &deps[i] {
            // forward references that close a cycle are already reported
            if j > i && !reachable(&deps, j, i) {
                errors.push(PlanIssue::new(
                    ErrorCode::UnresolvedDependency,
                    Some(&task.task_id),
                    format!("forward reference to `{}`", plan.tasks[j].task_id),
                ));
            }
        }
    }

    ValidationReport {
        ok: errors.is_empty(),
        errors,
        required_skills,
    }
}
