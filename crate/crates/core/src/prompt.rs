//! Planner prompt assembly.
//!
//! The prompt is plain text with a fixed section order. Rendering sorts
//! robots, functions and objects so identical inputs give identical bytes.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::objects::ObjectMap;
use crate::skills::{FunctionSpec, SkillRegistry};

pub const CATALOG_HEADER: &str = "## Available functions";
pub const FLEET_HEADER: &str = "## Robots";
pub const ENVIRONMENT_HEADER: &str = "## Site objects";
pub const EXAMPLES_HEADER: &str = "## Examples";
/// The backend keys fixtures off the text after this prefix.
pub const INSTRUCTION_PREFIX: &str = "INSTRUCTION: ";

const SYSTEM_ROLE: &str = "You are the task planner for a team of construction robots. \
Break the operator's instruction into subtasks. Each subtask calls exactly one of the \
available functions. List the subtasks a subtask must wait for in its dependencies; \
subtasks without a dependency between them may run at the same time.";

const OUTPUT_CONTRACT: &str = r#"## Output format
Reply with one JSON object and nothing else:
{
  "tasks": [
    {
      "instruction_function": {
        "name": "<function name>",
        "dependencies": ["task_<index>", ...]
      },
      "object_keywords": ["<object or robot name>", ...]
    }
  ]
}
Subtask ids are task_0, task_1, ... in list order. A dependency must name an
earlier subtask."#;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FewShot {
    pub instruction: String,
    pub plan: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub instruction: String,
    pub environment_summary: String,
    pub fleet_summary: String,
    pub function_catalog: String,
    #[serde(default)]
    pub few_shot: Vec<FewShot>,
}

impl PromptBundle {
    /// Renders every section from live fleet and map state.
    pub fn build(
        instruction: &str,
        registry: &SkillRegistry,
        objects: &ObjectMap,
        few_shot: Vec<FewShot>,
    ) -> Self {
        PromptBundle {
            instruction: instruction.into(),
            environment_summary: render_environment(objects),
            fleet_summary: render_fleet(registry),
            function_catalog: render_catalog(registry.catalog()),
            few_shot,
        }
    }
}

/// One line per function, sorted by skill id then name.
pub fn render_catalog(catalog: &[FunctionSpec]) -> String {
    let mut fs: Vec<&FunctionSpec> = catalog.iter().collect();
    fs.sort_by(|a, b| {
        (a.required_skill.id.as_str(), a.name.as_str()).cmp(&(b.required_skill.id.as_str(), b.name.as_str()))
    });
    let mut out = String::new();
    for f in fs {
        let _ = writeln!(out, "- {} [{}]: {}", f.name, f.required_skill, f.description);
    }
    out
}

pub fn render_fleet(registry: &SkillRegistry) -> String {
    let mut robots: Vec<_> = registry.robots().iter().collect();
    robots.sort_by(|a, b| a.robot_id.cmp(&b.robot_id));
    let mut out = String::new();
    for r in robots {
        let skills: Vec<String> = r.skills.iter().map(|s| format!("{s}")).collect();
        let _ = writeln!(
            out,
            "- {} ({}) at ({:.1}, {:.1}); skills: {}",
            r.robot_id,
            r.kind,
            r.start_pose.x,
            r.start_pose.y,
            skills.join(", ")
        );
    }
    out
}

/// Object names with centroids; the map is already name-ordered.
pub fn render_environment(objects: &ObjectMap) -> String {
    let mut out = String::new();
    for e in objects.entries() {
        let kind = match e.shape {
            crate::objects::Shape::Point => "point",
            crate::objects::Shape::Polygon(_) => "area",
        };
        let _ = writeln!(out, "- {} ({kind}) at ({:.1}, {:.1})", e.name, e.location.x, e.location.y);
    }
    out
}

/// Instruction text as it appears on the single instruction line.
pub fn instruction_line(instruction: &str) -> String {
    instruction.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn assemble_prompt(bundle: &PromptBundle) -> String {
    let mut out = String::new();
    out.push_str(SYSTEM_ROLE);
    out.push_str("\n\n");
    for (header, body) in [
        (CATALOG_HEADER, &bundle.function_catalog),
        (FLEET_HEADER, &bundle.fleet_summary),
        (ENVIRONMENT_HEADER, &bundle.environment_summary),
    ] {
        out.push_str(header);
        out.push('\n');
        out.push_str(body.trim_end());
        out.push_str("\n\n");
    }
    if !bundle.few_shot.is_empty() {
        out.push_str(EXAMPLES_HEADER);
        out.push('\n');
        for (i, ex) in bundle.few_shot.iter().enumerate() {
            let _ = writeln!(out, "Example {}", i + 1);
            let _ = writeln!(out, "Instruction: {}", instruction_line(&ex.instruction));
            out.push_str(ex.plan.trim());
            out.push_str("\n\n");
        }
    }
    out.push_str(INSTRUCTION_PREFIX);
    out.push_str(&instruction_line(&bundle.instruction));
    out.push_str("\n\n");
    out.push_str(OUTPUT_CONTRACT);
    out.push('\n');
    out
}

/// Pulls the instruction back out of an assembled prompt.
pub fn extract_instruction(prompt: &str) -> Option<&str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(INSTRUCTION_PREFIX))
        .map(str::trim)
}

/// Text between a section header and the next blank-line-separated header.
pub fn section<'a>(prompt: &'a str, header: &str) -> Option<&'a str> {
    let start = prompt.find(header)? + header.len();
    let rest = &prompt[start..];
    let end = rest.find("\n\n").unwrap_or(rest.len());
    Some(&rest[..end])
}
