//! Instruction to validated plan: prompt, generate, parse, resolve, validate.

use std::collections::BTreeSet;

use fleetplan_core::metrics::{PipelineFailure, PipelineStage};
use fleetplan_core::prompt::{assemble_prompt, FewShot, PromptBundle};
use fleetplan_core::{
    parse_plan, resolve_dependencies, validate_plan, ObjectMap, PlanIssue, SkillRegistry, TaskPlan,
    ValidationReport,
};
use serde::Serialize;

use crate::backend::{generate_plan, BackendConfig};

pub struct PlanContext<'a> {
    pub registry: &'a SkillRegistry,
    pub objects: &'a ObjectMap,
    pub few_shot: &'a [FewShot],
    pub backend: &'a BackendConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanOutput {
    /// Dependencies rewritten to canonical task ids.
    pub plan: TaskPlan,
    pub raw: String,
    pub report: ValidationReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineError {
    pub failure: PipelineFailure,
    /// Parse and validation failures; empty for generation failures.
    pub report: ValidationReport,
    pub raw: Option<String>,
    /// The plan as parsed, when parsing got that far.
    pub parsed: Option<TaskPlan>,
}

fn failed_report(issue: PlanIssue) -> ValidationReport {
    ValidationReport {
        ok: false,
        errors: vec![issue],
        required_skills: BTreeSet::new(),
    }
}

// the error carries the whole report on purpose; it is built once per plan
#[allow(clippy::result_large_err)]
pub fn plan_pipeline(instruction: &str, ctx: &PlanContext<'_>, trial: u32) -> Result<PlanOutput, PipelineError> {
    plan_pipeline_observed(instruction, ctx, trial, &mut |_| {})
}

/// As [`plan_pipeline`], calling `on_stage` as each stage starts.
#[allow(clippy::result_large_err)]
pub fn plan_pipeline_observed(
    instruction: &str,
    ctx: &PlanContext<'_>,
    trial: u32,
    on_stage: &mut dyn FnMut(PipelineStage),
) -> Result<PlanOutput, PipelineError> {
    on_stage(PipelineStage::Generation);
    let bundle = PromptBundle::build(instruction, ctx.registry, ctx.objects, ctx.few_shot.to_vec());
    let prompt = assemble_prompt(&bundle);
    let raw = generate_plan(&prompt, ctx.backend, trial).map_err(|e| PipelineError {
        failure: PipelineFailure {
            stage: PipelineStage::Generation,
            code: e.code().into(),
            detail: e.to_string(),
            structural: true,
        },
        report: ValidationReport {
            ok: false,
            errors: Vec::new(),
            required_skills: BTreeSet::new(),
        },
        raw: None,
        parsed: None,
    })?;

    on_stage(PipelineStage::Parse);
    let mut parsed = parse_plan(&raw).map_err(|issue| PipelineError {
        failure: PipelineFailure {
            stage: PipelineStage::Parse,
            code: issue.code.as_str().into(),
            detail: issue.detail.clone(),
            structural: true,
        },
        report: failed_report(issue),
        raw: Some(raw.clone()),
        parsed: None,
    })?;
    parsed.instruction = instruction.to_string();

    on_stage(PipelineStage::Validate);
    let resolved = resolve_dependencies(&parsed);
    // validation sees the unresolved plan when resolution failed, so a
    // cycle is reported as such rather than as a dangling reference
    let report = validate_plan(resolved.as_ref().unwrap_or(&parsed), ctx.registry, ctx.objects);
    let fail = |report: ValidationReport| {
        let first = report.errors.first().cloned();
        PipelineError {
            failure: PipelineFailure {
                stage: PipelineStage::Validate,
                code: first.as_ref().map(|i| i.code.as_str()).unwrap_or("INVALID").into(),
                detail: first.map(|i| i.to_string()).unwrap_or_default(),
                structural: report.errors.iter().any(|e| e.code.is_structural()),
            },
            report,
            raw: Some(raw.clone()),
            parsed: Some(parsed.clone()),
        }
    };
    match resolved {
        Ok(plan) if report.ok => Ok(PlanOutput {
            plan,
            raw: raw.clone(),
            report,
        }),
        Ok(_) => Err(fail(report)),
        Err(issue) => {
            let mut report = report;
            if report.errors.is_empty() {
                report.errors.push(issue);
            }
            report.ok = false;
            Err(fail(report))
        }
    }
}
