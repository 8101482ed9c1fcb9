//! Evaluation suite runner: per-case trials, metrics, ablation and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fleetplan_core::metrics::{
    align, compute_dsr_mapped, compute_ipa, compute_sr, GoalPredicate, MetricsRecord, TrialOutcome,
};
use fleetplan_core::prompt::FewShot;
use fleetplan_core::sim::{SimEvent, Simulator};
use fleetplan_core::{
    build_graph, execute, parse_plan, resolve_dependencies, ExecMode, ExecutionTrace, ObjectMap,
    SkillRegistry, TaskPlan,
};
use serde::{Deserialize, Serialize};

use crate::backend::BackendConfig;
use crate::pipeline::{plan_pipeline, PlanContext, PlanOutput};
use crate::scenario::{write_jsonl, Scenario};

#[derive(Debug, Clone, Deserialize)]
struct CaseFile {
    id: String,
    level: u8,
    instruction: String,
    reference_plan: PathBuf,
    scenario: PathBuf,
    #[serde(default = "default_trials")]
    trials: u32,
    #[serde(default)]
    goals: Vec<GoalPredicate>,
}

fn default_trials() -> u32 {
    12
}

#[derive(Debug, Clone, Deserialize)]
struct SuiteFile {
    #[serde(default)]
    fixtures: Option<PathBuf>,
    #[serde(default)]
    few_shot: Option<PathBuf>,
    cases: Vec<CaseFile>,
}

#[derive(Debug, Clone)]
pub struct TaskCase {
    pub id: String,
    pub level: u8,
    pub instruction: String,
    pub reference_plan: TaskPlan,
    pub scenario_path: PathBuf,
    pub scenario: Scenario,
    pub trials: u32,
    pub goals: Vec<GoalPredicate>,
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub dir: PathBuf,
    pub fixtures: Option<PathBuf>,
    pub few_shot: Vec<FewShot>,
    pub cases: Vec<TaskCase>,
}

/// Reads a plan file and resolves its dependencies.
pub fn load_plan(path: &Path) -> Result<TaskPlan> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let plan = parse_plan(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(resolve_dependencies(&plan)?)
}

impl Suite {
    pub fn load(path: &Path) -> Result<Self> {
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: SuiteFile =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let few_shot = match &file.few_shot {
            Some(p) => {
                let p = dir.join(p);
                let t = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&t).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Vec::new(),
        };
        let mut cases = Vec::new();
        for c in file.cases {
            let scenario_path = dir.join(&c.scenario);
            cases.push(TaskCase {
                reference_plan: load_plan(&dir.join(&c.reference_plan))?,
                scenario: Scenario::load(&scenario_path)?,
                scenario_path,
                id: c.id,
                level: c.level,
                instruction: c.instruction,
                trials: c.trials,
                goals: c.goals,
            });
        }
        Ok(Suite {
            fixtures: file.fixtures.map(|f| dir.join(f)),
            dir,
            few_shot,
            cases,
        })
    }

    pub fn case(&self, id: &str) -> Option<&TaskCase> {
        self.cases.iter().find(|c| c.id == id)
    }

    /// Swaps every case's scenario.
    pub fn with_scenario(mut self, path: &Path) -> Result<Self> {
        let s = Scenario::load(path)?;
        for c in &mut self.cases {
            c.scenario = s.clone();
            c.scenario_path = path.to_path_buf();
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub case_id: String,
    pub outcome: TrialOutcome,
    #[serde(skip)]
    pub trace: Option<ExecutionTrace>,
    #[serde(skip)]
    pub sim_events: Vec<SimEvent>,
}

/// Result of executing a validated plan on a fresh site.
#[derive(Debug, Clone)]
pub struct Execution {
    pub trace: ExecutionTrace,
    pub sim: Simulator,
}

pub fn execute_plan(
    plan: &TaskPlan,
    scenario: &Scenario,
    objects: &ObjectMap,
    registry: &SkillRegistry,
    mode: ExecMode,
    seed_offset: u64,
) -> Result<Execution> {
    let graph = build_graph(plan)?;
    let mut sim = scenario.simulator(objects.clone(), seed_offset)?;
    let mut reg = registry.clone();
    let trace = execute(&graph, &mut sim, &mut reg, mode)?;
    Ok(Execution { trace, sim })
}

pub fn run_trial(case: &TaskCase, suite: &Suite, backend: &BackendConfig, mode: ExecMode, trial: u32) -> Result<TrialRecord> {
    let objects = case.scenario.object_map()?;
    let registry = case.scenario.registry()?;
    let ctx = PlanContext {
        registry: &registry,
        objects: &objects,
        few_shot: &suite.few_shot,
        backend,
    };
    let reference = &case.reference_plan;
    let mut record = TrialRecord {
        case_id: case.id.clone(),
        outcome: TrialOutcome {
            trial,
            failure: None,
            ipa: 0.0,
            dsr: 0.0,
            success: false,
            makespan: None,
        },
        trace: None,
        sim_events: Vec::new(),
    };
    let PlanOutput { plan, .. } = match plan_pipeline(&case.instruction, &ctx, trial) {
        Ok(out) => out,
        Err(e) => {
            if let Some(parsed) = &e.parsed {
                record.outcome.ipa = compute_ipa(parsed, reference, &objects);
            }
            record.outcome.failure = Some(e.failure);
            return Ok(record);
        }
    };
    record.outcome.ipa = compute_ipa(&plan, reference, &objects);
    let run = execute_plan(&plan, &case.scenario, &objects, &registry, mode, trial as u64)?;
    // dependency satisfaction is judged against the reference plan
    let mapping: BTreeMap<String, String> = align(&plan, reference, &objects)
        .into_iter()
        .map(|(p, r)| (reference.tasks[r].task_id.clone(), plan.tasks[p].task_id.clone()))
        .collect();
    record.outcome.dsr = compute_dsr_mapped(&run.trace, &build_graph(reference)?, &mapping);
    let goals = case.goals.iter().all(|g| g.holds(&run.sim));
    record.outcome.success = compute_sr(true, Some(&run.trace), goals);
    record.outcome.makespan = Some(run.trace.makespan);
    record.sim_events = run.sim.events().to_vec();
    record.trace = Some(run.trace);
    Ok(record)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Case ids to run; empty means all.
    pub only: Vec<String>,
    pub trials: Option<u32>,
    pub parallel: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub mode: ExecMode,
    pub records: Vec<MetricsRecord>,
    #[serde(skip)]
    pub trials: Vec<Vec<TrialRecord>>,
}

fn run_case(case: &TaskCase, suite: &Suite, backend: &BackendConfig, mode: ExecMode, trials: u32) -> (MetricsRecord, Vec<TrialRecord>) {
    let rows: Vec<TrialRecord> = (0..trials)
        .map(|t| {
            // the pipeline succeeded but the site could not be stood up;
            // counts against SR only
            run_trial(case, suite, backend, mode, t).unwrap_or_else(|_| TrialRecord {
                case_id: case.id.clone(),
                outcome: TrialOutcome {
                    trial: t,
                    failure: None,
                    ipa: 0.0,
                    dsr: 0.0,
                    success: false,
                    makespan: None,
                },
                trace: None,
                sim_events: Vec::new(),
            })
        })
        .collect();
    let outcomes: Vec<TrialOutcome> = rows.iter().map(|r| r.outcome.clone()).collect();
    (MetricsRecord::from_trials(&case.id, &outcomes), rows)
}

pub fn run_suite(suite: &Suite, backend: &BackendConfig, mode: ExecMode, opts: &RunOptions) -> Result<SuiteReport> {
    for id in &opts.only {
        if suite.case(id).is_none() {
            bail!("unknown case id `{id}`");
        }
    }
    backend.validate()?;
    let cases: Vec<&TaskCase> = suite
        .cases
        .iter()
        .filter(|c| opts.only.is_empty() || opts.only.contains(&c.id))
        .collect();
    let trials_of = |c: &TaskCase| opts.trials.unwrap_or(c.trials);
    let results: Vec<(MetricsRecord, Vec<TrialRecord>)> = if opts.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cases
                .iter()
                .map(|c| s.spawn(move || run_case(c, suite, backend, mode, trials_of(c))))
                .collect();
            handles.into_iter().map(|h| h.join().expect("case thread panicked")).collect()
        })
    } else {
        cases.iter().map(|c| run_case(c, suite, backend, mode, trials_of(c))).collect()
    };
    let (records, trials) = results.into_iter().unzip();
    Ok(SuiteReport { mode, records, trials })
}

#[derive(Debug, Clone, Serialize)]
pub struct Ablation {
    pub case_id: String,
    pub makespan_dep_aware: f64,
    pub makespan_linear: f64,
    pub ratio: f64,
}

/// Both execution modes on the case's first-trial plan, same seed.
pub fn ablation_compare(case: &TaskCase, suite: &Suite, backend: &BackendConfig) -> Result<Ablation> {
    let objects = case.scenario.object_map()?;
    let registry = case.scenario.registry()?;
    let ctx = PlanContext {
        registry: &registry,
        objects: &objects,
        few_shot: &suite.few_shot,
        backend,
    };
    let out = plan_pipeline(&case.instruction, &ctx, 0).map_err(|e| anyhow::anyhow!("{}", e.failure.detail))?;
    let dep = execute_plan(&out.plan, &case.scenario, &objects, &registry, ExecMode::DepAware, 0)?;
    let lin = execute_plan(&out.plan, &case.scenario, &objects, &registry, ExecMode::Linear, 0)?;
    Ok(Ablation {
        case_id: case.id.clone(),
        makespan_dep_aware: dep.trace.makespan,
        makespan_linear: lin.trace.makespan,
        ratio: if lin.trace.makespan > 0.0 {
            dep.trace.makespan / lin.trace.makespan
        } else {
            1.0
        },
    })
}

pub fn render_markdown(report: &SuiteReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Suite results ({:?})\n", report.mode);
    let _ = writeln!(out, "| case | SR | IPA | DSR | SGSR | trials | mean makespan (s) |");
    let _ = writeln!(out, "|---|---|---|---|---|---|---|");
    for r in &report.records {
        let _ = writeln!(
            out,
            "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {} | {:.1} |",
            r.case_id, r.sr, r.ipa, r.dsr, r.sgsr, r.trials, r.makespan_mean
        );
    }
    out
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `metrics.json`, `report.md` and per-trial traces under `dir`.
pub fn write_report(report: &SuiteReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report)? + "\n")?;
    fs::write(dir.join("report.md"), render_markdown(report))?;
    for rows in &report.trials {
        let Some(first) = rows.first() else { continue };
        let case_dir = dir.join("traces").join(file_safe(&first.case_id));
        fs::create_dir_all(&case_dir)?;
        fs::write(case_dir.join("trials.json"), serde_json::to_string_pretty(rows)? + "\n")?;
        for r in rows {
            let n = r.outcome.trial;
            if let Some(trace) = &r.trace {
                write_jsonl(&case_dir.join(format!("trial_{n:02}.trace.jsonl")), &trace.events)?;
            }
            write_jsonl(&case_dir.join(format!("trial_{n:02}.events.jsonl")), &r.sim_events)?;
        }
    }
    Ok(())
}
