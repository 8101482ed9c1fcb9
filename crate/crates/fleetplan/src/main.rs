use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fleetplan::backend::{parse_kind, BackendConfig};
use fleetplan::harness::{ablation_compare, execute_plan, render_markdown, run_suite, write_report, RunOptions, Suite};
use fleetplan::pipeline::{plan_pipeline, PlanContext};
use fleetplan::scenario::Scenario;
use fleetplan::service::{serve, AppState, ServiceConfig};
use fleetplan_core::prompt::FewShot;
use fleetplan_core::{parse_plan, resolve_dependencies, validate_plan, ExecMode};
use serde_json::json;

#[derive(Parser)]
#[command(name = "fleetplan", version, about = "Plan and run multi-robot earthwork missions")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Dep,
    Linear,
}

impl From<Mode> for ExecMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Dep => ExecMode::DepAware,
            Mode::Linear => ExecMode::Linear,
        }
    }
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// scripted | http (also DART_BACKEND)
    #[arg(long)]
    backend: Option<String>,
    /// Directory of scripted replies.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Where chat requests are logged.
    #[arg(long)]
    log_dir: Option<PathBuf>,
}

impl BackendArgs {
    fn config(&self, default_fixtures: Option<&Path>) -> Result<BackendConfig> {
        let mut c = BackendConfig {
            fixture_dir: default_fixtures.map(Path::to_path_buf),
            ..Default::default()
        }
        .with_env()?;
        if let Some(b) = &self.backend {
            c.kind = parse_kind(b)?;
        }
        if let Some(f) = &self.fixtures {
            c.fixture_dir = Some(f.clone());
        }
        if let Some(e) = &self.endpoint {
            c.endpoint = Some(e.clone());
        }
        if let Some(m) = &self.model {
            c.model_name = Some(m.clone());
        }
        if let Some(l) = &self.log_dir {
            c.log_dir = Some(l.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an evaluation suite and write metrics and traces.
    Run {
        #[arg(long)]
        suite: PathBuf,
        /// Replace every case's scenario.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, value_enum, default_value = "dep")]
        mode: Mode,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Subdirectory of --out; a fresh ULID by default.
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        trials: Option<u32>,
        /// Only these case ids (repeatable).
        #[arg(long = "case")]
        cases: Vec<String>,
        #[arg(long)]
        parallel: bool,
        /// Also compare dep-aware and linear makespans per case.
        #[arg(long)]
        ablation: bool,
    },
    /// Plan and execute one instruction in the simulator.
    Submit {
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        few_shot: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "dep")]
        mode: Mode,
        instruction: String,
    },
    /// Check a plan file against a scenario.
    ValidatePlan {
        plan: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Start the mission service.
    Serve {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        few_shot: Option<PathBuf>,
        /// Simulated seconds per wall-clock second; 0 runs unpaced.
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
    },
}

fn read_few_shot(path: Option<&Path>) -> Result<Vec<FewShot>> {
    let Some(p) = path else { return Ok(Vec::new()) };
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Run {
            suite,
            scenario,
            backend,
            mode,
            out,
            run_id,
            trials,
            cases,
            parallel,
            ablation,
        } => {
            let mut suite = Suite::load(&suite)?;
            if let Some(s) = scenario {
                suite = suite.with_scenario(&s)?;
            }
            let backend = backend.config(suite.fixtures.as_deref())?;
            let opts = RunOptions {
                only: cases,
                trials,
                parallel,
            };
            let report = run_suite(&suite, &backend, mode.into(), &opts)?;
            let dir = out.join(run_id.unwrap_or_else(|| ulid::Ulid::new().to_string()));
            write_report(&report, &dir)?;
            if ablation {
                let rows = suite
                    .cases
                    .iter()
                    .filter(|c| opts.only.is_empty() || opts.only.contains(&c.id))
                    .map(|c| ablation_compare(c, &suite, &backend))
                    .collect::<Result<Vec<_>>>()?;
                fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
            }
            print!("{}", render_markdown(&report));
            println!("\nwrote {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Submit {
            scenario,
            backend,
            few_shot,
            mode,
            instruction,
        } => {
            let scenario = Scenario::load(&scenario)?;
            let backend = backend.config(None)?;
            let few_shot = read_few_shot(few_shot.as_deref())?;
            let registry = scenario.registry()?;
            let objects = scenario.object_map()?;
            let ctx = PlanContext {
                registry: &registry,
                objects: &objects,
                few_shot: &few_shot,
                backend: &backend,
            };
            let out = match plan_pipeline(&instruction, &ctx, 0) {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("{}: {}", e.failure.code, e.failure.detail);
                    println!("{}", serde_json::to_string_pretty(&e)?);
                    return Ok(ExitCode::from(1));
                }
            };
            let run = execute_plan(&out.plan, &scenario, &objects, &registry, mode.into(), 0)?;
            let done = run.trace.all_done();
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "plan": out.plan,
                    "trace": run.trace,
                    "makespan": run.trace.makespan,
                    "sim_events": run.sim.events(),
                }))?
            );
            if !done {
                eprintln!("EXECUTION_FAILED: not every task finished");
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::ValidatePlan { plan, scenario } => {
            let scenario = Scenario::load(&scenario)?;
            let text = fs::read_to_string(&plan).with_context(|| format!("reading {}", plan.display()))?;
            let report = match parse_plan(&text) {
                Ok(p) => {
                    let resolved = resolve_dependencies(&p);
                    let mut r = validate_plan(resolved.as_ref().unwrap_or(&p), &scenario.registry()?, &scenario.object_map()?);
                    if let Err(issue) = resolved {
                        if r.errors.is_empty() {
                            r.errors.push(issue);
                        }
                        r.ok = false;
                    }
                    r
                }
                Err(issue) => fleetplan_core::ValidationReport {
                    ok: false,
                    errors: vec![issue],
                    required_skills: Default::default(),
                },
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Cmd::Serve {
            scenario,
            port,
            host,
            backend,
            few_shot,
            time_scale,
        } => {
            let config = ServiceConfig {
                scenario: Scenario::load(&scenario)?,
                backend: backend.config(None)?,
                few_shot: read_few_shot(few_shot.as_deref())?,
                time_scale,
                mode: ExecMode::DepAware,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                serve(listener, AppState::new(config)?).await
            })?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
