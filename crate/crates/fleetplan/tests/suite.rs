use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use fleetplan::backend::{fixture_key, BackendConfig};
use fleetplan::harness::{load_plan, run_suite, RunOptions, Suite};
use fleetplan::pipeline::{plan_pipeline, plan_pipeline_observed, PlanContext};
use fleetplan::scenario::{load_object_map, save_object_map, Scenario};
use fleetplan_core::metrics::PipelineStage;
use fleetplan_core::{validate_plan, ExecMode};
use proptest::prelude::*;

fn testdata() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata")
}

fn fixture_stems(dir: &Path) -> BTreeSet<String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .map(|n| n.split('.').next().unwrap().to_string())
        .collect()
}

#[test]
fn every_fixture_belongs_to_an_instruction() {
    for path in ["suite.json", "faults/suite.json"] {
        let suite = Suite::load(&testdata().join(path)).unwrap();
        let keys: BTreeSet<String> = suite.cases.iter().map(|c| fixture_key(&c.instruction)).collect();
        assert_eq!(fixture_stems(suite.fixtures.as_ref().unwrap()), keys, "{path}");
    }
}

#[test]
fn golden_plans_validate() {
    let suite = Suite::load(&testdata().join("suite.json")).unwrap();
    for c in &suite.cases {
        let r = validate_plan(&c.reference_plan, &c.scenario.registry().unwrap(), &c.scenario.object_map().unwrap());
        assert!(r.ok, "{}: {:?}", c.id, r.errors);
    }
}

#[test]
fn fixtures_parse_to_reference_plans() {
    // fenced and flat-form fixtures included
    let suite = Suite::load(&testdata().join("suite.json")).unwrap();
    let backend = BackendConfig::scripted(suite.fixtures.clone().unwrap());
    for c in &suite.cases {
        let reg = c.scenario.registry().unwrap();
        let objects = c.scenario.object_map().unwrap();
        let ctx = PlanContext {
            registry: &reg,
            objects: &objects,
            few_shot: &suite.few_shot,
            backend: &backend,
        };
        let out = plan_pipeline(&c.instruction, &ctx, 0).unwrap();
        assert_eq!(out.plan.tasks, c.reference_plan.tasks, "{}", c.id);
        assert_eq!(out.plan.instruction, c.instruction);
    }
}

#[test]
fn stages_are_reported_in_order() {
    let suite = Suite::load(&testdata().join("faults/suite.json")).unwrap();
    let backend = BackendConfig::scripted(suite.fixtures.clone().unwrap());
    let c = suite.case("F-CYCLE").unwrap();
    let reg = c.scenario.registry().unwrap();
    let objects = c.scenario.object_map().unwrap();
    let ctx = PlanContext {
        registry: &reg,
        objects: &objects,
        few_shot: &[],
        backend: &backend,
    };
    let mut stages = Vec::new();
    let err = plan_pipeline_observed(&c.instruction, &ctx, 0, &mut |s| stages.push(s)).unwrap_err();
    assert_eq!(stages, [PipelineStage::Generation, PipelineStage::Parse, PipelineStage::Validate]);
    assert_eq!(err.failure.code, "CYCLE");
    assert!(err.failure.structural);
    assert!(err.parsed.is_some());

    let c = suite.case("F-SGSR").unwrap();
    let err = plan_pipeline(&c.instruction, &ctx, 5).unwrap_err();
    assert_eq!(err.failure.stage, PipelineStage::Parse);
    assert!(err.parsed.is_none());
}

#[test]
fn fault_suite_grounding() {
    let suite = Suite::load(&testdata().join("faults/suite.json")).unwrap();
    let backend = BackendConfig::scripted(suite.fixtures.clone().unwrap());
    let report = run_suite(&suite, &backend, ExecMode::DepAware, &RunOptions::default()).unwrap();
    let rec = |id: &str| report.records.iter().find(|r| r.case_id == id).unwrap().clone();
    // an unknown object is a grounded plan that cannot run
    assert_eq!(rec("F-UNKNOWN").sgsr, 1.0);
    assert_eq!(rec("F-UNKNOWN").sr, 0.0);
    // a cycle is not
    assert_eq!(rec("F-CYCLE").sgsr, 0.0);
}

#[test]
fn parallel_matches_serial() {
    let suite = Suite::load(&testdata().join("suite.json")).unwrap();
    let backend = BackendConfig::scripted(suite.fixtures.clone().unwrap());
    let mut opts = RunOptions {
        trials: Some(2),
        ..Default::default()
    };
    let a = run_suite(&suite, &backend, ExecMode::Linear, &opts).unwrap();
    opts.parallel = true;
    let b = run_suite(&suite, &backend, ExecMode::Linear, &opts).unwrap();
    assert_eq!(a.records, b.records);
}

#[test]
fn suite_load_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.json");
    std::fs::write(
        &p,
        r#"{"cases": [{"id": "x", "level": 1, "instruction": "i", "reference_plan": "missing.json", "scenario": "also_missing.json"}]}"#,
    )
    .unwrap();
    assert!(Suite::load(&p).is_err());
    assert!(load_plan(&dir.path().join("nope.json")).is_err());
}

#[test]
fn scenario_overrides() {
    let base = std::fs::read_to_string(testdata().join("scenario.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&base).unwrap();
    v["overrides"] = serde_json::json!({ "speed": 2.0, "horizon": 100 });
    let s: Scenario = serde_json::from_value(v.clone()).unwrap();
    let cfg = s.sim_config().unwrap();
    assert_eq!(cfg.speed, 2.0);
    assert_eq!(cfg.horizon, 100.0);
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.bounds_min.x, -50.0);

    v["overrides"] = serde_json::json!({ "warp_factor": 9 });
    let s: Scenario = serde_json::from_value(v).unwrap();
    assert!(s.sim_config().unwrap_err().to_string().contains("warp_factor"));
}

#[test]
fn scenario_soil_and_objects() {
    let s = Scenario::load(&testdata().join("scenario.json")).unwrap();
    let sim = s.simulator(s.object_map().unwrap(), 0).unwrap();
    assert_eq!(sim.soil("soil_pile"), 2000.0);
    assert_eq!(sim.soil("obstacle"), 300.0);
    assert_eq!(sim.total_mass(), 2300.0);
    assert_eq!(s.registry().unwrap().robots().len(), 3);

    let mut bad = s.clone();
    bad.objects[0].polygon = None;
    assert!(bad.object_map().is_err());
}

#[test]
fn object_map_jsonl_round_trip() {
    let s = Scenario::load(&testdata().join("scenario.json")).unwrap();
    let mut map = s.object_map().unwrap();
    map.upsert(fleetplan_core::ObjectEntry::point(
        "marker",
        fleetplan_core::Point::new(1.0, 2.0),
        fleetplan_core::ObjectSource::Manual,
    ))
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("objects.jsonl");
    save_object_map(&map, &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), map.len());
    assert_eq!(load_object_map(&p).unwrap(), map);
    std::fs::write(&p, "{\"name\": 1}\n").unwrap();
    assert!(load_object_map(&p).unwrap_err().to_string().contains(":1"));
}

proptest! {
    #[test]
    fn fixture_key_ignores_layout(words in prop::collection::vec("[a-z]{1,8}", 1..10), seps in prop::collection::vec("[ \t\n]{1,3}", 10)) {
        let plain = words.join(" ");
        let mut messy = String::from(&seps[0]);
        for (i, w) in words.iter().enumerate() {
            messy.push_str(w);
            messy.push_str(&seps[(i + 1) % seps.len()]);
        }
        prop_assert_eq!(fixture_key(&plain), fixture_key(&messy));
    }
}
