use super::*;
use crate::dag::{build_graph, execute, ExecMode, TaskStatus};
use crate::objects::ObjectSource;
use crate::plan::TaskPlan;
use crate::skills::RobotDescriptor;
use alloc::string::ToString;
use alloc::vec;

fn square(name: &str, x: f64, y: f64) -> ObjectEntry {
    ObjectEntry::polygon(
        name,
        Polygon::square(Point::new(x, y), 1.0).unwrap().vertices().to_vec(),
        ObjectSource::Scenario,
    )
    .unwrap()
}

fn site() -> (SkillRegistry, ObjectMap) {
    let mut reg = SkillRegistry::default();
    for (id, kind, x, y) in [
        ("zx120", RobotKind::Excavator, 7.0, 0.0),
        ("c30r_1", RobotKind::DumpTruck, 10.0, 7.0),
        ("c30r_2", RobotKind::DumpTruck, 14.0, 7.0),
    ] {
        reg.register_robot(RobotDescriptor::new(id, kind, Pose::new(x, y, 0.0)))
            .unwrap();
    }
    let mut objects = ObjectMap::new();
    objects.upsert(square("soil_pile", 10.0, 0.0)).unwrap();
    objects.upsert(square("puddle", 10.0, 38.0)).unwrap();
    objects
        .upsert(ObjectEntry::point("marker", Point::new(4.0, 0.0), ObjectSource::Scenario))
        .unwrap();
    (reg, objects)
}

fn sim() -> Simulator {
    let (reg, objects) = site();
    let mut s = Simulator::new(SimConfig::default(), &reg, objects);
    s.set_soil("soil_pile", 2000.0);
    s
}

fn ids(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn plan(spec: &[(&str, &[&str], &[&str])]) -> TaskPlan {
    TaskPlan::new(
        spec.iter()
            .enumerate()
            .map(|(i, (f, d, k))| Subtask::new(i, f, ids(d), ids(k)))
            .collect(),
    )
}

#[test]
fn goto_straight_line_time() {
    let (mut reg, mut objects) = site();
    reg.robot_mut("zx120").unwrap().start_pose = Pose::new(0.0, 0.0, 0.0);
    objects.upsert(ObjectEntry::point("pud", Point::new(10.0, 0.0), ObjectSource::Scenario)).unwrap();
    let mut s = Simulator::new(SimConfig::default(), &reg, objects);
    let c = s.goto_area(&ids(&["zx120"]), "pud").unwrap();
    s.run_until_idle().unwrap();
    // (distance - standoff) / speed
    assert_eq!(s.command_result(c), Some(&Ok(8.0)));
    assert_eq!(s.robot("zx120").unwrap().pose.position(), Point::new(8.0, 0.0));
}

#[test]
fn already_at_goal_arrives_immediately() {
    let mut s = sim();
    // c30r_1 at (10,7); soil_pile standoff from there is (10,3)
    let c = s.goto_area(&ids(&["c30r_1"]), "soil_pile").unwrap();
    s.run_until_idle().unwrap();
    assert_eq!(s.command_result(c), Some(&Ok(4.0)));
    let c = s.goto_area(&ids(&["c30r_1"]), "soil_pile").unwrap();
    s.run_until_idle().unwrap();
    assert_eq!(s.command_result(c), Some(&Ok(4.0)));
}

#[test]
fn avoid_goal_has_no_path() {
    let mut s = sim();
    s.apply_area_rule(AreaRule {
        area_name: "zone".into(),
        polygon: Some(Polygon::rect(Point::new(5.0, 1.0), Point::new(15.0, 5.0)).unwrap()),
        mode: AreaMode::Avoid,
        applies_to: AppliesTo::All,
    })
    .unwrap();
    assert!(matches!(
        s.goto_area(&ids(&["c30r_1"]), "soil_pile"),
        Err(SimError::NoPath(_))
    ));
    assert_eq!(s.events().last().unwrap().kind, SimEventKind::NavFailed);
}

#[test]
fn avoid_is_per_robot() {
    let mut s = sim();
    s.apply_area_rule(AreaRule {
        area_name: "puddle".into(),
        polygon: None,
        mode: AreaMode::Avoid,
        applies_to: AppliesTo::Robots(ids(&["c30r_1"])),
    })
    .unwrap();
    let goal = Point::new(10.0, 45.0);
    let a = s.plan_path("c30r_1", &goal).unwrap();
    let puddle = s.objects().get("puddle").unwrap().polygon_shape().unwrap().clone();
    assert!(a.iter().all(|p| !puddle.contains(p)));
    assert!(s.plan_path("zx120", &goal).unwrap().iter().any(|p| puddle.contains(p)));
    // allow again: straight through
    s.apply_area_rule(AreaRule {
        area_name: "puddle".into(),
        polygon: None,
        mode: AreaMode::Allow,
        applies_to: AppliesTo::All,
    })
    .unwrap();
    assert!(s.plan_path("c30r_1", &goal).unwrap().iter().any(|p| puddle.contains(p)));
}

#[test]
fn unknown_area_rejected() {
    let mut s = sim();
    let r = s.apply_area_rule(AreaRule {
        area_name: "lava_pit".into(),
        polygon: None,
        mode: AreaMode::Avoid,
        applies_to: AppliesTo::All,
    });
    assert_eq!(r, Err(SimError::UnknownObject("lava_pit".into())));
}

#[test]
fn dig_state_machine() {
    let mut s = sim();
    let c = s.excavator_digging("zx120", "soil_pile").unwrap();
    s.run_until_idle().unwrap();
    assert_eq!(s.command_result(c), Some(&Ok(8.0)));
    assert_eq!(s.robot("zx120").unwrap().bucket, Bucket::Full);
    assert!(matches!(s.excavator_digging("zx120", "soil_pile"), Err(SimError::BucketFull(_))));
    assert!(matches!(s.excavator_digging("c30r_1", "soil_pile"), Err(SimError::WrongRobotKind(_))));
    assert!(matches!(sim().excavator_digging("zx120", "puddle"), Err(SimError::OutOfRange { .. })));
}

#[test]
fn unload_requires_full_bucket() {
    let mut s = sim();
    assert!(matches!(
        s.excavator_unloading("zx120", "soil_pile"),
        Err(SimError::BucketEmpty(_))
    ));
}

#[test]
fn ground_unload_conserves_mass() {
    let mut s = sim();
    let before = s.total_mass();
    s.excavator_digging("zx120", "soil_pile").unwrap();
    s.run_until_idle().unwrap();
    assert_eq!(s.total_mass(), before);
    s.excavator_unloading("zx120", "marker").unwrap();
    s.run_until_idle().unwrap();
    assert_eq!(s.total_mass(), before);
    assert_eq!(s.soil("marker"), 500.0);
    assert_eq!(s.soil("soil_pile"), 1500.0);
}

#[test]
fn truck_actions() {
    let mut s = sim();
    assert!(matches!(s.dump_loading("zx120", "soil_pile"), Err(SimError::WrongRobotKind(_))));
    assert!(matches!(s.dump_loading("c30r_2", "soil_pile"), Err(SimError::OutOfRange { .. })));
    assert!(matches!(s.dump_unloading("c30r_1", "soil_pile"), Err(SimError::EmptyLoad(_))));
    s.goto_area(&ids(&["c30r_1"]), "soil_pile").unwrap();
    s.run_until_idle().unwrap();
    let c = s.dump_loading("c30r_1", "soil_pile").unwrap();
    s.run_until_idle().unwrap();
    assert_eq!(s.command_result(c), Some(&Ok(8.0)));
}

fn l2t1() -> TaskPlan {
    plan(&[
        ("excavator_digging", &[], &["soil_pile"]),
        ("target_area_for_specific_robots", &[], &["dump_truck", "soil_pile"]),
        ("dump_loading", &["task_1"], &["soil_pile"]),
        ("excavator_unloading", &["task_0", "task_2"], &["dump_truck"]),
        ("target_area_for_specific_robots", &["task_3"], &["dump_truck", "puddle"]),
        ("dump_unloading", &["task_3", "task_4"], &["puddle"]),
    ])
}

#[test]
fn excavate_and_deliver_timeline() {
    let (mut reg, objects) = site();
    let mut s = Simulator::new(SimConfig::default(), &reg, objects);
    s.set_soil("soil_pile", 2000.0);
    let before = s.total_mass();
    let g = build_graph(&l2t1()).unwrap();
    let trace = execute(&g, &mut s, &mut reg, ExecMode::DepAware).unwrap();
    assert!(trace.all_done(), "{:?}", trace.states);
    let end = |id: &str| trace.state(id).unwrap().end_time.unwrap();
    assert_eq!(end("task_3"), 24.0);
    assert_eq!(end("task_4"), 56.0);
    assert_eq!(end("task_5"), 64.0);
    assert_eq!(trace.makespan, 64.0);
    assert_eq!(s.soil("puddle"), 500.0);
    assert_eq!(s.total_mass(), before);
    let loads: Vec<f64> = s
        .events()
        .iter()
        .filter(|e| e.kind == SimEventKind::LoadChanged)
        .map(|e| e.payload.load_kg.unwrap())
        .collect();
    assert_eq!(loads, vec![500.0, 0.0]);
}

#[test]
fn failed_action_surfaces_as_failed_task() {
    let (mut reg, objects) = site();
    let mut s = Simulator::new(SimConfig::default(), &reg, objects);
    // truck never drives to the pile, so loading is out of range
    let p = plan(&[
        ("dump_loading", &[], &["soil_pile"]),
        ("dump_unloading", &["task_0"], &["puddle"]),
    ]);
    let g = build_graph(&p).unwrap();
    let trace = execute(&g, &mut s, &mut reg, ExecMode::DepAware).unwrap();
    assert_eq!(trace.state("task_0").unwrap().status, TaskStatus::Failed);
    assert_eq!(trace.state("task_1").unwrap().status, TaskStatus::Blocked);
}

#[test]
fn concurrent_unloads_overlap() {
    let (reg, mut objects) = site();
    objects.upsert(square("pit_a", 10.0, 11.0)).unwrap();
    objects.upsert(square("pit_b", 14.0, 11.0)).unwrap();
    let mut s = Simulator::new(SimConfig::default(), &reg, objects);
    for r in &mut s.robots {
        if r.kind == RobotKind::DumpTruck {
            r.load = 500.0;
        }
    }
    let a = s.dump_unloading("c30r_1", "pit_a").unwrap();
    let b = s.dump_unloading("c30r_2", "pit_b").unwrap();
    s.run_until_idle().unwrap();
    assert_eq!(s.command_result(a), Some(&Ok(8.0)));
    assert_eq!(s.command_result(b), Some(&Ok(8.0)));
}

#[test]
fn reroutes_when_area_closes_mid_drive() {
    let mut s = sim();
    let c = s.goto_area(&ids(&["c30r_1"]), "puddle").unwrap();
    s.run_until(5.0).unwrap();
    let wall = Polygon::rect(Point::new(6.0, 15.0), Point::new(12.0, 16.0)).unwrap();
    s.apply_area_rule(AreaRule {
        area_name: "wall".into(),
        polygon: Some(wall.clone()),
        mode: AreaMode::Avoid,
        applies_to: AppliesTo::All,
    })
    .unwrap();
    s.run_until_idle().unwrap();
    assert!(matches!(s.command_result(c), Some(Ok(t)) if *t > 28.0));
    for leg in s.executed_legs() {
        for p in &leg.points {
            if leg.avoid.contains(&wall) {
                assert!(!wall.contains_strict(p));
            }
        }
    }
    assert!(s.executed_legs().iter().any(|l| l.avoid.contains(&wall)));
}

#[test]
fn return_home() {
    let mut s = sim();
    let c = s.return_to_start(&ids(&["zx120"])).unwrap();
    s.run_until_idle().unwrap();
    assert_eq!(s.command_result(c), Some(&Ok(0.0)));
    s.goto_area(&ids(&["c30r_1"]), "puddle").unwrap();
    s.run_until_idle().unwrap();
    s.return_to_start(&ids(&["c30r_1"])).unwrap();
    s.run_until_idle().unwrap();
    let r = s.robot("c30r_1").unwrap();
    assert!(r.pose.position().distance(&r.start_pose.position()) <= 0.5);
}

#[test]
fn jitter_is_seeded() {
    let run = || {
        let (mut reg, objects) = site();
        let cfg = SimConfig {
            jitter: 0.1,
            seed: 7,
            ..SimConfig::default()
        };
        let mut s = Simulator::new(cfg, &reg, objects);
        s.set_soil("soil_pile", 2000.0);
        let g = build_graph(&l2t1()).unwrap();
        execute(&g, &mut s, &mut reg, ExecMode::DepAware).unwrap().makespan
    };
    let a = run();
    assert_eq!(a, run());
    assert_ne!(a, 64.0);
}

#[test]
fn horizon_fails_in_flight() {
    let (mut reg, objects) = site();
    let cfg = SimConfig {
        horizon: 10.0,
        ..SimConfig::default()
    };
    let mut s = Simulator::new(cfg, &reg, objects);
    let p = plan(&[("target_area_for_specific_robots", &[], &["c30r_1", "puddle"])]);
    let trace = execute(&build_graph(&p).unwrap(), &mut s, &mut reg, ExecMode::DepAware).unwrap();
    assert_eq!(trace.states[0].status, TaskStatus::Failed);
    assert_eq!(trace.makespan, 10.0);
}
