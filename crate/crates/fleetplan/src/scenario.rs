//! Scenario files and object-map JSON lines.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use fleetplan_core::geometry::{Point, Pose};
use fleetplan_core::sim::{SimConfig, Simulator};
use fleetplan_core::skills::SkillId;
use fleetplan_core::{ObjectEntry, ObjectMap, ObjectSource, RobotDescriptor, RobotKind, SkillRegistry};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub min: Point,
    pub max: Point,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
}

fn default_resolution() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioObject {
    pub name: String,
    /// Point objects give a location; area objects give vertices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polygon: Option<Vec<Point>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soil_kg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRobot {
    pub robot_id: String,
    pub kind: RobotKind,
    pub start_pose: Pose,
    /// Defaults to the kind's usual skills.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skills: Option<Vec<String>>,
}

/// Everything needed to stand up a site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub world: World,
    pub objects: Vec<ScenarioObject>,
    pub robots: Vec<ScenarioRobot>,
    /// Partial [`SimConfig`] overrides, e.g. `{"dig_duration": 10}`.
    #[serde(default)]
    pub overrides: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let s: Scenario =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        s.registry()?;
        s.object_map()?;
        s.sim_config()?;
        Ok(s)
    }

    pub fn registry(&self) -> Result<SkillRegistry> {
        let mut reg = SkillRegistry::default();
        for r in &self.robots {
            let mut d = RobotDescriptor::new(&r.robot_id, r.kind, r.start_pose);
            if let Some(skills) = &r.skills {
                d.skills = skills.iter().map(|s| SkillId::new(s)).collect();
            }
            reg.register_robot(d)?;
        }
        Ok(reg)
    }

    pub fn object_map(&self) -> Result<ObjectMap> {
        let mut map = ObjectMap::new();
        for o in &self.objects {
            let entry = match (&o.polygon, o.location) {
                (Some(v), _) => ObjectEntry::polygon(&o.name, v.clone(), ObjectSource::Scenario)?,
                (None, Some(p)) => ObjectEntry::point(&o.name, p, ObjectSource::Scenario),
                (None, None) => bail!("object `{}` has neither location nor polygon", o.name),
            };
            map.upsert(entry)?;
        }
        Ok(map)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let mut base = serde_json::to_value(SimConfig {
            bounds_min: self.world.min,
            bounds_max: self.world.max,
            resolution: self.world.resolution,
            seed: self.seed,
            ..SimConfig::default()
        })?;
        if let serde_json::Value::Object(m) = &mut base {
            for (k, v) in &self.overrides {
                if !m.contains_key(k) {
                    bail!("unknown simulator override `{k}`");
                }
                m.insert(k.clone(), v.clone());
            }
        }
        Ok(serde_json::from_value(base)?)
    }

    /// Soil masses keyed by canonical object name.
    pub fn soil(&self) -> BTreeMap<String, f64> {
        self.objects
            .iter()
            .filter_map(|o| o.soil_kg.map(|kg| (fleetplan_core::skills::normalize_token(&o.name), kg)))
            .collect()
    }

    /// Fresh simulator; `seed_offset` varies jitter between trials.
    pub fn simulator(&self, objects: ObjectMap, seed_offset: u64) -> Result<Simulator> {
        let mut cfg = self.sim_config()?;
        cfg.seed = cfg.seed.wrapping_add(seed_offset);
        let mut sim = Simulator::new(cfg, &self.registry()?, objects);
        for (name, kg) in self.soil() {
            sim.set_soil(&name, kg);
        }
        Ok(sim)
    }
}

/// One entry per line.
pub fn save_object_map(map: &ObjectMap, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for e in map.entries() {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_object_map(path: &Path) -> Result<ObjectMap> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut map = ObjectMap::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ObjectEntry =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        map.upsert(e)?;
    }
    Ok(map)
}

/// Writes any serializable records as JSON lines.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}
