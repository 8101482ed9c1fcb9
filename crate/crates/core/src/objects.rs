//! Object map: named site entities with a location and a shape, looked up by
//! the keywords a plan carries and refreshed from detector output.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point, Polygon, PolygonError};
use crate::skills::normalize_token;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ShapeRepr", into = "ShapeRepr")]
pub enum Shape {
    Point,
    Polygon(Polygon),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ShapeRepr {
    Tag(String),
    Vertices(Vec<Point>),
}

impl TryFrom<ShapeRepr> for Shape {
    type Error = String;

    fn try_from(r: ShapeRepr) -> Result<Self, Self::Error> {
        match r {
            ShapeRepr::Tag(t) if t == "point" => Ok(Shape::Point),
            ShapeRepr::Tag(t) => Err(alloc::format!("unknown shape tag `{t}`")),
            ShapeRepr::Vertices(v) => Polygon::new(v)
                .map(Shape::Polygon)
                .map_err(|e| e.to_string()),
        }
    }
}

impl From<Shape> for ShapeRepr {
    fn from(s: Shape) -> Self {
        match s {
            Shape::Point => ShapeRepr::Tag("point".into()),
            Shape::Polygon(p) => ShapeRepr::Vertices(p.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ObjectSource {
    Scenario,
    Detection,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub name: String,
    pub location: Point,
    pub shape: Shape,
    #[serde(default)]
    pub last_updated: f64,
    pub source: ObjectSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObjectError {
    #[error("invalid shape for `{name}`: {reason}")]
    InvalidShape { name: String, reason: String },
    #[error("object name is empty")]
    EmptyName,
}

impl ObjectEntry {
    /// Point-shaped entry.
    pub fn point(name: &str, location: Point, source: ObjectSource) -> Self {
        ObjectEntry {
            name: normalize_token(name),
            location,
            shape: Shape::Point,
            last_updated: 0.0,
            source,
        }
    }

    /// Polygon entry located at the polygon centroid.
    pub fn polygon(
        name: &str,
        vertices: Vec<Point>,
        source: ObjectSource,
    ) -> Result<Self, ObjectError> {
        let poly = Polygon::new(vertices).map_err(|e: PolygonError| ObjectError::InvalidShape {
            name: name.to_string(),
            reason: e.to_string(),
        })?;
        Ok(ObjectEntry {
            name: normalize_token(name),
            location: poly.centroid(),
            shape: Shape::Polygon(poly),
            last_updated: 0.0,
            source,
        })
    }

    pub fn polygon_shape(&self) -> Option<&Polygon> {
        match &self.shape {
            Shape::Polygon(p) => Some(p),
            Shape::Point => None,
        }
    }

    /// Distance from `p` to the entity (0 inside a polygon).
    pub fn distance_to(&self, p: &Point) -> f64 {
        match &self.shape {
            Shape::Point => self.location.distance(p),
            Shape::Polygon(poly) => poly.distance_to(p),
        }
    }

    /// Nearest point of the entity outline to `p`.
    pub fn nearest_boundary_point(&self, p: &Point) -> Point {
        match &self.shape {
            Shape::Point => self.location,
            Shape::Polygon(poly) => poly.nearest_boundary_point(p),
        }
    }

    /// Standoff goal: nearest outline point pushed outward by `standoff`.
    pub fn standoff_goal(&self, from: &Point, standoff: f64) -> Point {
        let q = self.nearest_boundary_point(from);
        let dir = match &self.shape {
            Shape::Polygon(poly) if poly.contains(from) => poly.outward_normal_near(from),
            _ => {
                let d = from.sub(&q);
                let n = d.norm();
                if n > 1e-9 {
                    d.scale(1.0 / n)
                } else if let Shape::Polygon(poly) = &self.shape {
                    poly.outward_normal_near(from)
                } else {
                    Point::new(1.0, 0.0)
                }
            }
        };
        q.add(&dir.scale(standoff))
    }
}

/// One detector output in the bird's-eye site frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub label: String,
    pub confidence: f64,
    /// `(x_min, y_min, x_max, y_max)` in meters.
    pub bbox: (f64, f64, f64, f64),
}

impl DetectionRecord {
    pub fn is_valid(&self) -> bool {
        let (x0, y0, x1, y1) = self.bbox;
        (0.0..=1.0).contains(&self.confidence) && x0 < x1 && y0 < y1 && !self.label.trim().is_empty()
    }
}

/// Result of resolving one keyword.
#[derive(Debug, Clone, PartialEq)]
pub enum KeywordMatch {
    Found { keyword: String, entry: ObjectEntry },
    Unknown { keyword: String },
}

impl KeywordMatch {
    pub fn entry(&self) -> Option<&ObjectEntry> {
        match self {
            KeywordMatch::Found { entry, .. } => Some(entry),
            KeywordMatch::Unknown { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjectMap {
    entries: BTreeMap<String, ObjectEntry>,
}

impl ObjectMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in name order.
    pub fn entries(&self) -> impl Iterator<Item = &ObjectEntry> {
        self.entries.values()
    }

    pub fn get(&self, name: &str) -> Option<&ObjectEntry> {
        self.entries.get(name)
    }

    /// Inserts or replaces by name.
    pub fn upsert(&mut self, entry: ObjectEntry) -> Result<(), ObjectError> {
        if entry.name.trim().is_empty() {
            return Err(ObjectError::EmptyName);
        }
        if !entry.location.x.is_finite() || !entry.location.y.is_finite() {
            return Err(ObjectError::InvalidShape {
                name: entry.name.clone(),
                reason: "non-finite location".into(),
            });
        }
        self.entries.insert(entry.name.clone(), entry);
        Ok(())
    }

    /// Case-insensitive exact match, else the entry whose tokens are a
    /// superset of the keyword's tokens (fewest extra tokens, then name order).
    pub fn resolve(&self, keyword: &str) -> Option<&ObjectEntry> {
        let norm = normalize_token(keyword);
        if norm.is_empty() {
            return None;
        }
        if let Some(e) = self.entries.values().find(|e| normalize_token(&e.name) == norm) {
            return Some(e);
        }
        let wanted: Vec<&str> = norm.split('_').collect();
        self.entries
            .values()
            .filter_map(|e| {
                let name = normalize_token(&e.name);
                let toks: Vec<&str> = name.split('_').collect();
                wanted
                    .iter()
                    .all(|w| toks.contains(w))
                    .then(|| (toks.len() - wanted.len(), e))
            })
            .min_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.name.cmp(&b.1.name)))
            .map(|(_, e)| e)
    }

    pub fn lookup(&self, keywords: &[String]) -> Vec<KeywordMatch> {
        keywords
            .iter()
            .map(|k| match self.resolve(k) {
                Some(e) => KeywordMatch::Found {
                    keyword: k.clone(),
                    entry: e.clone(),
                },
                None => KeywordMatch::Unknown { keyword: k.clone() },
            })
            .collect()
    }

    /// Applies detections at or above `min_confidence`; returns how many were
    /// applied. Invalid records are skipped.
    pub fn ingest_detections(
        &mut self,
        records: &[DetectionRecord],
        min_confidence: f64,
        now: f64,
    ) -> usize {
        let mut applied = 0;
        for rec in records {
            if !rec.is_valid() || rec.confidence < min_confidence {
                continue;
            }
            let (x0, y0, x1, y1) = rec.bbox;
            let Ok(mut entry) = ObjectEntry::polygon(
                &rec.label,
                alloc::vec![
                    Point::new(x0, y0),
                    Point::new(x1, y0),
                    Point::new(x1, y1),
                    Point::new(x0, y1),
                ],
                ObjectSource::Detection,
            ) else {
                continue;
            };
            entry.last_updated = now;
            if self.upsert(entry).is_ok() {
                applied += 1;
            }
        }
        applied
    }
}
