//! Grid costmap with per-robot area rules and 8-connected A*.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{Point, Polygon};
use crate::math;
use crate::queue::EventQueue;

pub const FREE: u8 = 0;
pub const LETHAL: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AreaMode {
    Avoid,
    Allow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppliesTo {
    All,
    Robots(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRule {
    pub area_name: String,
    /// Inline shape; when absent the object map entry of `area_name` is used.
    pub polygon: Option<Polygon>,
    pub mode: AreaMode,
    pub applies_to: AppliesTo,
}

/// Uniform grid. Cell `(i, j)` is centred on `origin + (i, j) * resolution`
/// and covers the closed square of side `resolution` around that centre.
#[derive(Debug, Clone, PartialEq)]
pub struct Costmap {
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    pub origin: Point,
    cost: Vec<u8>,
}

pub type Cell = (usize, usize);

impl Costmap {
    /// Grid covering `[min, max]`, all cells free.
    pub fn new(min: Point, max: Point, resolution: f64) -> Self {
        let width = (math::floor((max.x - min.x) / resolution) as usize) + 1;
        let height = (math::floor((max.y - min.y) / resolution) as usize) + 1;
        Costmap {
            resolution,
            width,
            height,
            origin: min,
            cost: alloc::vec![FREE; width * height],
        }
    }

    pub fn cell_of(&self, p: &Point) -> Option<Cell> {
        let fi = math::round((p.x - self.origin.x) / self.resolution);
        let fj = math::round((p.y - self.origin.y) / self.resolution);
        if fi < 0.0 || fj < 0.0 {
            return None;
        }
        let (i, j) = (fi as usize, fj as usize);
        (i < self.width && j < self.height).then_some((i, j))
    }

    pub fn center(&self, (i, j): Cell) -> Point {
        Point::new(
            self.origin.x + i as f64 * self.resolution,
            self.origin.y + j as f64 * self.resolution,
        )
    }

    pub fn cost(&self, (i, j): Cell) -> u8 {
        self.cost[j * self.width + i]
    }

    pub fn is_lethal(&self, c: Cell) -> bool {
        self.cost(c) == LETHAL
    }

    pub fn set(&mut self, (i, j): Cell, v: u8) {
        self.cost[j * self.width + i] = v;
    }

    /// Marks every cell whose closed square touches the polygon.
    pub fn rasterize(&mut self, poly: &Polygon, value: u8) {
        let (pmin, pmax) = poly.bounds();
        let h = self.resolution / 2.0;
        let lo_i = math::floor((pmin.x - h - self.origin.x) / self.resolution).max(0.0) as usize;
        let lo_j = math::floor((pmin.y - h - self.origin.y) / self.resolution).max(0.0) as usize;
        let hi_i = (math::floor((pmax.x + h - self.origin.x) / self.resolution) + 1.0).max(0.0) as usize;
        let hi_j = (math::floor((pmax.y + h - self.origin.y) / self.resolution) + 1.0).max(0.0) as usize;
        for j in lo_j..=hi_j.min(self.height.saturating_sub(1)) {
            for i in lo_i..=hi_i.min(self.width.saturating_sub(1)) {
                let c = self.center((i, j));
                if poly.overlaps_rect(&Point::new(c.x - h, c.y - h), &Point::new(c.x + h, c.y + h)) {
                    self.set((i, j), value);
                }
            }
        }
    }

    /// A* from the cell containing `start` to the cell containing `goal`.
    ///
    /// Straight steps cost 1, diagonal steps √2 (in cells). Returns the
    /// polyline `start, centres.., goal` or `None` when either end is lethal,
    /// off the grid or disconnected.
    pub fn plan(&self, start: &Point, goal: &Point) -> Option<Vec<Point>> {
        let s = self.cell_of(start)?;
        let g = self.cell_of(goal)?;
        if self.is_lethal(s) || self.is_lethal(g) {
            return None;
        }
        let n = self.width * self.height;
        let idx = |(i, j): Cell| j * self.width + i;
        let heuristic = |(i, j): Cell| {
            let dx = (i as f64 - g.0 as f64).abs();
            let dy = (j as f64 - g.1 as f64).abs();
            let (lo, hi) = if dx < dy { (dx, dy) } else { (dy, dx) };
            hi - lo + lo * core::f64::consts::SQRT_2
        };
        let mut gscore = alloc::vec![f64::INFINITY; n];
        let mut came: Vec<u32> = alloc::vec![u32::MAX; n];
        let mut closed = alloc::vec![false; n];
        let mut open: EventQueue<Cell> = EventQueue::new();
        gscore[idx(s)] = 0.0;
        open.push(heuristic(s), s);
        const STEPS: [(i64, i64, f64); 8] = [
            (1, 0, 1.0),
            (-1, 0, 1.0),
            (0, 1, 1.0),
            (0, -1, 1.0),
            (1, 1, core::f64::consts::SQRT_2),
            (1, -1, core::f64::consts::SQRT_2),
            (-1, 1, core::f64::consts::SQRT_2),
            (-1, -1, core::f64::consts::SQRT_2),
        ];
        while let Some((_, cur)) = open.pop() {
            let ci = idx(cur);
            if closed[ci] {
                continue;
            }
            if cur == g {
                break;
            }
            closed[ci] = true;
            for (di, dj, w) in STEPS {
                let ni = cur.0 as i64 + di;
                let nj = cur.1 as i64 + dj;
                if ni < 0 || nj < 0 || ni >= self.width as i64 || nj >= self.height as i64 {
                    continue;
                }
                let nc = (ni as usize, nj as usize);
                let nidx = idx(nc);
                if closed[nidx] || self.is_lethal(nc) {
                    continue;
                }
                let tentative = gscore[ci] + w;
                if tentative < gscore[nidx] {
                    gscore[nidx] = tentative;
                    came[nidx] = ci as u32;
                    open.push(tentative + heuristic(nc), nc);
                }
            }
        }
        if !gscore[idx(g)].is_finite() {
            return None;
        }
        let mut cells = alloc::vec![g];
        let mut cur = idx(g);
        while cur != idx(s) {
            cur = came[cur] as usize;
            cells.push((cur % self.width, cur / self.width));
        }
        cells.reverse();
        let mut pts = Vec::with_capacity(cells.len() + 2);
        pts.push(*start);
        for c in cells {
            pts.push(self.center(c));
        }
        pts.push(*goal);
        pts.dedup_by(|a, b| a.distance(b) < 1e-12);
        Some(pts)
    }

    /// Whether any sampled point of the polyline lies in a lethal cell.
    pub fn polyline_blocked(&self, pts: &[Point]) -> bool {
        let step = self.resolution / 4.0;
        for w in pts.windows(2) {
            let len = w[0].distance(&w[1]);
            let n = (math::floor(len / step) as usize).max(1);
            for k in 0..=n {
                let p = w[0].lerp(&w[1], k as f64 / n as f64);
                match self.cell_of(&p) {
                    Some(c) if !self.is_lethal(c) => {}
                    _ => return true,
                }
            }
        }
        false
    }
}

/// Rule state per robot: latest mode per area name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overlays {
    per_robot: BTreeMap<String, BTreeMap<String, (AreaMode, Polygon)>>,
}

impl Overlays {
    pub fn set(&mut self, robot: &str, area: &str, mode: AreaMode, poly: Polygon) {
        self.per_robot
            .entry(robot.into())
            .or_default()
            .insert(area.into(), (mode, poly));
    }

    /// Polygons currently avoided by `robot`, by area name.
    pub fn avoided(&self, robot: &str) -> Vec<Polygon> {
        self.per_robot
            .get(robot)
            .map(|m| {
                m.values()
                    .filter(|(mode, _)| *mode == AreaMode::Avoid)
                    .map(|(_, p)| p.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// `base` with this robot's avoided areas rasterized as lethal.
    pub fn view(&self, base: &Costmap, robot: &str) -> Costmap {
        let mut map = base.clone();
        for p in self.avoided(robot) {
            map.rasterize(&p, LETHAL);
        }
        map
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::polyline_length;

    fn grid() -> Costmap {
        Costmap::new(Point::new(-20.0, -20.0), Point::new(20.0, 20.0), 0.5)
    }

    #[test]
    fn straight_path_exact_length() {
        let m = grid();
        let p = m.plan(&Point::new(0.0, 0.0), &Point::new(8.0, 0.0)).unwrap();
        assert_eq!(polyline_length(&p), 8.0);
        assert!(p.iter().all(|q| q.y == 0.0));
    }

    #[test]
    fn diagonal_path_octile_length() {
        let m = grid();
        let p = m.plan(&Point::new(0.0, 0.0), &Point::new(3.0, 3.0)).unwrap();
        assert!((polyline_length(&p) - 3.0 * core::f64::consts::SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn path_skirts_lethal_polygon() {
        let mut m = grid();
        let wall = Polygon::rect(Point::new(3.0, -5.0), Point::new(4.0, 5.0)).unwrap();
        m.rasterize(&wall, LETHAL);
        let p = m.plan(&Point::new(0.0, 0.0), &Point::new(8.0, 0.0)).unwrap();
        assert!(!m.polyline_blocked(&p));
        assert!(p.iter().all(|q| !wall.contains(q)));
        assert!(polyline_length(&p) > 8.0);
    }

    #[test]
    fn lethal_goal_has_no_path() {
        let mut m = grid();
        m.rasterize(&Polygon::square(Point::new(8.0, 0.0), 1.0).unwrap(), LETHAL);
        assert!(m.plan(&Point::new(0.0, 0.0), &Point::new(8.0, 0.0)).is_none());
        assert!(m.plan(&Point::new(0.0, 0.0), &Point::new(80.0, 0.0)).is_none());
    }

    #[test]
    fn overlays_latest_rule_wins() {
        let base = grid();
        let sq = Polygon::square(Point::new(4.0, 0.0), 1.0).unwrap();
        let mut o = Overlays::default();
        o.set("a", "puddle", AreaMode::Avoid, sq.clone());
        assert!(o.view(&base, "a").is_lethal(base.cell_of(&Point::new(4.0, 0.0)).unwrap()));
        assert!(!o.view(&base, "b").is_lethal(base.cell_of(&Point::new(4.0, 0.0)).unwrap()));
        o.set("a", "puddle", AreaMode::Allow, sq);
        assert!(!o.view(&base, "a").is_lethal(base.cell_of(&Point::new(4.0, 0.0)).unwrap()));
    }
}
