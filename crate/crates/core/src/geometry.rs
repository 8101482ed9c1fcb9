//! Planar geometry in the site frame (meters).

use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        math::hypot(self.x - other.x, self.y - other.y)
    }

    pub fn sub(&self, other: &Point) -> Point {
        Point::new(self.x - other.x, self.y - other.y)
    }

    pub fn add(&self, other: &Point) -> Point {
        Point::new(self.x + other.x, self.y + other.y)
    }

    pub fn scale(&self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }

    pub fn norm(&self) -> f64 {
        math::hypot(self.x, self.y)
    }

    /// Linear interpolation, `t` in `[0, 1]`.
    pub fn lerp(&self, other: &Point, t: f64) -> Point {
        Point::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point::new(v[0], v[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

fn cross(o: &Point, a: &Point, b: &Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(theta: f64) -> f64 {
    if !theta.is_finite() {
        return 0.0;
    }
    let two_pi = 2.0 * PI;
    let mut a = theta - two_pi * math::floor(theta / two_pi);
    // a in [0, 2π)
    if a > PI {
        a -= two_pi;
    }
    if a <= -PI {
        a += two_pi;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    /// Pose at `to`, facing along the direction of travel from `self`.
    pub fn facing(&self, to: Point) -> Pose {
        let d = to.sub(&self.position());
        let heading = if d.norm() > 1e-9 {
            math::atan2(d.y, d.x)
        } else {
            self.heading
        };
        Pose::new(to.x, to.y, heading)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolygonError {
    TooFewVertices,
    ZeroArea,
    SelfIntersecting,
    NonFinite,
}

impl core::fmt::Display for PolygonError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s = match self {
            PolygonError::TooFewVertices => "polygon needs at least 3 vertices",
            PolygonError::ZeroArea => "polygon has zero area",
            PolygonError::SelfIntersecting => "polygon is self-intersecting",
            PolygonError::NonFinite => "polygon has non-finite coordinates",
        };
        f.write_str(s)
    }
}

/// A simple polygon with nonzero area. Vertex order may be either winding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl TryFrom<Vec<Point>> for Polygon {
    type Error = PolygonError;

    fn try_from(vertices: Vec<Point>) -> Result<Self, Self::Error> {
        Polygon::new(vertices)
    }
}

impl From<Polygon> for Vec<Point> {
    fn from(p: Polygon) -> Self {
        p.vertices
    }
}

impl core::fmt::Display for Polygon {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "polygon[{}]", self.vertices.len())
    }
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self, PolygonError> {
        if vertices.len() < 3 {
            return Err(PolygonError::TooFewVertices);
        }
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(PolygonError::NonFinite);
        }
        let poly = Polygon { vertices };
        if !poly.is_simple() {
            return Err(PolygonError::SelfIntersecting);
        }
        if math::abs(poly.signed_area()) < 1e-12 {
            return Err(PolygonError::ZeroArea);
        }
        Ok(poly)
    }

    /// Axis-aligned rectangle from two corners.
    pub fn rect(min: Point, max: Point) -> Result<Self, PolygonError> {
        Polygon::new(alloc::vec![
            Point::new(min.x, min.y),
            Point::new(max.x, min.y),
            Point::new(max.x, max.y),
            Point::new(min.x, max.y),
        ])
    }

    /// Axis-aligned square of side `2 * half` centred on `c`.
    pub fn square(c: Point, half: f64) -> Result<Self, PolygonError> {
        Polygon::rect(
            Point::new(c.x - half, c.y - half),
            Point::new(c.x + half, c.y + half),
        )
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn signed_area(&self) -> f64 {
        let mut s = 0.0;
        for (a, b) in self.edges() {
            s += a.x * b.y - b.x * a.y;
        }
        s / 2.0
    }

    pub fn area(&self) -> f64 {
        math::abs(self.signed_area())
    }

    /// Area centroid.
    pub fn centroid(&self) -> Point {
        let a = self.signed_area();
        let (mut cx, mut cy) = (0.0, 0.0);
        for (p, q) in self.edges() {
            let w = p.x * q.y - q.x * p.y;
            cx += (p.x + q.x) * w;
            cy += (p.y + q.y) * w;
        }
        Point::new(cx / (6.0 * a), cy / (6.0 * a))
    }

    pub fn bounds(&self) -> (Point, Point) {
        let mut min = self.vertices[0];
        let mut max = self.vertices[0];
        for v in &self.vertices {
            min.x = min.x.min(v.x);
            min.y = min.y.min(v.y);
            max.x = max.x.max(v.x);
            max.y = max.y.max(v.y);
        }
        (min, max)
    }

    fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        let edges: Vec<(Point, Point)> = self.edges().collect();
        for i in 0..n {
            for j in (i + 1)..n {
                // adjacent edges share a vertex; skip them
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                if segments_intersect(&edges[i].0, &edges[i].1, &edges[j].0, &edges[j].1) {
                    return false;
                }
            }
        }
        true
    }

    /// Point-in-polygon (even-odd); points on the boundary count as inside.
    pub fn contains(&self, p: &Point) -> bool {
        for (a, b) in self.edges() {
            if on_segment(&a, &b, p) {
                return true;
            }
        }
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Strictly interior (boundary excluded, with a small tolerance).
    pub fn contains_strict(&self, p: &Point) -> bool {
        self.contains(p) && self.boundary_distance(p) > 1e-9
    }

    /// Nearest point on the polygon boundary to `p`.
    pub fn nearest_boundary_point(&self, p: &Point) -> Point {
        let mut best = self.vertices[0];
        let mut best_d = f64::INFINITY;
        for (a, b) in self.edges() {
            let q = closest_on_segment(&a, &b, p);
            let d = q.distance(p);
            if d < best_d {
                best_d = d;
                best = q;
            }
        }
        best
    }

    pub fn boundary_distance(&self, p: &Point) -> f64 {
        self.nearest_boundary_point(p).distance(p)
    }

    /// Distance from `p` to the filled polygon (0 inside).
    pub fn distance_to(&self, p: &Point) -> f64 {
        if self.contains(p) {
            0.0
        } else {
            self.boundary_distance(p)
        }
    }

    /// Outward unit normal of the edge nearest to `p`.
    pub fn outward_normal_near(&self, p: &Point) -> Point {
        let ccw = self.signed_area() > 0.0;
        let mut best = Point::new(1.0, 0.0);
        let mut best_d = f64::INFINITY;
        for (a, b) in self.edges() {
            let d = closest_on_segment(&a, &b, p).distance(p);
            if d < best_d {
                best_d = d;
                let e = b.sub(&a);
                let len = e.norm();
                // for a CCW polygon the outward normal is the edge rotated clockwise
                best = if ccw {
                    Point::new(e.y / len, -e.x / len)
                } else {
                    Point::new(-e.y / len, e.x / len)
                };
            }
        }
        best
    }

    /// Whether the filled polygon intersects the closed axis-aligned box.
    pub fn overlaps_rect(&self, min: &Point, max: &Point) -> bool {
        let (pmin, pmax) = self.bounds();
        if pmax.x < min.x || pmin.x > max.x || pmax.y < min.y || pmin.y > max.y {
            return false;
        }
        let inside_box = |p: &Point| p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y;
        if self.vertices.iter().any(inside_box) {
            return true;
        }
        let corners = [
            Point::new(min.x, min.y),
            Point::new(max.x, min.y),
            Point::new(max.x, max.y),
            Point::new(min.x, max.y),
        ];
        if corners.iter().any(|c| self.contains(c)) {
            return true;
        }
        for (a, b) in self.edges() {
            for i in 0..4 {
                if segments_intersect(&a, &b, &corners[i], &corners[(i + 1) % 4]) {
                    return true;
                }
            }
        }
        false
    }
}

fn on_segment(a: &Point, b: &Point, p: &Point) -> bool {
    closest_on_segment(a, b, p).distance(p) <= 1e-9
}

pub(crate) fn closest_on_segment(a: &Point, b: &Point, p: &Point) -> Point {
    let ab = b.sub(a);
    let len2 = ab.x * ab.x + ab.y * ab.y;
    if len2 <= 0.0 {
        return *a;
    }
    let t = ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2;
    a.lerp(b, t.clamp(0.0, 1.0))
}

/// Closed segment intersection test (touching counts).
pub fn segments_intersect(p1: &Point, p2: &Point, q1: &Point, q2: &Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    on_segment(q1, q2, p1) || on_segment(q1, q2, p2) || on_segment(p1, p2, q1) || on_segment(p1, p2, q2)
}

/// Total length of a polyline.
pub fn polyline_length(points: &[Point]) -> f64 {
    points.windows(2).map(|w| w[0].distance(&w[1])).sum()
}

/// Point at arc length `s` along a polyline (clamped to its ends).
pub fn point_along(points: &[Point], s: f64) -> Point {
    if points.is_empty() {
        return Point::new(0.0, 0.0);
    }
    let mut rest = s.max(0.0);
    for w in points.windows(2) {
        let seg = w[0].distance(&w[1]);
        if rest <= seg {
            if seg <= 0.0 {
                return w[1];
            }
            return w[0].lerp(&w[1], rest / seg);
        }
        rest -= seg;
    }
    points[points.len() - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn angle_normalization_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(-PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(normalize_angle(0.0), 0.0);
    }

    #[test]
    fn polygon_rejects_degenerate_shapes() {
        assert_eq!(
            Polygon::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)]),
            Err(PolygonError::TooFewVertices)
        );
        assert_eq!(
            Polygon::new(vec![
                Point::new(0.0, 0.0),
                Point::new(1.0, 0.0),
                Point::new(2.0, 0.0)
            ]),
            Err(PolygonError::ZeroArea)
        );
        // bow-tie
        assert_eq!(
            Polygon::new(vec![
                Point::new(0.0, 0.0),
                Point::new(2.0, 2.0),
                Point::new(2.0, 0.0),
                Point::new(0.0, 2.0)
            ]),
            Err(PolygonError::SelfIntersecting)
        );
    }

    #[test]
    fn square_centroid_and_containment() {
        let sq = Polygon::square(Point::new(12.0, 5.0), 2.0).unwrap();
        let c = sq.centroid();
        assert!((c.x - 12.0).abs() < 1e-12 && (c.y - 5.0).abs() < 1e-12);
        assert_eq!(sq.area(), 16.0);
        assert!(sq.contains(&Point::new(12.0, 5.0)));
        assert!(sq.contains(&Point::new(14.0, 5.0)));
        assert!(!sq.contains_strict(&Point::new(14.0, 5.0)));
        assert!(!sq.contains(&Point::new(14.1, 5.0)));
        assert_eq!(sq.distance_to(&Point::new(17.0, 5.0)), 3.0);
    }

    #[test]
    fn outward_normal_independent_of_winding() {
        let ccw = Polygon::square(Point::new(0.0, 0.0), 1.0).unwrap();
        let mut v = ccw.vertices().to_vec();
        v.reverse();
        let cw = Polygon::new(v).unwrap();
        let p = Point::new(0.0, 1.5);
        for poly in [ccw, cw] {
            let n = poly.outward_normal_near(&p);
            assert!((n.x).abs() < 1e-12 && (n.y - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rect_overlap_cases() {
        let tri = Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(4.0, 0.0),
            Point::new(0.0, 4.0),
        ])
        .unwrap();
        assert!(tri.overlaps_rect(&Point::new(1.0, 1.0), &Point::new(1.5, 1.5)));
        assert!(!tri.overlaps_rect(&Point::new(3.0, 3.0), &Point::new(3.5, 3.5)));
        // box fully containing the triangle
        assert!(tri.overlaps_rect(&Point::new(-1.0, -1.0), &Point::new(5.0, 5.0)));
        // edge crossing without vertices inside either
        assert!(tri.overlaps_rect(&Point::new(1.9, 1.9), &Point::new(2.2, 2.2)));
    }

    #[test]
    fn polyline_walk() {
        let pts = [Point::new(0.0, 0.0), Point::new(3.0, 0.0), Point::new(3.0, 4.0)];
        assert_eq!(polyline_length(&pts), 7.0);
        assert_eq!(point_along(&pts, 5.0), Point::new(3.0, 2.0));
        assert_eq!(point_along(&pts, 100.0), Point::new(3.0, 4.0));
    }
}
