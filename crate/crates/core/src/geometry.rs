//! Planar primitives: convex hull of target locations, membership, ray casting
//! to the hull boundary, the saturated distance `d⁺`, and a node/weight rule
//! for integrating over a convex polygon.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point (or vector) in the mission plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3-D cross product.
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c, s)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

/// Convex polygon with counter-clockwise vertices and no collinear triples.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point2>,
}

impl ConvexPolygon {
    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Edges as `(start, end)` pairs in counter-clockwise order.
    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn area(&self) -> f64 {
        0.5 * self.edges().map(|(a, b)| a.cross(b)).sum::<f64>()
    }

    /// Area centroid.
    pub fn centroid(&self) -> Point2 {
        let mut acc = Point2::default();
        let mut twice_area = 0.0;
        for (a, b) in self.edges() {
            let w = a.cross(b);
            twice_area += w;
            acc = acc + (a + b) * w;
        }
        acc * (1.0 / (3.0 * twice_area))
    }

    /// Length of the bounding-box diagonal.
    pub fn bbox_diagonal(&self) -> f64 {
        let (mut lo, mut hi) = (self.vertices[0], self.vertices[0]);
        for v in &self.vertices {
            lo = Point2::new(lo.x.min(v.x), lo.y.min(v.y));
            hi = Point2::new(hi.x.max(v.x), hi.y.max(v.y));
        }
        lo.distance(hi)
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| a.distance(b)).sum()
    }

    /// Smallest distance from `p` to any edge.
    pub fn distance_to_boundary(&self, p: Point2) -> f64 {
        self.edges()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// Whether `p` is a vertex of the polygon (within `tol`).
    pub fn is_vertex(&self, p: Point2, tol: f64) -> bool {
        self.vertices.iter().any(|v| v.distance(p) <= tol)
    }

    fn length_scale(&self) -> f64 {
        self.bbox_diagonal().max(1.0)
    }
}

/// Euclidean distance from `p` to the segment `[a, b]`.
pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

/// Convex hull by Andrew's monotone chain. Collinear boundary points are
/// dropped, so every returned vertex is a strict left turn.
pub fn convex_hull(points: &[Point2]) -> Result<ConvexPolygon> {
    if points.len() < 3 {
        return Err(Error::TooFewPoints(points.len()));
    }
    if let Some(p) = points.iter().find(|p| !p.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite point ({}, {})", p.x, p.y)));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return Err(Error::CollinearInput);
    }

    let turn = |o: Point2, a: Point2, b: Point2| (a - o).cross(b - o);
    let mut hull: Vec<Point2> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point2>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        // the last point of each chain is the first of the next
        hull.pop();
    }
    if hull.len() < 3 {
        return Err(Error::CollinearInput);
    }
    Ok(ConvexPolygon { vertices: hull })
}

/// Closed-set membership: boundary points count as inside.
pub fn contains(poly: &ConvexPolygon, w: Point2) -> bool {
    let tol = 1e-12 * poly.length_scale();
    poly.edges().all(|(a, b)| {
        let e = b - a;
        e.cross(w - a) >= -tol * e.norm()
    })
}

/// Strict interior test with a distance margin.
pub fn strictly_inside(poly: &ConvexPolygon, w: Point2, margin: f64) -> bool {
    poly.edges().all(|(a, b)| {
        let e = b - a;
        e.cross(w - a) > margin * e.norm()
    })
}

/// Distance from `origin` along `(cos angle, sin angle)` to the polygon boundary.
pub fn ray_boundary_distance(poly: &ConvexPolygon, origin: Point2, angle: f64) -> Result<f64> {
    if !strictly_inside(poly, origin, 1e-12 * poly.length_scale()) {
        return Err(Error::OriginOutside { x: origin.x, y: origin.y });
    }
    let dir = Point2::from_angle(angle);
    let mut best = f64::INFINITY;
    for (a, b) in poly.edges() {
        let e = b - a;
        // outward normal of a counter-clockwise edge
        let n = Point2::new(e.y, -e.x);
        let nd = n.dot(dir);
        if nd > 0.0 {
            best = best.min(n.dot(a - origin) / nd);
        }
    }
    Ok(best)
}

/// Saturated distance `max(‖w − target‖, r)`.
pub fn d_plus(w: Point2, target: Point2, range_r: f64) -> f64 {
    w.distance(target).max(range_r)
}

/// Weighted nodes for integrating over a polygon.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<(Point2, f64)>,
}

impl QuadratureRule {
    pub fn nodes(&self) -> &[(Point2, f64)] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.nodes.iter().map(|(_, w)| w).sum()
    }

    pub fn integrate<F: Fn(Point2) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().map(|&(p, w)| w * f(p)).sum()
    }
}

/// Bounding-box diagonal over 60.
pub fn default_resolution(poly: &ConvexPolygon) -> f64 {
    poly.bbox_diagonal() / 60.0
}

/// Fan-triangulate from the centroid and place one node at the centroid of
/// every cell of a uniform `n × n` barycentric subdivision of each triangle.
/// All cells of a triangle carry equal weight, so the rule integrates affine
/// functions exactly.
pub fn quadrature_over(poly: &ConvexPolygon, resolution: f64) -> Result<QuadratureRule> {
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(Error::InvalidParameter(format!("resolution must be > 0, got {resolution}")));
    }
    let c = poly.centroid();
    let mut nodes = Vec::new();
    for (b, cc) in poly.edges() {
        let a = c;
        let longest = a.distance(b).max(b.distance(cc)).max(cc.distance(a));
        let n = ((longest / resolution).ceil() as usize).max(1);
        let area = 0.5 * (b - a).cross(cc - a);
        let w = area / (n * n) as f64;
        let u = (b - a) * (1.0 / n as f64);
        let v = (cc - a) * (1.0 / n as f64);
        let grid = |i: usize, j: usize| a + u * i as f64 + v * j as f64;
        for i in 0..n {
            for j in 0..(n - i) {
                let (p0, p1, p2) = (grid(i, j), grid(i + 1, j), grid(i, j + 1));
                nodes.push(((p0 + p1 + p2) * (1.0 / 3.0), w));
                if i + j + 2 <= n {
                    let p3 = grid(i + 1, j + 1);
                    nodes.push(((p1 + p2 + p3) * (1.0 / 3.0), w));
                }
            }
        }
    }
    if nodes.len() < 16 {
        return Err(Error::ResolutionTooCoarse { resolution, nodes: nodes.len() });
    }
    Ok(QuadratureRule { nodes })
}
