//! Planar pose algebra, curvilinear offsets against a reference pose, and
//! convex footprint polygons (overlap area and clearance).

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when merging duplicate or collinear polygon vertices.
pub const VERTEX_MERGE_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("footprint dimensions must be positive, got length {length} and width {width}")]
    NonPositiveDims { length: f64, width: f64 },
    #[error("polygon needs at least 3 distinct non-collinear vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon is not convex")]
    NotConvex,
    #[error("polygon has zero area")]
    ZeroArea,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let r = a.rem_euclid(two_pi);
    // `rem_euclid` rounding can land a hair above pi for odd multiples of pi
    if (r - PI).abs() <= 4.0 * f64::EPSILON * PI.max(a.abs()) {
        return PI;
    }
    if r > PI {
        r - two_pi
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// A rigid planar pose. `theta` is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// `self ∘ other`: `other` expressed in `self`'s frame, mapped to the parent frame.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let p = self.transform_point(other.position());
        Pose2::new(p.x, p.y, self.theta + other.theta)
    }

    pub fn inverse(&self) -> Pose2 {
        let p = (-self.position()).rotate(-self.theta);
        Pose2::new(p.x, p.y, -self.theta)
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn transform_point(&self, p: Vec2) -> Vec2 {
        p.rotate(self.theta) + self.position()
    }

    /// Maps a parent-frame point into this pose's local frame.
    pub fn inverse_transform_point(&self, p: Vec2) -> Vec2 {
        (p - self.position()).rotate(-self.theta)
    }

    /// Unit vector pointing to the left of the heading.
    pub fn left(&self) -> Vec2 {
        Vec2::new(-self.theta.sin(), self.theta.cos())
    }

    /// Pose shifted sideways by `lateral` meters (positive to the left), same heading.
    pub fn offset_lateral(&self, lateral: f64) -> Pose2 {
        let p = self.position() + self.left() * lateral;
        Pose2 {
            x: p.x,
            y: p.y,
            theta: self.theta,
        }
    }
}

/// Agent pose decomposed against a reference pose: `q_long` along the
/// reference heading, `q_lat` to its left, `q_rot` the heading difference.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CurvilinearOffset {
    pub q_lat: f64,
    pub q_long: f64,
    pub q_rot: f64,
}

pub fn to_curvilinear(reference: &Pose2, agent: &Pose2) -> CurvilinearOffset {
    let (s, c) = reference.theta.sin_cos();
    let dx = agent.x - reference.x;
    let dy = agent.y - reference.y;
    CurvilinearOffset {
        q_long: c * dx + s * dy,
        q_lat: -s * dx + c * dy,
        q_rot: wrap_angle(agent.theta - reference.theta),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FootprintDims {
    pub length: f64,
    pub width: f64,
}

impl FootprintDims {
    pub fn new(length: f64, width: f64) -> Result<Self, GeometryError> {
        if length > 0.0 && width > 0.0 {
            Ok(Self { length, width })
        } else {
            Err(GeometryError::NonPositiveDims { length, width })
        }
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }
}

pub fn dilate_footprint(
    dims: FootprintDims,
    d_len: f64,
    d_wid: f64,
) -> Result<FootprintDims, GeometryError> {
    FootprintDims::new(dims.length + d_len, dims.width + d_wid)
}

/// A convex polygon with counter-clockwise vertices and non-zero area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexPolygon {
    vertices: Vec<Vec2>,
}

impl ConvexPolygon {
    /// Validates and normalizes: merges duplicate and collinear vertices,
    /// reorders clockwise input to counter-clockwise.
    pub fn new(vertices: Vec<Vec2>) -> Result<Self, GeometryError> {
        let mut v = simplify_ring(vertices);
        if v.len() < 3 {
            return Err(GeometryError::TooFewVertices(v.len()));
        }
        let area = signed_area(&v);
        if area.abs() <= VERTEX_MERGE_EPS {
            return Err(GeometryError::ZeroArea);
        }
        if area < 0.0 {
            v.reverse();
        }
        let n = v.len();
        for i in 0..n {
            let a = v[i];
            let b = v[(i + 1) % n];
            let c = v[(i + 2) % n];
            if (b - a).cross(c - b) < -VERTEX_MERGE_EPS {
                return Err(GeometryError::NotConvex);
            }
        }
        Ok(Self { vertices: v })
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn edges(&self) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Inside or on the boundary.
    pub fn contains(&self, p: Vec2) -> bool {
        self.edges().all(|(a, b)| (b - a).cross(p - a) >= -VERTEX_MERGE_EPS)
    }

    pub fn translate(&self, d: Vec2) -> ConvexPolygon {
        ConvexPolygon {
            vertices: self.vertices.iter().map(|&v| v + d).collect(),
        }
    }
}

fn signed_area(v: &[Vec2]) -> f64 {
    let n = v.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += v[i].cross(v[(i + 1) % n]);
    }
    0.5 * acc
}

fn simplify_ring(vertices: Vec<Vec2>) -> Vec<Vec2> {
    let mut v: Vec<Vec2> = Vec::with_capacity(vertices.len());
    for p in vertices {
        if v.last().map_or(true, |q: &Vec2| (p - *q).norm() > VERTEX_MERGE_EPS) {
            v.push(p);
        }
    }
    while v.len() > 1 && (v[0] - v[v.len() - 1]).norm() <= VERTEX_MERGE_EPS {
        v.pop();
    }
    // drop collinear middle points until stable
    loop {
        let n = v.len();
        if n < 3 {
            return v;
        }
        let drop = (0..n).find(|&i| {
            let a = v[(i + n - 1) % n];
            let b = v[i];
            let c = v[(i + 1) % n];
            let ab = b - a;
            let bc = c - b;
            let scale = ab.norm().max(bc.norm()).max(1.0);
            ab.cross(bc).abs() <= VERTEX_MERGE_EPS * scale
        });
        match drop {
            Some(i) => {
                v.remove(i);
            }
            None => return v,
        }
    }
}

/// Vehicle rectangle centered on `pose`, long axis along the heading.
pub fn footprint_polygon(pose: &Pose2, dims: &FootprintDims) -> ConvexPolygon {
    let hl = 0.5 * dims.length;
    let hw = 0.5 * dims.width;
    let corners = [
        Vec2::new(-hl, -hw),
        Vec2::new(hl, -hw),
        Vec2::new(hl, hw),
        Vec2::new(-hl, hw),
    ];
    ConvexPolygon {
        vertices: corners.iter().map(|&c| pose.transform_point(c)).collect(),
    }
}

/// Clips `subject` by the half-plane to the left of the directed line `a -> b`.
fn clip_halfplane(subject: &[Vec2], a: Vec2, b: Vec2) -> Vec<Vec2> {
    let n = subject.len();
    let mut out = Vec::with_capacity(n + 1);
    if n == 0 {
        return out;
    }
    let dir = b - a;
    let side = |p: Vec2| dir.cross(p - a);
    for i in 0..n {
        let cur = subject[i];
        let next = subject[(i + 1) % n];
        let sc = side(cur);
        let sn = side(next);
        if sc >= 0.0 {
            out.push(cur);
        }
        if (sc >= 0.0) != (sn >= 0.0) {
            let t = sc / (sc - sn);
            out.push(cur + (next - cur) * t);
        }
    }
    out
}

/// Area of the intersection of two convex polygons.
pub fn convex_overlap_area(a: &ConvexPolygon, b: &ConvexPolygon) -> f64 {
    let mut clipped = a.vertices.clone();
    for (p, q) in b.edges() {
        clipped = clip_halfplane(&clipped, p, q);
        if clipped.len() < 3 {
            return 0.0;
        }
    }
    signed_area(&clipped).max(0.0)
}

fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 {
        ((p - a).dot(ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm()
}

/// True when some edge normal of either polygon strictly separates them.
fn separated(a: &ConvexPolygon, b: &ConvexPolygon) -> bool {
    let project = |poly: &ConvexPolygon, axis: Vec2| {
        poly.vertices
            .iter()
            .map(|v| v.dot(axis))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
                (lo.min(d), hi.max(d))
            })
    };
    a.edges().chain(b.edges()).any(|(p, q)| {
        let e = q - p;
        let axis = Vec2::new(e.y, -e.x);
        let (alo, ahi) = project(a, axis);
        let (blo, bhi) = project(b, axis);
        ahi < blo || bhi < alo
    })
}

/// Shortest distance between two convex polygons; zero when they touch or overlap.
pub fn min_clearance(a: &ConvexPolygon, b: &ConvexPolygon) -> f64 {
    if !separated(a, b) {
        return 0.0;
    }
    let one_way = |p: &ConvexPolygon, q: &ConvexPolygon| {
        p.vertices
            .iter()
            .flat_map(|&v| q.edges().map(move |(s, e)| point_segment_distance(v, s, e)))
            .fold(f64::INFINITY, f64::min)
    };
    one_way(a, b).min(one_way(b, a))
}
