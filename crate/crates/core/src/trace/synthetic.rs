//! Procedural stand-in for recorded drives: a road built from constant
//! curvature pieces, rendered by ray casting a flat ground plane and vertical
//! side walls, so every pixel's depth is known in closed form.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{pose_to_isometry, CameraRig, Frame, Trace, TraceError};
use crate::geometry::{Pose2, Vec2};
use crate::raster::{Rgb, RgbImage};

pub const SKY: Rgb = [150, 190, 230];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadSegment {
    pub length: f64,
    /// Signed curvature (1/m), positive turns left.
    pub curvature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WallConfig {
    /// Lateral distance of each wall from the centerline.
    pub offset: f64,
    pub height: f64,
}

impl Default for WallConfig {
    fn default() -> Self {
        Self {
            offset: 7.5,
            height: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadConfig {
    pub segments: Vec<RoadSegment>,
    pub lane_width: f64,
    pub frame_spacing: f64,
    /// Data-collection speed, sets frame timestamps.
    pub speed: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub hfov: f64,
    pub camera_height: f64,
    pub walls: Option<WallConfig>,
    pub max_depth: f64,
    /// Used to reject curvatures the vehicle cannot follow.
    pub wheelbase: f64,
}

impl Default for RoadConfig {
    fn default() -> Self {
        Self {
            segments: vec![RoadSegment {
                length: 200.0,
                curvature: 0.0,
            }],
            lane_width: 3.5,
            frame_spacing: 0.5,
            speed: 30.0 / 3.6,
            image_width: 192,
            image_height: 120,
            hfov: std::f64::consts::FRAC_PI_2,
            camera_height: 1.5,
            walls: Some(WallConfig::default()),
            max_depth: 80.0,
            wheelbase: 2.8,
        }
    }
}

impl RoadConfig {
    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: String| Err(TraceError::BadRoad(m));
        if self.segments.is_empty() {
            return bad("at least one road segment is required".into());
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.length > 0.0) || !s.curvature.is_finite() {
                return bad(format!("segment {i}: length must be positive and curvature finite"));
            }
            if s.curvature.abs() * self.wheelbase >= 1.0 {
                return bad(format!(
                    "segment {i}: |curvature| * wheelbase = {} must be below 1",
                    s.curvature.abs() * self.wheelbase
                ));
            }
        }
        if !(self.frame_spacing > 0.0 && self.frame_spacing <= super::MAX_FRAME_GAP) {
            return bad(format!("frame_spacing {} out of (0, 5]", self.frame_spacing));
        }
        if !(self.speed > 0.0 && self.lane_width > 0.0 && self.camera_height > 0.0 && self.max_depth > 0.0) {
            return bad("speed, lane_width, camera_height and max_depth must be positive".into());
        }
        if self.image_width < 2 || self.image_height < 2 {
            return bad("image must be at least 2x2".into());
        }
        if !(self.hfov > 0.0 && self.hfov < std::f64::consts::PI) {
            return bad(format!("hfov {} out of (0, pi)", self.hfov));
        }
        if let Some(w) = &self.walls {
            if !(w.offset > 0.0 && w.height > 0.0) {
                return bad("wall offset and height must be positive".into());
            }
        }
        Ok(())
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn rig(&self) -> CameraRig {
        CameraRig::forward_camera(self.image_width, self.image_height, self.hfov, self.camera_height, 0.0)
    }
}

#[derive(Debug, Clone, Copy)]
struct Piece {
    start: Pose2,
    s0: f64,
    length: f64,
    kappa: f64,
}

impl Piece {
    fn local_pose(&self, ds: f64) -> Pose2 {
        let k = self.kappa;
        let local = if k == 0.0 {
            Pose2::new(ds, 0.0, 0.0)
        } else {
            Pose2::new((k * ds).sin() / k, (1.0 - (k * ds).cos()) / k, k * ds)
        };
        self.start.compose(&local)
    }

    /// `(distance, s, lateral)` of the closest point on this piece.
    fn project(&self, p: Vec2) -> (f64, f64, f64) {
        let local = self.start.inverse_transform_point(p);
        let (ds, lat) = if self.kappa == 0.0 {
            (local.x, local.y)
        } else {
            let r = 1.0 / self.kappa;
            // center of curvature sits at (0, r) in the piece frame
            let rel = local - Vec2::new(0.0, r);
            let phi = (rel.x / r).atan2(-rel.y / r);
            let mut psi = phi * r.signum();
            let sweep = self.length * self.kappa.abs();
            if psi < 0.0 && psi + std::f64::consts::TAU <= sweep {
                psi += std::f64::consts::TAU;
            }
            (psi * r.abs(), r.signum() * (r.abs() - rel.norm()))
        };
        if (0.0..=self.length).contains(&ds) {
            (lat.abs(), self.s0 + ds, lat)
        } else {
            let end = if ds < 0.0 { 0.0 } else { self.length };
            let q = self.local_pose(end);
            let d = (p - q.position()).norm();
            (d, self.s0 + end, q.inverse_transform_point(p).y)
        }
    }
}

/// Analytic centerline made of constant-curvature pieces starting at the origin.
#[derive(Debug, Clone)]
pub struct Road {
    pieces: Vec<Piece>,
    length: f64,
}

impl Road {
    pub fn new(segments: &[RoadSegment]) -> Self {
        let mut pieces = Vec::with_capacity(segments.len());
        let mut start = Pose2::new(0.0, 0.0, 0.0);
        let mut s0 = 0.0;
        for seg in segments {
            let piece = Piece {
                start,
                s0,
                length: seg.length,
                kappa: seg.curvature,
            };
            start = piece.local_pose(seg.length);
            s0 += seg.length;
            pieces.push(piece);
        }
        Self { pieces, length: s0 }
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn pose_at(&self, s: f64) -> Pose2 {
        let s = s.clamp(0.0, self.length);
        let piece = self
            .pieces
            .iter()
            .rev()
            .find(|p| p.s0 <= s)
            .unwrap_or(&self.pieces[0]);
        piece.local_pose(s - piece.s0)
    }

    /// `(s, lateral)` of the closest centerline point; lateral positive to the left.
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for piece in &self.pieces {
            let c = piece.project(p);
            if c.0 < best.0 {
                best = c;
            }
        }
        (best.1, best.2)
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        self.pieces
            .iter()
            .rev()
            .find(|p| p.s0 <= s)
            .map_or(0.0, |p| p.kappa)
    }
}

/// Vertical wall quads along both road sides, as a polyline per side.
#[derive(Debug, Clone)]
pub struct Walls {
    /// `(start, end, wall arclength at start)` per segment.
    pub segments: Vec<(Vec2, Vec2, f64)>,
    pub height: f64,
}

const WALL_STEP: f64 = 1.0;

impl Walls {
    pub fn build(road: &Road, cfg: &WallConfig) -> Self {
        let n = (road.length() / WALL_STEP).ceil() as usize;
        let mut segments = Vec::with_capacity(2 * n);
        for side in [1.0, -1.0] {
            let pts: Vec<Vec2> = (0..=n)
                .map(|i| {
                    road.pose_at((i as f64 * WALL_STEP).min(road.length()))
                        .offset_lateral(side * cfg.offset)
                        .position()
                })
                .collect();
            let mut acc = 0.0;
            for w in pts.windows(2) {
                let len = (w[1] - w[0]).norm();
                if len > 0.0 {
                    segments.push((w[0], w[1], acc));
                }
                acc += len;
            }
        }
        Self {
            segments,
            height: cfg.height,
        }
    }
}

/// Output of the procedural renderer before 32-bit depth storage.
#[derive(Debug, Clone)]
pub struct SceneRender {
    pub image: RgbImage,
    /// Z-depth in meters, 0 where the ray escapes (sky or beyond max depth).
    pub depth: Vec<f64>,
}

/// Procedural scene: textured ground, lane markings, optional walls.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub road: Road,
    pub walls: Option<Walls>,
    pub lane_width: f64,
    pub max_depth: f64,
    pub seed: u64,
}

fn hash2(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = seed ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in `[0, 1)` with lattice spacing `cell`.
fn value_noise(x: f64, y: f64, cell: f64, seed: u64) -> f64 {
    let (gx, gy) = (x / cell, y / cell);
    let (ix, iy) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - ix, gy - iy);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (smooth(fx), smooth(fy));
    let (ix, iy) = (ix as i64, iy as i64);
    let a = hash2(ix, iy, seed);
    let b = hash2(ix + 1, iy, seed);
    let c = hash2(ix, iy + 1, seed);
    let d = hash2(ix + 1, iy + 1, seed);
    let top = a + (b - a) * sx;
    let bot = c + (d - c) * sx;
    top + (bot - top) * sy
}

fn shade(c: [f64; 3], k: f64) -> Rgb {
    [
        (c[0] * k).round().clamp(0.0, 255.0) as u8,
        (c[1] * k).round().clamp(0.0, 255.0) as u8,
        (c[2] * k).round().clamp(0.0, 255.0) as u8,
    ]
}

impl SyntheticScene {
    pub fn new(cfg: &RoadConfig, seed: u64) -> Self {
        let road = Road::new(&cfg.segments);
        let walls = cfg.walls.as_ref().map(|w| Walls::build(&road, w));
        Self {
            road,
            walls,
            lane_width: cfg.lane_width,
            max_depth: cfg.max_depth,
            seed,
        }
    }

    fn ground_color(&self, p: Vec2) -> Rgb {
        let (s, lat) = self.road.project(p);
        let al = lat.abs();
        let half = 0.5 * self.lane_width;
        let edge = 1.5 * self.lane_width;
        let line = 0.075;
        if (al - half).abs() < line && s.rem_euclid(6.0) < 3.0 {
            return [235, 235, 235];
        }
        if (al - edge).abs() < line {
            return [230, 215, 150];
        }
        let n1 = value_noise(p.x, p.y, 0.6, self.seed);
        let n2 = value_noise(p.x, p.y, 2.3, self.seed ^ 0xA5A5);
        if al > edge + 0.5 {
            shade([70.0, 112.0, 55.0], 0.75 + 0.5 * n1 * n2 + 0.1 * n2)
        } else {
            let g = 80.0 + 45.0 * n1 + 25.0 * n2;
            shade([g, g, g + 6.0], 1.0)
        }
    }

    fn wall_color(&self, s_wall: f64, z: f64, side_seed: u64) -> Rgb {
        if s_wall.rem_euclid(2.5) < 0.08 {
            return [70, 45, 35];
        }
        if (1.0..1.15).contains(&z) {
            return [200, 190, 170];
        }
        let n = value_noise(s_wall, z, 0.4, self.seed ^ side_seed);
        shade([150.0, 85.0, 65.0], 0.8 + 0.4 * n)
    }

    /// Ray casts one camera view. Requires a level camera (image columns are
    /// vertical planes in the world), which is what [`RoadConfig::rig`] builds.
    pub fn render(&self, rig: &CameraRig, body_pose: &Pose2) -> SceneRender {
        let world_from_cam = pose_to_isometry(body_pose) * rig.cam_to_body;
        let down = world_from_cam.rotation * Vector3::new(0.0, 1.0, 0.0);
        debug_assert!((down.z + 1.0).abs() < 1e-9, "synthetic renderer needs a level camera");
        let origin = world_from_cam * Point3::origin();
        let o = Vec2::new(origin.x, origin.y);
        let cam_h = origin.z;
        let (w, h) = (rig.width, rig.height);
        let mut image = RgbImage::filled(w, h, SKY);
        let mut depth = vec![0.0; w * h];

        let xn_max = ((0.0 - rig.cx).abs().max((w as f64 - 1.0 - rig.cx).abs())) / rig.fx;
        let reach = self.max_depth * (1.0 + xn_max * xn_max).sqrt() + 2.0 * WALL_STEP;
        let candidates: Vec<(usize, &(Vec2, Vec2, f64))> = self
            .walls
            .as_ref()
            .map(|walls| {
                walls
                    .segments
                    .iter()
                    .enumerate()
                    .filter(|(_, (p, q, _))| (*p - o).norm().min((*q - o).norm()) < reach)
                    .collect()
            })
            .unwrap_or_default();
        let half_segments = self.walls.as_ref().map_or(0, |w| w.segments.len() / 2);
        let wall_h = self.walls.as_ref().map_or(0.0, |w| w.height);

        for u in 0..w {
            let xn = (u as f64 - rig.cx) / rig.fx;
            let dir3 = world_from_cam.rotation * Vector3::new(xn, 0.0, 1.0);
            let d = Vec2::new(dir3.x, dir3.y);
            // nearest wall along this column: (t, wall arclength, side)
            let mut wall_hit: Option<(f64, f64, u64)> = None;
            for &(idx, (p, q, s_start)) in &candidates {
                let e = *q - *p;
                let denom = d.cross(e);
                if denom.abs() < 1e-12 {
                    continue;
                }
                let op = *p - o;
                let t = op.cross(e) / denom;
                let sp = op.cross(d) / denom;
                if t > 1e-9 && (0.0..=1.0).contains(&sp) && wall_hit.map_or(true, |(bt, _, _)| t < bt) {
                    let side = if idx < half_segments { 0x11 } else { 0x22 };
                    wall_hit = Some((t, s_start + sp * e.norm(), side));
                }
            }
            for v in 0..h {
                let yn = (v as f64 - rig.cy) / rig.fy;
                let mut best: Option<(f64, Rgb)> = None;
                if let Some((t, s_wall, side)) = wall_hit {
                    let z = cam_h - yn * t;
                    if (0.0..=wall_h).contains(&z) && t <= self.max_depth {
                        best = Some((t, self.wall_color(s_wall, z, side)));
                    }
                }
                if yn > 0.0 {
                    let t = cam_h / yn;
                    if t <= self.max_depth && best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, self.ground_color(o + d * t)));
                    }
                }
                if let Some((t, c)) = best {
                    let idx = v * w + u;
                    depth[idx] = t;
                    image.set(idx, c);
                }
            }
        }
        SceneRender { image, depth }
    }
}

/// Generates a trace along a procedural road: frames every `frame_spacing`
/// meters of arclength, each with a ray-cast image and exact depth.
pub fn generate_synthetic_trace(cfg: &RoadConfig, seed: u64) -> Result<Trace, TraceError> {
    cfg.validate()?;
    let scene = SyntheticScene::new(cfg, seed);
    let rig = cfg.rig();
    let n = ((cfg.total_length() / cfg.frame_spacing) + 1e-9).floor() as usize;
    if n == 0 {
        return Err(TraceError::BadRoad("road shorter than one frame spacing".into()));
    }
    let frames: Vec<Frame> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = i as f64 * cfg.frame_spacing;
            let pose = scene.road.pose_at(s);
            let r = scene.render(&rig, &pose);
            Frame {
                pose,
                timestamp: s / cfg.speed,
                image: r.image,
                depth: r.depth.iter().map(|&d| d as f32).collect(),
                valid: r.depth.iter().map(|&d| d > 0.0).collect(),
            }
        })
        .collect();
    Trace::new(frames, rig)
}
