//! Novel-view rendering: depth-based reprojection of a recorded frame to a
//! new viewpoint, hole filling, ado-vehicle mesh rasterization and color
//! harmonization.

use std::collections::VecDeque;

use nalgebra::{Isometry3, Matrix3, Point3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Pose2;
use crate::raster::{luminance, to_u8, Rgb, RgbImage};
use crate::trace::{pose_to_isometry, CameraRig, Frame};

/// Smallest camera-frame depth that may receive a splat or mesh fragment.
pub const NEAR_PLANE: f64 = 0.05;
pub const INPAINT_RADIUS: usize = 8;
pub const HARMONIZE_STRENGTH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshSpec {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Linear RGB in `[0, 1]`.
    pub color: [f64; 3],
    pub specular: f64,
    pub style: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshLibraryEntry {
    pub style: u8,
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshLibraryConfig {
    pub entries: Vec<MeshLibraryEntry>,
    pub color_min: [f64; 3],
    pub color_max: [f64; 3],
    pub specular_min: f64,
    pub specular_max: f64,
}

impl Default for MeshLibraryConfig {
    fn default() -> Self {
        Self {
            entries: vec![
                MeshLibraryEntry {
                    style: 0,
                    length: 4.5,
                    width: 1.8,
                    height: 1.45,
                },
                MeshLibraryEntry {
                    style: 1,
                    length: 4.1,
                    width: 1.75,
                    height: 1.5,
                },
                MeshLibraryEntry {
                    style: 2,
                    length: 4.7,
                    width: 1.9,
                    height: 1.7,
                },
            ],
            color_min: [0.05; 3],
            color_max: [0.95; 3],
            specular_min: 0.0,
            specular_max: 1.0,
        }
    }
}

impl MeshLibraryConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.entries.is_empty() {
            return Err("mesh library needs at least one entry".into());
        }
        for e in &self.entries {
            if !(e.length > 0.0 && e.width > 0.0 && e.height > 0.0) {
                return Err(format!("mesh entry style {} has non-positive dims", e.style));
            }
        }
        for c in 0..3 {
            let (lo, hi) = (self.color_min[c], self.color_max[c]);
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(format!("color range channel {c} must satisfy 0 <= min <= max <= 1"));
            }
        }
        let (lo, hi) = (self.specular_min, self.specular_max);
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err("specular range must satisfy 0 <= min <= max <= 1".into());
        }
        Ok(())
    }

    /// Largest footprint in the library.
    pub fn max_dims(&self) -> (f64, f64) {
        self.entries
            .iter()
            .fold((0.0, 0.0), |(l, w), e| (l.max(e.length), w.max(e.width)))
    }
}

pub fn sample_mesh_spec<R: Rng + ?Sized>(cfg: &MeshLibraryConfig, rng: &mut R) -> MeshSpec {
    let e = cfg.entries[rng.random_range(0..cfg.entries.len())];
    let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let color = [
        uniform(cfg.color_min[0], cfg.color_max[0]),
        uniform(cfg.color_min[1], cfg.color_max[1]),
        uniform(cfg.color_min[2], cfg.color_max[2]),
    ];
    MeshSpec {
        length: e.length,
        width: e.width,
        height: e.height,
        color,
        specular: uniform(cfg.specular_min, cfg.specular_max),
        style: e.style,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub image: RgbImage,
    /// Z-depth in the target camera; `f64::INFINITY` where nothing landed.
    pub warped_depth: Vec<f64>,
    pub coverage: Vec<bool>,
    pub fg: Vec<bool>,
}

impl RenderedView {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

/// Rigid transform taking points in the body frame at `data_pose` to the
/// body frame at `agent_pose`.
pub fn relative_body_transform(data_pose: &Pose2, agent_pose: &Pose2) -> Isometry3<f64> {
    pose_to_isometry(agent_pose).inverse() * pose_to_isometry(data_pose)
}

/// Source-camera pixel plus depth to target-camera pixel, folded into one
/// rotation and translation.
#[derive(Debug, Clone, Copy)]
pub struct PixelWarp {
    rot: Matrix3<f64>,
    trans: Vector3<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl PixelWarp {
    pub fn new(rig: &CameraRig, t_v1_to_v2: &Isometry3<f64>) -> Self {
        let cam = rig.body_to_cam() * t_v1_to_v2 * rig.cam_to_body;
        Self {
            rot: *cam.rotation.to_rotation_matrix().matrix(),
            trans: cam.translation.vector,
            fx: rig.fx,
            fy: rig.fy,
            cx: rig.cx,
            cy: rig.cy,
        }
    }

    /// Continuous target coordinates `(u, v, z)`, or `None` behind the near plane.
    #[inline]
    pub fn apply(&self, u: f64, v: f64, depth: f64) -> Option<(f64, f64, f64)> {
        let p = Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        let q = self.rot * p + self.trans;
        if q.z < NEAR_PLANE {
            return None;
        }
        Some((self.fx * q.x / q.z + self.cx, self.fy * q.y / q.z + self.cy, q.z))
    }
}

/// Forward-warps every valid source pixel into the target view with
/// nearest-pixel splatting and a z-buffer.
pub fn reproject(frame: &Frame, rig: &CameraRig, t_v1_to_v2: &Isometry3<f64>) -> RenderedView {
    let (w, h) = (rig.width, rig.height);
    let warp = PixelWarp::new(rig, t_v1_to_v2);
    let mut image = RgbImage::new(w, h);
    let mut warped_depth = vec![f64::INFINITY; w * h];
    let mut coverage = vec![false; w * h];
    for v in 0..h {
        for u in 0..w {
            let src = v * w + u;
            if !frame.valid[src] {
                continue;
            }
            let Some((tu, tv, z)) = warp.apply(u as f64, v as f64, frame.depth[src] as f64) else {
                continue;
            };
            let (pu, pv) = (tu.round(), tv.round());
            if pu < 0.0 || pv < 0.0 || pu >= w as f64 || pv >= h as f64 {
                continue;
            }
            let dst = pv as usize * w + pu as usize;
            if z < warped_depth[dst] {
                warped_depth[dst] = z;
                coverage[dst] = true;
                image.set(dst, frame.image.get(src));
            }
        }
    }
    RenderedView {
        image,
        warped_depth,
        coverage,
        fg: vec![false; w * h],
    }
}

/// Mean color over the pixels where `mask` is set (all pixels if `None` or empty).
pub fn mean_color(image: &RgbImage, mask: Option<&[bool]>) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for i in 0..image.pixel_count() {
        if mask.is_none_or(|m| m[i]) {
            let c = image.get(i);
            for k in 0..3 {
                acc[k] += c[k] as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        if mask.is_some() {
            return mean_color(image, None);
        }
        return acc;
    }
    acc.map(|a| a / n as f64)
}

/// Fills uncovered pixels from the nearest covered pixel (4-neighbor BFS,
/// Manhattan radius [`INPAINT_RADIUS`]) carrying color and depth; anything
/// farther gets the mean covered color.
pub fn inpaint_holes(view: &RenderedView) -> RenderedView {
    let (w, h) = (view.width(), view.height());
    let mut out = view.clone();
    let mut dist = vec![usize::MAX; w * h];
    let mut queue = VecDeque::new();
    for (i, &c) in view.coverage.iter().enumerate() {
        if c {
            dist[i] = 0;
            queue.push_back(i);
        }
    }
    if queue.len() == w * h {
        return out;
    }
    while let Some(i) = queue.pop_front() {
        let d = dist[i];
        if d == INPAINT_RADIUS {
            continue;
        }
        let (x, y) = (i % w, i / w);
        let mut visit = |j: usize| {
            if dist[j] == usize::MAX {
                dist[j] = d + 1;
                out.image.set(j, out.image.get(i));
                out.warped_depth[j] = out.warped_depth[i];
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
    }
    let mean = mean_color(&view.image, Some(&view.coverage));
    let fill: Rgb = mean.map(to_u8);
    for (i, &d) in dist.iter().enumerate() {
        if d == usize::MAX {
            out.image.set(i, fill);
        }
    }
    out
}

/// Axis-aligned box in the vehicle body frame: `[min, max]` corners.
type BodyBox = ([f64; 3], [f64; 3]);

/// Lower body plus cabin; the style moves and resizes the cabin.
pub fn mesh_boxes(mesh: &MeshSpec) -> [BodyBox; 2] {
    let (l, w, h) = (mesh.length, mesh.width, mesh.height);
    let clearance = 0.15 * h;
    let (belt, cabin_front, cabin_rear, cabin_w) = match mesh.style % 3 {
        0 => (0.55, 0.18, -0.30, 0.84),
        1 => (0.55, 0.12, -0.46, 0.86),
        _ => (0.60, 0.28, -0.46, 0.90),
    };
    let belt_z = belt * h;
    [
        ([-0.5 * l, -0.5 * w, clearance], [0.5 * l, 0.5 * w, belt_z]),
        (
            [cabin_rear * l, -0.5 * cabin_w * w, belt_z],
            [cabin_front * l, 0.5 * cabin_w * w, h],
        ),
    ]
}

/// Twelve outward-facing triangles of a box.
fn box_triangles(b: &BodyBox) -> [[Point3<f64>; 3]; 12] {
    let (lo, hi) = b;
    let c = |i: usize| {
        Point3::new(
            if i & 1 == 0 { lo[0] } else { hi[0] },
            if i & 2 == 0 { lo[1] } else { hi[1] },
            if i & 4 == 0 { lo[2] } else { hi[2] },
        )
    };
    // quads wound counter-clockwise seen from outside
    let quads = [
        [0, 4, 6, 2], // x min
        [1, 3, 7, 5], // x max
        [0, 1, 5, 4], // y min
        [2, 6, 7, 3], // y max
        [0, 2, 3, 1], // z min
        [4, 5, 7, 6], // z max
    ];
    let mut out = [[Point3::origin(); 3]; 12];
    for (k, q) in quads.iter().enumerate() {
        out[2 * k] = [c(q[0]), c(q[1]), c(q[2])];
        out[2 * k + 1] = [c(q[0]), c(q[2]), c(q[3])];
    }
    out
}

/// Keeps the part of a camera-frame polygon with `z >= NEAR_PLANE`.
fn clip_near(poly: &[Point3<f64>]) -> Vec<Point3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let ina = a.z >= NEAR_PLANE;
        let inb = b.z >= NEAR_PLANE;
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (NEAR_PLANE - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

struct Shading {
    ambient: f64,
    color: [f64; 3],
    specular: f64,
}

impl Shading {
    fn shade(&self, normal: &Vector3<f64>, view_point: &Point3<f64>) -> Rgb {
        // light travels along +z from a source behind the camera
        let to_light = Vector3::new(0.0, 0.0, -1.0);
        let diffuse = 0.65 * normal.dot(&to_light).max(0.0);
        let to_eye = -view_point.coords.normalize();
        let half = (to_light + to_eye).normalize();
        let highlight = self.specular * normal.dot(&half).max(0.0).powi(24);
        let k = self.ambient + diffuse;
        [
            to_u8(255.0 * (self.color[0] * k + highlight)),
            to_u8(255.0 * (self.color[1] * k + highlight)),
            to_u8(255.0 * (self.color[2] * k + highlight)),
        ]
    }
}

/// Rasterizes the ado mesh into `view` with a depth test against the warped
/// scene; written pixels join `fg` and take the mesh depth.
pub fn render_ado(
    view: &RenderedView,
    rig: &CameraRig,
    ego_pose: &Pose2,
    ado_pose: &Pose2,
    mesh: &MeshSpec,
    scene_mean: [f64; 3],
) -> RenderedView {
    let mut out = view.clone();
    let (w, h) = (rig.width, rig.height);
    let ado_to_cam = rig.body_to_cam() * relative_body_transform(ado_pose, ego_pose);
    let shading = Shading {
        ambient: 0.2 + 0.45 * luminance(scene_mean.map(to_u8)) / 255.0,
        color: mesh.color,
        specular: mesh.specular,
    };
    for b in mesh_boxes(mesh) {
        for tri in box_triangles(&b) {
            let cam: Vec<Point3<f64>> = tri.iter().map(|p| ado_to_cam * p).collect();
            let normal = (cam[1] - cam[0]).cross(&(cam[2] - cam[0])).normalize();
            if normal.dot(&cam[0].coords) >= 0.0 {
                continue;
            }
            let poly = clip_near(&cam);
            for k in 1..poly.len().saturating_sub(1) {
                raster_triangle(&mut out, rig, [poly[0], poly[k], poly[k + 1]], &normal, &shading, w, h);
            }
        }
    }
    out
}

fn raster_triangle(
    out: &mut RenderedView,
    rig: &CameraRig,
    tri: [Point3<f64>; 3],
    normal: &Vector3<f64>,
    shading: &Shading,
    w: usize,
    h: usize,
) {
    let s: Vec<(f64, f64)> = tri.iter().map(|p| rig.project(p)).collect();
    let area = (s[1].0 - s[0].0) * (s[2].1 - s[0].1) - (s[1].1 - s[0].1) * (s[2].0 - s[0].0);
    if area.abs() < 1e-12 {
        return;
    }
    let umin = s.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let umax = s.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).floor().min(w as f64 - 1.0);
    let vmin = s.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let vmax = s.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).floor().min(h as f64 - 1.0);
    if umin > umax || vmin > vmax {
        return;
    }
    let inv_z = [1.0 / tri[0].z, 1.0 / tri[1].z, 1.0 / tri[2].z];
    for v in vmin as usize..=vmax as usize {
        for u in umin as usize..=umax as usize {
            let (pu, pv) = (u as f64, v as f64);
            let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (pv - a.1) - (b.1 - a.1) * (pu - a.0);
            let l0 = edge(s[1], s[2]) / area;
            let l1 = edge(s[2], s[0]) / area;
            let l2 = edge(s[0], s[1]) / area;
            if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                continue;
            }
            let z = 1.0 / (l0 * inv_z[0] + l1 * inv_z[1] + l2 * inv_z[2]);
            let idx = v * w + u;
            if z >= out.warped_depth[idx] {
                continue;
            }
            out.warped_depth[idx] = z;
            out.fg[idx] = true;
            let point = rig.unproject(pu, pv, z);
            out.image.set(idx, shading.shade(normal, &point));
        }
    }
}

/// Per-channel mean and standard deviation over the masked pixels.
pub fn channel_stats(image: &RgbImage, mask: &[bool], select: bool) -> Option<([f64; 3], [f64; 3])> {
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut n = 0usize;
    for (i, &m) in mask.iter().enumerate() {
        if m == select {
            let c = image.get(i);
            for k in 0..3 {
                let x = c[k] as f64;
                sum[k] += x;
                sq[k] += x * x;
            }
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    let mean = sum.map(|s| s / nf);
    let std = [0, 1, 2].map(|k| (sq[k] / nf - mean[k] * mean[k]).max(0.0).sqrt());
    Some((mean, std))
}

/// Moment-matches foreground colors to the background, blended at
/// [`HARMONIZE_STRENGTH`]. Background pixels are untouched.
pub fn harmonize(view: &RenderedView) -> RenderedView {
    let mut out = view.clone();
    let (Some((fm, fs)), Some((bm, bs))) = (
        channel_stats(&view.image, &view.fg, true),
        channel_stats(&view.image, &view.fg, false),
    ) else {
        return out;
    };
    for (i, &m) in view.fg.iter().enumerate() {
        if !m {
            continue;
        }
        let c = view.image.get(i);
        let mut o = c;
        for k in 0..3 {
            let x = c[k] as f64;
            let target = if fs[k] > 1e-9 {
                (x - fm[k]) * (bs[k] / fs[k]) + bm[k]
            } else {
                x - fm[k] + bm[k]
            };
            o[k] = to_u8(x + HARMONIZE_STRENGTH * (target - x));
        }
        out.image.set(i, o);
    }
    out
}

/// An ado vehicle to place in a synthesized view.
#[derive(Debug, Clone, Copy)]
pub struct AdoPlacement<'a> {
    pub pose: Pose2,
    pub mesh: &'a MeshSpec,
}

/// Full pipeline for one agent viewpoint: reproject, fill holes, render the
/// ado and harmonize.
pub fn synthesize_view(
    frame: &Frame,
    rig: &CameraRig,
    ego_pose: &Pose2,
    ado: Option<AdoPlacement<'_>>,
) -> RenderedView {
    let warped = reproject(frame, rig, &relative_body_transform(&frame.pose, ego_pose));
    let filled = inpaint_holes(&warped);
    match ado {
        None => filled,
        Some(a) => {
            let mean = mean_color(&warped.image, Some(&warped.coverage));
            harmonize(&render_ado(&filled, rig, ego_pose, &a.pose, a.mesh, mean))
        }
    }
}
