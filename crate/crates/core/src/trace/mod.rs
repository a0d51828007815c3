//! Posed RGB-D traces: the recorded (or procedurally generated) drive that
//! the simulator re-renders from nearby viewpoints.

mod io;
mod reference;
pub mod synthetic;

use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose2;
use crate::raster::{RasterError, RgbImage};

pub use io::{load_trace, save_trace, read_depth_file, write_depth_file, Manifest, MANIFEST_FILE, TRACE_SCHEMA_VERSION};
pub use reference::{reference_path, PathProjection, ReferencePath};
pub use synthetic::{generate_synthetic_trace, RoadConfig, RoadSegment, WallConfig};

/// Maximum allowed distance between consecutive frame poses.
pub const MAX_FRAME_GAP: f64 = 5.0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace manifest not found at {0}")]
    MissingManifest(String),
    #[error("malformed manifest: {0}")]
    BadManifest(String),
    #[error("unsupported trace schema version {0}")]
    UnsupportedVersion(u32),
    #[error("frame {frame}: missing {kind} file {path}")]
    MissingFile {
        frame: usize,
        kind: &'static str,
        path: String,
    },
    #[error("frame {frame}: {what} is {got_w}x{got_h}, rig is {want_w}x{want_h}")]
    DimensionMismatch {
        frame: usize,
        what: &'static str,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("frame {frame}: timestamp {t} does not increase over previous {prev}")]
    NonMonotoneTimestamp { frame: usize, t: f64, prev: f64 },
    #[error("frame {frame}: pose is {gap:.3} m from the previous frame (max {MAX_FRAME_GAP})")]
    PoseGap { frame: usize, gap: f64 },
    #[error("frame {frame}: bad depth file: {msg}")]
    BadDepth { frame: usize, msg: String },
    #[error("invalid camera rig: {0}")]
    BadRig(String),
    #[error("invalid road config: {0}")]
    BadRoad(String),
    #[error("trace has no frames")]
    Empty,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Pinhole intrinsics plus the camera-to-body extrinsic.
///
/// Camera frame: x right, y down, z forward. Body frame: x forward, y left,
/// z up, origin on the ground.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub cam_to_body: Isometry3<f64>,
}

impl CameraRig {
    pub fn validate(&self) -> Result<(), TraceError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(TraceError::BadRig(format!(
                "fx={} fy={} cx={} cy={} size={}x{}",
                self.fx, self.fy, self.cx, self.cy, self.width, self.height
            )))
        }
    }

    /// Forward-looking camera mounted `height` meters above the body origin,
    /// with `pitch` radians of downward tilt.
    pub fn forward_camera(width: usize, height: usize, hfov: f64, mount_height: f64, pitch: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * hfov).tan();
        // columns of the body-from-camera rotation: camera x, y, z axes in body coordinates
        let level = nalgebra::Matrix3::new(
            0.0, 0.0, 1.0, //
            -1.0, 0.0, 0.0, //
            0.0, -1.0, 0.0,
        );
        let tilt = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), pitch);
        let rot = nalgebra::Rotation3::from_matrix_unchecked(tilt.matrix() * level);
        Self {
            fx,
            fy: fx,
            cx: 0.5 * (width as f64 - 1.0),
            cy: 0.5 * (height as f64 - 1.0),
            width,
            height,
            cam_to_body: Isometry3::from_parts(
                Translation3::new(0.0, 0.0, mount_height),
                UnitQuaternion::from_rotation_matrix(&rot),
            ),
        }
    }

    pub fn body_to_cam(&self) -> Isometry3<f64> {
        self.cam_to_body.inverse()
    }

    /// Back-projects pixel `(u, v)` at z-depth `depth` into the camera frame.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        Point3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth)
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    #[inline]
    pub fn project(&self, p: &Point3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Row-major 4x4 homogeneous matrix of `cam_to_body`.
    pub fn cam_to_body_rows(&self) -> [f64; 16] {
        let m = self.cam_to_body.to_homogeneous();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[4 * r + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn cam_to_body_from_rows(rows: &[f64; 16]) -> Result<Isometry3<f64>, TraceError> {
        let rot = nalgebra::Matrix3::new(
            rows[0], rows[1], rows[2], rows[4], rows[5], rows[6], rows[8], rows[9], rows[10],
        );
        let ortho = (rot.transpose() * rot - nalgebra::Matrix3::identity()).norm();
        if ortho > 1e-6 || (rot.determinant() - 1.0).abs() > 1e-6 {
            return Err(TraceError::BadRig("T_cam_to_body is not a rigid transform".into()));
        }
        if rows[12] != 0.0 || rows[13] != 0.0 || rows[14] != 0.0 || rows[15] != 1.0 {
            return Err(TraceError::BadRig("T_cam_to_body bottom row must be 0 0 0 1".into()));
        }
        let r = nalgebra::Rotation3::from_matrix_unchecked(rot);
        Ok(Isometry3::from_parts(
            Translation3::new(rows[3], rows[7], rows[11]),
            UnitQuaternion::from_rotation_matrix(&r),
        ))
    }
}

/// Lifts a planar pose to a 3D rigid transform (body in world, z up).
pub fn pose_to_isometry(p: &Pose2) -> Isometry3<f64> {
    Isometry3::from_parts(
        Translation3::new(p.x, p.y, 0.0),
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), p.theta),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Vehicle body pose in the world.
    pub pose: Pose2,
    pub timestamp: f64,
    pub image: RgbImage,
    /// Z-depth in meters, row-major; 0 where invalid.
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct Trace {
    frames: Vec<Frame>,
    rig: CameraRig,
    arclength: Vec<f64>,
}

impl Trace {
    pub fn new(frames: Vec<Frame>, rig: CameraRig) -> Result<Self, TraceError> {
        rig.validate()?;
        if frames.is_empty() {
            return Err(TraceError::Empty);
        }
        let (w, h) = (rig.width, rig.height);
        let mut arclength = Vec::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            let mismatch = |what, got_w, got_h| TraceError::DimensionMismatch {
                frame: i,
                what,
                got_w,
                got_h,
                want_w: w,
                want_h: h,
            };
            if f.image.width != w || f.image.height != h || f.image.data.len() != 3 * w * h {
                return Err(mismatch("image", f.image.width, f.image.height));
            }
            if f.depth.len() != w * h {
                return Err(mismatch("depth", f.depth.len(), 1));
            }
            if f.valid.len() != w * h {
                return Err(mismatch("valid mask", f.valid.len(), 1));
            }
            if let Some(bad) = f
                .depth
                .iter()
                .zip(&f.valid)
                .position(|(&d, &m)| m && !(d > 0.0 && d.is_finite()))
            {
                return Err(TraceError::BadDepth {
                    frame: i,
                    msg: format!("non-positive depth at valid pixel {bad}"),
                });
            }
            if i == 0 {
                arclength.push(0.0);
                continue;
            }
            let prev = &frames[i - 1];
            if !(f.timestamp > prev.timestamp) {
                return Err(TraceError::NonMonotoneTimestamp {
                    frame: i,
                    t: f.timestamp,
                    prev: prev.timestamp,
                });
            }
            let gap = (f.pose.position() - prev.pose.position()).norm();
            if gap > MAX_FRAME_GAP {
                return Err(TraceError::PoseGap { frame: i, gap });
            }
            arclength.push(arclength[i - 1] + gap);
        }
        Ok(Self {
            frames,
            rig,
            arclength,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Frame {
        &self.frames[i]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    pub fn arclength(&self) -> &[f64] {
        &self.arclength
    }

    pub fn total_length(&self) -> f64 {
        *self.arclength.last().unwrap_or(&0.0)
    }
}

/// Index of the frame whose position is closest to `pose` (lowest index on ties).
pub fn nearest_frame(trace: &Trace, pose: &Pose2) -> usize {
    let p = pose.position();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, f) in trace.frames.iter().enumerate() {
        let d = (f.pose.position() - p).norm();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Warm-started nearest-frame search for agents that move smoothly along a
/// trace: descends from the previous answer, then settles ties in a small
/// window around the local minimum.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCursor {
    hint: Option<usize>,
}

const CURSOR_WINDOW: usize = 8;

impl FrameCursor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.hint = None;
    }

    pub fn nearest(&mut self, trace: &Trace, pose: &Pose2) -> usize {
        let idx = match self.hint {
            None => nearest_frame(trace, pose),
            Some(h) => {
                let p = pose.position();
                let dist = |i: usize| (trace.frames[i].pose.position() - p).norm();
                let n = trace.len();
                let mut i = h.min(n - 1);
                let mut d = dist(i);
                loop {
                    if i + 1 < n && dist(i + 1) < d {
                        i += 1;
                        d = dist(i);
                    } else if i > 0 && dist(i - 1) <= d {
                        i -= 1;
                        d = dist(i);
                    } else {
                        break;
                    }
                }
                let lo = i.saturating_sub(CURSOR_WINDOW);
                let hi = (i + CURSOR_WINDOW).min(n - 1);
                let mut best = lo;
                let mut best_d = f64::INFINITY;
                for j in lo..=hi {
                    let dj = dist(j);
                    if dj < best_d {
                        best_d = dj;
                        best = j;
                    }
                }
                best
            }
        };
        self.hint = Some(idx);
        idx
    }
}
