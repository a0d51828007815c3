//! Directory trace format.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/0000.png      8-bit RGB
//! <dir>/0000.f32      "DPTH" | u32 width | u32 height | u32 reserved | f32 LE row-major
//! ```
//!
//! Invalid depth is stored as 0 and the valid mask is recovered as `depth > 0`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CameraRig, Frame, Trace, TraceError};
use crate::geometry::Pose2;
use crate::raster::RgbImage;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_SCHEMA_VERSION: u32 = 1;
const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigEntry {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(rename = "T_cam_to_body")]
    pub t_cam_to_body: [f64; 16],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: usize,
    pub timestamp: f64,
    pub pose: [f64; 3],
    pub image: String,
    pub depth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub rig: RigEntry,
    pub frames: Vec<FrameEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_depth_file(path: &Path, width: usize, height: usize, depth: &[f32]) -> Result<(), TraceError> {
    let mut buf = Vec::with_capacity(16 + 4 * depth.len());
    buf.extend_from_slice(DEPTH_MAGIC);
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for d in depth {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

/// Returns `(width, height, depth)`.
pub fn read_depth_file(path: &Path) -> Result<(usize, usize, Vec<f32>), String> {
    let bytes = fs::read(path).map_err(|e| e.to_string())?;
    if bytes.len() < 16 || &bytes[0..4] != DEPTH_MAGIC {
        return Err("missing DPTH header".into());
    }
    let word = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let (w, h) = (word(4), word(8));
    if bytes.len() != 16 + 4 * w * h {
        return Err(format!("expected {} bytes of depth, found {}", 4 * w * h, bytes.len() - 16));
    }
    let depth = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((w, h, depth))
}

pub fn save_trace(trace: &Trace, dir: &Path) -> Result<(), TraceError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let rig = trace.rig();
    let mut frames = Vec::with_capacity(trace.len());
    for (i, f) in trace.frames().iter().enumerate() {
        let image = format!("{i:04}.png");
        let depth = format!("{i:04}.f32");
        f.image.save_png(&dir.join(&image))?;
        let stored: Vec<f32> = f
            .depth
            .iter()
            .zip(&f.valid)
            .map(|(&d, &m)| if m { d } else { 0.0 })
            .collect();
        write_depth_file(&dir.join(&depth), rig.width, rig.height, &stored)?;
        frames.push(FrameEntry {
            id: i,
            timestamp: f.timestamp,
            pose: [f.pose.x, f.pose.y, f.pose.theta],
            image,
            depth,
        });
    }
    let manifest = Manifest {
        schema_version: TRACE_SCHEMA_VERSION,
        rig: RigEntry {
            fx: rig.fx,
            fy: rig.fy,
            cx: rig.cx,
            cy: rig.cy,
            width: rig.width,
            height: rig.height,
            t_cam_to_body: rig.cam_to_body_rows(),
        },
        frames,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn load_trace(dir: &Path) -> Result<Trace, TraceError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(TraceError::MissingManifest(path.display().to_string()));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| TraceError::BadManifest(e.to_string()))?;
    if manifest.schema_version != TRACE_SCHEMA_VERSION {
        return Err(TraceError::UnsupportedVersion(manifest.schema_version));
    }
    let r = &manifest.rig;
    let rig = CameraRig {
        fx: r.fx,
        fy: r.fy,
        cx: r.cx,
        cy: r.cy,
        width: r.width,
        height: r.height,
        cam_to_body: CameraRig::cam_to_body_from_rows(&r.t_cam_to_body)?,
    };
    rig.validate()?;
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (i, e) in manifest.frames.iter().enumerate() {
        let image_path = dir.join(&e.image);
        if !image_path.is_file() {
            return Err(TraceError::MissingFile {
                frame: i,
                kind: "image",
                path: image_path.display().to_string(),
            });
        }
        let depth_path = dir.join(&e.depth);
        if !depth_path.is_file() {
            return Err(TraceError::MissingFile {
                frame: i,
                kind: "depth",
                path: depth_path.display().to_string(),
            });
        }
        let image = RgbImage::load_png(&image_path)?;
        let (dw, dh, depth) =
            read_depth_file(&depth_path).map_err(|msg| TraceError::BadDepth { frame: i, msg })?;
        if dw != rig.width || dh != rig.height {
            return Err(TraceError::DimensionMismatch {
                frame: i,
                what: "depth",
                got_w: dw,
                got_h: dh,
                want_w: rig.width,
                want_h: rig.height,
            });
        }
        let valid = depth.iter().map(|&d| d > 0.0).collect();
        frames.push(Frame {
            // stored theta is already wrapped; keep it bit-exact
            pose: Pose2 {
                x: e.pose[0],
                y: e.pose[1],
                theta: e.pose[2],
            },
            timestamp: e.timestamp,
            image,
            depth,
            valid,
        });
    }
    Trace::new(frames, rig)
}
