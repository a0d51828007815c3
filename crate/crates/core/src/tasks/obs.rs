use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::AgentState;
use crate::geometry::{wrap_angle, CurvilinearOffset};
use crate::raster::RgbImage;
use crate::trace::ReferencePath;

use super::TaskSpec;

/// Layout of the privileged observation:
///
/// | idx | value |
/// |-----|-------|
/// | 0 | q_lat / Z_lat |
/// | 1 | q_rot / Z_rot |
/// | 2 | ego speed (m/s) |
/// | 3 | ego steering angle (rad) |
/// | 4..7 | ado pose in the ego frame: dx, dy (m), dyaw (rad); `(100, 0, 0)` when absent or left behind |
/// | 7 | ado speed minus ego speed (0 when absent) |
/// | 8..11 | road curvature 5, 10, 15 m ahead (1/m) |
pub const PRIVILEGED_DIM: usize = 11;

/// Fixed per-feature input scaling applied by the policy to privileged
/// observations so all entries are of order one.
pub const PRIVILEGED_SCALE: [f64; PRIVILEGED_DIM] = [1.0, 1.0, 0.25, 2.0, 0.1, 0.5, 1.0, 0.5, 20.0, 20.0, 20.0];

pub const ABSENT_ADO: [f64; 3] = [100.0, 0.0, 0.0];
pub const CURVATURE_LOOKAHEAD: [f64; 3] = [5.0, 10.0, 15.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    Privileged,
    Pixels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationConfig {
    pub mode: ObservationMode,
    pub width: usize,
    pub height: usize,
    /// Per-episode photometric jitter amplitude (0.1 = ±10%); 0 disables it.
    pub augment: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            mode: ObservationMode::Privileged,
            width: 48,
            height: 32,
            augment: 0.1,
        }
    }
}

impl ObservationConfig {
    pub fn dim(&self) -> usize {
        match self.mode {
            ObservationMode::Privileged => PRIVILEGED_DIM,
            ObservationMode::Pixels => self.width * self.height,
        }
    }
}

/// Ado pose relative to the ego, or `None` when there is no ado or it fell
/// more than one ado length behind.
pub fn relative_ado(ego: &AgentState, ado: &AgentState, ado_length: f64) -> Option<[f64; 3]> {
    let local = ego.pose().inverse_transform_point(ado.pose().position());
    if local.x < -ado_length {
        return None;
    }
    Some([local.x, local.y, wrap_angle(ado.phi - ego.phi)])
}

pub fn privileged_observation(
    spec: &TaskSpec,
    q: &CurvilinearOffset,
    ego: &AgentState,
    ado: Option<(&AgentState, f64)>,
    centerline: &ReferencePath,
    ego_s: f64,
) -> Vec<f64> {
    let mut o = Vec::with_capacity(PRIVILEGED_DIM);
    o.push(q.q_lat / spec.z_lat);
    o.push(q.q_rot / spec.z_rot);
    o.push(ego.v);
    o.push(ego.delta);
    match ado.and_then(|(a, len)| relative_ado(ego, a, len).map(|r| (r, a.v - ego.v))) {
        Some((rel, dv)) => {
            o.extend_from_slice(&rel);
            o.push(dv);
        }
        None => {
            o.extend_from_slice(&ABSENT_ADO);
            o.push(0.0);
        }
    }
    for d in CURVATURE_LOOKAHEAD {
        o.push(centerline.curvature_at(ego_s + d));
    }
    o
}

/// Photometric perturbation drawn once per episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub gamma: f64,
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        gamma: 1.0,
        brightness: 1.0,
        saturation: 1.0,
        contrast: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, amplitude: f64) -> Self {
        if amplitude <= 0.0 {
            return Self::IDENTITY;
        }
        let mut f = || rng.random_range(1.0 - amplitude..=1.0 + amplitude);
        Augmentation {
            gamma: f(),
            brightness: f(),
            saturation: f(),
            contrast: f(),
        }
    }

    /// Applies the perturbation and returns per-pixel luminance in `[0, 1]`.
    pub fn luminance(&self, image: &RgbImage) -> Vec<f64> {
        let n = image.pixel_count();
        let identity = *self == Self::IDENTITY;
        let mut rgb: Vec<[f64; 3]> = (0..n).map(|i| image.get(i).map(|c| c as f64 / 255.0)).collect();
        if !identity {
            for p in rgb.iter_mut() {
                let mut c = p.map(|x| x.powf(self.gamma) * self.brightness);
                let gray = luma(&c);
                for x in c.iter_mut() {
                    *x = gray + self.saturation * (*x - gray);
                }
                *p = c;
            }
            let mean = rgb.iter().map(luma).sum::<f64>() / n as f64;
            for p in rgb.iter_mut() {
                *p = p.map(|x| (mean + self.contrast * (x - mean)).clamp(0.0, 1.0));
            }
        }
        rgb.iter().map(luma).collect()
    }
}

fn luma(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Overlap weights of output cells with unit input cells along one axis.
fn box_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut i = a.floor() as usize;
            while (i as f64) < b && i < n_in {
                let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((i, overlap / scale));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Area-averaging resize of a single-channel image.
pub fn area_downsample(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let wx = box_weights(w, out_w);
    let wy = box_weights(h, out_h);
    let mut rows = vec![0.0; h * out_w];
    for y in 0..h {
        for (ox, ws) in wx.iter().enumerate() {
            rows[y * out_w + ox] = ws.iter().map(|&(x, k)| k * src[y * w + x]).sum();
        }
    }
    let mut out = vec![0.0; out_w * out_h];
    for (oy, ws) in wy.iter().enumerate() {
        for ox in 0..out_w {
            out[oy * out_w + ox] = ws.iter().map(|&(y, k)| k * rows[y * out_w + ox]).sum();
        }
    }
    out
}

/// Shifts and scales to zero mean and unit variance; a constant image maps to zeros.
pub fn standardize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in x.iter_mut() {
        *v = if std > 1e-12 { (*v - mean) / std } else { 0.0 };
    }
}

/// Rendered view to network input.
#[derive(Debug, Clone, Copy)]
pub struct PixelPipeline {
    pub width: usize,
    pub height: usize,
}

impl PixelPipeline {
    /// Augmented, downsampled luminance before standardization.
    pub fn raw(&self, image: &RgbImage, aug: &Augmentation) -> Vec<f64> {
        let lum = aug.luminance(image);
        area_downsample(&lum, image.width, image.height, self.width, self.height)
    }

    pub fn observe(&self, image: &RgbImage, aug: &Augmentation) -> Vec<f64> {
        let mut x = self.raw(image, aug);
        standardize(&mut x);
        x
    }
}
