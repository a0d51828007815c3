//! Driving tasks: episode setup, reward terms, terminal conditions and the
//! pure-pursuit controller that drives the ado vehicle.

mod env;
mod obs;

pub use env::{
    AdoState, Env, EnvConfig, EpisodeConfig, EpisodeRecord, StepInfo, StepRecord, StepResult, World,
};
pub use obs::{
    area_downsample, privileged_observation, standardize, Augmentation, ObservationConfig, ObservationMode,
    PixelPipeline, PRIVILEGED_DIM, PRIVILEGED_SCALE,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AgentState, VehicleParams};
use crate::geometry::{
    convex_overlap_area, dilate_footprint, footprint_polygon, wrap_angle, CurvilinearOffset, FootprintDims,
};
use crate::trace::ReferencePath;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("trace too short: episodes need {need:.1} m of road ahead of the start, trace has {have:.1} m")]
    TraceTooShort { need: f64, have: f64 },
    #[error("action must be finite, got {0}")]
    NonFiniteAction(f64),
    #[error("invalid task spec: {0}")]
    BadSpec(String),
    #[error("episode already ended; call reset")]
    EpisodeOver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LaneFollow,
    CarFollow,
    Overtake,
}

impl TaskKind {
    pub fn has_ado(self) -> bool {
        !matches!(self, TaskKind::LaneFollow)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dilation {
    pub length: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub z_lat: f64,
    pub z_rot: f64,
    pub z_pass: f64,
    /// Extra lead beyond `z_pass` that ends an overtake episode.
    pub pass_margin: f64,
    pub w_lane: f64,
    pub w_pass: f64,
    pub w_collision: f64,
    pub w_comfort: f64,
    pub gap_range: [f64; 2],
    pub lateral_range: [f64; 2],
    pub speed_range: [f64; 2],
    /// Ego speed minus ado speed when overtaking.
    pub overtake_margin: [f64; 2],
    pub overlap_threshold: f64,
    pub dilation: Dilation,
    pub max_steps: u32,
    /// Seconds between car-follow lane-change decisions.
    pub lane_change_interval: [f64; 2],
    pub lane_change_offset: f64,
    pub pursuit: PursuitConfig,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::LaneFollow,
            z_lat: 1.5,
            z_rot: 0.5,
            z_pass: 5.0,
            pass_margin: 5.0,
            w_lane: 1.0,
            w_pass: 10.0,
            w_collision: 1.0,
            w_comfort: 0.01,
            gap_range: [6.0, 15.0],
            lateral_range: [1.0, 2.0],
            speed_range: [3.0, 5.0],
            overtake_margin: [1.0, 2.0],
            overlap_threshold: 0.05,
            dilation: Dilation {
                length: 1.0,
                width: 0.4,
            },
            max_steps: 400,
            lane_change_interval: [3.0, 8.0],
            lane_change_offset: 1.0,
            pursuit: PursuitConfig::default(),
        }
    }
}

impl TaskSpec {
    pub fn with_task(task: TaskKind) -> Self {
        Self {
            task,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: &str| Err(TaskError::BadSpec(m.to_string()));
        if !(self.z_lat > 0.0 && self.z_rot > 0.0 && self.z_pass > 0.0 && self.pass_margin >= 0.0) {
            return bad("z_lat, z_rot and z_pass must be positive");
        }
        for (name, r) in [
            ("gap_range", self.gap_range),
            ("lateral_range", self.lateral_range),
            ("speed_range", self.speed_range),
            ("overtake_margin", self.overtake_margin),
            ("lane_change_interval", self.lane_change_interval),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(TaskError::BadSpec(format!("{name} must be an interval [lo, hi] with lo <= hi")));
            }
        }
        if !(self.speed_range[0] > 0.0 && self.gap_range[0] >= 0.0 && self.lateral_range[0] >= 0.0) {
            return bad("speeds must be positive, gaps and lateral shifts non-negative");
        }
        if !(self.lane_change_interval[0] > 0.0) {
            return bad("lane_change_interval must be positive");
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) {
            return bad("overlap_threshold must lie in [0, 1]");
        }
        if !(self.dilation.length >= 0.0 && self.dilation.width >= 0.0) {
            return bad("dilation must be non-negative");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        if !(self.pursuit.lookahead > 0.0 && self.pursuit.gain > 0.0 && self.pursuit.speed_gain >= 0.0) {
            return bad("pursuit lookahead and gain must be positive");
        }
        Ok(())
    }
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    None,
    Collision,
    OffLane,
    OffRotation,
    Passed,
    Timeout,
}

impl Terminal {
    pub fn is_done(self) -> bool {
        self != Terminal::None
    }

    pub fn name(self) -> &'static str {
        match self {
            Terminal::None => "none",
            Terminal::Collision => "collision",
            Terminal::OffLane => "off_lane",
            Terminal::OffRotation => "off_rotation",
            Terminal::Passed => "passed",
            Terminal::Timeout => "timeout",
        }
    }
}

/// Unweighted reward terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    /// Lane reward, or the follow reward in car following.
    pub lane: f64,
    pub pass: f64,
    pub collision: f64,
    pub comfort: f64,
}

impl RewardTerms {
    pub fn total(&self, spec: &TaskSpec) -> f64 {
        spec.w_lane * self.lane + spec.w_pass * self.pass + spec.w_collision * self.collision
            + spec.w_comfort * self.comfort
    }
}

/// `1 - (q_lat / z_lat)^2`.
pub fn lane_reward(q_lat: f64, z_lat: f64) -> f64 {
    let r = q_lat / z_lat;
    1.0 - r * r
}

/// Lane reward measured against the path traced by the front car.
pub fn follow_reward(ego_xy: crate::geometry::Vec2, trail: &ReferencePath, z_lat: f64) -> (f64, f64) {
    let lat = trail.project(ego_xy, None).lateral;
    (lane_reward(lat, z_lat), lat)
}

pub fn pass_reward(ego_arclength: f64, ado_arclength: f64, z_pass: f64) -> f64 {
    if ego_arclength - ado_arclength >= z_pass {
        1.0
    } else {
        0.0
    }
}

/// Negative overlap of the dilated ego footprint with the ado, normalized by
/// the undilated ego area.
pub fn collision_reward(
    ego: &AgentState,
    ado: &AgentState,
    ego_dims: &FootprintDims,
    ado_dims: &FootprintDims,
    dilation: &Dilation,
) -> f64 {
    let dilated = dilate_footprint(*ego_dims, dilation.length, dilation.width).expect("valid dims dilate");
    let a = footprint_polygon(&ego.pose(), &dilated);
    let b = footprint_polygon(&ado.pose(), ado_dims);
    -convex_overlap_area(&a, &b) / ego_dims.area()
}

/// Undilated overlap area over the ego area.
pub fn overlap_fraction(ego: &AgentState, ado: &AgentState, ego_dims: &FootprintDims, ado_dims: &FootprintDims) -> f64 {
    let a = footprint_polygon(&ego.pose(), ego_dims);
    let b = footprint_polygon(&ado.pose(), ado_dims);
    convex_overlap_area(&a, &b) / ego_dims.area()
}

/// `-|d_t - 2 d_{t-1} + d_{t-2}| / dt^2` over the three most recent
/// commands (oldest first); 0 with fewer samples.
pub fn comfort_reward(history: &[f64], dt: f64) -> f64 {
    let n = history.len();
    if n < 3 {
        return 0.0;
    }
    let (a, b, c) = (history[n - 3], history[n - 2], history[n - 1]);
    -(c - 2.0 * b + a).abs() / (dt * dt)
}

pub fn terminal_check(
    q: &CurvilinearOffset,
    overlap: f64,
    lead: Option<f64>,
    step: u32,
    spec: &TaskSpec,
) -> Terminal {
    if overlap > spec.overlap_threshold {
        Terminal::Collision
    } else if q.q_lat.abs() > spec.z_lat {
        Terminal::OffLane
    } else if q.q_rot.abs() > spec.z_rot {
        Terminal::OffRotation
    } else if spec.task == TaskKind::Overtake && lead.is_some_and(|l| l >= spec.z_pass + spec.pass_margin) {
        Terminal::Passed
    } else if step >= spec.max_steps {
        Terminal::Timeout
    } else {
        Terminal::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PursuitConfig {
    pub lookahead: f64,
    pub gain: f64,
    /// Speed-proportional addition to the effective lookahead.
    pub speed_gain: f64,
}

impl Default for PursuitConfig {
    fn default() -> Self {
        Self {
            lookahead: 5.0,
            gain: 0.8,
            speed_gain: 0.0,
        }
    }
}

/// Steering command toward the path point `lookahead` meters past the
/// nearest point. Returns the command and the nearest segment (for warm starts).
pub fn pure_pursuit(
    s: &AgentState,
    path: &ReferencePath,
    hint: Option<usize>,
    cfg: &PursuitConfig,
    vehicle: &VehicleParams,
) -> (f64, usize) {
    let pos = crate::geometry::Vec2::new(s.x, s.y);
    let proj = path.project(pos, hint);
    let target = path.pose_at(proj.s + cfg.lookahead).position();
    let d = target - pos;
    let alpha = wrap_angle(d.y.atan2(d.x) - s.phi);
    let denom = cfg.gain * cfg.lookahead + cfg.speed_gain * s.v;
    let dmax = vehicle.limits.delta_max;
    let steer = (2.0 * vehicle.wheelbase * alpha.sin() / denom).atan().clamp(-dmax, dmax);
    (steer, proj.segment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose2;

    #[test]
    fn lane_reward_values() {
        assert_eq!(lane_reward(0.0, 1.5), 1.0);
        assert_eq!(lane_reward(1.5, 1.5), 0.0);
        assert_eq!(lane_reward(0.75, 1.5), 0.75);
    }

    #[test]
    fn pass_reward_values() {
        assert_eq!(pass_reward(3.0, 3.0, 5.0), 0.0);
        assert_eq!(pass_reward(10.0, 4.0, 5.0), 1.0);
        assert_eq!(pass_reward(9.0, 4.0, 5.0), 1.0);
    }

    #[test]
    fn comfort_values() {
        assert_eq!(comfort_reward(&[0.2, 0.2, 0.2], 0.1), 0.0);
        assert!(comfort_reward(&[0.1, 0.2, 0.3], 0.1).abs() < 1e-12);
        assert!((comfort_reward(&[0.0, 0.0, 0.1], 0.1) + 10.0).abs() < 1e-9);
        assert_eq!(comfort_reward(&[0.0, 0.5], 0.1), 0.0);
    }

    #[test]
    fn terminal_priority() {
        let spec = TaskSpec::default();
        let q = |lat: f64, rot: f64| CurvilinearOffset {
            q_lat: lat,
            q_long: 0.0,
            q_rot: rot,
        };
        assert_eq!(terminal_check(&q(1.01 * 1.5, 0.0), 0.0, None, 1, &spec), Terminal::OffLane);
        assert_eq!(terminal_check(&q(2.0, 0.0), 0.06, None, 1, &spec), Terminal::Collision);
        assert_eq!(terminal_check(&q(0.0, 0.6), 0.0, None, 1, &spec), Terminal::OffRotation);
        assert_eq!(terminal_check(&q(0.0, 0.0), 0.0, None, 400, &spec), Terminal::Timeout);
        assert_eq!(terminal_check(&q(0.0, 0.0), 0.0, Some(20.0), 5, &spec), Terminal::None);
        let ot = TaskSpec::with_task(TaskKind::Overtake);
        assert_eq!(terminal_check(&q(0.0, 0.0), 0.0, Some(10.0), 5, &ot), Terminal::Passed);
    }

    #[test]
    fn collision_reward_disjoint_and_contained() {
        let dims = FootprintDims::new(4.5, 1.8).unwrap();
        let small = FootprintDims::new(1.0, 0.5).unwrap();
        let ego = AgentState::at_pose(&Pose2::new(0.0, 0.0, 0.0), 5.0);
        let far = AgentState::at_pose(&Pose2::new(50.0, 0.0, 0.0), 5.0);
        let d = Dilation {
            length: 1.0,
            width: 0.4,
        };
        assert_eq!(collision_reward(&ego, &far, &dims, &dims, &d), 0.0);
        let inside = AgentState::at_pose(&Pose2::new(0.3, 0.1, 0.2), 5.0);
        let r = collision_reward(&ego, &inside, &dims, &small, &d);
        assert!((r + 0.5 / dims.area()).abs() < 1e-12);
    }

    #[test]
    fn pursuit_straight_is_zero() {
        let path = ReferencePath::from_poses((0..100).map(|i| Pose2::new(i as f64, 0.0, 0.0)).collect());
        let s = AgentState::new(10.0, 0.0, 0.0, 0.0, 5.0);
        let (steer, _) = pure_pursuit(&s, &path, None, &PursuitConfig::default(), &VehicleParams::default());
        assert_eq!(steer, 0.0);
    }
}
