//! Kinematic bicycle model and its third-order Runge-Kutta discretization.

use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, FootprintDims, Pose2};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    /// Heading, wrapped to `(-pi, pi]`.
    pub phi: f64,
    /// Steering angle.
    pub delta: f64,
    pub v: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, phi: f64, delta: f64, v: f64) -> Self {
        Self {
            x,
            y,
            phi,
            delta,
            v,
        }
    }

    pub fn at_pose(pose: &Pose2, v: f64) -> Self {
        Self::new(pose.x, pose.y, pose.theta, 0.0, v)
    }

    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.phi)
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.x, self.y, self.phi, self.delta, self.v]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }
}

/// Steering velocity and longitudinal acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub u_delta: f64,
    pub u_a: f64,
}

impl ControlInput {
    pub fn new(u_delta: f64, u_a: f64) -> Self {
        Self { u_delta, u_a }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActuatorLimits {
    pub delta_max: f64,
    pub u_delta_max: f64,
    pub u_a_max: f64,
}

impl Default for ActuatorLimits {
    fn default() -> Self {
        Self {
            delta_max: 0.5236,
            u_delta_max: 1.0,
            u_a_max: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    /// Inter-axle distance.
    pub wheelbase: f64,
    pub footprint: FootprintDims,
    pub limits: ActuatorLimits,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.8,
            footprint: FootprintDims {
                length: 4.5,
                width: 1.8,
            },
            limits: ActuatorLimits::default(),
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.wheelbase > 0.0) {
            return Err(format!("wheelbase must be positive, got {}", self.wheelbase));
        }
        FootprintDims::new(self.footprint.length, self.footprint.width)
            .map_err(|e| e.to_string())?;
        if self.wheelbase >= self.footprint.length {
            return Err(format!(
                "wheelbase {} must be shorter than the footprint length {}",
                self.wheelbase, self.footprint.length
            ));
        }
        let l = &self.limits;
        if !(l.delta_max > 0.0 && l.u_delta_max > 0.0 && l.u_a_max > 0.0) {
            return Err("actuator limits must be positive".into());
        }
        Ok(())
    }
}

/// Continuous-time state derivative `[x', y', phi', delta', v']`.
pub fn derivative(s: &AgentState, u: &ControlInput, p: &VehicleParams) -> [f64; 5] {
    [
        s.v * s.phi.cos(),
        s.v * s.phi.sin(),
        s.v / p.wheelbase * s.delta.tan(),
        u.u_delta,
        u.u_a,
    ]
}

fn axpy(s: [f64; 5], k: &[f64; 5], h: f64) -> [f64; 5] {
    let mut out = s;
    for i in 0..5 {
        out[i] += h * k[i];
    }
    out
}

fn clamp_input(u: &ControlInput, l: &ActuatorLimits) -> ControlInput {
    ControlInput {
        u_delta: u.u_delta.clamp(-l.u_delta_max, l.u_delta_max),
        u_a: u.u_a.clamp(-l.u_a_max, l.u_a_max),
    }
}

/// Kutta's third-order scheme (nodes 0, 1/2, 1; weights 1/6, 2/3, 1/6)
/// with the input held over the step. Steering and speed are clamped
/// after the step.
pub fn step_rk3(s: &AgentState, u: &ControlInput, p: &VehicleParams, dt: f64) -> AgentState {
    let u = clamp_input(u, &p.limits);
    let f = |a: [f64; 5]| derivative(&AgentState::from_array(a), &u, p);
    let y0 = s.to_array();
    let k1 = f(y0);
    let k2 = f(axpy(y0, &k1, 0.5 * dt));
    let mut y3 = axpy(y0, &k1, -dt);
    y3 = axpy(y3, &k2, 2.0 * dt);
    let k3 = f(y3);
    let mut y = y0;
    for i in 0..5 {
        y[i] += dt / 6.0 * (k1[i] + 4.0 * k2[i] + k3[i]);
    }
    let dmax = p.limits.delta_max;
    AgentState {
        x: y[0],
        y: y[1],
        phi: wrap_angle(y[2]),
        delta: y[3].clamp(-dmax, dmax),
        v: y[4].max(0.0),
    }
}

/// Converts a desired steering angle into a rate-limited steering velocity.
pub fn steering_command_to_rate(
    delta_cmd: f64,
    s: &AgentState,
    dt: f64,
    limits: &ActuatorLimits,
) -> f64 {
    ((delta_cmd - s.delta) / dt).clamp(-limits.u_delta_max, limits.u_delta_max)
}
