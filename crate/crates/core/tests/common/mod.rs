//! Independent reference implementations shared by the integration and
//! acceptance tests.
#![allow(dead_code)]

use adosim::dynamics::{derivative, AgentState, ControlInput, VehicleParams};
use adosim::geometry::{ConvexPolygon, Vec2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- dynamics

/// Classical RK4 with `substeps` equal sub-steps per control interval.
pub fn rk4_schedule(
    s0: &AgentState,
    schedule: &[ControlInput],
    interval: f64,
    p: &VehicleParams,
    substeps: usize,
) -> [f64; 5] {
    let h = interval / substeps as f64;
    let mut y = s0.to_array();
    for u in schedule {
        let f = |a: [f64; 5]| derivative(&AgentState::from_array(a), u, p);
        let add = |a: [f64; 5], k: [f64; 5], c: f64| {
            let mut o = a;
            for i in 0..5 {
                o[i] += c * k[i];
            }
            o
        };
        for _ in 0..substeps {
            let k1 = f(y);
            let k2 = f(add(y, k1, 0.5 * h));
            let k3 = f(add(y, k2, 0.5 * h));
            let k4 = f(add(y, k3, h));
            for i in 0..5 {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
    }
    y
}

/// Smooth lane-keeping schedule over 1 s: ten 0.1 s intervals, a steering
/// angle of constant sign with slow sinusoidal drift, and sinusoidal
/// acceleration.
pub fn smooth_schedule<R: Rng>(rng: &mut R) -> (AgentState, Vec<ControlInput>) {
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let s0 = AgentState::new(
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-3.0..3.0),
        sign * rng.random_range(0.005..0.03),
        rng.random_range(3.0..10.0),
    );
    let (ad, wd, pd) = (
        rng.random_range(0.0..0.005),
        rng.random_range(1.0..4.0),
        rng.random_range(0.0..6.28),
    );
    let (aa, wa, pa) = (
        rng.random_range(0.0..0.5),
        rng.random_range(1.0..4.0),
        rng.random_range(0.0..6.28),
    );
    let sched = (0..10)
        .map(|k| {
            let t = 0.1 * k as f64;
            ControlInput::new(ad * (wd * t + pd).sin(), aa * (wa * t + pa).sin())
        })
        .collect();
    (s0, sched)
}

fn wrap(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    a - t * ((a + std::f64::consts::PI) / t).floor()
}

/// Per-component absolute error, comparing headings modulo 2 pi.
pub fn state_error(a: [f64; 5], b: [f64; 5]) -> f64 {
    (0..5)
        .map(|i| {
            let d = a[i] - b[i];
            if i == 2 {
                wrap(d).abs()
            } else {
                d.abs()
            }
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- geometry

/// Convex polygon with `n` vertices at sorted random angles on an ellipse.
pub fn random_convex<R: Rng>(rng: &mut R, center: Vec2, n: usize) -> ConvexPolygon {
    let (rx, ry) = (rng.random_range(0.2..0.6), rng.random_range(0.2..0.6));
    let rot: f64 = rng.random_range(0.0..6.28);
    loop {
        let mut ang: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        ang.sort_by(f64::total_cmp);
        let pts: Vec<Vec2> = ang
            .iter()
            .map(|&t| {
                let (x, y) = (rx * t.cos(), ry * t.sin());
                let (s, c) = rot.sin_cos();
                Vec2::new(center.x + c * x - s * y, center.y + s * x + c * y)
            })
            .collect();
        if let Ok(p) = ConvexPolygon::new(pts) {
            if p.area() > 0.02 {
                return p;
            }
        }
    }
}

fn cross(o: Vec2, a: Vec2, b: Vec2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// A unit-scale convex pair with the second centered within 0.7 of the first.
pub fn random_pair<R: Rng>(rng: &mut R) -> (ConvexPolygon, ConvexPolygon) {
    let na = rng.random_range(3..9);
    let nb = rng.random_range(3..9);
    let a = random_convex(rng, Vec2::new(0.0, 0.0), na);
    let c = Vec2::new(rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7));
    let b = random_convex(rng, c, nb);
    (a, b)
}

/// Half-plane test against a counter-clockwise vertex ring.
pub fn inside(ring: &[Vec2], p: Vec2) -> bool {
    let n = ring.len();
    (0..n).all(|i| cross(ring[i], ring[(i + 1) % n], p) >= 0.0)
}

/// Stratified jittered Monte Carlo estimate of the intersection area using
/// `side * side` samples over the joint bounding box.
pub fn mc_overlap<R: Rng>(a: &ConvexPolygon, b: &ConvexPolygon, side: usize, rng: &mut R) -> f64 {
    let (ra, rb) = (a.vertices(), b.vertices());
    let bounds = |r: &[Vec2]| {
        r.iter().fold((f64::MAX, f64::MAX, f64::MIN, f64::MIN), |(x0, y0, x1, y1), v| {
            (x0.min(v.x), y0.min(v.y), x1.max(v.x), y1.max(v.y))
        })
    };
    let (ax0, ay0, ax1, ay1) = bounds(ra);
    let (bx0, by0, bx1, by1) = bounds(rb);
    let (x0, y0, x1, y1) = (ax0.max(bx0), ay0.max(by0), ax1.min(bx1), ay1.min(by1));
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let (dx, dy) = ((x1 - x0) / side as f64, (y1 - y0) / side as f64);
    let mut hits = 0usize;
    for i in 0..side {
        for j in 0..side {
            let p = Vec2::new(
                x0 + (i as f64 + rng.random::<f64>()) * dx,
                y0 + (j as f64 + rng.random::<f64>()) * dy,
            );
            if inside(ra, p) && inside(rb, p) {
                hits += 1;
            }
        }
    }
    hits as f64 * dx * dy
}

fn seg_dist(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let (ex, ey) = (b.x - a.x, b.y - a.y);
    let t = (((p.x - a.x) * ex + (p.y - a.y) * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
    ((p.x - a.x - t * ex).powi(2) + (p.y - a.y - t * ey).powi(2)).sqrt()
}

fn segments_cross(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let (d1, d2) = (cross(a, b, c), cross(a, b, d));
    let (d3, d4) = (cross(c, d, a), cross(c, d, b));
    d1 * d2 <= 0.0 && d3 * d4 <= 0.0
}

/// Boundary-sampling clearance: `per_edge` points along every edge of each
/// polygon (vertices included), exact distance to the other's edges. Zero
/// when the boundaries cross or one polygon holds a vertex of the other.
pub fn boundary_clearance(a: &ConvexPolygon, b: &ConvexPolygon, per_edge: usize) -> f64 {
    let (ra, rb) = (a.vertices(), b.vertices());
    let edges = |r: &[Vec2]| -> Vec<(Vec2, Vec2)> {
        (0..r.len()).map(|i| (r[i], r[(i + 1) % r.len()])).collect()
    };
    let (ea, eb) = (edges(ra), edges(rb));
    let touching = ea
        .iter()
        .any(|&(p, q)| eb.iter().any(|&(s, t)| segments_cross(p, q, s, t)))
        || ra.iter().any(|&v| inside(rb, v))
        || rb.iter().any(|&v| inside(ra, v));
    if touching {
        return 0.0;
    }
    let one_way = |from: &[(Vec2, Vec2)], to: &[(Vec2, Vec2)]| {
        let mut best = f64::INFINITY;
        for &(p, q) in from {
            for k in 0..per_edge {
                let t = k as f64 / per_edge as f64;
                let s = Vec2::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y));
                for &(u, v) in to {
                    best = best.min(seg_dist(s, u, v));
                }
            }
        }
        best
    };
    one_way(&ea, &eb).min(one_way(&eb, &ea))
}

// ---------------------------------------------------------------- returns

/// Discounted return-to-go with a bootstrap after the last step, cut at
/// episode ends, by direct summation.
pub fn mc_returns(rewards: &[f64], dones: &[bool], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let mut g = 0.0;
            let mut disc = 1.0;
            let mut k = t;
            loop {
                g += disc * rewards[k];
                disc *= gamma;
                if dones[k] {
                    break;
                }
                k += 1;
                if k == n {
                    g += disc * bootstrap;
                    break;
                }
            }
            g
        })
        .collect()
}

// ---------------------------------------------------------------- pursuit

/// Closed-loop pure pursuit around a counter-clockwise circle of `radius`
/// centered at the origin, starting 1 m outside it. Returns the distance
/// from the circle at every 0.1 s step over `seconds`.
pub fn circle_pursuit_errors(radius: f64, speed: f64, seconds: f64) -> Vec<f64> {
    use adosim::dynamics::{steering_command_to_rate, step_rk3};
    use adosim::geometry::Pose2;
    use adosim::tasks::{pure_pursuit, PursuitConfig};
    use adosim::trace::ReferencePath;

    let laps = (speed * seconds / (std::f64::consts::TAU * radius)).ceil() + 1.0;
    let n = (laps * std::f64::consts::TAU * radius / 0.1) as usize;
    let poses = (0..=n)
        .map(|k| {
            let a = k as f64 * 0.1 / radius;
            Pose2::new(radius * a.cos(), radius * a.sin(), a + std::f64::consts::FRAC_PI_2)
        })
        .collect();
    let path = ReferencePath::from_poses(poses);
    let p = VehicleParams::default();
    let cfg = PursuitConfig {
        lookahead: 5.0,
        gain: 0.8,
        speed_gain: 0.0,
    };
    let dt = 0.1;
    let mut s = AgentState::new(radius + 1.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0, speed);
    let mut hint = None;
    let mut out = Vec::new();
    for _ in 0..(seconds / dt).round() as usize {
        let (steer, seg) = pure_pursuit(&s, &path, hint, &cfg, &p);
        hint = Some(seg);
        let u = ControlInput::new(steering_command_to_rate(steer, &s, dt, &p.limits), 0.0);
        s = step_rk3(&s, &u, &p, dt);
        out.push((s.x.hypot(s.y) - radius).abs());
    }
    out
}

// ---------------------------------------------------------------- synthesis

use adosim::synthesis::reproject;
use adosim::trace::{CameraRig, Frame};
use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};

pub fn flat_trace_config() -> adosim::trace::RoadConfig {
    use adosim::trace::{RoadConfig, RoadSegment};
    RoadConfig {
        segments: vec![RoadSegment {
            length: 120.0,
            curvature: 0.0,
        }],
        walls: None,
        ..RoadConfig::default()
    }
}

/// Valid source pixels whose identity reprojection differs in color, depth
/// or coverage.
pub fn identity_mismatches(frame: &Frame, rig: &CameraRig) -> usize {
    let view = reproject(frame, rig, &Isometry3::identity());
    (0..rig.pixel_count())
        .filter(|&i| {
            frame.valid[i]
                && !(view.coverage[i]
                    && view.image.get(i) == frame.image.get(i)
                    && (view.warped_depth[i] - frame.depth[i] as f64).abs() <= 1e-9 * view.warped_depth[i])
        })
        .count()
}

/// Fronto-parallel plane at z-depth `d`; each pixel's color encodes its
/// column and row. The camera then moves `t` meters along its optical axis.
/// Returns the largest distance between where a source pixel landed and the
/// analytic `r * d / (d - t)` position, and the number of landed pixels.
pub fn plane_magnification_error(rig: &CameraRig, d: f64, t: f64) -> (f64, usize) {
    let (w, h) = (rig.width, rig.height);
    assert!(w <= 256 && h <= 256);
    let mut image = adosim::raster::RgbImage::new(w, h);
    for v in 0..h {
        for u in 0..w {
            image.set(v * w + u, [u as u8, v as u8, 0]);
        }
    }
    let frame = Frame {
        pose: adosim::geometry::Pose2::new(0.0, 0.0, 0.0),
        timestamp: 0.0,
        image,
        depth: vec![d as f32; w * h],
        valid: vec![true; w * h],
    };
    // camera axis in the body frame; the body moves by t along it
    let axis = rig.cam_to_body.rotation * Vector3::new(0.0, 0.0, 1.0);
    let t_v1_to_v2 = Isometry3::from_parts(Translation3::from(-axis * t), UnitQuaternion::identity());
    let view = reproject(&frame, rig, &t_v1_to_v2);
    let scale = d / (d - t);
    let mut worst = 0.0f64;
    let mut n = 0;
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if !view.coverage[i] {
                continue;
            }
            let [su, sv, _] = view.image.get(i);
            let eu = rig.cx + (su as f64 - rig.cx) * scale;
            let ev = rig.cy + (sv as f64 - rig.cy) * scale;
            worst = worst.max((eu - u as f64).hypot(ev - v as f64));
            n += 1;
        }
    }
    (worst, n)
}

/// Warps `frame` by `t` and back by its inverse. Returns the pixels covered
/// after the round trip whose color is within one level of the source, and
/// all covered pixels.
pub fn round_trip_counts(frame: &Frame, rig: &CameraRig, t: &Isometry3<f64>) -> (usize, usize) {
    let there = reproject(frame, rig, t);
    let mid = Frame {
        pose: frame.pose,
        timestamp: frame.timestamp,
        image: there.image.clone(),
        depth: there
            .warped_depth
            .iter()
            .zip(&there.coverage)
            .map(|(&z, &c)| if c { z as f32 } else { 0.0 })
            .collect(),
        valid: there.coverage.clone(),
    };
    let back = reproject(&mid, rig, &t.inverse());
    let mut covered = 0usize;
    let mut good = 0usize;
    for i in 0..rig.pixel_count() {
        if back.coverage[i] {
            covered += 1;
            let (a, b) = (back.image.get(i), frame.image.get(i));
            if (0..3).all(|k| (a[k] as i32 - b[k] as i32).abs() <= 1) {
                good += 1;
            }
        }
    }
    (good, covered)
}

/// Pooled round-trip recovery over `n` random transforms within the
/// synthesis validity bounds (lateral <= 1.5 m, yaw <= 0.5 rad, longitudinal
/// within half a frame spacing), plus the worst single transform.
pub fn round_trip_pooled(trace: &adosim::trace::Trace, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = rng(seed);
    let (mut good, mut covered, mut worst) = (0, 0, 1.0f64);
    for _ in 0..n {
        let t = body_transform(
            rng.random_range(-1.5..1.5),
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.5..0.5),
        );
        let frame = trace.frame(rng.random_range(0..trace.len()));
        let (g, c) = round_trip_counts(frame, trace.rig(), &t);
        good += g;
        covered += c;
        worst = worst.min(g as f64 / c.max(1) as f64);
    }
    (good as f64 / covered.max(1) as f64, worst)
}

/// In-bounds body transform: lateral offset, longitudinal shift and yaw.
pub fn body_transform(lateral: f64, longitudinal: f64, yaw: f64) -> Isometry3<f64> {
    Isometry3::new(Vector3::new(longitudinal, lateral, 0.0), Vector3::new(0.0, 0.0, yaw))
}

// ---------------------------------------------------------------- tasks

use adosim::tasks::{pure_pursuit, Env, EnvConfig, EpisodeRecord, PursuitConfig, TaskKind, TaskSpec, Terminal};
use adosim::trace::Trace;
use std::sync::Arc;

/// Curved synthetic road used across the task and learning tests.
pub fn curved_road(image_width: usize, image_height: usize) -> adosim::trace::RoadConfig {
    use adosim::trace::{RoadConfig, RoadSegment};
    let seg = |length, curvature| RoadSegment { length, curvature };
    RoadConfig {
        segments: vec![seg(60.0, 0.0), seg(100.0, 0.02), seg(60.0, 0.0), seg(120.0, -0.015), seg(60.0, 0.0)],
        image_width,
        image_height,
        ..RoadConfig::default()
    }
}

pub fn curved_trace() -> Arc<Trace> {
    Arc::new(adosim::trace::generate_synthetic_trace(&curved_road(32, 20), 7).unwrap())
}

/// Steering scripts for constructed episodes.
#[derive(Debug, Clone, Copy)]
pub enum Script {
    /// Pure pursuit on the centerline shifted sideways.
    Track(f64),
    /// Constant steering command.
    Constant(f64),
    /// Pure pursuit aimed at the ado's current position.
    Ram,
    /// Sinusoidal weave around the centerline.
    Weave(f64),
}

fn script_action(env: &Env, script: Script, k: u32) -> f64 {
    let w = env.world();
    let p = &env.config().vehicle;
    let cfg = PursuitConfig::default();
    match script {
        Script::Track(off) => pure_pursuit(&w.ego, &env.centerline().offset(off), None, &cfg, p).0,
        Script::Constant(c) => c,
        Script::Ram => match &w.ado {
            Some(a) => {
                let d = adosim::geometry::Vec2::new(a.state.x - w.ego.x, a.state.y - w.ego.y);
                let alpha = adosim::geometry::wrap_angle(d.y.atan2(d.x) - w.ego.phi);
                (2.0 * p.wheelbase * alpha.sin() / d.norm().max(1.0)).atan()
            }
            None => 0.0,
        },
        Script::Weave(amp) => {
            pure_pursuit(&w.ego, env.centerline(), None, &cfg, p).0 + amp * (0.3 * k as f64).sin()
        }
    }
}

pub fn task_config(task: TaskKind, max_steps: u32) -> EnvConfig {
    let mut cfg = EnvConfig::default();
    cfg.task = TaskSpec {
        max_steps,
        ..TaskSpec::with_task(task)
    };
    cfg
}

/// Runs one recorded episode under `script`.
pub fn scripted_episode(cfg: &EnvConfig, trace: &Arc<Trace>, seed: u64, script: Script) -> EpisodeRecord {
    let mut env = Env::new(cfg.clone(), trace.clone(), seed).unwrap();
    env.set_recording(true);
    env.reset_with_seed(seed);
    let mut k = 0;
    loop {
        let a = script_action(&env, script, k);
        k += 1;
        if env.step(a).unwrap().terminal.is_done() {
            break;
        }
    }
    env.take_record().unwrap()
}

/// Fifty constructed episodes spanning all tasks and every terminal cause.
pub fn scripted_suite(trace: &Arc<Trace>) -> Vec<(EnvConfig, EpisodeRecord)> {
    let mut out = Vec::new();
    for i in 0..50u64 {
        let (task, script, steps) = match i % 10 {
            0 => (TaskKind::LaneFollow, Script::Track(0.0), 80),
            1 => (TaskKind::LaneFollow, Script::Constant(0.08), 400),
            2 => (TaskKind::LaneFollow, Script::Weave(0.05), 120),
            3 => (TaskKind::LaneFollow, Script::Constant(-0.5), 400),
            4 => (TaskKind::Overtake, Script::Ram, 400),
            5 => (TaskKind::Overtake, Script::Track(if i % 20 == 5 { 1.2 } else { -1.2 }), 400),
            6 => (TaskKind::Overtake, Script::Track(0.0), 400),
            7 => (TaskKind::CarFollow, Script::Track(0.0), 100),
            8 => (TaskKind::CarFollow, Script::Ram, 400),
            _ => (TaskKind::Overtake, Script::Weave(0.08), 400),
        };
        let cfg = task_config(task, steps);
        out.push((cfg.clone(), scripted_episode(&cfg, trace, 100 + i, script)));
    }
    out
}

/// Recomputes every reward term, the total and the terminal cause of each
/// recorded step from the recorded states through the geometry module.
pub fn recheck_record(cfg: &EnvConfig, trace: &Trace, rec: &EpisodeRecord) -> Result<(), String> {
    use adosim::geometry::{
        convex_overlap_area, dilate_footprint, footprint_polygon, min_clearance, to_curvilinear, FootprintDims,
    };
    use adosim::trace::{nearest_frame, ReferencePath};

    let spec = &cfg.task;
    let dims = cfg.vehicle.footprint;
    let ego_area = dims.length * dims.width;
    let ado_dims = rec.config.mesh.map(|m| FootprintDims {
        length: m.length,
        width: m.width,
    });
    let mut trail = match (spec.task, rec.config.ado_start) {
        (TaskKind::CarFollow, Some(a)) => Some(ReferencePath::from_poses(vec![rec.config.ego_start.pose(), a.pose()])),
        _ => None,
    };
    let mut prev = rec.config.ego_start;
    let mut prev_ado = rec.config.ado_start;
    let mut ego_s = 0.0;
    let mut ado_s = rec.config.init_gap;
    let mut cmds: Vec<f64> = Vec::new();
    for (k, st) in rec.steps.iter().enumerate() {
        let fail = |what: &str, got: String, want: String| Err(format!("step {k} {what}: recorded {got}, recomputed {want}"));
        let step = k as u32 + 1;
        if st.step != step {
            return fail("index", st.step.to_string(), step.to_string());
        }
        let dmax = cfg.vehicle.limits.delta_max;
        let cmd = st.action.clamp(-dmax, dmax);
        if cmd != st.steer_cmd {
            return fail("steer_cmd", st.steer_cmd.to_string(), cmd.to_string());
        }
        cmds.push(cmd);
        ego_s += ((st.ego.x - prev.x).powi(2) + (st.ego.y - prev.y).powi(2)).sqrt();
        prev = st.ego;
        if ego_s != st.ego_arclength {
            return fail("ego arclength", st.ego_arclength.to_string(), ego_s.to_string());
        }
        let frame = nearest_frame(trace, &st.ego.pose());
        if frame != st.info.frame {
            return fail("frame", st.info.frame.to_string(), frame.to_string());
        }
        let q = to_curvilinear(&trace.frame(frame).pose, &st.ego.pose());
        if q != st.info.q {
            return fail("q", format!("{:?}", st.info.q), format!("{q:?}"));
        }

        let ego_poly = footprint_polygon(&st.ego.pose(), &dims);
        let (mut overlap, mut clearance, mut collision, mut pass, mut lead) = (0.0, None, 0.0, 0.0, None);
        if let (Some(ado), Some(ad)) = (st.ado, ado_dims) {
            let p = prev_ado.unwrap();
            ado_s += ((ado.x - p.x).powi(2) + (ado.y - p.y).powi(2)).sqrt();
            prev_ado = Some(ado);
            if Some(ado_s) != st.ado_arclength {
                return fail("ado arclength", format!("{:?}", st.ado_arclength), ado_s.to_string());
            }
            let ado_poly = footprint_polygon(&ado.pose(), &ad);
            overlap = convex_overlap_area(&ego_poly, &ado_poly) / ego_area;
            clearance = Some(min_clearance(&ego_poly, &ado_poly));
            let dil = dilate_footprint(dims, spec.dilation.length, spec.dilation.width).unwrap();
            collision = -convex_overlap_area(&footprint_polygon(&st.ego.pose(), &dil), &ado_poly) / ego_area;
            if spec.task == TaskKind::Overtake {
                pass = if ego_s - ado_s >= spec.z_pass { 1.0 } else { 0.0 };
                lead = Some(ego_s - ado_s);
            }
        }
        let lane = match (&mut trail, st.ado) {
            (Some(t), Some(ado)) => {
                t.push(ado.pose());
                let lat = t.project(st.ego.pose().position(), None).lateral;
                if Some(lat) != st.info.follow_lat {
                    return fail("follow_lat", format!("{:?}", st.info.follow_lat), lat.to_string());
                }
                let r = lat / spec.z_lat;
                1.0 - r * r
            }
            _ => {
                let r = q.q_lat / spec.z_lat;
                1.0 - r * r
            }
        };
        let n = cmds.len();
        let comfort = if n < 3 {
            0.0
        } else {
            -(cmds[n - 1] - 2.0 * cmds[n - 2] + cmds[n - 3]).abs() / (cfg.dt * cfg.dt)
        };
        let checks = [
            ("overlap", st.info.overlap, overlap),
            ("lane", st.terms.lane, lane),
            ("pass", st.terms.pass, pass),
            ("collision", st.terms.collision, collision),
            ("comfort", st.terms.comfort, comfort),
        ];
        for (what, got, want) in checks {
            if got.to_bits() != want.to_bits() {
                return fail(what, got.to_string(), want.to_string());
            }
        }
        if clearance != st.info.clearance {
            return fail("clearance", format!("{:?}", st.info.clearance), format!("{clearance:?}"));
        }
        let total = spec.w_lane * lane + spec.w_pass * pass + spec.w_collision * collision + spec.w_comfort * comfort;
        if total.to_bits() != st.reward.to_bits() {
            return fail("reward", st.reward.to_string(), total.to_string());
        }
        let terminal = if overlap > spec.overlap_threshold {
            Terminal::Collision
        } else if q.q_lat.abs() > spec.z_lat {
            Terminal::OffLane
        } else if q.q_rot.abs() > spec.z_rot {
            Terminal::OffRotation
        } else if lead.is_some_and(|l| l >= spec.z_pass + spec.pass_margin) {
            Terminal::Passed
        } else if step >= spec.max_steps {
            Terminal::Timeout
        } else {
            Terminal::None
        };
        if terminal != st.terminal {
            return fail("terminal", format!("{:?}", st.terminal), format!("{terminal:?}"));
        }
        let last = k + 1 == rec.steps.len();
        if terminal.is_done() != last {
            return fail("episode end", format!("{} steps", rec.steps.len()), format!("terminal at {k}"));
        }
    }
    if rec.steps.last().map(|s| s.terminal) != Some(rec.terminal) {
        return Err("record terminal differs from the last step".into());
    }
    Ok(())
}

// ---------------------------------------------------------------- gradients

use adosim::policy::{Network, NetworkConfig, RecurrentState};
use adosim::ppo::{ppo_loss, PpoConfig, SegmentView};
use adosim::tasks::{ObservationConfig, ObservationMode};
use rand_distr::StandardNormal;

struct GradBatch {
    init: Vec<RecurrentState>,
    obs: Vec<Vec<Vec<f64>>>,
    u: Vec<Vec<f64>>,
    lp: Vec<Vec<f64>>,
    adv: Vec<Vec<f64>>,
    ret: Vec<Vec<f64>>,
}

impl GradBatch {
    fn random(net: &Network, params: &[f64], lens: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut b = GradBatch { init: vec![], obs: vec![], u: vec![], lp: vec![], adv: vec![], ret: vec![] };
        let r = net.recurrent_size();
        for &len in lens {
            let init = RecurrentState {
                h: (0..r).map(|_| rng.random_range(-0.5..0.5)).collect(),
                c: (0..r).map(|_| rng.random_range(-0.5..0.5)).collect(),
            };
            let obs: Vec<Vec<f64>> = (0..len)
                .map(|_| (0..net.input_dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let refs: Vec<&[f64]> = obs.iter().map(|o| o.as_slice()).collect();
            let pass = net.forward_segment(params, &refs, &init).unwrap();
            let sigma = pass.log_std.exp();
            let mut u = vec![];
            let mut lp = vec![];
            for t in 0..len {
                let x = pass.means[t] + sigma * rng.sample::<f64, _>(StandardNormal);
                u.push(x);
                // old policy slightly different so some ratios leave the clip range
                let z = (x - pass.means[t] - rng.random_range(-0.3..0.3)) / sigma;
                lp.push(-0.5 * z * z - pass.log_std - 0.5 * (2.0 * std::f64::consts::PI).ln());
            }
            b.adv.push((0..len).map(|_| rng.sample(StandardNormal)).collect());
            b.ret.push((0..len).map(|_| rng.random_range(-2.0..2.0)).collect());
            b.init.push(init);
            b.obs.push(obs);
            b.u.push(u);
            b.lp.push(lp);
        }
        b
    }

    fn views(&self) -> Vec<SegmentView<'_>> {
        (0..self.init.len())
            .map(|i| SegmentView {
                init: &self.init[i],
                obs: &self.obs[i],
                raw_actions: &self.u[i],
                log_prob_old: &self.lp[i],
                advantages: &self.adv[i],
                returns: &self.ret[i],
            })
            .collect()
    }
}

/// Largest relative error between the analytic gradient and central
/// differences over `n_check` randomly chosen parameters.
pub fn gradient_max_relative_error(mode: ObservationMode, seed: u64, n_check: usize) -> f64 {
    let obs_cfg = ObservationConfig { mode, ..ObservationConfig::default() };
    let net = Network::new(&NetworkConfig::default(), &obs_cfg, 0.5236).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = net.init_params(&mut rng);
    // perturb heads away from their tiny init so all paths carry signal
    for p in params.iter_mut() {
        *p += 0.05 * rng.sample::<f64, _>(StandardNormal);
    }
    params[net.log_std_index()] = -0.4;
    let batch = GradBatch::random(&net, &params, &[5, 3], &mut rng);
    let cfg = PpoConfig::default();
    let views = batch.views();
    let mut grad = vec![0.0; params.len()];
    ppo_loss(&net, &params, &views, &cfg, Some(&mut grad)).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut idx: Vec<usize> = (0..n_check - 1).map(|_| rng.random_range(0..params.len())).collect();
    idx.push(net.log_std_index());
    for i in idx {
        let mut p = params.clone();
        p[i] = params[i] + h;
        let up = ppo_loss(&net, &p, &views, &cfg, None).unwrap().total;
        p[i] = params[i] - h;
        let down = ppo_loss(&net, &p, &views, &cfg, None).unwrap().total;
        let fd = (up - down) / (2.0 * h);
        let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

