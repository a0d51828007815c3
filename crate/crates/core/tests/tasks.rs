mod common;

use std::collections::HashMap;

use adosim::geometry::{to_curvilinear, Pose2};
use adosim::tasks::{
    lane_reward, Env, EnvConfig, ObservationMode, TaskError, TaskKind, TaskSpec, Terminal,
    PRIVILEGED_DIM,
};
use adosim::trace::nearest_frame;

#[test]
fn scripted_episodes_recompute_exactly() {
    let trace = common::curved_trace();
    let suite = common::scripted_suite(&trace);
    let mut causes: HashMap<Terminal, usize> = HashMap::new();
    for (i, (cfg, rec)) in suite.iter().enumerate() {
        if let Err(e) = common::recheck_record(cfg, &trace, rec) {
            panic!("episode {i} ({:?}): {e}", cfg.task.task);
        }
        *causes.entry(rec.terminal).or_default() += 1;
    }
    println!("{causes:?}");
    for t in [Terminal::Collision, Terminal::OffLane, Terminal::OffRotation, Terminal::Passed, Terminal::Timeout] {
        assert!(causes.contains_key(&t), "no {t:?} episode in {causes:?}");
    }
}

#[test]
fn lane_reward_boundaries() {
    let z = TaskSpec::default().z_lat;
    assert_eq!(lane_reward(0.0, z), 1.0);
    assert_eq!(lane_reward(z / 2.0, z), 0.75);
    assert_eq!(lane_reward(z, z), 0.0);
    assert_eq!(lane_reward(-z / 2.0, z), 0.75);
}

#[test]
fn resets_start_on_trace_within_bounds() {
    let trace = common::curved_trace();
    for task in [TaskKind::LaneFollow, TaskKind::CarFollow, TaskKind::Overtake] {
        let cfg = common::task_config(task, 400);
        let spec = cfg.task.clone();
        let mut env = Env::new(cfg.clone(), trace.clone(), 9).unwrap();
        let need = cfg.required_length();
        for _ in 0..1000 {
            env.reset();
            let w = env.world();
            let ep = &w.episode;
            assert!(trace.arclength()[ep.start_frame] + need <= trace.total_length());
            assert_eq!(w.ego.pose(), trace.frame(ep.start_frame).pose);
            assert_eq!(w.q.q_lat, 0.0);
            match task {
                TaskKind::LaneFollow => assert!(ep.ado_start.is_none() && w.ado.is_none()),
                _ => {
                    let ado = w.ado.as_ref().unwrap();
                    assert!(ep.init_gap >= spec.gap_range[0] && ep.init_gap <= spec.gap_range[1]);
                    let l = ep.init_lateral.abs();
                    assert!(l >= spec.lateral_range[0] && l <= spec.lateral_range[1]);
                    let v = ep.ado_speed.unwrap();
                    assert!(v >= spec.speed_range[0] && v <= spec.speed_range[1]);
                    if task == TaskKind::Overtake {
                        let m = ep.ego_speed - v;
                        assert!(m >= spec.overtake_margin[0] - 1e-12 && m <= spec.overtake_margin[1] + 1e-12);
                    }
                    // the ado sits at the sampled gap and lateral shift along the centerline
                    let base = env.centerline().pose_at(trace.arclength()[ep.start_frame] + ep.init_gap);
                    let q = to_curvilinear(&base, &ado.state.pose());
                    assert!((q.q_lat - ep.init_lateral).abs() < 1e-9 && q.q_long.abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn deterministic_in_seed() {
    let trace = common::curved_trace();
    let cfg = common::task_config(TaskKind::Overtake, 400);
    let a = common::scripted_episode(&cfg, &trace, 5, common::Script::Weave(0.1));
    let b = common::scripted_episode(&cfg, &trace, 5, common::Script::Weave(0.1));
    assert_eq!(a, b);
}

#[test]
fn stepping_rules() {
    let trace = common::curved_trace();
    let mut env = Env::new(common::task_config(TaskKind::LaneFollow, 3), trace, 1).unwrap();
    assert!(matches!(env.step(f64::NAN), Err(TaskError::NonFiniteAction(_))));
    for _ in 0..2 {
        assert_eq!(env.step(0.0).unwrap().terminal, Terminal::None);
    }
    assert_eq!(env.step(0.0).unwrap().terminal, Terminal::Timeout);
    assert!(matches!(env.step(0.0), Err(TaskError::EpisodeOver)));
}

#[test]
fn short_trace_is_rejected() {
    let road = adosim::trace::RoadConfig {
        segments: vec![adosim::trace::RoadSegment { length: 50.0, curvature: 0.0 }],
        image_width: 8,
        image_height: 6,
        ..adosim::trace::RoadConfig::default()
    };
    let trace = std::sync::Arc::new(adosim::trace::generate_synthetic_trace(&road, 0).unwrap());
    assert!(matches!(
        Env::new(EnvConfig::default(), trace, 0),
        Err(TaskError::TraceTooShort { .. })
    ));
}

#[test]
fn privileged_observation_matches_state() {
    let trace = common::curved_trace();
    let cfg = common::task_config(TaskKind::Overtake, 400);
    assert_eq!(cfg.observation.mode, ObservationMode::Privileged);
    let mut env = Env::new(cfg.clone(), trace.clone(), 3).unwrap();
    env.set_recording(true);
    env.reset_with_seed(3);
    let mut obs = env.observe();
    for k in 0..60 {
        let w = env.world();
        assert_eq!(obs.len(), PRIVILEGED_DIM);
        let frame = nearest_frame(&trace, &w.ego.pose());
        let q = to_curvilinear(&trace.frame(frame).pose, &w.ego.pose());
        assert_eq!(obs[0], q.q_lat / cfg.task.z_lat);
        assert_eq!(obs[1], q.q_rot / cfg.task.z_rot);
        assert_eq!((obs[2], obs[3]), (w.ego.v, w.ego.delta));
        let ado = w.ado.as_ref().unwrap().state;
        let rel = w.ego.pose().inverse_transform_point(Pose2::new(ado.x, ado.y, 0.0).position());
        assert!((obs[4] - rel.x).abs() < 1e-12 && (obs[5] - rel.y).abs() < 1e-12);
        assert!((obs[7] - (ado.v - w.ego.v)).abs() < 1e-12);
        let s = trace.arclength()[frame] + q.q_long;
        for (j, d) in [5.0, 10.0, 15.0].into_iter().enumerate() {
            assert_eq!(obs[8 + j], env.centerline().curvature_at(s + d));
        }
        let r = env.step(0.02 * (k as f64 * 0.2).sin()).unwrap();
        if r.terminal.is_done() {
            break;
        }
        obs = r.obs;
    }
}
