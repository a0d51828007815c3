use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::obs::{privileged_observation, Augmentation, ObservationConfig, ObservationMode, PixelPipeline};
use super::{
    collision_reward, comfort_reward, follow_reward, lane_reward, overlap_fraction, pass_reward, pure_pursuit,
    terminal_check, RewardTerms, TaskError, TaskKind, TaskSpec, Terminal,
};
use crate::dynamics::{step_rk3, steering_command_to_rate, AgentState, ControlInput, VehicleParams};
use crate::geometry::{footprint_polygon, min_clearance, to_curvilinear, CurvilinearOffset, FootprintDims};
use crate::synthesis::{sample_mesh_spec, synthesize_view, AdoPlacement, MeshLibraryConfig, MeshSpec, RenderedView};
use crate::trace::{reference_path, FrameCursor, ReferencePath, Trace};

/// Road beyond the nominal episode distance kept free at the start.
const START_MARGIN: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub task: TaskSpec,
    pub vehicle: VehicleParams,
    pub dt: f64,
    pub observation: ObservationConfig,
    pub meshes: MeshLibraryConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            vehicle: VehicleParams::default(),
            dt: 0.1,
            observation: ObservationConfig::default(),
            meshes: MeshLibraryConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        self.task.validate()?;
        self.vehicle.validate().map_err(TaskError::BadSpec)?;
        self.meshes.validate().map_err(TaskError::BadSpec)?;
        if !(self.dt > 0.0) {
            return Err(TaskError::BadSpec("dt must be positive".into()));
        }
        let o = &self.observation;
        if o.mode == ObservationMode::Pixels && (o.width == 0 || o.height == 0) {
            return Err(TaskError::BadSpec("pixel observation size must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.augment) {
            return Err(TaskError::BadSpec("augment amplitude must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn max_ego_speed(&self) -> f64 {
        let t = &self.task;
        match t.task {
            TaskKind::Overtake => t.speed_range[1] + t.overtake_margin[1],
            _ => t.speed_range[1],
        }
    }

    /// Road length an episode may consume from its start frame.
    pub fn required_length(&self) -> f64 {
        let t = &self.task;
        let drive = t.max_steps as f64 * self.dt * self.max_ego_speed();
        let ado = if t.task.has_ado() { t.gap_range[1] } else { 0.0 };
        drive + ado + t.pursuit.lookahead + START_MARGIN
    }
}

/// Randomized episode parameters, kept with every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub task: TaskKind,
    pub start_frame: usize,
    pub ego_start: AgentState,
    pub ado_start: Option<AgentState>,
    /// Initial longitudinal gap to the ado along the road (0 without ado).
    pub init_gap: f64,
    /// Initial signed lateral shift of the ado (0 without ado).
    pub init_lateral: f64,
    pub ego_speed: f64,
    pub ado_speed: Option<f64>,
    /// Mean |curvature| of the road over the nominal episode distance.
    pub curvature: f64,
    pub mesh: Option<MeshSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdoState {
    pub state: AgentState,
    pub mesh: MeshSpec,
    /// Distance traveled, starting from the initial gap so that it shares
    /// its origin with the ego's.
    pub arclength: f64,
    /// Lateral offset of the centerline copy it is pursuing.
    pub path_offset: f64,
    pub path_hint: Option<usize>,
    /// Step at which a car-follow ado picks a new lane offset.
    pub next_lane_change: u32,
}

impl AdoState {
    pub fn dims(&self) -> FootprintDims {
        FootprintDims {
            length: self.mesh.length,
            width: self.mesh.width,
        }
    }
}

/// Complete mutable environment state; serializing it suspends an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub rng: ChaCha8Rng,
    pub episode: EpisodeConfig,
    pub ego: AgentState,
    pub ego_arclength: f64,
    pub ado: Option<AdoState>,
    /// Last three steering commands, oldest first.
    pub steer_history: Vec<f64>,
    pub step: u32,
    pub cursor: FrameCursor,
    pub frame: usize,
    pub q: CurvilinearOffset,
    pub augmentation: Augmentation,
    /// Car following: ego start, then every ado pose.
    pub trail: Option<ReferencePath>,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub frame: usize,
    pub q: CurvilinearOffset,
    /// Undilated ego-ado overlap over the ego area.
    pub overlap: f64,
    pub clearance: Option<f64>,
    /// Lateral offset from the front car's trail (car following).
    pub follow_lat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub terms: RewardTerms,
    pub terminal: Terminal,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub action: f64,
    /// Action after clamping to the steering limit.
    pub steer_cmd: f64,
    pub ego: AgentState,
    pub ado: Option<AgentState>,
    pub ego_arclength: f64,
    pub ado_arclength: Option<f64>,
    #[serde(flatten)]
    pub info: StepInfo,
    pub terms: RewardTerms,
    pub reward: f64,
    pub terminal: Terminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub config: EpisodeConfig,
    pub steps: Vec<StepRecord>,
    pub terminal: Terminal,
}

impl EpisodeRecord {
    /// Whether any step had ego-ado overlap.
    pub fn intervened(&self) -> bool {
        self.steps.iter().any(|s| s.info.overlap > 0.0)
    }
}

/// One driving environment over a shared trace.
#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    trace: Arc<Trace>,
    centerline: Arc<ReferencePath>,
    starts: usize,
    world: World,
    ado_path: Option<ReferencePath>,
    recording: bool,
    record: Option<EpisodeRecord>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

fn advance(s: &AgentState, cmd: f64, p: &VehicleParams, dt: f64) -> (AgentState, f64) {
    let u = ControlInput::new(steering_command_to_rate(cmd, s, dt, &p.limits), 0.0);
    let next = step_rk3(s, &u, p, dt);
    let ds = ((next.x - s.x).powi(2) + (next.y - s.y).powi(2)).sqrt();
    (next, ds)
}

impl Env {
    /// Builds an environment and starts its first episode from `seed`.
    pub fn new(cfg: EnvConfig, trace: Arc<Trace>, seed: u64) -> Result<Self, TaskError> {
        let centerline = Arc::new(reference_path(&trace, 0.0));
        Self::with_centerline(cfg, trace, centerline, seed)
    }

    /// Like [`Env::new`] but shares a precomputed centerline.
    pub fn with_centerline(
        cfg: EnvConfig,
        trace: Arc<Trace>,
        centerline: Arc<ReferencePath>,
        seed: u64,
    ) -> Result<Self, TaskError> {
        cfg.validate()?;
        let need = cfg.required_length();
        let total = trace.total_length();
        let starts = trace.arclength().partition_point(|&s| s + need <= total);
        if starts == 0 {
            return Err(TaskError::TraceTooShort { need, have: total });
        }
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let placeholder = World {
            rng,
            episode: EpisodeConfig {
                task: cfg.task.task,
                start_frame: 0,
                ego_start: AgentState::default(),
                ado_start: None,
                init_gap: 0.0,
                init_lateral: 0.0,
                ego_speed: 0.0,
                ado_speed: None,
                curvature: 0.0,
                mesh: None,
            },
            ego: AgentState::default(),
            ego_arclength: 0.0,
            ado: None,
            steer_history: Vec::new(),
            step: 0,
            cursor: FrameCursor::new(),
            frame: 0,
            q: CurvilinearOffset::default(),
            augmentation: Augmentation::IDENTITY,
            trail: None,
            done: true,
        };
        let mut env = Self {
            cfg,
            trace,
            centerline,
            starts,
            world: placeholder,
            ado_path: None,
            recording: false,
            record: None,
        };
        env.reset();
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn trace(&self) -> &Arc<Trace> {
        &self.trace
    }

    pub fn centerline(&self) -> &ReferencePath {
        &self.centerline
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    /// Number of frames an episode may start from.
    pub fn start_frames(&self) -> usize {
        self.starts
    }

    /// Replaces the state (e.g. when resuming) and rebuilds derived caches.
    pub fn set_world(&mut self, world: World) {
        self.ado_path = world.ado.as_ref().map(|a| self.centerline.offset(a.path_offset));
        self.world = world;
    }

    /// Keeps an [`EpisodeRecord`] of every subsequent episode.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
        self.record = on.then(|| EpisodeRecord {
            config: self.world.episode.clone(),
            steps: Vec::new(),
            terminal: Terminal::None,
        });
    }

    /// The record of the current (or just finished) episode.
    pub fn record(&self) -> Option<&EpisodeRecord> {
        self.record.as_ref()
    }

    pub fn take_record(&mut self) -> Option<EpisodeRecord> {
        self.record.take()
    }

    /// Reseeds the episode generator and starts a new episode.
    pub fn reset_with_seed(&mut self, seed: u64) -> Vec<f64> {
        self.world.rng = ChaCha8Rng::seed_from_u64(seed);
        self.reset()
    }

    /// Starts a new episode with parameters drawn from the environment's generator.
    pub fn reset(&mut self) -> Vec<f64> {
        let spec = self.cfg.task.clone();
        let rng = &mut self.world.rng;
        let start_frame = rng.random_range(0..self.starts);
        let (ego_speed, ado_speed) = match spec.task {
            TaskKind::LaneFollow => (uniform(rng, spec.speed_range), None),
            TaskKind::CarFollow => {
                let v = uniform(rng, spec.speed_range);
                (v, Some(v))
            }
            TaskKind::Overtake => {
                let v = uniform(rng, spec.speed_range);
                (v + uniform(rng, spec.overtake_margin), Some(v))
            }
        };
        let start_pose = self.trace.frame(start_frame).pose;
        let ego = AgentState::at_pose(&start_pose, ego_speed);
        let s0 = self.trace.arclength()[start_frame];

        let mut ado = None;
        let (mut gap, mut lateral) = (0.0, 0.0);
        if let Some(v) = ado_speed {
            gap = uniform(rng, spec.gap_range);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            lateral = sign * uniform(rng, spec.lateral_range);
            let mesh = sample_mesh_spec(&self.cfg.meshes, rng);
            let pose = self.centerline.pose_at(s0 + gap).offset_lateral(lateral);
            let (path_offset, next_lane_change) = match spec.task {
                TaskKind::CarFollow => (
                    lateral.signum() * spec.lane_change_offset,
                    (uniform(rng, spec.lane_change_interval) / self.cfg.dt).round() as u32,
                ),
                _ => (lateral, u32::MAX),
            };
            ado = Some(AdoState {
                state: AgentState::at_pose(&pose, v),
                mesh,
                arclength: gap,
                path_offset,
                path_hint: None,
                next_lane_change,
            });
        }
        let augmentation = match self.cfg.observation.mode {
            ObservationMode::Pixels => Augmentation::sample(rng, self.cfg.observation.augment),
            ObservationMode::Privileged => Augmentation::IDENTITY,
        };

        let drive = spec.max_steps as f64 * self.cfg.dt * ego_speed;
        let samples = drive.ceil().max(1.0) as usize;
        let curvature = (0..samples)
            .map(|k| self.centerline.curvature_at(s0 + k as f64).abs())
            .sum::<f64>()
            / samples as f64;

        self.world.episode = EpisodeConfig {
            task: spec.task,
            start_frame,
            ego_start: ego,
            ado_start: ado.as_ref().map(|a| a.state),
            init_gap: gap,
            init_lateral: lateral,
            ego_speed,
            ado_speed,
            curvature,
            mesh: ado.as_ref().map(|a| a.mesh),
        };
        self.world.trail = match (&ado, spec.task) {
            (Some(a), TaskKind::CarFollow) => Some(ReferencePath::from_poses(vec![ego.pose(), a.state.pose()])),
            _ => None,
        };
        self.ado_path = ado.as_ref().map(|a| self.centerline.offset(a.path_offset));
        self.world.ego = ego;
        self.world.ego_arclength = 0.0;
        self.world.ado = ado;
        self.world.steer_history.clear();
        self.world.step = 0;
        self.world.cursor.reset();
        self.world.frame = self.world.cursor.nearest(&self.trace, &ego.pose());
        self.world.q = to_curvilinear(&self.trace.frame(self.world.frame).pose, &ego.pose());
        self.world.augmentation = augmentation;
        self.world.done = false;
        if self.recording {
            self.record = Some(EpisodeRecord {
                config: self.world.episode.clone(),
                steps: Vec::new(),
                terminal: Terminal::None,
            });
        }
        self.observe()
    }

    /// Observation of the current state.
    pub fn observe(&self) -> Vec<f64> {
        let w = &self.world;
        match self.cfg.observation.mode {
            ObservationMode::Privileged => {
                let ego_s = self.trace.arclength()[w.frame] + w.q.q_long;
                privileged_observation(
                    &self.cfg.task,
                    &w.q,
                    &w.ego,
                    w.ado.as_ref().map(|a| (&a.state, a.mesh.length)),
                    &self.centerline,
                    ego_s,
                )
            }
            ObservationMode::Pixels => {
                let view = self.render_view(true);
                self.pixel_pipeline().observe(&view.image, &w.augmentation)
            }
        }
    }

    pub fn pixel_pipeline(&self) -> PixelPipeline {
        PixelPipeline {
            width: self.cfg.observation.width,
            height: self.cfg.observation.height,
        }
    }

    /// Synthesized ego camera view, optionally without the ado vehicle.
    pub fn render_view(&self, with_ado: bool) -> RenderedView {
        let w = &self.world;
        let frame = self.trace.frame(w.frame);
        let ado = w.ado.as_ref().filter(|_| with_ado).map(|a| AdoPlacement {
            pose: a.state.pose(),
            mesh: &a.mesh,
        });
        synthesize_view(frame, self.trace.rig(), &w.ego.pose(), ado)
    }

    pub fn step(&mut self, action: f64) -> Result<StepResult, TaskError> {
        if !action.is_finite() {
            return Err(TaskError::NonFiniteAction(action));
        }
        if self.world.done {
            return Err(TaskError::EpisodeOver);
        }
        let spec = &self.cfg.task;
        let p = &self.cfg.vehicle;
        let dt = self.cfg.dt;
        let w = &mut self.world;
        let dmax = p.limits.delta_max;
        let cmd = action.clamp(-dmax, dmax);

        if let Some(ado) = w.ado.as_mut() {
            if spec.task == TaskKind::CarFollow && w.step >= ado.next_lane_change {
                let choice = w.rng.random_range(0..3usize);
                ado.path_offset = (choice as f64 - 1.0) * spec.lane_change_offset;
                ado.path_hint = None;
                ado.next_lane_change = w.step + (uniform(&mut w.rng, spec.lane_change_interval) / dt).round().max(1.0) as u32;
                self.ado_path = Some(self.centerline.offset(ado.path_offset));
            }
            let path = self.ado_path.as_ref().expect("ado path exists while the ado does");
            let (ado_cmd, seg) = pure_pursuit(&ado.state, path, ado.path_hint, &spec.pursuit, p);
            ado.path_hint = Some(seg);
            let (next, ds) = advance(&ado.state, ado_cmd, p, dt);
            ado.state = next;
            ado.arclength += ds;
        }
        let (ego, ds) = advance(&w.ego, cmd, p, dt);
        w.ego = ego;
        w.ego_arclength += ds;
        w.step += 1;
        w.steer_history.push(cmd);
        if w.steer_history.len() > 3 {
            w.steer_history.remove(0);
        }
        w.frame = w.cursor.nearest(&self.trace, &ego.pose());
        w.q = to_curvilinear(&self.trace.frame(w.frame).pose, &ego.pose());

        let mut terms = RewardTerms::default();
        let mut follow_lat = None;
        match (&mut w.trail, &w.ado) {
            (Some(trail), Some(ado)) => {
                trail.push(ado.state.pose());
                let (r, lat) = follow_reward(ego.pose().position(), trail, spec.z_lat);
                terms.lane = r;
                follow_lat = Some(lat);
            }
            _ => terms.lane = lane_reward(w.q.q_lat, spec.z_lat),
        }
        let (mut overlap, mut clearance, mut lead) = (0.0, None, None);
        if let Some(ado) = &w.ado {
            let ado_dims = ado.dims();
            overlap = overlap_fraction(&ego, &ado.state, &p.footprint, &ado_dims);
            clearance = Some(min_clearance(
                &footprint_polygon(&ego.pose(), &p.footprint),
                &footprint_polygon(&ado.state.pose(), &ado_dims),
            ));
            terms.collision = collision_reward(&ego, &ado.state, &p.footprint, &ado_dims, &spec.dilation);
            if spec.task == TaskKind::Overtake {
                terms.pass = pass_reward(w.ego_arclength, ado.arclength, spec.z_pass);
                lead = Some(w.ego_arclength - ado.arclength);
            }
        }
        terms.comfort = comfort_reward(&w.steer_history, dt);
        let terminal = terminal_check(&w.q, overlap, lead, w.step, spec);
        let reward = terms.total(spec);
        w.done = terminal.is_done();
        let info = StepInfo {
            frame: w.frame,
            q: w.q,
            overlap,
            clearance,
            follow_lat,
        };
        if let Some(rec) = self.record.as_mut() {
            let w = &self.world;
            rec.steps.push(StepRecord {
                step: w.step,
                action,
                steer_cmd: cmd,
                ego: w.ego,
                ado: w.ado.as_ref().map(|a| a.state),
                ego_arclength: w.ego_arclength,
                ado_arclength: w.ado.as_ref().map(|a| a.arclength),
                info,
                terms,
                reward,
                terminal,
            });
            rec.terminal = terminal;
        }
        Ok(StepResult {
            obs: self.observe(),
            reward,
            terms,
            terminal,
            info,
        })
    }
}
