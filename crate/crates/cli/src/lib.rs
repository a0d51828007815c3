//! Run configuration and subcommand implementations behind the `adosim` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use adosim::eval::{
    breakdown, breakdown_csv, clearance_histogram, metrics, per_position_intervention, records_jsonl,
    run_policy_eval, summary_csv, Axis, EvalConfig, EvalError, PolicyDriver,
};
use adosim::policy::{load_checkpoint, NetworkConfig, Policy, PolicyError};
use adosim::ppo::{load_state, PpoConfig, TrainError, Trainer};
use adosim::raster::save_mask_png;
use adosim::tasks::{pure_pursuit, EnvConfig, TaskError};
use adosim::trace::{generate_synthetic_trace, load_trace, save_trace, RoadConfig, Trace, TraceError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NAN: i32 = 4;
pub const EXIT_MISMATCH: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("training aborted: {0}")]
    NonFinite(String),
    #[error("checkpoint does not match config: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::NonFinite(_) => EXIT_NAN,
            CliError::Mismatch(_) => EXIT_MISMATCH,
            CliError::Other(_) => 1,
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Io { ref path, .. } => CliError::Io {
                path: PathBuf::from(path),
                msg: e.to_string(),
            },
            TraceError::BadRoad(_) | TraceError::BadRig(_) => CliError::Config(e.to_string()),
            other => CliError::Io {
                path: PathBuf::new(),
                msg: other.to_string(),
            },
        }
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::TraceTooShort { .. } | TaskError::BadSpec(_) => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Io { ref path, .. } => CliError::Io {
                path: PathBuf::from(path),
                msg: e.to_string(),
            },
            PolicyError::BadConfig(m) => CliError::Config(m),
            PolicyError::Mismatch(_) | PolicyError::ShapeMismatch { .. } | PolicyError::BadCheckpoint(_) => {
                CliError::Mismatch(e.to_string())
            }
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Policy(p) => p.into(),
            TrainError::Task(t) => t.into(),
            TrainError::NonFinite(m) => CliError::NonFinite(m),
            TrainError::Io { path, source } => CliError::io(&path, source),
            TrainError::Resume(m) => CliError::Mismatch(m),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Task(t) => t.into(),
            EvalError::Policy(p) => p.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

/// Where the trace comes from: a directory on disk or a generated road.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceSource {
    Path(PathBuf),
    Synthetic {
        #[serde(default)]
        road: RoadConfig,
        #[serde(default)]
        seed: u64,
    },
}

impl Default for TraceSource {
    fn default() -> Self {
        TraceSource::Synthetic {
            road: RoadConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub trace: TraceSource,
    pub env: EnvConfig,
    pub network: NetworkConfig,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
    /// Seed of the training run.
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            trace: TraceSource::default(),
            env: EnvConfig::default(),
            network: NetworkConfig::default(),
            ppo: PpoConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match &self.trace {
            TraceSource::Path(p) if !p.is_dir() => {
                return Err(CliError::Config(format!("trace directory {} does not exist", p.display())))
            }
            TraceSource::Synthetic { road, .. } => road.validate()?,
            _ => {}
        }
        self.env.validate()?;
        self.ppo.validate().map_err(CliError::Config)?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(CliError::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }

    /// Pretty JSON with every default filled in.
    pub fn materialized(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn trace(&self) -> Result<Arc<Trace>, CliError> {
        Ok(Arc::new(match &self.trace {
            TraceSource::Path(p) => load_trace(p)?,
            TraceSource::Synthetic { road, seed } => generate_synthetic_trace(road, *seed)?,
        }))
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Size of the worker thread pool, from `ADO_SIM_THREADS` when set.
pub fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("ADO_SIM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("ADO_SIM_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    Ok(())
}

pub struct GenTraceReport {
    pub frames: usize,
    pub length: f64,
}

pub fn gen_trace(road: &Path, out: &Path, seed: u64) -> Result<GenTraceReport, CliError> {
    let text = fs::read_to_string(road).map_err(|e| CliError::io(road, e))?;
    let cfg: RoadConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", road.display())))?;
    let trace = generate_synthetic_trace(&cfg, seed)?;
    save_trace(&trace, out)?;
    Ok(GenTraceReport {
        frames: trace.len(),
        length: trace.total_length(),
    })
}

pub fn inspect_trace(dir: &Path) -> Result<String, CliError> {
    let trace = load_trace(dir)?;
    let rig = trace.rig();
    let frames = trace.frames();
    let duration = frames.last().map_or(0.0, |f| f.timestamp) - frames.first().map_or(0.0, |f| f.timestamp);
    Ok(format!(
        "frames: {}\narclength: {:.3} m\nduration: {:.3} s\nimage: {}x{}\nintrinsics: fx={} fy={} cx={} cy={}",
        trace.len(),
        trace.total_length(),
        duration,
        rig.width,
        rig.height,
        rig.fx,
        rig.fy,
        rig.cx,
        rig.cy
    ))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Stop after this many updates in this invocation (the run stays resumable).
    pub max_updates: Option<u64>,
    pub quiet: bool,
}

/// Trains per `cfg`, writing under `cfg.output_dir`. Returns the last checkpoint path.
pub fn train(cfg: &RunConfig, resume: Option<&Path>, opts: TrainOptions) -> Result<PathBuf, CliError> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_file(&out.join("config.json"), cfg.materialized())?;
    let trace = cfg.trace()?;
    let mut trainer = match resume {
        None => Trainer::new(cfg.ppo.clone(), cfg.env.clone(), &cfg.network, trace, cfg.seed)?,
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let state = load_state(path)?;
            if state.seed != cfg.seed {
                return Err(CliError::Mismatch(format!(
                    "checkpoint was trained with seed {}, config has {}",
                    state.seed, cfg.seed
                )));
            }
            Trainer::resume(cfg.ppo.clone(), cfg.env.clone(), &cfg.network, trace, ckpt, state)?
        }
    };
    let total = cfg.ppo.num_updates();
    let stop = opts
        .max_updates
        .map_or(total, |n| (trainer.update_count() + n).min(total));
    let quiet = opts.quiet;
    trainer.run_until(out, stop, |row| {
        if !quiet {
            let ret = row.mean_return.map_or("-".to_string(), |r| format!("{r:.2}"));
            println!(
                "update {}/{} steps {} mean_return {} kl {:.4} clip_frac {:.3}",
                row.update, total, row.steps, ret, row.kl, row.clip_frac
            );
        }
    })?;
    Ok(out
        .join("checkpoints")
        .join(format!("ckpt_{:06}.bin", trainer.update_count())))
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub episodes: usize,
    pub summary: Option<adosim::eval::MetricsSummary>,
    pub out_dir: PathBuf,
}

/// Evaluates a checkpoint, writing records and summaries to `<output_dir>/eval`.
pub fn eval(cfg: &RunConfig, ckpt: &Path, episodes: usize, seed: u64) -> Result<EvalReport, CliError> {
    let policy = load_policy(cfg, ckpt)?;
    let trace = cfg.trace()?;
    let records = run_policy_eval(&cfg.env, Arc::clone(&trace), &policy, episodes, seed)?;
    let out = cfg.output_dir.join("eval");
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let jsonl = records_jsonl(&records).map_err(|e| CliError::Other(e.to_string()))?;
    write_file(&out.join("records.jsonl"), jsonl)?;
    let summary = if records.is_empty() { None } else { Some(metrics(&records)?) };
    write_file(&out.join("summary.csv"), summary_csv(summary.as_ref()))?;
    let axes: Vec<Axis> = if cfg.env.task.task.has_ado() {
        Axis::ALL.to_vec()
    } else {
        vec![Axis::RoadCurvature]
    };
    let bins = if records.is_empty() { Vec::new() } else { breakdown(&records, &axes)? };
    write_file(&out.join("breakdown.csv"), breakdown_csv(&bins))?;
    let hist = clearance_histogram(&records, 0.1, 2.0);
    write_file(&out.join("clearance_histogram.csv"), hist.histogram_csv())?;
    write_file(&out.join("clearance_recall.csv"), hist.recall_csv())?;
    let mut pos = String::from("frame,intervention_rate\n");
    for (f, r) in per_position_intervention(&records, trace.len()).iter().enumerate() {
        if let Some(r) = r {
            pos.push_str(&format!("{f},{r}\n"));
        }
    }
    write_file(&out.join("per_position.csv"), pos)?;
    Ok(EvalReport {
        episodes: records.len(),
        summary,
        out_dir: out,
    })
}

pub fn load_policy(cfg: &RunConfig, ckpt: &Path) -> Result<Policy, CliError> {
    let c = load_checkpoint(ckpt)?;
    let net = adosim::policy::Network::new(&cfg.network, &cfg.env.observation, cfg.env.vehicle.limits.delta_max)?;
    c.check_matches(&net)?;
    Ok(Policy { net, params: c.params })
}

#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub steps: usize,
    pub terminal: String,
}

/// Rolls one episode (policy-driven with a checkpoint, otherwise pure pursuit
/// along the lane center) and writes one PNG per step plus `meta.json`.
pub fn replay(cfg: &RunConfig, ckpt: Option<&Path>, seed: u64, out: &Path, no_ado: bool) -> Result<ReplayReport, CliError> {
    let trace = cfg.trace()?;
    let policy = ckpt.map(|p| load_policy(cfg, p)).transpose()?;
    let mut env = adosim::tasks::Env::new(adosim::eval::eval_env_config(&cfg.env), Arc::clone(&trace), seed)?;
    env.set_recording(true);
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut policy_driver = policy.as_ref().map(PolicyDriver::from_policy);
    let mut hint = None;
    let mut obs = env.observe();
    let mut k = 0usize;
    loop {
        let action = match policy_driver.as_mut() {
            Some(d) => adosim::eval::Driver::act(d, &obs, &env)?,
            None => {
                let (cmd, h) = pure_pursuit(&env.world().ego, env.centerline(), hint, &cfg.env.task.pursuit, &cfg.env.vehicle);
                hint = Some(h);
                cmd
            }
        };
        let res = env.step(action)?;
        let view = env.render_view(!no_ado);
        let png = out.join(format!("{k:04}.png"));
        view.image.save_png(&png).map_err(|e| CliError::io(&png, e))?;
        if !no_ado {
            let mask = out.join("fg").join(format!("{k:04}.png"));
            fs::create_dir_all(out.join("fg")).map_err(|e| CliError::io(out, e))?;
            save_mask_png(&mask, view.image.width, view.image.height, &view.fg).map_err(|e| CliError::io(&mask, e))?;
        }
        k += 1;
        if res.terminal.is_done() {
            break;
        }
        obs = res.obs;
    }
    let record = env.take_record().expect("recording was enabled");
    let meta = serde_json::to_string_pretty(&record).map_err(|e| CliError::Other(e.to_string()))?;
    write_file(&out.join("meta.json"), meta)?;
    Ok(ReplayReport {
        steps: k,
        terminal: record.terminal.name().to_string(),
    })
}
