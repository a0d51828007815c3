//! Offline closed-loop evaluation of a frozen policy and the safety and
//! stability metrics computed from recorded episodes.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{Network, Policy, PolicyError, RecurrentState};
use crate::ppo::derive_seed;
use crate::tasks::{Env, EnvConfig, EpisodeRecord, TaskError};
use crate::trace::{reference_path, Trace};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("no episodes to summarize")]
    Empty,
    #[error("unknown breakdown axis {0:?} (expected road_curvature, front_car_speed or initial_condition)")]
    UnknownAxis(String),
    #[error("axis {axis} is undefined for episode {episode} (no front car)")]
    AxisUnavailable { axis: &'static str, episode: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 100, seed: 0 }
    }
}

/// Evaluation always counts any overlap as a collision.
pub fn eval_env_config(cfg: &EnvConfig) -> EnvConfig {
    let mut c = cfg.clone();
    c.task.overlap_threshold = 0.0;
    c
}

/// Chooses steering commands during evaluation.
pub trait Driver {
    /// Called before the first step of every episode.
    fn begin(&mut self);
    fn act(&mut self, obs: &[f64], env: &Env) -> Result<f64, EvalError>;
}

/// Deterministic policy driver: squashed mean action, carried recurrent state.
pub struct PolicyDriver<'a> {
    net: &'a Network,
    params: &'a [f64],
    state: RecurrentState,
}

impl<'a> PolicyDriver<'a> {
    pub fn new(net: &'a Network, params: &'a [f64]) -> Self {
        Self {
            net,
            params,
            state: net.initial_state(),
        }
    }

    pub fn from_policy(policy: &'a Policy) -> Self {
        Self::new(&policy.net, &policy.params)
    }
}

impl Driver for PolicyDriver<'_> {
    fn begin(&mut self) {
        self.state = self.net.initial_state();
    }

    fn act(&mut self, obs: &[f64], _env: &Env) -> Result<f64, EvalError> {
        let (dist, _, next) = self.net.forward(self.params, obs, &self.state)?;
        self.state = next;
        Ok(dist.mode())
    }
}

impl<F: FnMut(&[f64], &Env) -> f64> Driver for F {
    fn begin(&mut self) {}

    fn act(&mut self, obs: &[f64], env: &Env) -> Result<f64, EvalError> {
        Ok(self(obs, env))
    }
}

/// Runs `n` episodes; episode `i` is initialized from `derive_seed(seed, i)`,
/// so results do not depend on how episodes are scheduled.
pub fn run_eval<D, M>(
    cfg: &EnvConfig,
    trace: Arc<Trace>,
    make_driver: M,
    n: usize,
    seed: u64,
) -> Result<Vec<EpisodeRecord>, EvalError>
where
    D: Driver,
    M: Fn() -> D + Sync,
{
    if n == 0 {
        return Ok(Vec::new());
    }
    let cfg = eval_env_config(cfg);
    let centerline = Arc::new(reference_path(&trace, 0.0));
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut env = Env::with_centerline(cfg.clone(), Arc::clone(&trace), Arc::clone(&centerline), derive_seed(seed, i as u64))?;
            env.set_recording(true);
            let mut driver = make_driver();
            driver.begin();
            let mut obs = env.observe();
            loop {
                let action = driver.act(&obs, &env)?;
                let res = env.step(action)?;
                if res.terminal.is_done() {
                    break;
                }
                obs = res.obs;
            }
            Ok(env.take_record().expect("recording was enabled"))
        })
        .collect()
}

/// Convenience wrapper evaluating a frozen policy.
pub fn run_policy_eval(
    cfg: &EnvConfig,
    trace: Arc<Trace>,
    policy: &Policy,
    n: usize,
    seed: u64,
) -> Result<Vec<EpisodeRecord>, EvalError> {
    run_eval(cfg, trace, || PolicyDriver::from_policy(policy), n, seed)
}

/// Per-episode extrema over the steps before the first overlap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeExtrema {
    pub intervened: bool,
    pub min_clearance: Option<f64>,
    pub max_deviation: Option<f64>,
    pub max_yaw: Option<f64>,
}

pub fn episode_extrema(rec: &EpisodeRecord) -> EpisodeExtrema {
    let cut = rec
        .steps
        .iter()
        .position(|s| s.info.overlap > 0.0)
        .unwrap_or(rec.steps.len());
    let clean = &rec.steps[..cut];
    let fold = |f: &dyn Fn(&crate::tasks::StepRecord) -> Option<f64>, max: bool| {
        clean.iter().filter_map(f).fold(None, |acc: Option<f64>, v| {
            Some(match acc {
                None => v,
                Some(a) if max => a.max(v),
                Some(a) => a.min(v),
            })
        })
    };
    EpisodeExtrema {
        intervened: cut < rec.steps.len(),
        min_clearance: fold(&|s| s.info.clearance, false),
        max_deviation: fold(&|s| Some(s.info.q.q_lat.abs()), true),
        max_yaw: fold(&|s| Some(s.info.q.q_rot.abs()), true),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    /// Fraction of episodes with any footprint overlap.
    pub intervention: f64,
    /// Mean over episodes of the per-episode minimum clearance (m); `None`
    /// without a front car.
    pub min_clearance: Option<f64>,
    /// Mean of per-episode max |q_lat| (m).
    pub max_deviation: Option<f64>,
    /// Mean of per-episode max |q_rot| (rad).
    pub max_yaw: Option<f64>,
    pub episodes: usize,
}

pub const SUMMARY_HEADER: &str = "intervention,min_clearance,max_deviation,max_yaw";

fn opt_csv(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsSummary {
    /// Row matching [`SUMMARY_HEADER`].
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.intervention,
            opt_csv(self.min_clearance),
            opt_csv(self.max_deviation),
            opt_csv(self.max_yaw)
        )
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn metrics(records: &[EpisodeRecord]) -> Result<MetricsSummary, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let ex: Vec<EpisodeExtrema> = records.iter().map(episode_extrema).collect();
    let n = ex.len();
    Ok(MetricsSummary {
        intervention: ex.iter().filter(|e| e.intervened).count() as f64 / n as f64,
        min_clearance: mean_of(ex.iter().map(|e| e.min_clearance)),
        max_deviation: mean_of(ex.iter().map(|e| e.max_deviation)),
        max_yaw: mean_of(ex.iter().map(|e| e.max_yaw)),
        episodes: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    RoadCurvature,
    FrontCarSpeed,
    /// Absolute initial lateral offset between the two cars.
    InitialCondition,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::RoadCurvature, Axis::FrontCarSpeed, Axis::InitialCondition];

    pub fn name(&self) -> &'static str {
        match self {
            Axis::RoadCurvature => "road_curvature",
            Axis::FrontCarSpeed => "front_car_speed",
            Axis::InitialCondition => "initial_condition",
        }
    }

    pub fn parse(s: &str) -> Result<Self, EvalError> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| EvalError::UnknownAxis(s.to_string()))
    }

    pub fn value(&self, rec: &EpisodeRecord) -> Option<f64> {
        let c = &rec.config;
        match self {
            Axis::RoadCurvature => Some(c.curvature),
            Axis::FrontCarSpeed => c.ado_speed,
            Axis::InitialCondition => c.ado_start.map(|_| c.init_lateral.abs()),
        }
    }
}

pub const LEVELS: [&str; 4] = ["easy", "normal", "hard", "challenging"];

/// Linearly interpolated sample quantile of sorted data (Hyndman-Fan type 7).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub axis: Axis,
    pub level: &'static str,
    /// Value range `(lower, upper]` of the bin; the first bin also includes its lower bound.
    pub lower: f64,
    pub upper: f64,
    pub episodes: usize,
    /// `None` for an empty bin.
    pub summary: Option<MetricsSummary>,
}

pub const BREAKDOWN_HEADER: &str =
    "axis,level,lower,upper,episodes,intervention,min_clearance,max_deviation,max_yaw";

impl BinSummary {
    pub fn csv_row(&self) -> String {
        let metrics = self.summary.map(|s| s.csv_row()).unwrap_or_else(|| ",,,".into());
        format!(
            "{},{},{},{},{},{}",
            self.axis.name(),
            self.level,
            self.lower,
            self.upper,
            self.episodes,
            metrics
        )
    }
}

/// Quartile cut points `[min, q1, q2, q3, max]` and the bin (0..4) of each value.
pub fn quartile_bins(values: &[f64]) -> ([f64; 5], Vec<usize>) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let edges = [
        sorted[0],
        quantile(&sorted, 0.25),
        quantile(&sorted, 0.5),
        quantile(&sorted, 0.75),
        sorted[sorted.len() - 1],
    ];
    let bins = values
        .iter()
        .map(|&v| (1..4).find(|&k| v <= edges[k]).map_or(3, |k| k - 1))
        .collect();
    (edges, bins)
}

/// Per-axis quartile breakdown into easy/normal/hard/challenging.
pub fn breakdown(records: &[EpisodeRecord], axes: &[Axis]) -> Result<Vec<BinSummary>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut out = Vec::new();
    for &axis in axes {
        let values = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                axis.value(r).ok_or(EvalError::AxisUnavailable {
                    axis: axis.name(),
                    episode: i,
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let (edges, bins) = quartile_bins(&values);
        for (k, level) in LEVELS.iter().enumerate() {
            let members: Vec<EpisodeRecord> = records
                .iter()
                .zip(&bins)
                .filter(|(_, &b)| b == k)
                .map(|(r, _)| r.clone())
                .collect();
            out.push(BinSummary {
                axis,
                level,
                lower: edges[k],
                upper: edges[k + 1],
                episodes: members.len(),
                summary: if members.is_empty() { None } else { Some(metrics(&members)?) },
            });
        }
    }
    Ok(out)
}

/// For each trace frame, the fraction of visiting episodes that intervened;
/// `None` for frames no episode visited.
pub fn per_position_intervention(records: &[EpisodeRecord], n_frames: usize) -> Vec<Option<f64>> {
    let mut visits = vec![0u32; n_frames];
    let mut hits = vec![0u32; n_frames];
    let mut seen = vec![false; n_frames];
    for rec in records {
        seen.fill(false);
        let frames = std::iter::once(rec.config.start_frame).chain(rec.steps.iter().map(|s| s.info.frame));
        for f in frames.filter(|&f| f < n_frames) {
            seen[f] = true;
        }
        let hit = rec.intervened();
        for (f, &s) in seen.iter().enumerate() {
            if s {
                visits[f] += 1;
                hits[f] += u32::from(hit);
            }
        }
    }
    visits
        .iter()
        .zip(&hits)
        .map(|(&v, &h)| (v > 0).then(|| h as f64 / v as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearanceHistogram {
    pub bin_width: f64,
    pub range: f64,
    /// Steps with clearance in `[k w, (k + 1) w)`.
    pub counts: Vec<u64>,
    /// `(threshold, fraction of trials whose minimum clearance is <= threshold)`
    /// at every bin's left edge, closed by `(range, fraction below range)`.
    pub recall: Vec<(f64, f64)>,
}

impl ClearanceHistogram {
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin_left,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{}", k as f64 * self.bin_width, c);
        }
        s
    }

    pub fn recall_csv(&self) -> String {
        let mut s = String::from("threshold,recall\n");
        for (t, r) in &self.recall {
            let _ = writeln!(s, "{t},{r}");
        }
        s
    }
}

pub fn clearance_histogram(records: &[EpisodeRecord], bin_width: f64, range: f64) -> ClearanceHistogram {
    let n_bins = (range / bin_width).round().max(1.0) as usize;
    let mut counts = vec![0u64; n_bins];
    let mut minima = Vec::new();
    for rec in records {
        let mut min: Option<f64> = None;
        for c in rec.steps.iter().filter_map(|s| s.info.clearance) {
            min = Some(min.map_or(c, |m: f64| m.min(c)));
            if c < range {
                let k = ((c / bin_width).floor() as usize).min(n_bins - 1);
                counts[k] += 1;
            }
        }
        minima.extend(min);
    }
    let trials = minima.len().max(1) as f64;
    let mut recall: Vec<(f64, f64)> = (0..n_bins)
        .map(|k| {
            let t = k as f64 * bin_width;
            (t, minima.iter().filter(|&&m| m <= t).count() as f64 / trials)
        })
        .collect();
    recall.push((range, minima.iter().filter(|&&m| m < range).count() as f64 / trials));
    if minima.is_empty() {
        for r in &mut recall {
            r.1 = 0.0;
        }
    }
    ClearanceHistogram {
        bin_width,
        range,
        counts,
        recall,
    }
}

/// JSON-lines encoding: per episode a header line followed by one line per step.
pub fn records_jsonl(records: &[EpisodeRecord]) -> Result<String, serde_json::Error> {
    let mut out = String::new();
    for (i, rec) in records.iter().enumerate() {
        let header = serde_json::json!({
            "type": "episode",
            "episode": i,
            "config": rec.config,
            "terminal": rec.terminal,
            "steps": rec.steps.len(),
        });
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for step in &rec.steps {
            let mut v = serde_json::to_value(step)?;
            if let Some(obj) = v.as_object_mut() {
                obj.insert("type".into(), "step".into());
                obj.insert("episode".into(), i.into());
            }
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn summary_csv(summary: Option<&MetricsSummary>) -> String {
    match summary {
        Some(s) => format!("{SUMMARY_HEADER}\n{}\n", s.csv_row()),
        None => format!("{SUMMARY_HEADER}\n"),
    }
}

pub fn breakdown_csv(bins: &[BinSummary]) -> String {
    let mut s = format!("{BREAKDOWN_HEADER}\n");
    for b in bins {
        s.push_str(&b.csv_row());
        s.push('\n');
    }
    s
}
