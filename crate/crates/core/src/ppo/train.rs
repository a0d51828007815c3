use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::rollout::WorkerState;
use super::{collect_rollouts, normalize_advantages, ppo_loss, EnvWorker, EpisodeStat, LossStats, PpoConfig, RolloutBuffer};
use crate::policy::{save_checkpoint, Adam, Checkpoint, Network, NetworkConfig, PolicyError};
use crate::tasks::{Env, EnvConfig, TaskError};
use crate::trace::{reference_path, Trace};

pub const LOG_HEADER: &str = "update,steps,mean_return,mean_ep_len,surrogate,value_loss,entropy,clip_frac,kl";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("non-finite value during training: {0}")]
    NonFinite(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot resume: {0}")]
    Resume(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Independent stream `k` derived from a run seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub update: u64,
    pub steps: u64,
    /// `None` when no episode finished during the update's rollout.
    pub mean_return: Option<f64>,
    pub mean_ep_len: Option<f64>,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub kl: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.update,
            self.steps,
            opt(self.mean_return),
            opt(self.mean_ep_len),
            self.surrogate,
            self.value_loss,
            self.entropy,
            self.clip_frac,
            self.kl
        )
    }
}

/// Everything besides parameters and optimizer moments needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub seed: u64,
    pub update: u64,
    pub steps: u64,
    pub rng: ChaCha8Rng,
    pub workers: Vec<WorkerState>,
    pub episodes: Vec<EpisodeStat>,
    pub log: Vec<LogRow>,
}

pub struct Trainer {
    cfg: PpoConfig,
    net: Network,
    params: Vec<f64>,
    adam: Adam,
    workers: Vec<EnvWorker>,
    rng: ChaCha8Rng,
    seed: u64,
    update: u64,
    steps: u64,
    episodes: Vec<EpisodeStat>,
    log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(
        cfg: PpoConfig,
        env_cfg: EnvConfig,
        net_cfg: &NetworkConfig,
        trace: Arc<Trace>,
        seed: u64,
    ) -> Result<Self, TrainError> {
        cfg.validate().map_err(TrainError::Config)?;
        let net = Network::new(net_cfg, &env_cfg.observation, env_cfg.vehicle.limits.delta_max)?;
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0)));
        let centerline = Arc::new(reference_path(&trace, 0.0));
        let workers = (0..cfg.num_envs as u64)
            .map(|i| {
                let env = Env::with_centerline(
                    env_cfg.clone(),
                    Arc::clone(&trace),
                    Arc::clone(&centerline),
                    derive_seed(seed, 2 + 2 * i),
                )?;
                Ok(EnvWorker::new(env, &net, ChaCha8Rng::seed_from_u64(derive_seed(seed, 3 + 2 * i))))
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        let adam = Adam::new(net.n_params(), cfg.adam);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)),
            cfg,
            net,
            params,
            adam,
            workers,
            seed,
            update: 0,
            steps: 0,
            episodes: Vec::new(),
            log: Vec::new(),
        })
    }

    /// Continues from a checkpoint (with optimizer moments) and its trainer state.
    pub fn resume(
        cfg: PpoConfig,
        env_cfg: EnvConfig,
        net_cfg: &NetworkConfig,
        trace: Arc<Trace>,
        ckpt: Checkpoint,
        state: TrainerState,
    ) -> Result<Self, TrainError> {
        let mut t = Self::new(cfg, env_cfg, net_cfg, trace, state.seed)?;
        ckpt.check_matches(&t.net)?;
        if ckpt.header.update != state.update || ckpt.header.steps != state.steps {
            return Err(TrainError::Resume(format!(
                "checkpoint is at update {} but trainer state is at update {}",
                ckpt.header.update, state.update
            )));
        }
        if state.workers.len() != t.workers.len() {
            return Err(TrainError::Resume(format!(
                "state has {} environments, config has {}",
                state.workers.len(),
                t.workers.len()
            )));
        }
        t.adam = ckpt
            .adam
            .ok_or_else(|| TrainError::Resume("checkpoint has no optimizer state".into()))?;
        t.params = ckpt.params;
        for (w, s) in t.workers.iter_mut().zip(state.workers) {
            w.restore(s);
        }
        t.rng = state.rng;
        t.update = state.update;
        t.steps = state.steps;
        t.episodes = state.episodes;
        t.log = state.log;
        Ok(t)
    }

    pub fn config(&self) -> &PpoConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn update_count(&self) -> u64 {
        self.update
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Every finished episode so far, ordered by update then environment.
    pub fn episodes(&self) -> &[EpisodeStat] {
        &self.episodes
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn finished(&self) -> bool {
        self.update >= self.cfg.num_updates()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.net, self.params.clone(), Some(self.adam.clone()), self.update, self.steps)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            seed: self.seed,
            update: self.update,
            steps: self.steps,
            rng: self.rng.clone(),
            workers: self.workers.iter().map(EnvWorker::snapshot).collect(),
            episodes: self.episodes.clone(),
            log: self.log.clone(),
        }
    }

    /// One collect + optimize phase.
    pub fn step(&mut self) -> Result<LogRow, TrainError> {
        let mut buf = collect_rollouts(
            &mut self.workers,
            &self.net,
            &self.params,
            self.cfg.capacity,
            self.cfg.bptt,
            self.update + 1,
        )?;
        buf.finish(self.cfg.gamma, self.cfg.lambda);
        let stats = self.optimize(&buf)?;
        self.update += 1;
        self.steps += buf.len() as u64;
        let n_ep = buf.episodes.len();
        let mean = |f: &dyn Fn(&EpisodeStat) -> f64| {
            (n_ep > 0).then(|| buf.episodes.iter().map(f).sum::<f64>() / n_ep as f64)
        };
        let row = LogRow {
            update: self.update,
            steps: self.steps,
            mean_return: mean(&|e| e.ret),
            mean_ep_len: mean(&|e| e.len as f64),
            surrogate: stats.surrogate,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_frac: stats.clip_frac,
            kl: stats.kl,
        };
        self.episodes.extend(buf.episodes);
        self.log.push(row.clone());
        Ok(row)
    }

    /// Minibatch gradient steps over the buffer; returns statistics averaged
    /// over the minibatches processed.
    fn optimize(&mut self, buf: &RolloutBuffer) -> Result<LossStats, TrainError> {
        let mut sum = LossStats::default();
        let mut count = 0usize;
        let mut order: Vec<usize> = (0..buf.segments.len()).collect();
        'epochs: for _ in 0..self.cfg.epochs {
            order.shuffle(&mut self.rng);
            let mut start = 0;
            while start < order.len() {
                let mut end = start;
                let mut size = 0;
                while end < order.len() && size < self.cfg.minibatch {
                    size += buf.segments[order[end]].len;
                    end += 1;
                }
                let batch = &order[start..end];
                start = end;

                let mut adv: Vec<f64> = batch
                    .iter()
                    .flat_map(|&i| buf.segment_advantages(&buf.segments[i]).iter().copied())
                    .collect();
                normalize_advantages(&mut adv);
                let mut views = Vec::with_capacity(batch.len());
                let mut off = 0;
                for &i in batch {
                    let seg = &buf.segments[i];
                    views.push(buf.view(seg, &adv[off..off + seg.len]));
                    off += seg.len;
                }

                let mut grad = vec![0.0; self.params.len()];
                let stats = ppo_loss(&self.net, &self.params, &views, &self.cfg, Some(&mut grad))
                    .map_err(|e| TrainError::NonFinite(e.to_string()))?;
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    return Err(TrainError::NonFinite(format!("gradient norm {norm}")));
                }
                if self.cfg.max_grad_norm > 0.0 && norm > self.cfg.max_grad_norm {
                    let k = self.cfg.max_grad_norm / norm;
                    grad.iter_mut().for_each(|g| *g *= k);
                }
                self.adam.update(&mut self.params, &grad, self.cfg.lr);
                sum.total += stats.total;
                sum.surrogate += stats.surrogate;
                sum.value_loss += stats.value_loss;
                sum.entropy += stats.entropy;
                sum.clip_frac += stats.clip_frac;
                sum.kl += stats.kl;
                count += 1;
                if self.cfg.target_kl > 0.0 && stats.kl > self.cfg.target_kl {
                    break 'epochs;
                }
            }
        }
        if let Some(bad) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(TrainError::NonFinite(format!("parameter {bad} after update {}", self.update + 1)));
        }
        let c = count.max(1) as f64;
        Ok(LossStats {
            total: sum.total / c,
            surrogate: sum.surrogate / c,
            value_loss: sum.value_loss / c,
            entropy: sum.entropy / c,
            clip_frac: sum.clip_frac / c,
            kl: sum.kl / c,
        })
    }

    /// Writes `<dir>/ckpt_<update>.bin` and its `.state.json` sidecar.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, TrainError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(format!("ckpt_{:06}.bin", self.update));
        save_checkpoint(&path, &self.checkpoint())?;
        let state_path = state_path(&path);
        let json = serde_json::to_vec(&self.state()).map_err(|e| TrainError::Resume(e.to_string()))?;
        let tmp = state_path.with_extension("json.tmp");
        fs::write(&tmp, json).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &state_path).map_err(io_err(&state_path))?;
        Ok(path)
    }

    /// Trains to completion, writing `<out>/train_log.csv` and checkpoints
    /// under `<out>/checkpoints`. On a non-finite value a
    /// `<out>/diagnostic.json` is written before returning the error.
    pub fn run(&mut self, out: &Path, on_update: impl FnMut(&LogRow)) -> Result<(), TrainError> {
        self.run_until(out, self.cfg.num_updates(), on_update)
    }

    /// Like [`Trainer::run`] but stops after update `stop`, always leaving a
    /// checkpoint of the last completed update.
    pub fn run_until(&mut self, out: &Path, stop: u64, mut on_update: impl FnMut(&LogRow)) -> Result<(), TrainError> {
        let stop = stop.min(self.cfg.num_updates());
        fs::create_dir_all(out).map_err(io_err(out))?;
        let log_path = out.join("train_log.csv");
        let mut log = fs::File::create(&log_path).map_err(io_err(&log_path))?;
        writeln!(log, "{LOG_HEADER}").map_err(io_err(&log_path))?;
        for row in &self.log {
            writeln!(log, "{}", row.csv()).map_err(io_err(&log_path))?;
        }
        let ckpt_dir = out.join("checkpoints");
        while self.update < stop {
            let row = match self.step() {
                Ok(row) => row,
                Err(TrainError::NonFinite(msg)) => {
                    let diag = serde_json::json!({
                        "error": msg,
                        "update": self.update + 1,
                        "steps": self.steps,
                        "recent_log": self.log.iter().rev().take(5).collect::<Vec<_>>(),
                    });
                    let path = out.join("diagnostic.json");
                    fs::write(&path, serde_json::to_vec_pretty(&diag).unwrap_or_default()).map_err(io_err(&path))?;
                    return Err(TrainError::NonFinite(msg));
                }
                Err(e) => return Err(e),
            };
            writeln!(log, "{}", row.csv()).map_err(io_err(&log_path))?;
            log.flush().map_err(io_err(&log_path))?;
            on_update(&row);
            if self.update % self.cfg.checkpoint_every == 0 || self.update == stop {
                self.save(&ckpt_dir)?;
            }
        }
        Ok(())
    }
}

/// Sidecar holding the [`TrainerState`] of a checkpoint.
pub fn state_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".state.json");
    PathBuf::from(s)
}

pub fn load_state(ckpt: &Path) -> Result<TrainerState, TrainError> {
    let path = state_path(ckpt);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&bytes).map_err(|e| TrainError::Resume(format!("{}: {e}", path.display())))
}
