use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{compute_gae, normalize_advantages, SegmentView, TrainError};
use crate::policy::{Network, RecurrentState};
use crate::tasks::{Env, Terminal, World};

/// One environment with the policy's recurrent state and sampling stream.
#[derive(Debug, Clone)]
pub struct EnvWorker {
    pub env: Env,
    pub state: RecurrentState,
    pub obs: Vec<f64>,
    pub rng: ChaCha8Rng,
    pub ep_return: f64,
    pub ep_len: u32,
}

/// Serializable part of an [`EnvWorker`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerState {
    pub world: World,
    pub state: RecurrentState,
    pub obs: Vec<f64>,
    pub rng: ChaCha8Rng,
    pub ep_return: f64,
    pub ep_len: u32,
}

impl EnvWorker {
    pub fn new(env: Env, net: &Network, rng: ChaCha8Rng) -> Self {
        let obs = env.observe();
        Self {
            env,
            state: net.initial_state(),
            obs,
            rng,
            ep_return: 0.0,
            ep_len: 0,
        }
    }

    pub fn snapshot(&self) -> WorkerState {
        WorkerState {
            world: self.env.world().clone(),
            state: self.state.clone(),
            obs: self.obs.clone(),
            rng: self.rng.clone(),
            ep_return: self.ep_return,
            ep_len: self.ep_len,
        }
    }

    pub fn restore(&mut self, s: WorkerState) {
        self.env.set_world(s.world);
        self.state = s.state;
        self.obs = s.obs;
        self.rng = s.rng;
        self.ep_return = s.ep_return;
        self.ep_len = s.ep_len;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub update: u64,
    pub env: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub len: u32,
    pub terminal: Terminal,
}

/// Consecutive transitions of one environment, stored by column.
#[derive(Debug, Clone, Default)]
pub struct Transition {
    pub obs: Vec<Vec<f64>>,
    pub raw_actions: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of the state following the last transition (0 if it ended an episode).
    pub bootstrap: f64,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Transition {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// At most `bptt` steps of one episode with the recurrent state preceding them.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub env: usize,
    pub start: usize,
    pub len: usize,
    pub init: RecurrentState,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub envs: Vec<Transition>,
    pub segments: Vec<Segment>,
    pub episodes: Vec<EpisodeStat>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.envs.iter().map(Transition::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Computes GAE per environment, then normalizes advantages over the buffer.
    pub fn finish(&mut self, gamma: f64, lambda: f64) {
        for t in &mut self.envs {
            let (adv, ret) = compute_gae(&t.rewards, &t.values, &t.dones, t.bootstrap, gamma, lambda);
            t.advantages = adv;
            t.returns = ret;
        }
        let mut all: Vec<f64> = self.envs.iter().flat_map(|t| t.advantages.iter().copied()).collect();
        normalize_advantages(&mut all);
        let mut it = all.into_iter();
        for t in &mut self.envs {
            for a in t.advantages.iter_mut() {
                *a = it.next().unwrap_or(0.0);
            }
        }
    }

    /// Loss view of a segment with the given advantages substituted.
    pub fn view<'a>(&'a self, seg: &'a Segment, advantages: &'a [f64]) -> SegmentView<'a> {
        let t = &self.envs[seg.env];
        let r = seg.start..seg.start + seg.len;
        SegmentView {
            init: &seg.init,
            obs: &t.obs[r.clone()],
            raw_actions: &t.raw_actions[r.clone()],
            log_prob_old: &t.log_probs[r.clone()],
            advantages,
            returns: &t.returns[r],
        }
    }

    pub fn segment_advantages(&self, seg: &Segment) -> &[f64] {
        &self.envs[seg.env].advantages[seg.start..seg.start + seg.len]
    }
}

struct WorkerOutput {
    transitions: Transition,
    segments: Vec<Segment>,
    episodes: Vec<EpisodeStat>,
}

fn run_worker(
    index: usize,
    w: &mut EnvWorker,
    net: &Network,
    params: &[f64],
    steps: usize,
    bptt: usize,
    update: u64,
) -> Result<WorkerOutput, TrainError> {
    let mut t = Transition::default();
    let mut segments = Vec::new();
    let mut episodes = Vec::new();
    let mut open: Option<Segment> = None;
    for k in 0..steps {
        let (dist, value, next) = net.forward(params, &w.obs, &w.state)?;
        if !dist.mean.is_finite() || !value.is_finite() {
            return Err(TrainError::NonFinite(format!(
                "policy output mean {} value {} in env {index}",
                dist.mean, value
            )));
        }
        if open.is_none() {
            open = Some(Segment {
                env: index,
                start: k,
                len: 0,
                init: w.state.clone(),
            });
        }
        let (u, a) = dist.sample(&mut w.rng);
        let res = w.env.step(a)?;
        t.obs.push(std::mem::take(&mut w.obs));
        t.raw_actions.push(u);
        t.actions.push(a);
        t.log_probs.push(dist.log_prob_raw(u));
        t.values.push(value);
        t.rewards.push(res.reward);
        let done = res.terminal.is_done();
        t.dones.push(done);
        w.ep_return += res.reward;
        w.ep_len += 1;
        if let Some(seg) = open.as_mut() {
            seg.len += 1;
            if done || seg.len == bptt {
                segments.extend(open.take());
            }
        }
        if done {
            episodes.push(EpisodeStat {
                update,
                env: index,
                ret: w.ep_return,
                len: w.ep_len,
                terminal: res.terminal,
            });
            w.ep_return = 0.0;
            w.ep_len = 0;
            w.obs = w.env.reset();
            w.state = net.initial_state();
        } else {
            w.obs = res.obs;
            w.state = next;
        }
    }
    segments.extend(open.take());
    t.bootstrap = if t.dones.last().copied().unwrap_or(true) {
        0.0
    } else {
        net.forward(params, &w.obs, &w.state)?.1
    };
    Ok(WorkerOutput {
        transitions: t,
        segments,
        episodes,
    })
}

/// Steps every worker until `capacity` transitions are gathered in total,
/// split as evenly as possible. Workers run in parallel; each owns its
/// random streams, so the result does not depend on scheduling.
pub fn collect_rollouts(
    workers: &mut [EnvWorker],
    net: &Network,
    params: &[f64],
    capacity: usize,
    bptt: usize,
    update: u64,
) -> Result<RolloutBuffer, TrainError> {
    let n = workers.len().max(1);
    let outputs: Vec<Result<WorkerOutput, TrainError>> = workers
        .par_iter_mut()
        .enumerate()
        .map(|(i, w)| {
            let quota = capacity / n + usize::from(i < capacity % n);
            run_worker(i, w, net, params, quota, bptt, update)
        })
        .collect();
    let mut buf = RolloutBuffer::default();
    for out in outputs {
        let out = out?;
        buf.envs.push(out.transitions);
        buf.segments.extend(out.segments);
        buf.episodes.extend(out.episodes);
    }
    Ok(buf)
}
