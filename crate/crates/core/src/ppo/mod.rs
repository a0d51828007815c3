//! Proximal policy optimization: rollout collection, generalized advantage
//! estimation and the clipped surrogate objective with its gradient.

mod rollout;
mod train;

pub use rollout::{collect_rollouts, EnvWorker, EpisodeStat, RolloutBuffer, Segment, Transition, WorkerState};
pub use train::{derive_seed, load_state, state_path, LogRow, TrainError, Trainer, TrainerState, LOG_HEADER};

use serde::{Deserialize, Serialize};

use crate::policy::{AdamConfig, Network, PolicyError, RecurrentState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub num_envs: usize,
    /// Transitions collected per update.
    pub capacity: usize,
    pub total_steps: u64,
    /// Truncated backpropagation-through-time window.
    pub bptt: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub max_grad_norm: f64,
    /// Stop an update phase once a minibatch KL estimate exceeds this; 0 disables it.
    pub target_kl: f64,
    /// Write a checkpoint every this many updates (the final one is always written).
    pub checkpoint_every: u64,
    pub adam: AdamConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            epochs: 10,
            minibatch: 512,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 3e-4,
            num_envs: 8,
            capacity: 32000,
            total_steps: 200_000,
            bptt: 16,
            max_grad_norm: 0.5,
            target_kl: 0.05,
            checkpoint_every: 10,
            adam: AdamConfig::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(format!("clip must lie in (0, 1), got {}", self.clip));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err("gamma and lambda must lie in (0, 1]".into());
        }
        if self.epochs == 0 || self.minibatch == 0 || self.num_envs == 0 || self.bptt == 0 {
            return Err("epochs, minibatch, num_envs and bptt must be positive".into());
        }
        if self.capacity < self.num_envs {
            return Err("capacity must be at least num_envs".into());
        }
        if !(self.lr > 0.0) || self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return Err("lr must be positive and loss coefficients non-negative".into());
        }
        if self.max_grad_norm < 0.0 || self.target_kl < 0.0 {
            return Err("max_grad_norm and target_kl must be non-negative".into());
        }
        if self.checkpoint_every == 0 {
            return Err("checkpoint_every must be positive".into());
        }
        Ok(())
    }

    /// Number of collect/optimize phases needed to reach `total_steps`.
    pub fn num_updates(&self) -> u64 {
        self.total_steps.div_ceil(self.capacity as u64)
    }
}

/// Advantages and returns of one environment's contiguous transitions.
/// `dones[t]` marks the last step of an episode; `bootstrap` is the value of
/// the state after the final transition (ignored if that transition is done).
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        adv[t] = delta + gamma * lambda * live * next_adv;
        next_adv = adv[t];
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Rescales to zero mean and unit variance in place.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len();
    if n == 0 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n as f64;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { *a - mean };
    }
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// A run of consecutive transitions from one episode, as the loss sees it.
#[derive(Debug, Clone, Copy)]
pub struct SegmentView<'a> {
    pub init: &'a RecurrentState,
    pub obs: &'a [Vec<f64>],
    /// Pre-squash actions.
    pub raw_actions: &'a [f64],
    pub log_prob_old: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossStats {
    pub total: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    /// Estimate of KL(old || new), mean of `(r - 1) - ln r`.
    pub kl: f64,
}

/// Loss value and, when `grad` is given, its gradient accumulated into it.
/// Advantages are used as given.
pub fn ppo_loss(
    net: &Network,
    params: &[f64],
    segments: &[SegmentView<'_>],
    cfg: &PpoConfig,
    mut grad: Option<&mut [f64]>,
) -> Result<LossStats, PolicyError> {
    let n: usize = segments.iter().map(|s| s.obs.len()).sum();
    let nf = n.max(1) as f64;
    let mut stats = LossStats::default();
    let mut d_log_std = 0.0;
    for seg in segments {
        let obs: Vec<&[f64]> = seg.obs.iter().map(|o| o.as_slice()).collect();
        let pass = net.forward_segment(params, &obs, seg.init)?;
        let log_std = pass.log_std;
        let sigma = log_std.exp();
        let t_len = obs.len();
        let mut d_mean = vec![0.0; t_len];
        let mut d_value = vec![0.0; t_len];
        for t in 0..t_len {
            let u = seg.raw_actions[t];
            let mean = pass.means[t];
            let z = (u - mean) / sigma;
            let lp = -0.5 * z * z - log_std - 0.918_938_533_204_672_8;
            let log_ratio = lp - seg.log_prob_old[t];
            let ratio = log_ratio.exp();
            let a = seg.advantages[t];
            stats.surrogate += clipped_surrogate(ratio, a, cfg.clip);
            if (ratio - 1.0).abs() > cfg.clip {
                stats.clip_frac += 1.0;
            }
            stats.kl += (ratio - 1.0) - log_ratio;
            let err = pass.values[t] - seg.returns[t];
            stats.value_loss += err * err;
            // d(-surrogate)/d(lp): nonzero only where the unclipped branch is the minimum
            let unclipped = ratio * a <= ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * a;
            let g_lp = if unclipped { -a * ratio / nf } else { 0.0 };
            d_mean[t] = g_lp * (u - mean) / (sigma * sigma);
            d_log_std += g_lp * (z * z - 1.0);
            d_value[t] = cfg.value_coef * 2.0 * err / nf;
        }
        if let Some(g) = grad.as_deref_mut() {
            net.backward_segment(params, &pass, &d_mean, &d_value, g);
        }
        stats.entropy = 0.5 + 0.918_938_533_204_672_8 + log_std;
    }
    stats.surrogate /= nf;
    stats.value_loss /= nf;
    stats.clip_frac /= nf;
    stats.kl /= nf;
    if segments.is_empty() {
        stats.entropy = 0.5 + 0.918_938_533_204_672_8 + net.effective_log_std(params);
    }
    stats.total = -stats.surrogate + cfg.value_coef * stats.value_loss - cfg.entropy_coef * stats.entropy;
    if let Some(g) = grad {
        if net.log_std_active(params) {
            g[net.log_std_index()] += d_log_std - cfg.entropy_coef;
        }
    }
    if !stats.total.is_finite() {
        return Err(PolicyError::BadConfig(format!("non-finite loss {}", stats.total)));
    }
    Ok(stats)
}
