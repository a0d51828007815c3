//! Recurrent Gaussian policy with a value head, hand-written backward pass
//! and Adam optimizer.

mod adam;
mod checkpoint;
pub mod layers;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tasks::{ObservationConfig, ObservationMode, PRIVILEGED_DIM, PRIVILEGED_SCALE};
use layers::{
    conv_backward, conv_forward, dense_backward, dense_forward, dot, lstm_backward, lstm_forward, tanh_backward,
    tanh_inplace, ConvShape, LstmCache,
};

pub const LOG_STD_MIN: f64 = -4.0;
pub const LOG_STD_MAX: f64 = 1.0;
/// Relative inward clamp applied to actions at the steering bound.
pub const ACTION_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid network config: {0}")]
    BadConfig(String),
    #[error("observation has {got} values, network expects {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("checkpoint i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint does not match the configured network: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Hidden layer widths of the privileged-observation MLP.
    pub hidden: Vec<usize>,
    pub conv: Vec<ConvSpec>,
    /// Hidden layer widths after the conv stack.
    pub pixel_hidden: Vec<usize>,
    pub recurrent: usize,
    pub init_log_std: f64,
    /// Fixed multiplier on the value head output, so returns of order
    /// `1 / (1 - gamma)` are reachable with unit-scale weights.
    pub value_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            conv: vec![
                ConvSpec {
                    channels: 8,
                    kernel: 5,
                    stride: 2,
                },
                ConvSpec {
                    channels: 16,
                    kernel: 3,
                    stride: 2,
                },
            ],
            pixel_hidden: vec![64],
            recurrent: 64,
            init_log_std: -0.5,
            value_scale: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(size: usize) -> Self {
        Self {
            h: vec![0.0; size],
            c: vec![0.0; size],
        }
    }
}

/// Gaussian over the pre-squash action `u`; the steering command is
/// `delta_max * tanh(u)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionDistribution {
    pub mean: f64,
    pub log_std: f64,
    pub delta_max: f64,
}

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

impl ActionDistribution {
    pub fn std(&self) -> f64 {
        self.log_std.exp()
    }

    pub fn squash(&self, u: f64) -> f64 {
        self.delta_max * u.tanh()
    }

    pub fn unsquash(&self, a: f64) -> f64 {
        let lim = 1.0 - ACTION_EPS;
        (a / self.delta_max).clamp(-lim, lim).atanh()
    }

    /// Returns `(u, action)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let z: f64 = StandardNormal.sample(rng);
        let u = self.mean + self.std() * z;
        (u, self.squash(u))
    }

    pub fn mode(&self) -> f64 {
        self.squash(self.mean)
    }

    /// Gaussian log-density of the pre-squash action.
    pub fn log_prob_raw(&self, u: f64) -> f64 {
        let z = (u - self.mean) / self.std();
        -0.5 * z * z - self.log_std - HALF_LOG_2PI
    }

    /// Log-density of a steering command, including the squash Jacobian.
    pub fn log_prob(&self, action: f64) -> f64 {
        let u = self.unsquash(action);
        let t = u.tanh();
        self.log_prob_raw(u) - (self.delta_max * (1.0 - t * t)).ln()
    }

    /// Entropy of the base Gaussian.
    pub fn entropy(&self) -> f64 {
        0.5 + HALF_LOG_2PI + self.log_std
    }

    pub fn log_prob_and_entropy(&self, action: f64) -> (f64, f64) {
        (self.log_prob(action), self.entropy())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
struct DenseLayer {
    w: usize,
    n_in: usize,
    n_out: usize,
}

impl DenseLayer {
    fn b(&self) -> usize {
        self.w + self.n_in * self.n_out
    }
    fn end(&self) -> usize {
        self.b() + self.n_out
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    w: usize,
    shape: ConvShape,
}

impl ConvLayer {
    fn b(&self) -> usize {
        self.w + self.shape.weight_len()
    }
    fn end(&self) -> usize {
        self.b() + self.shape.cout
    }
}

#[derive(Debug, Clone)]
struct LstmLayer {
    wx: usize,
    n_in: usize,
    r: usize,
}

impl LstmLayer {
    fn wh(&self) -> usize {
        self.wx + 4 * self.r * self.n_in
    }
    fn b(&self) -> usize {
        self.wh() + 4 * self.r * self.r
    }
    fn end(&self) -> usize {
        self.b() + 4 * self.r
    }
}

/// Intermediates of one time step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    input: Vec<f64>,
    conv: Vec<Vec<f64>>,
    dense: Vec<Vec<f64>>,
    lstm: LstmCache,
}

/// Forward pass over a sequence of observations from one episode.
#[derive(Debug, Clone)]
pub struct SegmentPass {
    pub steps: Vec<StepCache>,
    pub means: Vec<f64>,
    pub values: Vec<f64>,
    pub log_std: f64,
}

impl SegmentPass {
    pub fn final_state(&self) -> Option<RecurrentState> {
        self.steps.last().map(|s| RecurrentState {
            h: s.lstm.h.clone(),
            c: s.lstm.c.clone(),
        })
    }
}

/// Network layout over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
    obs: ObservationConfig,
    delta_max: f64,
    input_scale: Option<Vec<f64>>,
    convs: Vec<ConvLayer>,
    dense: Vec<DenseLayer>,
    lstm: LstmLayer,
    mean_w: usize,
    value_w: usize,
    log_std: usize,
    n_params: usize,
    slices: Vec<ParamSlice>,
}

impl Network {
    pub fn new(cfg: &NetworkConfig, obs: &ObservationConfig, delta_max: f64) -> Result<Self, PolicyError> {
        let bad = |m: String| Err(PolicyError::BadConfig(m));
        if cfg.recurrent == 0 {
            return bad("recurrent size must be positive".into());
        }
        if !(delta_max > 0.0) {
            return bad("delta_max must be positive".into());
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&cfg.init_log_std) {
            return bad(format!("init_log_std must lie in [{LOG_STD_MIN}, {LOG_STD_MAX}]"));
        }
        if !(cfg.value_scale > 0.0 && cfg.value_scale.is_finite()) {
            return bad(format!("value_scale must be positive, got {}", cfg.value_scale));
        }
        let mut slices = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize, slices: &mut Vec<ParamSlice>| {
            slices.push(ParamSlice { name, offset, len });
            offset += len;
            offset - len
        };
        let mut convs = Vec::new();
        let (mut feat, hidden, input_scale) = match obs.mode {
            ObservationMode::Privileged => (PRIVILEGED_DIM, &cfg.hidden, Some(PRIVILEGED_SCALE.to_vec())),
            ObservationMode::Pixels => {
                let (mut c, mut h, mut w) = (1, obs.height, obs.width);
                for (l, spec) in cfg.conv.iter().enumerate() {
                    if spec.channels == 0 || spec.kernel == 0 || spec.stride == 0 {
                        return bad(format!("conv layer {l} has a zero size"));
                    }
                    if spec.kernel > h || spec.kernel > w {
                        return bad(format!("conv layer {l}: kernel {} exceeds its {h}x{w} input", spec.kernel));
                    }
                    let shape = ConvShape {
                        cin: c,
                        in_h: h,
                        in_w: w,
                        cout: spec.channels,
                        k: spec.kernel,
                        stride: spec.stride,
                    };
                    let wo = push(format!("conv{l}.w"), shape.weight_len(), &mut slices);
                    push(format!("conv{l}.b"), shape.cout, &mut slices);
                    convs.push(ConvLayer { w: wo, shape });
                    (c, h, w) = (shape.cout, shape.out_h(), shape.out_w());
                }
                (c * h * w, &cfg.pixel_hidden, None)
            }
        };
        let mut dense = Vec::new();
        for (l, &n) in hidden.iter().enumerate() {
            if n == 0 {
                return bad(format!("hidden layer {l} has zero width"));
            }
            let wo = push(format!("dense{l}.w"), n * feat, &mut slices);
            push(format!("dense{l}.b"), n, &mut slices);
            dense.push(DenseLayer {
                w: wo,
                n_in: feat,
                n_out: n,
            });
            feat = n;
        }
        let r = cfg.recurrent;
        let wx = push("lstm.wx".into(), 4 * r * feat, &mut slices);
        push("lstm.wh".into(), 4 * r * r, &mut slices);
        push("lstm.b".into(), 4 * r, &mut slices);
        let mean_w = push("mean.w".into(), r, &mut slices);
        push("mean.b".into(), 1, &mut slices);
        let value_w = push("value.w".into(), r, &mut slices);
        push("value.b".into(), 1, &mut slices);
        let log_std = push("log_std".into(), 1, &mut slices);
        Ok(Self {
            cfg: cfg.clone(),
            obs: *obs,
            delta_max,
            input_scale,
            convs,
            dense,
            lstm: LstmLayer { wx, n_in: feat, r },
            mean_w,
            value_w,
            log_std,
            n_params: offset,
            slices,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn observation(&self) -> &ObservationConfig {
        &self.obs
    }

    pub fn delta_max(&self) -> f64 {
        self.delta_max
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn input_dim(&self) -> usize {
        self.obs.dim()
    }

    pub fn recurrent_size(&self) -> usize {
        self.cfg.recurrent
    }

    pub fn log_std_index(&self) -> usize {
        self.log_std
    }

    pub fn initial_state(&self) -> RecurrentState {
        RecurrentState::zeros(self.cfg.recurrent)
    }

    /// Scaled-Gaussian weights, zero biases, LSTM forget bias 1, small
    /// policy-mean head.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        let mut fill = |p: &mut [f64], std: f64| {
            for v in p.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = std * z;
            }
        };
        for c in &self.convs {
            let fan_in = (c.shape.cin * c.shape.k * c.shape.k) as f64;
            fill(&mut p[c.w..c.b()], 1.0 / fan_in.sqrt());
        }
        for d in &self.dense {
            fill(&mut p[d.w..d.b()], 1.0 / (d.n_in as f64).sqrt());
        }
        let l = &self.lstm;
        fill(&mut p[l.wx..l.wh()], 1.0 / (l.n_in as f64).sqrt());
        fill(&mut p[l.wh()..l.b()], 1.0 / (l.r as f64).sqrt());
        for v in &mut p[l.b() + l.r..l.b() + 2 * l.r] {
            *v = 1.0;
        }
        let r = l.r;
        fill(&mut p[self.mean_w..self.mean_w + r], 0.01 / (r as f64).sqrt());
        fill(&mut p[self.value_w..self.value_w + r], 1.0 / (r as f64).sqrt());
        p[self.log_std] = self.cfg.init_log_std;
        p
    }

    fn check_obs(&self, obs: &[f64]) -> Result<(), PolicyError> {
        if obs.len() != self.input_dim() {
            return Err(PolicyError::ShapeMismatch {
                got: obs.len(),
                want: self.input_dim(),
            });
        }
        Ok(())
    }

    pub fn effective_log_std(&self, p: &[f64]) -> f64 {
        p[self.log_std].clamp(LOG_STD_MIN, LOG_STD_MAX)
    }

    fn step_cached(&self, p: &[f64], obs: &[f64], state: &RecurrentState) -> (StepCache, f64, f64) {
        let input: Vec<f64> = match &self.input_scale {
            Some(s) => obs.iter().zip(s).map(|(x, k)| x * k).collect(),
            None => obs.to_vec(),
        };
        let mut conv = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let x = conv.last().unwrap_or(&input);
            let mut y = vec![0.0; c.shape.out_len()];
            conv_forward(&c.shape, &p[c.w..c.b()], &p[c.b()..c.end()], x, &mut y);
            tanh_inplace(&mut y);
            conv.push(y);
        }
        let mut dense: Vec<Vec<f64>> = Vec::with_capacity(self.dense.len());
        for d in &self.dense {
            let x = dense.last().or(conv.last()).unwrap_or(&input);
            let mut y = vec![0.0; d.n_out];
            dense_forward(&p[d.w..d.b()], &p[d.b()..d.end()], x, &mut y);
            tanh_inplace(&mut y);
            dense.push(y);
        }
        let feat = dense.last().or(conv.last()).unwrap_or(&input);
        let l = &self.lstm;
        let lstm = lstm_forward(
            &p[l.wx..l.wh()],
            &p[l.wh()..l.b()],
            &p[l.b()..l.end()],
            feat,
            &state.h,
            &state.c,
        );
        let r = l.r;
        let mean = dot(&p[self.mean_w..self.mean_w + r], &lstm.h) + p[self.mean_w + r];
        let value = self.cfg.value_scale * (dot(&p[self.value_w..self.value_w + r], &lstm.h) + p[self.value_w + r]);
        (
            StepCache {
                input,
                conv,
                dense,
                lstm,
            },
            mean,
            value,
        )
    }

    /// One step: action distribution, value estimate and next recurrent state.
    pub fn forward(
        &self,
        p: &[f64],
        obs: &[f64],
        state: &RecurrentState,
    ) -> Result<(ActionDistribution, f64, RecurrentState), PolicyError> {
        self.check_obs(obs)?;
        let (cache, mean, value) = self.step_cached(p, obs, state);
        let next = RecurrentState {
            h: cache.lstm.h,
            c: cache.lstm.c,
        };
        Ok((
            ActionDistribution {
                mean,
                log_std: self.effective_log_std(p),
                delta_max: self.delta_max,
            },
            value,
            next,
        ))
    }

    /// Independent evaluation of several `(observation, state)` pairs.
    pub fn forward_batch(
        &self,
        p: &[f64],
        obs: &[&[f64]],
        states: &[RecurrentState],
    ) -> Result<Vec<(ActionDistribution, f64, RecurrentState)>, PolicyError> {
        obs.iter().zip(states).map(|(o, s)| self.forward(p, o, s)).collect()
    }

    /// Forward pass over consecutive steps of one episode, caching what the
    /// backward pass needs.
    pub fn forward_segment(
        &self,
        p: &[f64],
        obs: &[&[f64]],
        init: &RecurrentState,
    ) -> Result<SegmentPass, PolicyError> {
        let mut steps = Vec::with_capacity(obs.len());
        let mut means = Vec::with_capacity(obs.len());
        let mut values = Vec::with_capacity(obs.len());
        let mut state = init.clone();
        for o in obs {
            self.check_obs(o)?;
            let (cache, m, v) = self.step_cached(p, o, &state);
            state = RecurrentState {
                h: cache.lstm.h.clone(),
                c: cache.lstm.c.clone(),
            };
            steps.push(cache);
            means.push(m);
            values.push(v);
        }
        Ok(SegmentPass {
            steps,
            means,
            values,
            log_std: self.effective_log_std(p),
        })
    }

    /// Accumulates into `grad` the parameter gradient given the loss
    /// gradients w.r.t. each step's mean and value outputs. The log-std
    /// gradient is added by the caller at [`Network::log_std_index`].
    pub fn backward_segment(&self, p: &[f64], pass: &SegmentPass, d_mean: &[f64], d_value: &[f64], grad: &mut [f64]) {
        let l = &self.lstm;
        let r = l.r;
        let mut dh_next = vec![0.0; r];
        let mut dc_next = vec![0.0; r];
        let mut dh = vec![0.0; r];
        let mut dh_prev = vec![0.0; r];
        let mut dc_prev = vec![0.0; r];
        for t in (0..pass.steps.len()).rev() {
            let cache = &pass.steps[t];
            let (dm, dv) = (d_mean[t], self.cfg.value_scale * d_value[t]);
            for k in 0..r {
                dh[k] = dh_next[k] + dm * p[self.mean_w + k] + dv * p[self.value_w + k];
                grad[self.mean_w + k] += dm * cache.lstm.h[k];
                grad[self.value_w + k] += dv * cache.lstm.h[k];
            }
            grad[self.mean_w + r] += dm;
            grad[self.value_w + r] += dv;

            let feat_len = l.n_in;
            let mut dfeat = vec![0.0; feat_len];
            {
                let g = &mut grad[l.wx..l.end()];
                let (dwx, rest) = g.split_at_mut(4 * r * l.n_in);
                let (dwh, db) = rest.split_at_mut(4 * r * r);
                lstm_backward(
                    &p[l.wx..l.wh()],
                    &p[l.wh()..l.b()],
                    &cache.lstm,
                    &dh,
                    &dc_next,
                    dwx,
                    dwh,
                    db,
                    Some(&mut dfeat),
                    &mut dh_prev,
                    &mut dc_prev,
                );
            }
            std::mem::swap(&mut dh_next, &mut dh_prev);
            std::mem::swap(&mut dc_next, &mut dc_prev);

            let mut dcur = dfeat;
            for (i, d) in self.dense.iter().enumerate().rev() {
                tanh_backward(&cache.dense[i], &mut dcur);
                let x: &[f64] = if i > 0 {
                    &cache.dense[i - 1]
                } else {
                    cache.conv.last().unwrap_or(&cache.input)
                };
                let needs_dx = i > 0 || !self.convs.is_empty();
                let mut dx = vec![0.0; if needs_dx { d.n_in } else { 0 }];
                let g = &mut grad[d.w..d.end()];
                let (dw, db) = g.split_at_mut(d.n_in * d.n_out);
                dense_backward(&p[d.w..d.b()], x, &dcur, dw, db, needs_dx.then_some(&mut dx[..]));
                if !needs_dx {
                    break;
                }
                dcur = dx;
            }
            for (i, c) in self.convs.iter().enumerate().rev() {
                tanh_backward(&cache.conv[i], &mut dcur);
                let x: &[f64] = if i > 0 { &cache.conv[i - 1] } else { &cache.input };
                let needs_dx = i > 0;
                let mut dx = vec![0.0; if needs_dx { x.len() } else { 0 }];
                let g = &mut grad[c.w..c.end()];
                let (dw, db) = g.split_at_mut(c.shape.weight_len());
                conv_backward(&c.shape, &p[c.w..c.b()], x, &dcur, dw, db, needs_dx.then_some(&mut dx[..]));
                if !needs_dx {
                    break;
                }
                dcur = dx;
            }
        }
    }

    /// Whether the log-std parameter is inside its clamp range (and so has a gradient).
    pub fn log_std_active(&self, p: &[f64]) -> bool {
        let v = p[self.log_std];
        v > LOG_STD_MIN && v < LOG_STD_MAX
    }
}

/// Network plus parameters.
#[derive(Debug, Clone)]
pub struct Policy {
    pub net: Network,
    pub params: Vec<f64>,
}

impl Policy {
    pub fn act(
        &self,
        obs: &[f64],
        state: &RecurrentState,
    ) -> Result<(ActionDistribution, f64, RecurrentState), PolicyError> {
        self.net.forward(&self.params, obs, state)
    }
}
