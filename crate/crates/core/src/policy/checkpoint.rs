//! Checkpoint file: one line of JSON header, then raw little-endian `f64`
//! blocks: parameters, and when present the Adam first and second moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Network, NetworkConfig, ParamSlice, Policy, PolicyError};
use crate::tasks::ObservationConfig;

pub const CHECKPOINT_FORMAT: &str = "adosim-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamConfig,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub network: NetworkConfig,
    pub observation: ObservationConfig,
    pub delta_max: f64,
    pub n_params: usize,
    pub slices: Vec<ParamSlice>,
    pub update: u64,
    pub steps: u64,
    pub optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn new(net: &Network, params: Vec<f64>, adam: Option<Adam>, update: u64, steps: u64) -> Self {
        Self {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                network: net.config().clone(),
                observation: *net.observation(),
                delta_max: net.delta_max(),
                n_params: net.n_params(),
                slices: net.slices().to_vec(),
                update,
                steps,
                optimizer: adam.as_ref().map(|a| OptimizerHeader { config: a.cfg, t: a.t }),
            },
            params,
            adam,
        }
    }

    /// Errors unless the checkpoint was written for `net`'s architecture.
    pub fn check_matches(&self, net: &Network) -> Result<(), PolicyError> {
        let h = &self.header;
        let mismatch = |what: &str| Err(PolicyError::Mismatch(what.to_string()));
        if &h.network != net.config() {
            return mismatch("network config differs");
        }
        if &h.observation != net.observation() {
            return mismatch("observation config differs");
        }
        if h.delta_max != net.delta_max() {
            return mismatch("steering limit differs");
        }
        if h.n_params != net.n_params() || h.slices != net.slices() {
            return mismatch("parameter layout differs");
        }
        Ok(())
    }

    /// Rebuilds the policy stored in the checkpoint.
    pub fn policy(&self) -> Result<Policy, PolicyError> {
        let h = &self.header;
        let net = Network::new(&h.network, &h.observation, h.delta_max)?;
        self.check_matches(&net)?;
        Ok(Policy {
            net,
            params: self.params.clone(),
        })
    }
}

fn push_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), PolicyError> {
    let io = |source| PolicyError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf = serde_json::to_vec(&ckpt.header).expect("header serializes");
    buf.push(b'\n');
    push_f64s(&mut buf, &ckpt.params);
    if let Some(a) = &ckpt.adam {
        push_f64s(&mut buf, &a.m);
        push_f64s(&mut buf, &a.v);
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&buf).map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PolicyError> {
    let bytes = fs::read(path).map_err(|source| PolicyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let bad = |m: String| PolicyError::BadCheckpoint(m);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(bad(format!("unknown format {:?}", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let n = header.n_params;
    let blocks = if header.optimizer.is_some() { 3 } else { 1 };
    let body = &bytes[nl + 1..];
    if body.len() != blocks * n * 8 {
        return Err(bad(format!("expected {} payload bytes, found {}", blocks * n * 8, body.len())));
    }
    let read = |k: usize| -> Vec<f64> {
        body[k * n * 8..(k + 1) * n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let params = read(0);
    let adam = header.optimizer.as_ref().map(|o| Adam {
        cfg: o.config,
        m: read(1),
        v: read(2),
        t: o.t,
    });
    Ok(Checkpoint { header, params, adam })
}
