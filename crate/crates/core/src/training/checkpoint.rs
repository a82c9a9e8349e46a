//! Binary checkpoint: magic, version (u32 LE), header length (u64 LE), a JSON
//! header, then parameters, first moments and second moments as raw f64 LE in
//! declared parameter order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BatchCursor, BatchPlan, DevRecord, OptimizerState, Schedule, TrainState};
use crate::error::{CheckpointError, Error, Result};
use crate::model::{TransformerConfig, TransformerModel};
use crate::numerics::Tensor;
use crate::util::sha256_hex;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TMTCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TransformerConfig,
    schedule: Schedule,
    schedule_offset: u64,
    plan: BatchPlan,
    vocab_digest: String,
    corpus_digest: String,
    batch_seed: u64,
    cursor: BatchCursor,
    global_step: u64,
    grad_clip: Option<f64>,
    history: Vec<DevRecord>,
    tensors: Vec<(String, Vec<usize>)>,
    payload_sha256: String,
}

fn encode(state: &TrainState) -> Vec<u8> {
    let m = &state.model;
    let mut payload = Vec::with_capacity(3 * 8 * m.parameter_count());
    for group in [m.params(), &state.optimizer.m[..], &state.optimizer.v[..]] {
        for t in group {
            for x in t.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let header = Header {
        config: m.config().clone(),
        schedule: state.schedule.clone(),
        schedule_offset: state.schedule_offset,
        plan: state.plan.clone(),
        vocab_digest: state.vocab_digest.clone(),
        corpus_digest: state.corpus_digest.clone(),
        batch_seed: state.batch_seed,
        cursor: state.cursor,
        global_step: state.optimizer.step,
        grad_clip: state.grad_clip,
        history: state.history.clone(),
        tensors: m
            .names()
            .iter()
            .zip(m.params())
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect(),
        payload_sha256: sha256_hex(&payload),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

fn take<'b>(bytes: &mut &'b [u8], n: usize) -> Result<&'b [u8], CheckpointError> {
    if bytes.len() < n {
        return Err(CheckpointError::Truncated {
            needed: n - bytes.len(),
        });
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn decode(mut bytes: &[u8]) -> Result<TrainState> {
    let magic = take(&mut bytes, 8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let header_len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().unwrap());
    let header_len =
        usize::try_from(header_len).map_err(|_| CheckpointError::Header("header length overflows".into()))?;
    let json = take(&mut bytes, header_len)?;
    let h: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let count: usize = h.tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let payload = take(&mut bytes, 3 * 8 * count)?;
    if !bytes.is_empty() {
        return Err(CheckpointError::Header(format!("{} trailing bytes after the payload", bytes.len())).into());
    }
    let found = sha256_hex(payload);
    if found != h.payload_sha256 {
        return Err(CheckpointError::Digest {
            expected: h.payload_sha256,
            found,
        }
        .into());
    }
    let mut floats = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut group = || -> Result<Vec<Tensor>> {
        h.tensors
            .iter()
            .map(|(_, shape)| {
                let n = shape.iter().product();
                Tensor::new(shape, floats.by_ref().take(n).collect())
            })
            .collect()
    };
    let params = group()?;
    let m = group()?;
    let v = group()?;
    let names = h.tensors.iter().map(|(n, _)| n.clone());
    let model = TransformerModel::from_parts(h.config, names.zip(params).collect())
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok(TrainState {
        model,
        optimizer: OptimizerState {
            m,
            v,
            step: h.global_step,
        },
        schedule: h.schedule,
        schedule_offset: h.schedule_offset,
        plan: h.plan,
        vocab_digest: h.vocab_digest,
        corpus_digest: h.corpus_digest,
        batch_seed: h.batch_seed,
        cursor: h.cursor,
        grad_clip: h.grad_clip,
        history: h.history,
    })
}

impl TrainState {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode(bytes)
    }
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(state)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
