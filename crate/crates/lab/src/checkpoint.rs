//! Versioned binary container: magic, header length, JSON header (metadata
//! and tensor shapes), then little-endian f64 blobs in header order.
//!
//! Model checkpoints store parameters, then AdamW first moments, then
//! second moments, all under their parameter names.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use seqrec_core::model::ModelConfig;
use seqrec_core::optim::AdamState;
use seqrec_core::sid::{RqVae, RqVaeConfig, SidVocab};
use seqrec_core::train::{load_params, Checkpoint};
use seqrec_core::{RngState, Tensor};

use crate::error::{LabError, Result};
use crate::io::{read_bytes, write_atomic};

pub const MAGIC: &[u8; 8] = b"SEQRECK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header<M> {
    kind: String,
    meta: M,
    tensors: Vec<TensorSpec>,
}

fn pack<M: Serialize>(kind: &str, meta: &M, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let header = Header {
        kind: kind.to_string(),
        meta,
        tensors: tensors.iter().map(|(n, t)| TensorSpec { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("serializable header");
    let scalars: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * scalars);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn unpack<M: DeserializeOwned>(path: &Path, bytes: &[u8], kind: &str) -> Result<(M, Vec<(String, Tensor)>)> {
    let bad = |msg: String| LabError::format(path, msg);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..).unwrap_or_default();
    if hlen > body.len() {
        return Err(bad("truncated header".into()));
    }
    let header: Header<M> = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    if header.kind != kind {
        return Err(bad(format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    let mut blobs = &body[hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for spec in header.tensors {
        let n: usize = spec.shape.iter().product();
        if blobs.len() < 8 * n {
            return Err(bad(format!("truncated blob for {}", spec.name)));
        }
        let data = blobs[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        blobs = &blobs[8 * n..];
        tensors.push((spec.name, Tensor::new(spec.shape, data)?));
    }
    if !blobs.is_empty() {
        return Err(bad(format!("{} trailing bytes", blobs.len())));
    }
    Ok((header.meta, tensors))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    checkpoint_version: u32,
    model: ModelConfig,
    vocab: Option<SidVocab>,
    n_items: usize,
    text_dim: usize,
    epoch: usize,
    metric: f64,
    sid_hash: String,
    rng: RngState,
    optimizer_step: u64,
}

const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

pub fn encode_model(ck: &Checkpoint) -> Vec<u8> {
    let meta = ModelMeta {
        checkpoint_version: ck.version,
        model: ck.model.clone(),
        vocab: ck.vocab,
        n_items: ck.n_items,
        text_dim: ck.text_dim,
        epoch: ck.epoch,
        metric: ck.metric,
        sid_hash: ck.sid_hash.clone(),
        rng: ck.rng,
        optimizer_step: ck.optim.step,
    };
    let moment = |prefix: &str, values: &[Vec<f64>]| -> Vec<(String, Tensor)> {
        ck.params
            .iter()
            .zip(values)
            .map(|((n, t), v)| (format!("{prefix}{n}"), Tensor::new(t.shape().to_vec(), v.clone()).expect("moment shape")))
            .collect()
    };
    let m = moment(MOMENT1, &ck.optim.m);
    let v = moment(MOMENT2, &ck.optim.v);
    let tensors: Vec<(String, &Tensor)> =
        ck.params.iter().chain(&m).chain(&v).map(|(n, t)| (n.clone(), t)).collect();
    pack("model", &meta, &tensors)
}

/// Decodes a model checkpoint; `sid_hash` is the hash of the SID table in
/// use, which must equal the one the model was trained with.
pub fn decode_model(path: &Path, bytes: &[u8], sid_hash: &str) -> Result<Checkpoint> {
    let (meta, mut tensors): (ModelMeta, _) = unpack(path, bytes, "model")?;
    if meta.sid_hash != sid_hash {
        return Err(LabError::format(
            path,
            format!("trained with SID table {:?}, current table is {sid_hash:?}; retrain the model", meta.sid_hash),
        ));
    }
    if tensors.len() % 3 != 0 {
        return Err(LabError::format(path, "tensor count is not parameters + two moment sets"));
    }
    let p = tensors.len() / 3;
    let v: Vec<(String, Tensor)> = tensors.split_off(2 * p);
    let m: Vec<(String, Tensor)> = tensors.split_off(p);
    for (i, (name, t)) in tensors.iter().enumerate() {
        for (prefix, set) in [(MOMENT1, &m), (MOMENT2, &v)] {
            let (mn, mt) = &set[i];
            if *mn != format!("{prefix}{name}") || mt.shape() != t.shape() {
                return Err(LabError::format(path, format!("moment {mn} does not follow parameter {name}")));
            }
        }
    }
    let optim = AdamState {
        step: meta.optimizer_step,
        m: m.into_iter().map(|(_, t)| t.into_data()).collect(),
        v: v.into_iter().map(|(_, t)| t.into_data()).collect(),
    };
    Ok(Checkpoint {
        version: meta.checkpoint_version,
        model: meta.model,
        vocab: meta.vocab,
        n_items: meta.n_items,
        text_dim: meta.text_dim,
        params: tensors,
        optim,
        rng: meta.rng,
        epoch: meta.epoch,
        metric: meta.metric,
        sid_hash: meta.sid_hash,
    })
}

pub fn write_model(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_model(ck))
}

pub fn read_model(path: &Path, sid_hash: &str) -> Result<Checkpoint> {
    decode_model(path, &read_bytes(path)?, sid_hash)
}

pub fn encode_rqvae(model: &RqVae) -> Vec<u8> {
    let tensors: Vec<(String, &Tensor)> = model.store.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    pack("rqvae", &model.cfg, &tensors)
}

pub fn decode_rqvae(path: &Path, bytes: &[u8]) -> Result<RqVae> {
    let (cfg, tensors): (RqVaeConfig, _) = unpack(path, bytes, "rqvae")?;
    let mut model = RqVae::new(cfg)?;
    load_params(&mut model.store, &tensors)?;
    Ok(model)
}

pub fn write_rqvae(path: &Path, model: &RqVae) -> Result<()> {
    write_atomic(path, &encode_rqvae(model))
}

pub fn read_rqvae(path: &Path) -> Result<RqVae> {
    decode_rqvae(path, &read_bytes(path)?)
}
