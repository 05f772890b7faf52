//! Binary checkpoints.
//!
//! Layout: the magic `EDGF`, a little-endian `u32` format version, a `u64`
//! header length, the JSON header, then the payload of little-endian `f32`
//! values. The header carries the model configuration, the sharing plan in
//! text form, the applied adaptation and a digest of all three, followed by
//! one entry per stored tensor. Every parameter of the store is written
//! once, so a group bound to many slots occupies a single entry. Optional
//! optimizer moments follow the parameters in the same order.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::AdaptSpec;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{AdaptState, Model};
use crate::plan::SharingPlan;
use crate::run::model_digest;
use crate::tensor::Tensor;
use crate::train::{Adam, AdamConfig};

pub const MAGIC: &[u8; 4] = b"EDGF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHeader {
    pub cfg: AdamConfig,
    pub t: u64,
    /// Per-tensor update counts, in tensor order.
    pub steps: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub digest: String,
    pub model: ModelConfig,
    pub plan: String,
    pub adapt: AdaptState,
    /// Optimizer steps completed when the checkpoint was written.
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerHeader>,
    pub payload_sha256: String,
}

pub struct Checkpoint {
    pub header: Header,
    pub model: Model<f32>,
    pub optimizer: Option<Adam<f32>>,
}

pub fn to_bytes(model: &Model<f32>, step: u64, optimizer: Option<&Adam<f32>>) -> Vec<u8> {
    let store = model.store();
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    let mut put = |t: &Tensor<f32>| {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (_, p) in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        });
        put(&p.value);
    }
    let optimizer = optimizer.map(|o| {
        for t in o.m.iter().chain(&o.v) {
            put(t);
        }
        OptimizerHeader {
            cfg: o.cfg,
            t: o.t,
            steps: o.steps.clone(),
        }
    });
    let header = Header {
        digest: model_digest(model.config(), model.plan(), &model.adaptation()),
        model: model.config().clone(),
        plan: model.plan().to_text(),
        adapt: model.adaptation(),
        step,
        tensors,
        optimizer,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Writes through a temporary file so a failed save never leaves a
/// truncated checkpoint behind.
pub fn save(
    path: &Path,
    model: &Model<f32>,
    step: u64,
    optimizer: Option<&Adam<f32>>,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(model, step, optimizer))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| bad(format!("header: {e}")))?;
    Ok((header, &bytes[end..]))
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<Header> {
    Ok(split_header(&std::fs::read(path)?)?.0)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = split_header(bytes)?;
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(bad("payload digest mismatch (corrupted file)"));
    }
    let plan = SharingPlan::from_text(&header.plan)?;
    if model_digest(&header.model, &plan, &header.adapt) != header.digest {
        return Err(bad("config digest mismatch"));
    }

    let mut model = Model::<f32>::new(header.model.clone(), plan, 0)?;
    let spec = AdaptSpec {
        bias: header.adapt.bias,
        lora_rank: header.adapt.lora_rank,
        prompt_len: header.adapt.prompt_len,
    };
    model.apply(&spec, 0)?;

    let expected: BTreeSet<&str> = model.store().iter().map(|(_, p)| p.name.as_str()).collect();
    let stored: BTreeSet<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
    if expected != stored || stored.len() != header.tensors.len() {
        return Err(bad("stored tensors do not match the model structure"));
    }

    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    if payload.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
        let n = shape.iter().product();
        let data: Vec<f32> = floats.by_ref().take(n).collect();
        if data.len() != n {
            return Err(bad("truncated payload"));
        }
        Tensor::new(shape, data)
    };

    let mut ids = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let id = model.store().find(&entry.name).expect("name checked");
        if model.store().value(id).shape() != entry.shape.as_slice() {
            return Err(bad(format!(
                "tensor {} has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                model.store().value(id).shape()
            )));
        }
        *model.store_mut().value_mut(id) = take(&entry.shape)?;
        ids.push(id);
    }

    let optimizer = match &header.optimizer {
        None => None,
        Some(oh) => {
            if oh.steps.len() != ids.len() {
                return Err(bad("optimizer state does not cover every tensor"));
            }
            let mut adam = Adam::new(oh.cfg, model.store());
            adam.t = oh.t;
            for (k, &id) in ids.iter().enumerate() {
                adam.m[id.index()] = take(&header.tensors[k].shape)?;
                adam.steps[id.index()] = oh.steps[k];
            }
            for (k, &id) in ids.iter().enumerate() {
                adam.v[id.index()] = take(&header.tensors[k].shape)?;
            }
            Some(adam)
        }
    };
    if floats.next().is_some() {
        return Err(bad("trailing payload data"));
    }
    Ok(Checkpoint {
        header,
        model,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::PlanSpec;

    fn model() -> Model<f32> {
        let mut m = Model::build(&ModelConfig::mini(), &PlanSpec::edgeformer(), 7).unwrap();
        m.apply(
            &AdaptSpec {
                bias: true,
                lora_rank: Some(4),
                prompt_len: Some(2),
            },
            3,
        )
        .unwrap();
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let ck = from_bytes(&to_bytes(&m, 12, None)).unwrap();
        assert_eq!(ck.header.step, 12);
        assert!(ck.optimizer.is_none());
        for ((_, a), (_, b)) in m.store().iter().zip(ck.model.store().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let src = [3, 4, 5, 15];
        let tgt = [14, 3, 4];
        let a = m.forward(&src, &tgt).unwrap();
        let b = ck.model.forward(&src, &tgt).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn shared_groups_stored_once() {
        let m = Model::build(&ModelConfig::mini(), &PlanSpec::edgeformer(), 1).unwrap();
        let bytes = to_bytes(&m, 0, None);
        let (h, payload) = split_header(&bytes).unwrap();
        assert_eq!(h.tensors.len(), m.store().len());
        let total: usize = m.store().iter().map(|(_, p)| p.value.len()).sum();
        assert_eq!(payload.len(), 4 * total);
        assert_eq!(h.tensors.iter().filter(|t| t.name == "attn1/wq").count(), 1);
    }

    #[test]
    fn corruption_detected() {
        let m = model();
        let mut bytes = to_bytes(&m, 0, None);
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(from_bytes(&bytes).is_err());
        let bytes = to_bytes(&m, 0, None);
        assert!(from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(from_bytes(b"NOPE0000000000000000").is_err());
    }

    #[test]
    fn tampered_config_detected() {
        let m = model();
        let bytes = to_bytes(&m, 0, None);
        let (mut h, payload) = split_header(&bytes).unwrap();
        h.model.max_len = 64;
        let json = serde_json::to_vec(&h).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(payload);
        let err = from_bytes(&out).err().unwrap();
        assert!(err.to_string().contains("digest"), "{err}");
    }
}
