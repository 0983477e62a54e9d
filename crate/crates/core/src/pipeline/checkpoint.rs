//! Binary checkpoints.
//!
//! Layout: the magic bytes `DMSA`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, then every tensor listed
//! in the header as little-endian `f64`s in header order. The header carries
//! tensor names and shapes, counters and a CRC-32 of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::PseudoLabelMask;
use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::pipeline::model::{ModelConfig, ModelParams, ModelState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DMSA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Model,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: Kind,
    pub model: Option<ModelConfig>,
    pub epoch: u64,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    pub checksum: u32,
}

fn encode(mut header: Header, tensors: &[&Tensor]) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(8 * tensors.iter().map(|t| t.len()).sum::<usize>());
    for t in tensors {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.checksum = crc32fast::hash(&payload);
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
    let end = end.ok_or_else(|| Error::Format(format!("file truncated in {what}")))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

/// Parses and verifies a container, returning the header and its tensors.
pub fn decode(bytes: &[u8]) -> Result<(Header, Vec<Tensor>)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let len = u64::from_le_bytes(take(bytes, &mut pos, 8, "header length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Format("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(bytes, &mut pos, len, "header")?)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let payload = &bytes[pos..];
    let mut expected_len = 0usize;
    for e in &header.tensors {
        let n = e.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        expected_len = n
            .and_then(|n| n.checked_mul(8))
            .and_then(|b| expected_len.checked_add(b))
            .ok_or_else(|| Error::Format(format!("tensor `{}` is too large", e.name)))?;
    }
    if payload.len() != expected_len {
        return Err(Error::Format(format!(
            "payload is {} bytes, header declares {expected_len}",
            payload.len()
        )));
    }
    let found = crc32fast::hash(payload);
    if found != header.checksum {
        return Err(Error::Checksum { expected: header.checksum, found });
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for e in &header.tensors {
        let n = e.shape.iter().product();
        tensors.push(Tensor::new(e.shape.clone(), values.by_ref().take(n).collect())?);
    }
    Ok((header, tensors))
}

fn state_entries(state: &ModelState) -> Vec<(String, &Tensor)> {
    let mut named = Vec::new();
    state.student.named("student", &mut named);
    state.teacher.named("teacher", &mut named);
    state.velocity.named("velocity", &mut named);
    named
}

pub fn to_bytes(state: &ModelState) -> Result<Vec<u8>> {
    let named = state_entries(state);
    let header = Header {
        kind: Kind::Model,
        model: Some(state.config.clone()),
        epoch: state.epoch,
        step: state.step,
        tensors: named.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        checksum: 0,
    };
    let tensors: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
    encode(header, &tensors)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let (header, tensors) = decode(bytes)?;
    if header.kind != Kind::Model {
        return Err(Error::Format("file holds a mask, not a model".into()));
    }
    let config = header.model.ok_or_else(|| Error::Format("model checkpoint without model config".into()))?;
    let zeros = ModelParams::zeros(&config)?;
    let mut state = ModelState {
        config,
        student: zeros.clone(),
        teacher: zeros.clone(),
        velocity: zeros,
        epoch: header.epoch,
        step: header.step,
    };
    let expected: Vec<(String, Vec<usize>)> =
        state_entries(&state).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} tensors, model needs {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name {
            return Err(Error::Format(format!("expected tensor `{name}`, found `{}`", entry.name)));
        }
        if *shape != entry.shape {
            return Err(Error::TensorShape { name: name.clone(), found: entry.shape.clone(), expected: shape.clone() });
        }
    }
    let mut it = tensors.into_iter();
    for tree in [&mut state.student, &mut state.teacher, &mut state.velocity] {
        tree.visit_mut(&mut |t| *t = it.next().expect("counted above"));
    }
    Ok(state)
}

pub fn save(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    Ok(fs::write(path, to_bytes(state)?)?)
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelState> {
    from_bytes(&fs::read(path)?)
}

/// Stores a probability mask as a single `probs` tensor.
pub fn mask_to_bytes(mask: &PseudoLabelMask) -> Result<Vec<u8>> {
    let header = Header {
        kind: Kind::Mask,
        model: None,
        epoch: 0,
        step: 0,
        tensors: vec![TensorEntry { name: "probs".into(), shape: mask.probs().shape().to_vec() }],
        checksum: 0,
    };
    encode(header, &[mask.probs()])
}

pub fn mask_from_bytes(bytes: &[u8]) -> Result<PseudoLabelMask> {
    let (header, mut tensors) = decode(bytes)?;
    if header.kind != Kind::Mask || tensors.len() != 1 {
        return Err(Error::Format("file does not hold a single probability mask".into()));
    }
    PseudoLabelMask::new(tensors.pop().expect("one tensor"))
}

pub fn save_mask(mask: &PseudoLabelMask, path: impl AsRef<Path>) -> Result<()> {
    Ok(fs::write(path, mask_to_bytes(mask)?)?)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<PseudoLabelMask> {
    mask_from_bytes(&fs::read(path)?)
}
