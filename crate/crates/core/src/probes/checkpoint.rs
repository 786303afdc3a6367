//! `.lfpb` probe checkpoints.
//!
//! ```text
//! "LFPB"      4 bytes
//! json_len    u64 little-endian
//! json        {layout, seed, provenance, params: [{name, shape}]}
//! payload     little-endian f64 parameter arrays, in declared order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttentiveProbe, LinearProbe, Probe, ProbeLayout};
use crate::diffcore::{Param, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LFPB";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    layout: ProbeLayout,
    seed: u64,
    provenance: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub probe: Probe,
    pub seed: u64,
    /// Training configuration and plan, free-form.
    pub provenance: serde_json::Value,
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let params = ckpt.probe.params();
    let header = Header {
        layout: ckpt.probe.layout().clone(),
        seed: ckpt.seed,
        provenance: ckpt.provenance.clone(),
        params: params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(12 + json.len() + 8 * ckpt.probe.num_params());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for p in params {
        for x in p.value.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic: not an LFPB checkpoint".into()));
    }
    let json_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = 12usize
        .checked_add(json_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("checkpoint header runs past end of file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[12..body])
        .map_err(|e| Error::Format(format!("malformed checkpoint header: {e}")))?;

    let mut cursor = body;
    let mut params = Vec::with_capacity(header.params.len());
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        let end = cursor + 8 * n;
        if end > bytes.len() {
            return Err(Error::Format(format!(
                "payload length mismatch: parameter {} truncated",
                entry.name
            )));
        }
        let data = bytes[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Param::new(entry.name, Tensor::from_vec(&entry.shape, data)?));
        cursor = end;
    }
    if cursor != bytes.len() {
        return Err(Error::Format("payload length mismatch: trailing bytes in checkpoint".into()));
    }
    let probe = if header.layout.config.kind.is_attentive() {
        Probe::Attentive(AttentiveProbe::from_params(&header.layout, params)?)
    } else {
        Probe::Linear(LinearProbe::from_params(&header.layout, params)?)
    };
    Ok(Checkpoint {
        probe,
        seed: header.seed,
        provenance: header.provenance,
    })
}
