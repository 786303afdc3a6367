//! The `.lfr` container.
//!
//! ```text
//! "LFR1"                      4 bytes
//! json_len                    u64 little-endian
//! json                        UTF-8 StoreMeta + "tensors" table
//! payloads                    at the absolute offsets declared in the table
//! ```
//!
//! Feature payloads are little-endian `f32`, row-major. Labels are stored as
//! table entries of kind `LABEL` (layer 0, shape `[N]`) with little-endian
//! `u32` payloads. Payload order is split (sorted), then kind (`CLS`, `AP`,
//! `PATCH`), then layer, then the labels of every split.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureStore, SplitData, StoreMeta, TokenKind};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LFR1";
const HEADER_LEN: u64 = 12;
const LABEL_KIND: &str = "LABEL";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub split: String,
    pub layer: usize,
    pub kind: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct MetaOnDisk {
    #[serde(flatten)]
    meta: StoreMeta,
    tensors: Vec<TensorEntry>,
}

enum Payload<'a> {
    Features(&'a [f32]),
    Labels(&'a [u32]),
}

fn table(store: &FeatureStore) -> Vec<(TensorEntry, Payload<'_>)> {
    let meta = &store.meta;
    let mut out = Vec::new();
    for (name, split) in &store.splits {
        let n = split.labels.len();
        for (&(kind, layer), data) in &split.tensors {
            let d = meta.dim(layer);
            let shape = match kind {
                TokenKind::Patch => vec![n, meta.num_patches, d],
                _ => vec![n, d],
            };
            out.push((
                TensorEntry {
                    split: name.clone(),
                    layer,
                    kind: kind.as_str().to_string(),
                    shape,
                    offset: 0,
                    nbytes: (data.len() * 4) as u64,
                },
                Payload::Features(data),
            ));
        }
    }
    for (name, split) in &store.splits {
        out.push((
            TensorEntry {
                split: name.clone(),
                layer: 0,
                kind: LABEL_KIND.to_string(),
                shape: vec![split.labels.len()],
                offset: 0,
                nbytes: (split.labels.len() * 4) as u64,
            },
            Payload::Labels(&split.labels),
        ));
    }
    out
}

/// Serializes a store. Invariants are checked before anything is written.
pub fn write_store(store: &FeatureStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    store.validate()?;
    let mut entries = table(store);

    // Offsets are absolute, so the JSON length feeds back into them. Iterate
    // until the header fits its own offsets, padding with spaces if it shrank.
    let mut payload_start = HEADER_LEN;
    let json = loop {
        let mut cursor = payload_start;
        for (e, _) in entries.iter_mut() {
            e.offset = cursor;
            cursor += e.nbytes;
        }
        let on_disk = MetaOnDisk {
            meta: store.meta.clone(),
            tensors: entries.iter().map(|(e, _)| e.clone()).collect(),
        };
        let mut json = serde_json::to_vec(&on_disk)?;
        let fits = HEADER_LEN + json.len() as u64;
        if fits <= payload_start {
            json.resize((payload_start - HEADER_LEN) as usize, b' ');
            break json;
        }
        payload_start = fits;
    };

    let total: u64 = entries.iter().map(|(e, _)| e.nbytes).sum();
    let mut bytes = Vec::with_capacity((payload_start + total) as usize);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (e, payload) in &entries {
        debug_assert_eq!(bytes.len() as u64, e.offset);
        match payload {
            Payload::Features(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
            Payload::Labels(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses the JSON header of an `.lfr` file without touching payloads.
pub fn read_header(bytes: &[u8]) -> Result<(StoreMeta, Vec<TensorEntry>)> {
    if bytes.len() < HEADER_LEN as usize || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic: not an LFR1 feature store".into()));
    }
    let json_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let json_end = HEADER_LEN
        .checked_add(json_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::Format("payload length mismatch: header runs past end of file".into()))?;
    let on_disk: MetaOnDisk = serde_json::from_slice(&bytes[HEADER_LEN as usize..json_end as usize])
        .map_err(|e| Error::Format(format!("malformed store header: {e}")))?;
    on_disk.meta.validate()?;
    Ok((on_disk.meta, on_disk.tensors))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<FeatureStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, entries) = read_header(&bytes)?;

    let mut splits: BTreeMap<String, SplitData> = meta
        .splits
        .keys()
        .map(|k| (k.clone(), SplitData::default()))
        .collect();
    let mut expected_end = HEADER_LEN + u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    for e in &entries {
        let count: usize = e.shape.iter().product();
        if e.nbytes != (count * 4) as u64 {
            return Err(Error::Format(format!(
                "payload length mismatch: {} {}@{} declares {} bytes for shape {:?}",
                e.split, e.kind, e.layer, e.nbytes, e.shape
            )));
        }
        let end = e.offset + e.nbytes;
        if end > bytes.len() as u64 {
            return Err(Error::Format(format!(
                "payload length mismatch: {} {}@{} ends at byte {} but the file has {}",
                e.split,
                e.kind,
                e.layer,
                end,
                bytes.len()
            )));
        }
        expected_end = expected_end.max(end);
        let raw = &bytes[e.offset as usize..end as usize];
        let split = splits
            .get_mut(&e.split)
            .ok_or_else(|| Error::Format(format!("tensor for undeclared split '{}'", e.split)))?;
        if e.kind == LABEL_KIND {
            split.labels = raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
        } else {
            let kind: TokenKind = serde_json::from_value(serde_json::Value::String(e.kind.clone()))
                .map_err(|_| Error::Format(format!("unknown tensor kind '{}'", e.kind)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            split.tensors.insert((kind, e.layer), values);
        }
    }
    if expected_end != bytes.len() as u64 {
        return Err(Error::Format(format!(
            "payload length mismatch: file has {} bytes, table accounts for {}",
            bytes.len(),
            expected_end
        )));
    }

    let store = FeatureStore { meta, splits };
    store.validate()?;
    Ok(store)
}
