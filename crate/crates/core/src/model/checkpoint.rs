//! Layout: 8 magic bytes, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then every tensor as
//! raw little-endian `f32` at the offsets the header lists.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Network, StatsMap};
use super::spec::NetworkSpec;
use super::ModelError;
use crate::tensor::{RunningStats, Tensor};

const MAGIC: &[u8; 8] = b"LUNGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EntryKind {
    Param,
    RunningMean,
    RunningVar,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    /// Offset into the payload, in values.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    spec: NetworkSpec,
    entries: Vec<Entry>,
    payload_values: usize,
}

/// Serializes parameters and running statistics bit-exactly.
pub fn checkpoint_bytes(net: &Network) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    let mut push = |name: &str, kind: EntryKind, shape: Vec<usize>, data: &[f32]| {
        entries.push(Entry { name: name.to_string(), kind, shape, offset: payload.len() });
        payload.extend_from_slice(data);
    };
    for (name, t) in net.params() {
        push(name, EntryKind::Param, t.shape().to_vec(), t.data());
    }
    for (name, s) in net.running_stats() {
        push(name, EntryKind::RunningMean, vec![s.mean.len()], &s.mean);
        push(name, EntryKind::RunningVar, vec![s.var.len()], &s.var);
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        dtype: "f32-le".into(),
        spec: net.spec().clone(),
        payload_values: payload.len(),
        entries,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a checkpoint. With `expected`, the stored tensors are validated
/// against that spec instead of the embedded one.
pub fn network_from_bytes(bytes: &[u8], expected: Option<&NetworkSpec>) -> Result<Network, ModelError> {
    if bytes.len() < PREAMBLE {
        if !MAGIC.starts_with(bytes) && !bytes.starts_with(MAGIC) {
            return Err(ModelError::BadMagic);
        }
        return Err(ModelError::Truncated { expected: PREAMBLE, found: bytes.len() });
    }
    if &bytes[..8] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = PREAMBLE.checked_add(header_len).ok_or_else(|| ModelError::Header("length overflow".into()))?;
    if bytes.len() < header_end {
        return Err(ModelError::Truncated { expected: header_end, found: bytes.len() });
    }
    let header: Header =
        serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| ModelError::Header(e.to_string()))?;
    if header.format_version != version {
        return Err(ModelError::Header(format!(
            "header says version {} but preamble says {version}",
            header.format_version
        )));
    }
    let total = header_end + header.payload_values * 4;
    if bytes.len() != total {
        return Err(ModelError::Truncated { expected: total, found: bytes.len() });
    }
    let payload: Vec<f32> =
        bytes[header_end..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();

    let mut params = BTreeMap::new();
    let mut stats: StatsMap<f32> = BTreeMap::new();
    for e in header.entries {
        let len: usize = e.shape.iter().product();
        let end = e
            .offset
            .checked_add(len)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| ModelError::Header(format!("entry {} overruns the payload", e.name)))?;
        let data = payload[e.offset..end].to_vec();
        match e.kind {
            EntryKind::Param => {
                let t = Tensor::new(e.shape, data).map_err(|err| ModelError::Header(format!("{}: {err}", e.name)))?;
                params.insert(e.name, t);
            }
            EntryKind::RunningMean => stats.entry(e.name).or_insert_with(|| RunningStats::new(0)).mean = data,
            EntryKind::RunningVar => stats.entry(e.name).or_insert_with(|| RunningStats::new(0)).var = data,
        }
    }
    let spec = expected.cloned().unwrap_or(header.spec);
    Network::from_parts(spec, params, stats)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<(), ModelError> {
    fs::write(path, checkpoint_bytes(net))
        .map_err(|e| ModelError::Io { path: path.to_path_buf(), detail: e.to_string() })
}

/// Loads a checkpoint using the spec embedded in the file.
pub fn load_checkpoint(path: &Path) -> Result<Network, ModelError> {
    let bytes = fs::read(path).map_err(|e| ModelError::Io { path: path.to_path_buf(), detail: e.to_string() })?;
    network_from_bytes(&bytes, None)
}

/// Loads a checkpoint, requiring its tensors to fit `spec`.
pub fn load_checkpoint_for(path: &Path, spec: &NetworkSpec) -> Result<Network, ModelError> {
    let bytes = fs::read(path).map_err(|e| ModelError::Io { path: path.to_path_buf(), detail: e.to_string() })?;
    network_from_bytes(&bytes, Some(spec))
}
