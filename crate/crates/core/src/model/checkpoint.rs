//! "JCKP" checkpoint container: magic, version, a JSON metadata blob, then
//! named parameter records with explicit shapes and little-endian f32 data.

use super::{ModelParams, NetworkConfig};
use crate::error::{Error, Result};
use crate::graph::TopologyJson;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"JCKP";
const VERSION: u32 = 1;

/// Everything needed to rebuild and re-run the branch this checkpoint
/// belongs to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: NetworkConfig,
    pub topology: TopologyJson,
    pub modality: String,
    /// Hash of the run configuration; consumers refuse mismatched inputs.
    pub config_hash: u64,
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    params: &ModelParams<f32>,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta_json = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);

    let entries = params.visit();
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &e in tensor.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ModelParams<f32>)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cursor = Cursor { buf: &buf, pos: 0 };

    let magic = cursor.bytes(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = cursor.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let meta_len = cursor.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cursor.bytes(meta_len)?)?;

    let mut params = ModelParams::<f32>::zeros_from_config(&meta.config)?;
    let count = cursor.u32()? as usize;
    let mut filled = 0usize;
    for _ in 0..count {
        let name_len = cursor.u32()? as usize;
        let name = String::from_utf8(cursor.bytes(name_len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint: non-utf8 parameter name".into()))?;
        let rank = cursor.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cursor.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cursor.bytes(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut matched = false;
        for (pname, tensor) in params.visit_mut() {
            if pname == name {
                if tensor.shape() != shape.as_slice() {
                    return Err(Error::Format(format!(
                        "checkpoint: {name} has shape {shape:?}, config implies {:?}",
                        tensor.shape()
                    )));
                }
                tensor.data_mut().copy_from_slice(&data);
                matched = true;
                break;
            }
        }
        if !matched {
            return Err(Error::Format(format!("checkpoint: unknown parameter {name}")));
        }
        filled += 1;
    }
    let expected = params.visit().len();
    if filled != expected {
        return Err(Error::Format(format!(
            "checkpoint: {filled} parameters, config implies {expected}"
        )));
    }
    Ok((meta, params))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint: truncated file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::pose14_topology;
    use crate::model::ModelState;

    #[test]
    fn checkpoint_roundtrip() {
        let config = NetworkConfig::reduced(2, 8, 14, 1, 4, 99);
        let state = ModelState::<f32>::init(config.clone()).unwrap();
        let meta = CheckpointMeta {
            config,
            topology: pose14_topology().to_json(),
            modality: "joints".into(),
            config_hash: 0xdead_beef,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.jckp");
        save_checkpoint(&path, &meta, &state.params).unwrap();
        let (meta2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta2.config_hash, 0xdead_beef);
        assert_eq!(meta2.modality, "joints");
        for ((n1, t1), (n2, t2)) in state.params.visit().iter().zip(params2.visit().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jckp");
        std::fs::write(&path, b"NOPE1234").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
