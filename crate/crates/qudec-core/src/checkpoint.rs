//! Binary archive for named parameter arrays.
//!
//! Layout: 8-byte magic, little-endian u64 header length, JSON header, then
//! the concatenated raw little-endian f32 payload. The header carries a schema
//! version, free-form metadata (model config, optimizer state, schedule) and
//! one entry per array with its name, shape and offset. Values round-trip
//! bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, QudecModel, QudecNet};
use crate::tape::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"QDARCH01";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    meta: serde_json::Value,
    entries: Vec<EntryDesc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryDesc {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    offset: u64,
    len: u64,
}

pub struct Archive {
    pub meta: serde_json::Value,
    pub entries: Vec<ArchiveEntry>,
}

#[derive(Debug)]
pub struct ArchiveEntry {
    pub name: String,
    pub tensor: Tensor<f32>,
    pub trainable: bool,
}

impl Archive {
    pub fn find(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub fn write_archive<'a>(
    path: &Path,
    meta: &serde_json::Value,
    entries: impl Iterator<Item = (&'a str, &'a Tensor<f32>, bool)>,
) -> Result<()> {
    let mut descs = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor, trainable) in entries {
        let offset = payload.len() as u64;
        for &v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        descs.push(EntryDesc {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            trainable,
            offset,
            len: tensor.len() as u64,
        });
    }
    let header = Header {
        schema_version: SCHEMA_VERSION,
        meta: meta.clone(),
        entries: descs,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::data(format!("header encode: {e}")))?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let mut rd = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    rd.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "{}: not a parameter archive (bad magic)",
            path.display()
        )));
    }
    let mut lenb = [0u8; 8];
    rd.read_exact(&mut lenb)?;
    let hlen = u64::from_le_bytes(lenb) as usize;
    let mut hbytes = vec![0u8; hlen];
    rd.read_exact(&mut hbytes)?;
    let header: Header =
        serde_json::from_slice(&hbytes).map_err(|e| Error::data(format!("header decode: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::data(format!(
            "unsupported archive schema version {} (expected {})",
            header.schema_version, SCHEMA_VERSION
        )));
    }
    let mut payload = Vec::new();
    rd.read_to_end(&mut payload)?;
    let mut entries = Vec::with_capacity(header.entries.len());
    for d in header.entries {
        let start = d.offset as usize;
        let nbytes = d.len as usize * 4;
        if start + nbytes > payload.len() {
            return Err(Error::data(format!(
                "archive entry {} overruns the payload",
                d.name
            )));
        }
        let mut data = Vec::with_capacity(d.len as usize);
        for chunk in payload[start..start + nbytes].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let expect: usize = d.shape.iter().product();
        if expect != data.len() {
            return Err(Error::data(format!(
                "archive entry {}: shape {:?} does not match {} values",
                d.name,
                d.shape,
                data.len()
            )));
        }
        entries.push(ArchiveEntry {
            name: d.name,
            tensor: Tensor::from_vec(&d.shape, data),
            trainable: d.trainable,
        });
    }
    Ok(Archive {
        meta: header.meta,
        entries,
    })
}

/// Saves model parameters (and any extra arrays, e.g. optimizer moments).
pub fn save_model(
    path: &Path,
    model: &QudecModel,
    extra_meta: serde_json::Value,
    extra_arrays: &[(String, Tensor<f32>)],
) -> Result<()> {
    let meta = serde_json::json!({
        "config": model.config(),
        "extra": extra_meta,
    });
    let model_entries = model
        .store
        .iter()
        .map(|(_, name, tensor, trainable)| (name, tensor, trainable));
    let more = extra_arrays
        .iter()
        .map(|(name, tensor)| (name.as_str(), tensor, false));
    write_archive(path, &meta, model_entries.chain(more))
}

/// Loads a model checkpoint. Every parameter of the freshly constructed
/// network must be present with the exact registered shape; anything else is
/// rejected. Returns the model, the stored metadata and any extra arrays.
pub fn load_model(path: &Path) -> Result<(QudecModel, serde_json::Value, Vec<ArchiveEntry>)> {
    let archive = read_archive(path)?;
    let config: ModelConfig = serde_json::from_value(
        archive
            .meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::data("checkpoint has no model config"))?,
    )
    .map_err(|e| Error::data(format!("bad model config in checkpoint: {e}")))?;

    let mut store = ParamStore::new();
    let net = QudecNet::init(config, &mut store, 0);
    let mut extras = Vec::new();
    let mut used = vec![false; store.len()];
    for entry in archive.entries {
        match store.find(&entry.name) {
            Some(pid) => {
                let expect = store.get(pid).shape().to_vec();
                if expect != entry.tensor.shape() {
                    return Err(Error::contract(format!(
                        "checkpoint shape mismatch for {}: file has {:?}, layer listing requires {:?}",
                        entry.name,
                        entry.tensor.shape(),
                        expect
                    )));
                }
                if !entry.tensor.all_finite() {
                    return Err(Error::contract(format!(
                        "checkpoint parameter {} contains non-finite values",
                        entry.name
                    )));
                }
                *store.get_mut(pid) = entry.tensor;
                used[pid] = true;
            }
            None => extras.push(entry),
        }
    }
    if let Some((pid, _)) = used.iter().enumerate().find(|(_, &u)| !u) {
        return Err(Error::contract(format!(
            "checkpoint is missing parameter {}",
            store.name(pid)
        )));
    }
    let model = QudecModel { net, store };
    model.architecture_report()?;
    let extra_meta = archive
        .meta
        .get("extra")
        .cloned()
        .unwrap_or(serde_json::Value::Null);
    Ok((model, extra_meta, extras))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use tempfile::tempdir;

    #[test]
    fn model_roundtrip_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = QudecModel::new(ModelConfig::micro(), 42);
        save_model(&path, &model, serde_json::json!({"note": "t"}), &[]).unwrap();
        let (loaded, meta, extras) = load_model(&path).unwrap();
        assert_eq!(meta["note"], "t");
        assert!(extras.is_empty());
        assert_eq!(model.store.len(), loaded.store.len());
        for (pid, name, tensor, _) in model.store.iter() {
            let other = loaded.store.get(loaded.store.find(name).unwrap());
            assert_eq!(tensor, other, "mismatch in {name} (pid {pid})");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = QudecModel::new(ModelConfig::micro(), 42);
        // corrupt one conv weight's shape
        let meta = serde_json::json!({"config": model.config(), "extra": null});
        let mut swapped = false;
        let entries: Vec<(String, Tensor<f32>, bool)> = model
            .store
            .iter()
            .map(|(_, name, tensor, trainable)| {
                if !swapped && tensor.shape().len() == 4 {
                    swapped = true;
                    (name.to_string(), Tensor::zeros(&[1, 1, 3, 3]), trainable)
                } else {
                    (name.to_string(), tensor.clone(), trainable)
                }
            })
            .collect();
        write_archive(
            &path,
            &meta,
            entries.iter().map(|(n, t, tr)| (n.as_str(), t, *tr)),
        )
        .unwrap();
        match load_model(&path) {
            Err(e) => assert!(matches!(e, Error::Contract(_)), "got {e:?}"),
            Ok(_) => panic!("shape mismatch must be rejected"),
        }
    }

    #[test]
    fn missing_parameter_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = QudecModel::new(ModelConfig::micro(), 42);
        let meta = serde_json::json!({"config": model.config(), "extra": null});
        let entries: Vec<(String, Tensor<f32>, bool)> = model
            .store
            .iter()
            .skip(1)
            .map(|(_, n, t, tr)| (n.to_string(), t.clone(), tr))
            .collect();
        write_archive(
            &path,
            &meta,
            entries.iter().map(|(n, t, tr)| (n.as_str(), t, *tr)),
        )
        .unwrap();
        assert!(load_model(&path).is_err());
    }
}
