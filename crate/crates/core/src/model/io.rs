//! Weight files.
//!
//! Versioned binary container: magic "LIMEW1\0\0", then a length-prefixed
//! JSON copy of the config, then shape-prefixed tensors in `named_tensors`
//! order. All integers and floats are little-endian; floats are raw f64 bits,
//! so a save/load round trip is exact. A human-readable JSON manifest of the
//! config is written next to the binary as `<path>.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use super::{LayerWeights, Model, ModelConfig, ModelError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LIMEW1\0\0";

fn io_err(context: &str, e: std::io::Error) -> ModelError {
    ModelError::Io(format!("{context}: {e}"))
}

impl Model {
    /// Write the binary weight file and its config manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| io_err("create weight file", e))?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC).map_err(|e| io_err("write magic", e))?;
        let config_json = serde_json::to_vec(&self.config)
            .map_err(|e| ModelError::Io(format!("encode config: {e}")))?;
        w.write_all(&(config_json.len() as u32).to_le_bytes())
            .map_err(|e| io_err("write config length", e))?;
        w.write_all(&config_json)
            .map_err(|e| io_err("write config", e))?;
        let tensors = self.named_tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())
            .map_err(|e| io_err("write tensor count", e))?;
        for (name, t) in tensors {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u16).to_le_bytes())
                .map_err(|e| io_err("write name length", e))?;
            w.write_all(name_bytes).map_err(|e| io_err("write name", e))?;
            w.write_all(&[t.shape().len() as u8])
                .map_err(|e| io_err("write rank", e))?;
            for &dim in t.shape() {
                w.write_all(&(dim as u32).to_le_bytes())
                    .map_err(|e| io_err("write dim", e))?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())
                    .map_err(|e| io_err("write data", e))?;
            }
        }
        w.flush().map_err(|e| io_err("flush weight file", e))?;

        let manifest_path = manifest_path(path);
        let manifest = serde_json::to_string_pretty(&self.config)
            .map_err(|e| ModelError::Io(format!("encode manifest: {e}")))?;
        std::fs::write(&manifest_path, manifest).map_err(|e| io_err("write manifest", e))?;
        Ok(())
    }

    /// Load a binary weight file written by `save`. The manifest is advisory;
    /// only the binary is read.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| io_err("open weight file", e))?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| io_err("read magic", e))?;
        if &magic != MAGIC {
            return Err(ModelError::Io(format!(
                "bad magic {:?}, not a weight file",
                &magic
            )));
        }
        let config_len = read_u32(&mut r, "config length")? as usize;
        let mut config_bytes = vec![0u8; config_len];
        r.read_exact(&mut config_bytes)
            .map_err(|e| io_err("read config", e))?;
        let config: ModelConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| ModelError::Io(format!("decode config: {e}")))?;
        config.validate()?;

        let mut model = zeroed_model(config)?;
        let count = read_u32(&mut r, "tensor count")? as usize;
        let mut slots = model.named_tensors_mut();
        if count != slots.len() {
            return Err(ModelError::Io(format!(
                "file holds {count} tensors, config needs {}",
                slots.len()
            )));
        }
        for (expected_name, slot) in slots.iter_mut() {
            let name_len = read_u16(&mut r, "name length")? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|e| io_err("read name", e))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| ModelError::Io(format!("tensor name not utf-8: {e}")))?;
            if &name != expected_name {
                return Err(ModelError::Io(format!(
                    "tensor order mismatch: found {name:?}, expected {expected_name:?}"
                )));
            }
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank).map_err(|e| io_err("read rank", e))?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(&mut r, "dim")? as usize);
            }
            if shape != slot.shape() {
                return Err(ModelError::Io(format!(
                    "tensor {name}: file shape {:?} does not match config shape {:?}",
                    shape,
                    slot.shape()
                )));
            }
            let mut buf = [0u8; 8];
            for v in slot.data_mut().iter_mut() {
                r.read_exact(&mut buf).map_err(|e| io_err("read data", e))?;
                *v = f64::from_le_bytes(buf);
            }
        }
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => {
                return Err(ModelError::Io(
                    "trailing bytes after last tensor".into(),
                ))
            }
            Err(e) => return Err(io_err("probe end of file", e)),
        }
        Ok(model)
    }
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    std::path::PathBuf::from(os)
}

fn read_u32(r: &mut impl std::io::Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| io_err(what, e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl std::io::Read, what: &str) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf).map_err(|e| io_err(what, e))?;
    Ok(u16::from_le_bytes(buf))
}

/// All-zero tensors in the shapes the config dictates; load() fills them.
fn zeroed_model(config: ModelConfig) -> Result<Model> {
    let d = config.model_dim;
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            norm1_gain: Tensor::zeros(vec![d]),
            wq: Tensor::zeros(vec![d, d]),
            wk: Tensor::zeros(vec![d, d]),
            wv: Tensor::zeros(vec![d, d]),
            wo: Tensor::zeros(vec![d, d]),
            norm2_gain: Tensor::zeros(vec![d]),
            w_ff1: Tensor::zeros(vec![d, config.ff_dim()]),
            w_ff2: Tensor::zeros(vec![config.ff_dim(), d]),
        })
        .collect();
    Ok(Model {
        token_embedding: Tensor::zeros(vec![config.vocab_size, d]),
        position_embedding: Tensor::zeros(vec![config.max_sequence, d]),
        projector: Tensor::zeros(vec![config.patch_dim, d]),
        layers,
        final_norm_gain: Tensor::zeros(vec![d]),
        output_projection: Tensor::zeros(vec![d, config.vocab_size]),
        config,
    })
}
