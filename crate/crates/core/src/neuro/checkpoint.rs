//! Model checkpoints: a JSON document holding the format tag, version,
//! topology, seed and the flat parameter vector as hex-encoded little-endian
//! `f64` bytes (bit-exact round trip).
//!
//! ```json
//! {"format":"fiberlab-equalizer","version":1,"spec":{...},"seed":7,
//!  "n_params":1234,"params_hex":"..."}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::EqualizerModel;
use crate::error::{Error, Result};
use crate::topology::TopologySpec;

pub const CHECKPOINT_FORMAT: &str = "fiberlab-equalizer";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized form of one model; embeddable in larger documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    spec: TopologySpec,
    seed: u64,
    n_params: usize,
    params_hex: String,
}

impl Checkpoint {
    pub fn from_model(model: &EqualizerModel) -> Self {
        let bytes: Vec<u8> = model.params.iter().flat_map(|v| v.to_le_bytes()).collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: model.spec,
            seed: model.seed,
            n_params: model.params.len(),
            params_hex: hex::encode(bytes),
        }
    }

    pub fn into_model(self) -> Result<EqualizerModel> {
        restore(self)
    }
}

pub fn to_json(model: &EqualizerModel) -> Result<String> {
    Ok(serde_json::to_string(&Checkpoint::from_model(model))?)
}

pub fn from_json(s: &str) -> Result<EqualizerModel> {
    restore(serde_json::from_str(s)?)
}

fn restore(ck: Checkpoint) -> Result<EqualizerModel> {
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::invalid(format!("not an equalizer checkpoint: '{}'", ck.format)));
    }
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::invalid(format!("unsupported checkpoint version {}", ck.version)));
    }
    let bytes = hex::decode(&ck.params_hex).map_err(|e| Error::invalid(format!("bad parameter data: {e}")))?;
    if bytes.len() != 8 * ck.n_params {
        return Err(Error::invalid("parameter data length does not match n_params"));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    EqualizerModel::from_parts(ck.spec, ck.seed, params)
}

pub fn save(model: &EqualizerModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<EqualizerModel> {
    from_json(&std::fs::read_to_string(path)?)
}
