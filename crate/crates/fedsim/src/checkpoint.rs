//! Array-plus-header persistence.
//!
//! Every artifact the simulator saves (model checkpoints, datasets, triggers)
//! uses the same container: a JSON header describing shapes and ordering,
//! followed by the raw little-endian f64 array. Round-trips are bit-exact
//! because values are stored as their IEEE-754 bytes, never as decimal text.
//!
//! Layout: magic `FSIM`, u32 LE header length, header JSON (UTF-8), then
//! `len` f64 values in little-endian byte order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{flatten, unflatten, LayerSpec, ModelParams};

const MAGIC: &[u8; 4] = b"FSIM";

/// JSON header stored in front of the flat array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    /// What the array holds: "model", "dataset", "trigger", ...
    pub kind: String,
    /// Element count of the f64 array that follows.
    pub len: usize,
    /// Shape metadata; interpretation depends on `kind`.
    pub shapes: Vec<Vec<usize>>,
    /// Human-readable ordering contract for the flat array.
    pub order: String,
    /// Layer specs for model checkpoints, empty otherwise.
    #[serde(default)]
    pub layer_specs: Vec<LayerSpec>,
    /// Free-form metadata (target label, round index, ...).
    #[serde(default)]
    pub meta: std::collections::BTreeMap<String, serde_json::Value>,
}

/// Serialize a header and array into the container format.
pub fn write_blob(mut w: impl Write, header: &Header, data: &[f64]) -> Result<()> {
    if header.len != data.len() {
        return Err(Error::Checkpoint(format!(
            "header.len {} != data length {}",
            header.len,
            data.len()
        )));
    }
    let header_bytes =
        serde_json::to_vec(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Parse a container back into its header and array.
pub fn read_blob(mut r: impl Read) -> Result<(Header, Vec<f64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut data = Vec::with_capacity(header.len);
    let mut buf = [0u8; 8];
    for _ in 0..header.len {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok((header, data))
}

/// Save a model checkpoint: the flattening contract is layer-major, weights
/// before biases, row-major within each tensor.
pub fn save_model(path: &Path, arch: &[LayerSpec], model: &ModelParams) -> Result<()> {
    let flat = flatten(model);
    let mut shapes = Vec::new();
    for spec in arch {
        shapes.push(spec.weight_shape());
        shapes.push(spec.bias_shape());
    }
    let header = Header {
        kind: "model".into(),
        len: flat.len(),
        shapes,
        order: "layer-major; per layer weights then biases; row-major".into(),
        layer_specs: arch.to_vec(),
        meta: Default::default(),
    };
    let file = std::fs::File::create(path)?;
    write_blob(std::io::BufWriter::new(file), &header, &flat)
}

/// Load a model checkpoint saved by [`save_model`].
pub fn load_model(path: &Path) -> Result<(Vec<LayerSpec>, ModelParams)> {
    let file = std::fs::File::open(path)?;
    let (header, data) = read_blob(std::io::BufReader::new(file))?;
    if header.kind != "model" {
        return Err(Error::Checkpoint(format!(
            "expected model checkpoint, found kind {:?}",
            header.kind
        )));
    }
    let model = unflatten(&data, &header.layer_specs)?;
    Ok((header.layer_specs, model))
}
