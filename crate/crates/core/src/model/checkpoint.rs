//! Checkpoint container: a self-describing binary file with a JSON
//! header (config, parameter directory, adapter metadata, free-form
//! string metadata) followed by raw little-endian f64 arrays.
//!
//! Layout:
//! ```text
//! magic   8 bytes  "SKDGCKPT"
//! version u32 LE   1
//! hlen    u64 LE   header byte length
//! header  hlen bytes of JSON (see [`Header`])
//! data    for each param in directory order: numel * 8 bytes f64 LE
//!         for each adapter in directory order: A then B, f64 LE
//! ```
//!
//! `load(save(m))` reproduces `m` bitwise: values are stored as exact
//! f64 bit patterns.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraSet, LoraTarget};
use crate::tensor::Tensor;

use super::{param_specs, Mode, ModelConfig, ModelState, Param};

const MAGIC: &[u8; 8] = b"SKDGCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct AdapterEntry {
    layer: usize,
    target: LoraTarget,
    rank: usize,
    alpha: f64,
    dropout: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    mode: Mode,
    params: Vec<ParamEntry>,
    adapters: Vec<AdapterEntry>,
    meta: BTreeMap<String, String>,
}

fn push_array(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_array(data: &[u8], offset: &mut usize, n: usize) -> Result<Vec<f64>> {
    let bytes = n * 8;
    if *offset + bytes > data.len() {
        return Err(Error::Format(format!(
            "checkpoint truncated: need {} bytes at offset {}",
            bytes, *offset
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let start = *offset + i * 8;
        let mut b = [0u8; 8];
        b.copy_from_slice(&data[start..start + 8]);
        out.push(f64::from_le_bytes(b));
    }
    *offset += bytes;
    Ok(out)
}

/// Serialize a model (with any mounted adapters) to `path`. `meta` is
/// free-form provenance (seed, rng stream, regime, ...) recorded in the
/// header.
pub fn save_checkpoint(
    state: &ModelState,
    meta: &BTreeMap<String, String>,
    path: &Path,
) -> Result<()> {
    let header = Header {
        config: state.config.clone(),
        mode: state.mode,
        params: state
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.spec.name.clone(),
                shape: p.spec.shape.clone(),
                trainable: p.trainable,
            })
            .collect(),
        adapters: state
            .adapters
            .as_ref()
            .map(|s| {
                s.adapters
                    .iter()
                    .map(|a| AdapterEntry {
                        layer: a.layer,
                        target: a.target,
                        rank: a.rank,
                        alpha: a.alpha,
                        dropout: a.dropout,
                    })
                    .collect()
            })
            .unwrap_or_default(),
        meta: meta.clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("header encode: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for p in state.params() {
        push_array(&mut buf, &p.values);
    }
    if let Some(set) = &state.adapters {
        for a in &set.adapters {
            push_array(&mut buf, a.a.values());
            push_array(&mut buf, a.b.values());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Load a checkpoint saved by [`save_checkpoint`]. Returns the model and
/// the header metadata map.
pub fn load_checkpoint(path: &Path) -> Result<(ModelState, BTreeMap<String, String>)> {
    let data = fs::read(path)?;
    if data.len() < 20 || &data[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(data[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(data[12..20].try_into().unwrap()) as usize;
    if 20 + hlen > data.len() {
        return Err(Error::Format("header overruns file".into()));
    }
    let header: Header = serde_json::from_slice(&data[20..20 + hlen])
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;
    header.config.validate()?;

    // The directory must match the layout implied by the config.
    let expected = param_specs(&header.config);
    if expected.len() != header.params.len() {
        return Err(Error::Format(format!(
            "parameter directory has {} entries, config implies {}",
            header.params.len(),
            expected.len()
        )));
    }
    let mut offset = 20 + hlen;
    let mut params = Vec::with_capacity(expected.len());
    for (spec, entry) in expected.into_iter().zip(header.params.iter()) {
        if spec.name != entry.name || spec.shape != entry.shape {
            return Err(Error::Format(format!(
                "parameter {} mismatches config layout ({:?} vs {:?})",
                entry.name, entry.shape, spec.shape
            )));
        }
        let values = read_array(&data, &mut offset, spec.numel())?;
        params.push(Param {
            spec,
            values,
            trainable: entry.trainable,
        });
    }
    let mut state = ModelState::push_raw(header.config.clone(), params);
    state.mode = header.mode;
    if !header.adapters.is_empty() {
        let d = header.config.d_model;
        let mut adapters = Vec::with_capacity(header.adapters.len());
        for e in &header.adapters {
            let a = read_array(&data, &mut offset, e.rank * d)?;
            let b = read_array(&data, &mut offset, d * e.rank)?;
            adapters.push(LoraAdapter {
                layer: e.layer,
                target: e.target,
                rank: e.rank,
                alpha: e.alpha,
                dropout: e.dropout,
                a: Tensor::new(vec![e.rank, d], a)?,
                b: Tensor::new(vec![d, e.rank], b)?,
            });
        }
        state.adapters = Some(LoraSet { adapters });
    }
    if offset != data.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after arrays",
            data.len() - offset
        )));
    }
    Ok((state, header.meta))
}
