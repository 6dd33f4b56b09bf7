//! Binary checkpoint format.
//!
//! ```text
//! b"DDIVECK1" | u32 LE header length | JSON header | f64 LE parameter data
//! ```
//!
//! The header holds the latent spec, the network config, free-form string
//! metadata and one entry per parameter (name, shape, trainable flag) in name
//! order. Parameter data follows in the same order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DeepDive, LatentSpec, NetworkConfig};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{invalid, Result};

pub const MAGIC: &[u8; 8] = b"DDIVECK1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    latent: LatentSpec,
    net: NetworkConfig,
    meta: BTreeMap<String, String>,
    params: Vec<Entry>,
}

pub fn to_bytes(model: &DeepDive, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let header = Header {
        latent: model.latent.clone(),
        net: model.net.clone(),
        meta: meta.clone(),
        params: model
            .params
            .iter()
            .map(|(name, p)| Entry {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| crate::Error::Invalid("checkpoint header too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * model.params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(DeepDive, BTreeMap<String, String>)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return invalid("not a checkpoint file (bad magic)");
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let Some(json) = bytes.get(12..12 + len) else {
        return invalid("truncated checkpoint header");
    };
    let header: Header = serde_json::from_slice(json)?;
    header.latent.validate()?;
    header.net.validate()?;
    let mut data = &bytes[12 + len..];
    let mut params = ParamStore::new();
    for e in header.params {
        let n: usize = e.shape.iter().product();
        if data.len() < 8 * n {
            return invalid(format!("truncated data for parameter {}", e.name));
        }
        let values = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[8 * n..];
        params.insert(e.name.clone(), Tensor::new(&e.shape, values)?);
        params.get_mut(&e.name)?.trainable = e.trainable;
    }
    if !data.is_empty() {
        return invalid("trailing bytes after checkpoint data");
    }
    let model = DeepDive {
        latent: header.latent,
        net: header.net,
        params,
    };
    // A checkpoint must carry exactly the parameters its config implies.
    let reference = DeepDive::new(model.latent.clone(), model.net.clone(), 0)?;
    for (name, p) in reference.params.iter() {
        let got = model.params.get(name)?;
        if got.value.shape() != p.value.shape() {
            return invalid(format!(
                "parameter {name} has shape {:?}, config implies {:?}",
                got.value.shape(),
                p.value.shape()
            ));
        }
    }
    if reference.params.len() != model.params.len() {
        return invalid("checkpoint carries parameters its config does not define");
    }
    Ok((model, header.meta))
}

pub fn save(path: &Path, model: &DeepDive, meta: &BTreeMap<String, String>) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(DeepDive, BTreeMap<String, String>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
