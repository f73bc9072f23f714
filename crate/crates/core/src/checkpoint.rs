//! Checkpoint container.
//!
//! Layout: the 10-byte magic `BLOCKFLOW1`, a little-endian `u64` header length,
//! the JSON header, every named array as little-endian `f64` in header order, and
//! a 32-byte SHA-256 trailer over everything before it, so a flipped bit anywhere
//! (config echo included) is an integrity error rather than a silently different model.

use crate::error::{Error, Result};
use crate::ndnum::Tensor;
use crate::prior::{BlockPrior, HybridEncoder};
use crate::regularizers::{RegStrategy, StrategyKind};
use crate::velocity::{BlockFlowModel, NetConfig, VelocityNet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: &[u8; 10] = b"BLOCKFLOW1";
const TRAILER_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dim: usize,
    pub num_labels: usize,
    pub net: NetConfig,
    pub strategy: RegStrategy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelSpec,
    /// Free-form echo of the run configuration.
    pub config: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

fn named_arrays(model: &BlockFlowModel) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (i, (w, b)) in model.net.mlp.layers.iter().enumerate() {
        out.push((format!("net.{i}.weight"), w));
        out.push((format!("net.{i}.bias"), b));
    }
    out.push(("prior.mu".into(), &model.prior.mu));
    out.push(("prior.log_sigma".into(), &model.prior.log_sigma));
    if let Some(enc) = &model.encoder {
        for (i, (w, b)) in enc.mlp.layers.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), w));
            out.push((format!("encoder.{i}.bias"), b));
        }
    }
    out
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes `model` (label weights included) with a config echo.
pub fn to_bytes(model: &BlockFlowModel, config: serde_json::Value) -> Result<Vec<u8>> {
    let arrays = named_arrays(model);
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in &arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        });
        t.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
    }
    let weights = model.prior.label_weights();
    entries.push(ArrayEntry {
        name: "prior.label_weights".into(),
        shape: vec![weights.len()],
    });
    weights.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));

    let header = CheckpointHeader {
        model: ModelSpec {
            dim: model.dim(),
            num_labels: model.prior.num_labels,
            net: model.net_config.clone(),
            strategy: model.strategy,
        },
        config,
        arrays: entries,
    };
    let hjson = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + hjson.len() + payload.len() + TRAILER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&hjson);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save(model: &BlockFlowModel, config: serde_json::Value, path: &Path) -> Result<Vec<u8>> {
    let bytes = to_bytes(model, config)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes)
}

/// Splits a checkpoint into its header and payload, verifying magic and hash.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing BLOCKFLOW1 magic".into()));
    }
    if bytes.len() < MAGIC.len() + 8 + TRAILER_LEN {
        return Err(Error::Integrity("checkpoint truncated before its hash trailer".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::Integrity(format!(
            "content hash {} does not match trailer {}",
            hex(&digest),
            hex(trailer)
        )));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
    let hlen = u64::from_le_bytes(len) as usize;
    let start = MAGIC.len() + 8;
    let hbytes = body
        .get(start..start.saturating_add(hlen))
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(hbytes).map_err(|e| Error::Format(format!("header: {e}")))?;
    Ok((header, &body[start + hlen..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(BlockFlowModel, serde_json::Value)> {
    let (header, payload) = read_header(bytes)?;
    let spec = &header.model;
    let expected: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
    if payload.len() != expected * 8 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header describes {}",
            payload.len(),
            expected * 8
        )));
    }
    let mut arrays = std::collections::HashMap::new();
    let mut off = 0;
    for a in &header.arrays {
        let n: usize = a.shape.iter().product();
        let data: Vec<f64> = payload[off..off + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += n * 8;
        arrays.insert(a.name.clone(), (a.shape.clone(), data));
    }
    let mut take = |name: &str| -> Result<Tensor> {
        let (shape, data) = arrays
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing array {name}")))?;
        Tensor::new(if shape.is_empty() { vec![1] } else { shape }, data)
    };

    let weights = take("prior.label_weights")?.data().to_vec();
    let mut model = BlockFlowModel::new(spec.dim, weights.clone(), &spec.net, spec.strategy, 0)?;
    load_layers(&mut model.net, &mut take, "net")?;
    let mu = take("prior.mu")?;
    let ls = take("prior.log_sigma")?;
    let rows = |t: &Tensor| (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
    model.prior = BlockPrior::from_params(rows(&mu), rows(&ls), weights)?;
    if let Some(enc) = model.encoder.as_mut() {
        load_encoder(enc, &mut take)?;
    }
    if spec.strategy.kind == StrategyKind::Habr && model.encoder.is_none() {
        return Err(Error::Format("habr checkpoint without encoder".into()));
    }
    Ok((model, header.config))
}

fn load_layers(net: &mut VelocityNet, take: &mut impl FnMut(&str) -> Result<Tensor>, prefix: &str) -> Result<()> {
    for (i, (w, b)) in net.mlp.layers.iter_mut().enumerate() {
        *w = checked(take(&format!("{prefix}.{i}.weight"))?, w)?;
        *b = checked(take(&format!("{prefix}.{i}.bias"))?, b)?;
    }
    Ok(())
}

fn load_encoder(enc: &mut HybridEncoder, take: &mut impl FnMut(&str) -> Result<Tensor>) -> Result<()> {
    for (i, (w, b)) in enc.mlp.layers.iter_mut().enumerate() {
        *w = checked(take(&format!("encoder.{i}.weight"))?, w)?;
        *b = checked(take(&format!("encoder.{i}.bias"))?, b)?;
    }
    Ok(())
}

fn checked(loaded: Tensor, like: &Tensor) -> Result<Tensor> {
    if loaded.shape() != like.shape() {
        return Err(Error::Format(format!(
            "array shape {:?} does not match model {:?}",
            loaded.shape(),
            like.shape()
        )));
    }
    Ok(loaded.tracked())
}

pub fn load(path: &Path) -> Result<(BlockFlowModel, serde_json::Value)> {
    from_bytes(&std::fs::read(path)?)
}

/// `sha256("blob <len>\0" ++ bytes)`, git's object framing over SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}
