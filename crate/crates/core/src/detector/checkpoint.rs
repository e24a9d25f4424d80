//! Checkpoints: a JSON manifest plus a flat little-endian f64 blob split into
//! named sections (weights, biases and both momentum buffers of every tensor).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, TrainConfig};
use super::network::Network;
use super::train::TrainState;
use super::Detector;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "params.bin";
const FORMAT: &str = "boostdet-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Section {
    pub name: String,
    /// Offset in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub state: TrainState,
    pub sections: Vec<Section>,
    pub blob_sha256: String,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

const PARTS: [&str; 4] = ["weights", "biases", "momentum_weights", "momentum_biases"];

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    det: &Detector<T>,
    train: &TrainConfig,
    seed: u64,
    state: TrainState,
) -> Result<Checkpoint> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut sections = Vec::new();
    let mut offset = 0;
    for p in det.net.params() {
        for (part, values) in PARTS.iter().zip([&p.weights, &p.biases, &p.momentum_weights, &p.momentum_biases]) {
            for v in values.iter() {
                blob.extend_from_slice(&v.as_f64().to_le_bytes());
            }
            sections.push(Section { name: format!("{}.{part}", p.name), offset, len: values.len() });
            offset += values.len();
        }
    }
    let ckpt = Checkpoint {
        format: FORMAT.into(),
        model: det.config.clone(),
        train: train.clone(),
        seed,
        state,
        sections,
        blob_sha256: hex_digest(&blob),
    };
    // blob first so a manifest never points at a missing blob
    fs::write(dir.join(CHECKPOINT_BLOB), &blob)?;
    fs::write(dir.join(CHECKPOINT_MANIFEST), serde_json::to_string_pretty(&ckpt)?)?;
    Ok(ckpt)
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(Detector<T>, Checkpoint)> {
    let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?)?;
    if ckpt.format != FORMAT {
        return Err(Error::Format(format!("unsupported checkpoint format `{}`", ckpt.format)));
    }
    let blob = fs::read(dir.join(CHECKPOINT_BLOB))?;
    if hex_digest(&blob) != ckpt.blob_sha256 {
        return Err(Error::Format("checkpoint blob checksum mismatch".into()));
    }
    if blob.len() % 8 != 0 {
        return Err(Error::Format("checkpoint blob is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut net = Network::<T>::new(&ckpt.model, 0)?;
    let mut sections = ckpt.sections.iter();
    for p in net.params_mut() {
        let name = p.name.clone();
        for (part, dst) in PARTS
            .iter()
            .zip([&mut p.weights, &mut p.biases, &mut p.momentum_weights, &mut p.momentum_biases])
        {
            let want = format!("{name}.{part}");
            let s = sections
                .next()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks section `{want}`")))?;
            if s.name != want || s.len != dst.len() || s.offset + s.len > values.len() {
                return Err(Error::Format(format!(
                    "section `{}` ({} values) does not fit `{want}` ({} values)",
                    s.name,
                    s.len,
                    dst.len()
                )));
            }
            for (d, &v) in dst.iter_mut().zip(&values[s.offset..s.offset + s.len]) {
                *d = T::lit(v);
            }
        }
    }
    if let Some(s) = sections.next() {
        return Err(Error::Format(format!("unexpected checkpoint section `{}`", s.name)));
    }
    let det = Detector::from_parts(ckpt.model.clone(), net)?;
    Ok((det, ckpt))
}
