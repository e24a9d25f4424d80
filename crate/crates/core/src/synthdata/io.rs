//! On-disk dataset layout: `dataset.json` (config and split) next to
//! `scenes.jsonl`, one scene per line. Features are stored as base64
//! little-endian f64 or left out and regenerated from the scene spec; either
//! way a SHA-256 of the feature bytes is checked on load.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_scene, Dataset, DatasetConfig, Scene, SceneSpec};
use crate::error::{Error, Result};
use crate::numcore::Grid;
use crate::postprocess::GroundTruth;

pub const MANIFEST_FILE: &str = "dataset.json";
pub const SCENES_FILE: &str = "scenes.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureEncoding {
    Base64F64,
    /// Features are rebuilt from the `SceneSpec` on load.
    #[default]
    Regenerate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: DatasetConfig,
    encoding: FeatureEncoding,
    scenes_file: String,
    train: Vec<usize>,
    val: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub index: usize,
    pub spec: SceneSpec,
    pub ground_truths: Vec<GroundTruth<f64>>,
    pub vagueness: Vec<f64>,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
}

fn feature_bytes(grid: &Grid<f64>) -> Vec<u8> {
    grid.values().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl SceneRecord {
    pub fn from_scene(index: usize, scene: &Scene, encoding: FeatureEncoding) -> Self {
        let bytes = feature_bytes(&scene.grid);
        Self {
            index,
            spec: scene.spec.clone(),
            ground_truths: scene.ground_truths.clone(),
            vagueness: scene.vagueness.clone(),
            sha256: digest(&bytes),
            features: match encoding {
                FeatureEncoding::Base64F64 => Some(B64.encode(&bytes)),
                FeatureEncoding::Regenerate => None,
            },
        }
    }

    pub fn into_scene(self) -> Result<Scene> {
        let mut scene = generate_scene(&self.spec)?;
        if let Some(data) = &self.features {
            let bytes = B64
                .decode(data)
                .map_err(|e| Error::Format(format!("scene {}: bad base64 features: {e}", self.index)))?;
            if bytes.len() != scene.grid.values().len() * 8 {
                return Err(Error::Format(format!(
                    "scene {}: {} feature bytes, expected {}",
                    self.index,
                    bytes.len(),
                    scene.grid.values().len() * 8
                )));
            }
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let (h, w, c) = scene.grid.shape();
            scene.grid = Grid::from_vec(h, w, c, values)?;
        }
        let got = digest(&feature_bytes(&scene.grid));
        if got != self.sha256 {
            return Err(Error::Format(format!("scene {}: feature checksum mismatch", self.index)));
        }
        if scene.ground_truths != self.ground_truths {
            return Err(Error::Format(format!("scene {}: ground truth disagrees with spec", self.index)));
        }
        Ok(scene)
    }
}

pub fn write_dataset(ds: &Dataset, dir: &Path, encoding: FeatureEncoding) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        config: ds.config.clone(),
        encoding,
        scenes_file: SCENES_FILE.into(),
        train: ds.train.clone(),
        val: ds.val.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    let mut out = BufWriter::new(File::create(dir.join(SCENES_FILE))?);
    for (i, scene) in ds.scenes.iter().enumerate() {
        serde_json::to_writer(&mut out, &SceneRecord::from_scene(i, scene, encoding))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let reader = BufReader::new(File::open(dir.join(&manifest.scenes_file))?);
    let mut scenes = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line)?;
        if rec.index != scenes.len() {
            return Err(Error::Format(format!("line {}: scene index {} out of order", line_no + 1, rec.index)));
        }
        scenes.push(rec.into_scene()?);
    }
    let n = scenes.len();
    if manifest.train.iter().chain(&manifest.val).any(|&i| i >= n) {
        return Err(Error::Format("split references a missing scene".into()));
    }
    Ok(Dataset {
        config: manifest.config,
        scenes,
        train: manifest.train,
        val: manifest.val,
    })
}
