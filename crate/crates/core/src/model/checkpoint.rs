//! Checkpoints: a directory with `manifest.json` (model config plus tensor
//! names and files) and one text-format file per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{read_text, write_text};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(params: &ModelParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, tensor) in params.tensors() {
        let file = format!("{name}.tensor");
        let path = dir.join(&file);
        fs::write(&path, write_text(tensor)).map_err(|e| Error::io(&path, e))?;
        tensors.push(ManifestEntry {
            name,
            file,
            shape: tensor.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        config: params.config.clone(),
        tensors,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelParams> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut params = ModelParams::init(&manifest.config)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Parse(format!(
            "manifest lists {} tensors, config needs {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name {
            return Err(Error::Parse(format!(
                "expected tensor {name}, manifest has {}",
                entry.name
            )));
        }
        let path = dir.join(&entry.file);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let tensor = read_text(&text)?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "{name}: expected {shape:?}, file has {:?}",
                tensor.shape()
            )));
        }
        loaded.push(tensor);
    }
    let mut loaded = loaded.into_iter();
    params.for_each_mut(|_, t| *t = loaded.next().expect("counted above"));
    params.check_finite("checkpoint tensor")?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::model::config::{ModelMode, SiteKinds};

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig {
            mode: ModelMode::EncoderDecoder,
            layers: 1,
            d_model: 4,
            d_ff: 6,
            heads: 2,
            d_k: 2,
            d_v: 2,
            vocab_size: 5,
            max_len: 3,
            attention: SiteKinds::uniform(AttentionKind::MultiQuery),
            local_window: Some(2),
            seed: 9,
        };
        let params = ModelParams::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&params, dir.path()).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap(), params);
    }
}
