use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Objective, RunSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::features::Featurizer;
use crate::model::{Model, ModelConfig};

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.json";

/// Everything that determines a trained model besides data and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub objective: Objective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub strategy: String,
    pub config: CheckpointConfig,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub valid_macro_f1: f64,
    pub domains: Vec<String>,
    pub labels: Vec<String>,
    /// Training events, in the index order of the event head.
    pub events: Vec<String>,
    /// Parameter blob, relative to the checkpoint directory.
    pub path: Option<String>,
}

/// SHA-256 of the canonical JSON encoding.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let v = serde_json::to_value(config)?;
    let digest = Sha256::digest(serde_json::to_string(&v)?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl CheckpointManifest {
    pub fn new(spec: &RunSpec<'_>, epoch: usize, valid_macro_f1: f64) -> Self {
        let config = CheckpointConfig {
            model: spec.model.clone(),
            training: spec.training.clone(),
            objective: spec.objective.clone(),
        };
        Self {
            strategy: spec.strategy.to_string(),
            config_hash: config_hash(&config).expect("config serializes"),
            config,
            seed: spec.seed,
            epoch,
            valid_macro_f1,
            domains: spec.domains.to_vec(),
            labels: spec.labels.names().to_vec(),
            events: spec.events.to_vec(),
            path: None,
        }
    }
}

/// Highest validation macro-F1; ties go to the earliest epoch.
pub fn select_checkpoint(manifests: &[CheckpointManifest]) -> Result<&CheckpointManifest> {
    let mut best: Option<&CheckpointManifest> = None;
    for m in manifests {
        best = match best {
            Some(b)
                if b.valid_macro_f1 > m.valid_macro_f1
                    || (b.valid_macro_f1 == m.valid_macro_f1 && b.epoch <= m.epoch) =>
            {
                Some(b)
            }
            _ => Some(m),
        };
    }
    best.ok_or_else(|| Error::Insufficient("no checkpoints to select from".into()))
}

/// Writes the parameter blob (little-endian f64 in parameter order), the
/// manifest, and the featurizer vocabulary into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    featurizer: &Featurizer,
    manifest: &CheckpointManifest,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.store().num_scalars() * 8);
    for (_, p) in model.store().iter() {
        for x in p.value.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let params = dir.join(PARAMS_FILE);
    fs::write(&params, blob).map_err(|e| Error::io(&params, e))?;
    let mut manifest = manifest.clone();
    manifest.path = Some(PARAMS_FILE.into());
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&mpath, e))?;
    let vpath = dir.join(VOCAB_FILE);
    fs::write(&vpath, serde_json::to_string(featurizer)? + "\n").map_err(|e| Error::io(&vpath, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, Featurizer, CheckpointManifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let vpath = dir.join(VOCAB_FILE);
    let text = fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?;
    let mut featurizer: Featurizer = serde_json::from_str(&text)?;
    featurizer.vocab.reindex();

    let mut model = Model::new(manifest.config.model.clone(), manifest.seed)?;
    let ppath = dir.join(manifest.path.as_deref().unwrap_or(PARAMS_FILE));
    let blob = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    if blob.len() != model.store().num_scalars() * 8 {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, model needs {}",
            ppath.display(),
            blob.len(),
            model.store().num_scalars() * 8
        )));
    }
    let ids: Vec<usize> = model.store().iter().map(|(id, _)| id).collect();
    let mut chunks = blob.chunks_exact(8);
    for id in ids {
        for x in model.store_mut().value_mut(id).data_mut() {
            let bytes: [u8; 8] = chunks.next().expect("length checked").try_into().expect("8 bytes");
            *x = f64::from_le_bytes(bytes);
        }
    }
    Ok((model, featurizer, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(epoch: usize, f1: f64) -> CheckpointManifest {
        CheckpointManifest {
            strategy: "full".into(),
            config: CheckpointConfig {
                model: ModelConfig::default(),
                training: TrainConfig::default(),
                objective: Objective::default(),
            },
            config_hash: String::new(),
            seed: 0,
            epoch,
            valid_macro_f1: f1,
            domains: vec![],
            labels: vec![],
            events: vec![],
            path: None,
        }
    }

    #[test]
    fn selection_rules() {
        let ms = vec![manifest(1, 0.5), manifest(2, 0.7), manifest(3, 0.6)];
        assert_eq!(select_checkpoint(&ms).unwrap().epoch, 2);
        let ties = vec![manifest(1, 0.7), manifest(2, 0.7)];
        assert_eq!(select_checkpoint(&ties).unwrap().epoch, 1);
        let ties_rev = vec![manifest(2, 0.7), manifest(1, 0.7)];
        assert_eq!(select_checkpoint(&ties_rev).unwrap().epoch, 1);
        assert_eq!(select_checkpoint(&ms[..1]).unwrap().epoch, 1);
        assert!(select_checkpoint(&[]).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = manifest(1, 0.5).config;
        let mut b = a.clone();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        b.training.lambda = 0.3;
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }
}
