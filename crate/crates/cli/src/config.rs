//! Layered configuration: built-in defaults, then the TOML file, then
//! `--set section.key=value` overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use eventshift_core::baselines::{Strategy, StrategyKind, StrategyParams};
use eventshift_core::bias_tokens::TaggerConfig;
use eventshift_core::corpus::{CorpusFilter, SyntheticSpec, TaskKind};
use eventshift_core::model::ModelConfig;
use eventshift_core::pipeline::{Preset, VocabConfig};
use eventshift_core::probing::{Component, ProbeTarget};
use eventshift_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming an external entity-tagger endpoint.
pub const TAGGER_URL_ENV: &str = "EVENTSHIFT_TAGGER_URL";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub tagger: TaggerConfig,
    pub vocab: VocabConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub strategy: StrategyConfig,
    pub probe: ProbeConfig,
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset name used in reports.
    pub name: String,
    pub corpus: Option<PathBuf>,
    pub task_kind: TaskKind,
    /// Label names before merging; empty means the sorted set found in the corpus.
    pub labels: Vec<String>,
    /// Domain names in expert order; empty means the sorted set found in the corpus.
    pub domains: Vec<String>,
    /// Old label name → merged label name.
    pub merge: BTreeMap<String, String>,
    pub filter: CorpusFilter,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            name: "dataset".into(),
            corpus: None,
            task_kind: TaskKind::MultiClass,
            labels: Vec::new(),
            domains: Vec::new(),
            merge: BTreeMap::new(),
            filter: CorpusFilter::default(),
        }
    }
}

/// Either three event counts or an explicit split manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: Option<usize>,
    pub valid: Option<usize>,
    pub test: Option<usize>,
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub params: StrategyParams,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Full,
            params: StrategyParams::default(),
        }
    }
}

impl StrategyConfig {
    pub fn strategy(&self) -> Strategy {
        Strategy {
            kind: self.kind,
            params: self.params.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub fraction: f64,
    /// Probe seeds are `0..seeds`.
    pub seeds: u64,
    /// Split whose posts are encoded.
    pub split: String,
    pub components: Vec<Component>,
    pub tasks: Vec<ProbeTarget>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            fraction: 0.05,
            seeds: 25,
            split: "train".into(),
            components: vec![Component::Bias, Component::Main],
            tasks: vec![ProbeTarget::Domain, ProbeTarget::Event, ProbeTarget::InformationType],
        }
    }
}

impl Config {
    /// Defaults with the synthetic-experiment featurization, model and
    /// training settings.
    pub fn synthetic_tiny() -> Self {
        let preset = Preset::synthetic_tiny();
        Self {
            data: DataConfig {
                name: "synthetic".into(),
                ..DataConfig::default()
            },
            split: SplitConfig {
                train: Some(12),
                valid: Some(3),
                test: Some(4),
                manifest: None,
            },
            vocab: preset.vocab,
            model: preset.model,
            training: preset.training,
            ..Config::default()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.training.validate()?;
        self.strategy.strategy().validate()?;
        if self.vocab.max_len < 3 {
            return Err(CliError::Validation("vocab.max_len must be at least 3".into()));
        }
        let p = &self.probe;
        if !(p.fraction > 0.0 && p.fraction <= 1.0) {
            return Err(CliError::Validation(format!("probe.fraction {} outside (0, 1]", p.fraction)));
        }
        if p.seeds == 0 {
            return Err(CliError::Validation("probe.seeds must be positive".into()));
        }
        if !["train", "valid", "test"].contains(&p.split.as_str()) {
            return Err(CliError::Validation(format!(
                "probe.split {:?} is not one of train, valid, test",
                p.split
            )));
        }
        Ok(())
    }
}

/// Parses the right-hand side of `--set`: a TOML value, or a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("--set {assignment:?}: expected key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("--set {assignment:?}: malformed key")));
    }
    let mut table = root;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("--set {key}: {part} is not a section")))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// The fusion weight is set as `training.alpha` and stored on the model.
fn hoist_alpha(root: &mut toml::Table) -> Result<(), CliError> {
    let alpha = root
        .get_mut("training")
        .and_then(toml::Value::as_table_mut)
        .and_then(|t| t.remove("alpha"));
    if let Some(a) = alpha {
        let model = root
            .entry("model")
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Validation("model is not a section".into()))?;
        model.insert("alpha".into(), a);
    }
    Ok(())
}

/// Reads `path` (if any), applies `overrides` in order, and fills the tagger
/// endpoint from [`TAGGER_URL_ENV`] when neither set it.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config, CliError> {
    load_with_base(path, overrides, Config::default())
}

/// [`load`] on top of `base` instead of the built-in defaults.
pub fn load_with_base(path: Option<&Path>, overrides: &[String], base: Config) -> Result<Config, CliError> {
    let mut root = match toml::Value::try_from(&base) {
        Ok(toml::Value::Table(t)) => t,
        _ => return Err(CliError::Runtime("default configuration does not serialize".into())),
    };
    if let Some(path) = path {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut file: toml::Table = toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("malformed config {}: {e}", path.display())))?;
        hoist_alpha(&mut file)?;
        merge(&mut root, file);
    }
    let mut sets = toml::Table::new();
    for o in overrides {
        apply_override(&mut sets, o)?;
    }
    hoist_alpha(&mut sets)?;
    merge(&mut root, sets);
    let mut cfg: Config = toml::Value::Table(root)
        .try_into()
        .map_err(|e| CliError::Validation(format!("invalid configuration: {e}")))?;
    if cfg.tagger.endpoint.is_none() {
        if let Ok(url) = std::env::var(TAGGER_URL_ENV) {
            if !url.trim().is_empty() {
                cfg.tagger.endpoint = Some(url.trim().to_string());
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Recursive table merge; `top` wins.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_are_the_reference_hyperparameters() {
        let c = load(None, &[]).unwrap();
        assert_eq!(c.model.alpha, 0.1);
        assert_eq!(c.training.lambda, 0.2);
        assert_eq!(c.training.mask_prob, 0.5);
        assert_eq!(c.training.batch_size, 32);
        assert_eq!(c.training.epochs, 30);
        assert_eq!(c.model.dropout, 0.2);
        assert_eq!(c.model.hidden, 384);
        assert_eq!((c.model.cnn_widths.len(), c.model.cnn_channels), (5, 64));
    }

    #[test]
    fn set_beats_file_beats_defaults() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "[training]\nlambda = 0.5\nepochs = 3\nalpha = 0.3").unwrap();
        let c = load(Some(f.path()), &["training.lambda=0.7".into()]).unwrap();
        assert_eq!(c.training.lambda, 0.7);
        assert_eq!(c.training.epochs, 3);
        assert_eq!(c.model.alpha, 0.3);
        assert_eq!(c.training.batch_size, 32);
        let c = load(Some(f.path()), &["training.alpha=0.05".into()]).unwrap();
        assert_eq!(c.model.alpha, 0.05);
    }

    #[test]
    fn typed_values_and_strings() {
        let c = load(
            None,
            &[
                "training.seeds=[3, 4]".into(),
                "strategy.kind=vanilla".into(),
                "data.name=humaid".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.training.seeds, vec![3, 4]);
        assert_eq!(c.strategy.kind, StrategyKind::Vanilla);
        assert_eq!(c.data.name, "humaid");
    }

    #[test]
    fn bad_inputs_are_validation_errors() {
        for bad in ["training.lamda=0.1", "training.lambda", "training..x=1", "model.alpha=2.0"] {
            let err = load(None, &[bad.to_string()]).unwrap_err();
            assert!(matches!(err, CliError::Validation(_)), "{bad}: {err:?}");
        }
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "[training\nlambda = ").unwrap();
        assert!(matches!(load(Some(f.path()), &[]), Err(CliError::Validation(_))));
    }

    #[test]
    fn synthetic_preset_round_trips_through_toml() {
        let c = Config::synthetic_tiny();
        let text = toml::to_string(&c).unwrap();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        assert_eq!(load(Some(f.path()), &[]).unwrap(), c);
    }
}
