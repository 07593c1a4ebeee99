//! Split → features → per-strategy, per-seed training and evaluation.

use serde::{Deserialize, Serialize};

use crate::baselines::{train_baseline, Strategy};
use crate::bias_tokens::{BiasTokenIdentifier, BiasTokenSet};
use crate::corpus::{LabelSpace, Post, TemporalSplit};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, ReportKey};
use crate::features::{Example, Featurizer};
use crate::model::ModelConfig;
use crate::training::{EpochMetrics, FitResult, Objective, RunSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub min_count: usize,
    pub max_size: usize,
    /// Token ids per post, including `[CLS]` and `[SEP]`.
    pub max_len: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            min_count: 1,
            max_size: 30_000,
            max_len: 64,
        }
    }
}

/// Featurized splits with the index spaces the model is built on.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub featurizer: Featurizer,
    pub labels: LabelSpace,
    pub domains: Vec<String>,
    /// Training events, chronological.
    pub events: Vec<String>,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Builds the vocabulary on the training split and featurizes all three.
pub fn prepare(split: &TemporalSplit, identifier: &BiasTokenIdentifier, vocab: &VocabConfig) -> Result<Prepared> {
    prepare_with(split, vocab, |p| Ok(identifier.identify(p)))
}

/// [`prepare`] with bias tokens supplied by `bias_of`, e.g. read back from
/// an earlier identification run.
pub fn prepare_with(
    split: &TemporalSplit,
    vocab: &VocabConfig,
    mut bias_of: impl FnMut(&Post) -> Result<BiasTokenSet>,
) -> Result<Prepared> {
    if split.train.is_empty() || split.valid.is_empty() || split.test.is_empty() {
        return Err(Error::Split("every split needs at least one post".into()));
    }
    let featurizer = Featurizer::fit(&split.train, vocab.min_count, vocab.max_size, vocab.max_len)?;
    let domains = split.train.domains().to_vec();
    let events = split.manifest.train_events.clone();
    let mut featurize = |c| featurizer.examples(c, &domains, &events, &mut bias_of);
    let train = featurize(&split.train)?;
    let valid = featurize(&split.valid)?;
    let test = featurize(&split.test)?;
    Ok(Prepared {
        labels: split.train.label_space().clone(),
        featurizer,
        domains,
        events,
        train,
        valid,
        test,
    })
}

impl Prepared {
    /// `base` with the data-dependent sizes filled in.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.encoder.vocab_size = self.featurizer.vocab.len();
        cfg.encoder.max_len = cfg.encoder.max_len.max(self.featurizer.max_len);
        cfg.task_kind = self.labels.task_kind();
        cfg.num_labels = self.labels.len();
        cfg.num_domains = self.domains.len();
        cfg
    }
}

/// Featurization, model and training settings that belong together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub vocab: VocabConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
}

impl Preset {
    /// Settings for the synthetic shift experiment: a one-layer, 16-wide
    /// encoder trained from scratch with a narrow CNN.
    pub fn synthetic_tiny() -> Self {
        let mut model = ModelConfig::default();
        model.encoder.d_model = 16;
        model.encoder.layers = 1;
        model.encoder.heads = 2;
        model.encoder.ffn_dim = 32;
        model.encoder.max_len = 32;
        model.hidden = 32;
        model.cnn_channels = 8;
        model.dropout = 0.1;
        Self {
            vocab: VocabConfig {
                max_len: 32,
                ..VocabConfig::default()
            },
            model,
            training: TrainConfig {
                epochs: 20,
                lr_encoder: 3e-3,
                lr_head: 1e-2,
                ..TrainConfig::default()
            },
        }
    }
}

pub struct RunOutcome {
    pub fit: FitResult,
    pub report: EvalReport,
}

/// Trains one strategy with one seed and evaluates it on the test split.
pub fn run_strategy(
    prepared: &Prepared,
    strategy: &Strategy,
    base_model: &ModelConfig,
    training: &TrainConfig,
    seed: u64,
    dataset: &str,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunOutcome> {
    let spec = RunSpec {
        model: prepared.model_config(base_model),
        training: training.clone(),
        objective: Objective::from_config(training),
        strategy: strategy.kind.name(),
        seed,
        domains: &prepared.domains,
        events: &prepared.events,
        labels: &prepared.labels,
    };
    let fit = train_baseline(
        strategy,
        &spec,
        &prepared.featurizer,
        &prepared.train,
        &prepared.valid,
        on_epoch,
    )?;
    let report = evaluate(
        &fit.model,
        &prepared.test,
        &prepared.labels,
        ReportKey {
            dataset,
            split: "test",
            strategy: strategy.kind.name(),
            seed,
        },
    )?;
    Ok(RunOutcome { fit, report })
}
