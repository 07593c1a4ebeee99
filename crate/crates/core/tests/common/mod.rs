#![allow(dead_code)]

use eventshift_core::bias_tokens::{BiasTokenIdentifier, TaggerConfig};
use eventshift_core::corpus::{generate_synthetic_corpus, temporal_split, SplitSpec, SyntheticSpec};
use eventshift_core::model::{Combination, Model, ModelConfig};
use eventshift_core::pipeline::{prepare, Prepared, Preset};

/// Two-layer, 8-wide encoder with three labels and two domains.
pub fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder.vocab_size = 24;
    cfg.encoder.max_len = 12;
    cfg.encoder.d_model = 8;
    cfg.encoder.layers = 2;
    cfg.encoder.heads = 2;
    cfg.encoder.ffn_dim = 16;
    cfg.num_labels = 3;
    cfg.num_domains = 2;
    cfg.hidden = 8;
    cfg.cnn_widths = vec![1, 2, 3];
    cfg.cnn_channels = 4;
    cfg.combination = Combination::Fused;
    cfg
}

pub fn tiny_model(seed: u64) -> Model {
    Model::new(tiny_config(), seed).expect("tiny model")
}

pub fn synthetic_prepared(spec: &SyntheticSpec, seed: u64) -> Prepared {
    let generated = generate_synthetic_corpus(spec, seed).expect("synthetic corpus");
    let [train, valid, test] = spec.events_per_split;
    let split = temporal_split(&generated.corpus, &SplitSpec::Counts { train, valid, test }).expect("split");
    let identifier = BiasTokenIdentifier::new(TaggerConfig::default()).expect("tagger");
    prepare(&split, &identifier, &Preset::synthetic_tiny().vocab).expect("prepare")
}

/// A smaller synthetic corpus for quick training tests.
pub fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        posts_per_event: 30,
        ..SyntheticSpec::default()
    }
}
