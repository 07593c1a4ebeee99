//! Shared fixtures for the benchmarks.

use eventshift_core::corpus::{generate_synthetic_corpus, temporal_split, SplitSpec, SyntheticSpec};
use eventshift_core::bias_tokens::{BiasTokenIdentifier, TaggerConfig};
use eventshift_core::pipeline::{prepare, Prepared, Preset};

/// The synthetic corpus prepared with the tiny preset's featurization.
pub fn synthetic_prepared(seed: u64) -> Prepared {
    let spec = SyntheticSpec::default();
    let corpus = generate_synthetic_corpus(&spec, seed).expect("valid spec").corpus;
    let [train, valid, test] = spec.events_per_split;
    let split = temporal_split(&corpus, &SplitSpec::Counts { train, valid, test }).expect("counts match");
    let identifier = BiasTokenIdentifier::new(TaggerConfig::default()).expect("default tagger");
    prepare(&split, &identifier, &Preset::synthetic_tiny().vocab).expect("non-empty splits")
}
