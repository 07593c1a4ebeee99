//! Bias-controlled synthetic corpora.
//!
//! Every post carries one word from its domain's label-specific signal pool
//! (the transferable cue), decoy signal words borrowed from other domains,
//! filler words, and event-level bias tokens: a planted hashtag from a pool
//! shared across events, plus an event-unique place name and casualty count.
//! The planted hashtag agrees with the label with probability `rho_train` on
//! train/valid events and `rho_test` on test events.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Duration, TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, LabelSpace, Post, TaskKind};
use crate::error::{Error, Result};

const DOMAIN_NAMES: [&str; 6] = [
    "earthquake",
    "hurricane",
    "floods",
    "wildfire",
    "typhoon",
    "accident",
];

const PLACE_STEMS: [&str; 12] = [
    "Arvel", "Bostra", "Calder", "Dunmere", "Esk", "Farrow", "Galen", "Hollis", "Istra", "Jarrow",
    "Kessel", "Lorne",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task_kind: TaskKind,
    pub num_labels: usize,
    pub num_domains: usize,
    /// Events in the train, valid and test blocks (chronological).
    pub events_per_split: [usize; 3],
    pub posts_per_event: usize,
    /// Size of the shared filler vocabulary.
    pub vocab_size: usize,
    pub filler_per_post: usize,
    /// Hashtags in the shared pool for each target label.
    pub bias_pool_per_label: usize,
    /// Hashtags each event draws from the pool, per target label.
    pub bias_tokens_per_event: usize,
    pub rho_train: f64,
    pub rho_test: f64,
    /// Probability that the signal word matches the true label.
    pub signal_accuracy: f64,
    pub signal_words_per_label: usize,
    /// Signal words from other domains' pools added to each post.
    pub decoys_per_post: usize,
    /// Probability that a post names its event's place.
    pub entity_prob: f64,
    /// Probability that a post mentions a casualty count.
    pub numeral_prob: f64,
    /// Multi-label only: probability of a second gold label.
    pub second_label_prob: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            task_kind: TaskKind::MultiClass,
            num_labels: 4,
            num_domains: 4,
            events_per_split: [12, 3, 4],
            posts_per_event: 120,
            vocab_size: 200,
            filler_per_post: 6,
            bias_pool_per_label: 3,
            bias_tokens_per_event: 2,
            rho_train: 0.9,
            rho_test: 0.0,
            signal_accuracy: 0.95,
            signal_words_per_label: 3,
            decoys_per_post: 2,
            entity_prob: 0.9,
            numeral_prob: 0.8,
            second_label_prob: 0.3,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        for (name, p) in [
            ("rho_train", self.rho_train),
            ("rho_test", self.rho_test),
            ("signal_accuracy", self.signal_accuracy),
            ("entity_prob", self.entity_prob),
            ("numeral_prob", self.numeral_prob),
            ("second_label_prob", self.second_label_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name}={p} is outside [0, 1]"));
            }
        }
        if self.posts_per_event == 0 || self.events_per_split.iter().sum::<usize>() == 0 {
            return bad("zero posts".into());
        }
        if self.num_labels < 2 {
            return bad("need at least 2 labels".into());
        }
        if self.num_domains == 0 || self.vocab_size == 0 || self.signal_words_per_label == 0 {
            return bad("domains, vocabulary and signal pools must be non-empty".into());
        }
        if self.bias_pool_per_label == 0
            || self.bias_tokens_per_event == 0
            || self.bias_tokens_per_event > self.bias_pool_per_label
        {
            return bad("need 1 <= bias_tokens_per_event <= bias_pool_per_label".into());
        }
        if self.decoys_per_post > 0 && self.num_domains < 2 {
            return bad("decoys need at least 2 domains".into());
        }
        Ok(())
    }

    pub fn num_events(&self) -> usize {
        self.events_per_split.iter().sum()
    }
}

/// A generated corpus plus the ground truth needed to audit it.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Planted hashtag → the label it is correlated with.
    pub planted_targets: BTreeMap<String, usize>,
    /// Post id → the planted hashtag it carries.
    pub planted_by_post: BTreeMap<String, String>,
    pub train_events: Vec<String>,
    pub valid_events: Vec<String>,
    pub test_events: Vec<String>,
}

impl SyntheticCorpus {
    /// Fraction of posts in `events` whose planted hashtag targets one of
    /// the post's gold labels.
    pub fn planted_agreement(&self, events: &[String]) -> f64 {
        let events: BTreeSet<&String> = events.iter().collect();
        let (mut hit, mut total) = (0usize, 0usize);
        for p in self.corpus.posts() {
            if !events.contains(&p.event_id) {
                continue;
            }
            let tag = &self.planted_by_post[&p.id];
            total += 1;
            if p.labels.contains(&self.planted_targets[tag]) {
                hit += 1;
            }
        }
        hit as f64 / total.max(1) as f64
    }
}

fn domain_name(d: usize) -> String {
    let base = DOMAIN_NAMES[d % DOMAIN_NAMES.len()];
    if d < DOMAIN_NAMES.len() {
        base.to_string()
    } else {
        format!("{base}{}", d / DOMAIN_NAMES.len())
    }
}

fn signal_word(domain: usize, label: usize, k: usize) -> String {
    format!("sig{domain}x{label}x{k}")
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = spec.num_labels;
    let label_space = LabelSpace::new(
        spec.task_kind,
        (0..l).map(|c| format!("info_type_{c}")).collect(),
    )?;
    let domains: Vec<String> = (0..spec.num_domains).map(domain_name).collect();

    let mut planted_targets = BTreeMap::new();
    let mut pool_by_label: Vec<Vec<String>> = vec![Vec::new(); l];
    for (c, pool) in pool_by_label.iter_mut().enumerate() {
        for k in 0..spec.bias_pool_per_label {
            let tag = format!("#alert{}", c * spec.bias_pool_per_label + k);
            planted_targets.insert(tag.clone(), c);
            pool.push(tag);
        }
    }

    let n_events = spec.num_events();
    let [n_train, n_valid, _] = spec.events_per_split;
    let epoch = Utc.with_ymd_and_hms(2012, 1, 1, 0, 0, 0).single().expect("valid date");
    let mut posts = Vec::with_capacity(n_events * spec.posts_per_event);
    let mut planted_by_post = BTreeMap::new();
    let mut split_events: [Vec<String>; 3] = Default::default();

    for ev in 0..n_events {
        let event_id = format!("event{ev:02}");
        let split = if ev < n_train {
            0
        } else if ev < n_train + n_valid {
            1
        } else {
            2
        };
        split_events[split].push(event_id.clone());
        let domain = ev % spec.num_domains;
        let rho = if split == 2 { spec.rho_test } else { spec.rho_train };
        let place = format!("{}{}", PLACE_STEMS[ev % PLACE_STEMS.len()], ev);
        let casualties = 10 + 17 * ev;
        // this event's share of the hashtag pool
        let event_tags: Vec<Vec<String>> = pool_by_label
            .iter()
            .map(|pool| {
                let mut p = pool.clone();
                p.shuffle(&mut rng);
                p.truncate(spec.bias_tokens_per_event);
                p
            })
            .collect();
        let start = epoch + Duration::days(30 * ev as i64);

        for i in 0..spec.posts_per_event {
            let primary = rng.random_range(0..l);
            let mut labels = BTreeSet::from([primary]);
            if spec.task_kind == TaskKind::MultiLabel && rng.random_bool(spec.second_label_prob) {
                labels.insert((primary + rng.random_range(1..l)) % l);
            }

            let mut words: Vec<String> = Vec::new();
            for &y in &labels {
                let shown = if rng.random_bool(spec.signal_accuracy) {
                    y
                } else {
                    (y + rng.random_range(1..l)) % l
                };
                words.push(signal_word(
                    domain,
                    shown,
                    rng.random_range(0..spec.signal_words_per_label),
                ));
            }
            for _ in 0..spec.decoys_per_post {
                let other = (domain + rng.random_range(1..spec.num_domains)) % spec.num_domains;
                words.push(signal_word(
                    other,
                    rng.random_range(0..l),
                    rng.random_range(0..spec.signal_words_per_label),
                ));
            }
            for _ in 0..spec.filler_per_post {
                words.push(format!("w{}", rng.random_range(0..spec.vocab_size)));
            }
            if rng.random_bool(spec.numeral_prob) {
                words.push(casualties.to_string());
            }
            words.shuffle(&mut rng);

            // planted hashtag: agrees with a gold label with probability rho
            let target = if rng.random_bool(rho) {
                *labels.iter().nth(rng.random_range(0..labels.len())).expect("non-empty")
            } else {
                let others: Vec<usize> = (0..l).filter(|c| !labels.contains(c)).collect();
                match others.choose(&mut rng) {
                    Some(&c) => c,
                    None => primary,
                }
            };
            let tag = event_tags[target]
                .choose(&mut rng)
                .expect("non-empty tag share")
                .clone();
            let pos = rng.random_range(0..=words.len());
            words.insert(pos, tag.clone());
            if rng.random_bool(spec.entity_prob) {
                // never sentence-initial so the capitalization rule sees it
                let pos = rng.random_range(1..=words.len());
                words.insert(pos, place.clone());
            }

            let id = format!("{event_id}-{i:04}");
            planted_by_post.insert(id.clone(), tag);
            posts.push(Post {
                id,
                text: words.join(" "),
                tokens: words,
                labels: labels.into_iter().collect(),
                event_id: event_id.clone(),
                domain: domains[domain].clone(),
                timestamp: start + Duration::minutes(7 * i as i64),
            });
        }
    }

    let [train_events, valid_events, test_events] = split_events;
    Ok(SyntheticCorpus {
        corpus: Corpus::new(posts, label_space, domains)?,
        planted_targets,
        planted_by_post,
        train_events,
        valid_events,
        test_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{pretokenize, temporal_split, SplitSpec};

    /// Independent count over the emitted posts: parse each post's text,
    /// find the `#alert` token and compare its pool index with the labels.
    fn measured_agreement(s: &SyntheticCorpus, spec: &SyntheticSpec, events: &[String]) -> f64 {
        let (mut hit, mut n) = (0, 0);
        for p in s.corpus.posts().iter().filter(|p| events.contains(&p.event_id)) {
            let tag = pretokenize(&p.text)
                .into_iter()
                .find(|t| t.starts_with("#alert"))
                .unwrap();
            let idx: usize = tag["#alert".len()..].parse().unwrap();
            let target = idx / spec.bias_pool_per_label;
            n += 1;
            if p.labels.contains(&target) {
                hit += 1;
            }
        }
        hit as f64 / n as f64
    }

    #[test]
    fn planted_cooccurrence_matches_rho() {
        let spec = SyntheticSpec {
            events_per_split: [20, 0, 5],
            posts_per_event: 500,
            rho_train: 0.9,
            rho_test: 0.3,
            ..Default::default()
        };
        let s = generate_synthetic_corpus(&spec, 11).unwrap();
        assert!(s.corpus.len() >= 10_000);
        let train = measured_agreement(&s, &spec, &s.train_events);
        let test = measured_agreement(&s, &spec, &s.test_events);
        assert!((train - 0.9).abs() <= 0.03, "train agreement {train}");
        assert!((test - 0.3).abs() <= 0.03, "test agreement {test}");
        assert_eq!(s.planted_agreement(&s.train_events), train);
    }

    #[test]
    fn multilabel_cooccurrence_matches_rho() {
        let spec = SyntheticSpec {
            task_kind: TaskKind::MultiLabel,
            events_per_split: [20, 0, 0],
            posts_per_event: 500,
            rho_train: 0.8,
            ..Default::default()
        };
        let s = generate_synthetic_corpus(&spec, 5).unwrap();
        let train = measured_agreement(&s, &spec, &s.train_events);
        assert!((train - 0.8).abs() <= 0.03, "agreement {train}");
        assert!(s.corpus.posts().iter().any(|p| p.labels.len() == 2));
    }

    #[test]
    fn equal_rho_means_no_shift() {
        let spec = SyntheticSpec {
            events_per_split: [10, 0, 10],
            posts_per_event: 600,
            rho_train: 0.7,
            rho_test: 0.7,
            ..Default::default()
        };
        let s = generate_synthetic_corpus(&spec, 3).unwrap();
        let a = measured_agreement(&s, &spec, &s.train_events);
        let b = measured_agreement(&s, &spec, &s.test_events);
        assert!((a - b).abs() < 0.04, "{a} vs {b}");
    }

    #[test]
    fn same_seed_is_identical() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic_corpus(&spec, 7).unwrap();
        let b = generate_synthetic_corpus(&spec, 7).unwrap();
        assert_eq!(a.corpus, b.corpus);
        let c = generate_synthetic_corpus(&spec, 8).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn events_split_chronologically_as_generated() {
        let spec = SyntheticSpec::default();
        let s = generate_synthetic_corpus(&spec, 1).unwrap();
        let split = temporal_split(&s.corpus, &SplitSpec::Counts { train: 12, valid: 3, test: 4 }).unwrap();
        assert_eq!(split.manifest.train_events, s.train_events);
        assert_eq!(split.manifest.test_events, s.test_events);
        assert_eq!(split.test.domains().len(), 4);
    }

    #[test]
    fn rejects_infeasible_specs() {
        for spec in [
            SyntheticSpec { rho_train: 1.5, ..Default::default() },
            SyntheticSpec { rho_test: -0.1, ..Default::default() },
            SyntheticSpec { posts_per_event: 0, ..Default::default() },
        ] {
            assert!(generate_synthetic_corpus(&spec, 0).is_err());
        }
    }
}
