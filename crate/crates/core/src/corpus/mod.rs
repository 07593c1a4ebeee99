//! Labeled post collections: schema validation, label merging, and
//! event-disjoint temporal splits.

mod io;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::LazyLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_corpus, read_split_manifest, write_corpus, write_split, CorpusFilter};
pub use synthetic::{generate_synthetic_corpus, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    MultiClass,
    MultiLabel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    task_kind: TaskKind,
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new(task_kind: TaskKind, names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::LabelSpace(format!(
                "need at least 2 labels, got {}",
                names.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::LabelSpace(format!("duplicate label {n:?}")));
            }
        }
        Ok(Self { task_kind, names })
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task_kind
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
    /// Sorted, deduplicated label indices.
    pub labels: Vec<usize>,
    pub event_id: String,
    pub domain: String,
    pub timestamp: DateTime<Utc>,
}

static PRETOKEN: LazyLock<Regex> = LazyLock::new(|| {
    // hashtags/mentions, numbers with inner separators, words with
    // apostrophes, and any other single non-space symbol
    Regex::new(r"[#@]?\w+(?:[.,'’]\w+)*|[^\w\s]").expect("valid pretoken regex")
});

/// Whitespace-plus-punctuation pre-tokenization. `#tags`, `@mentions`,
/// and numerals such as `1,200` or `3.5` stay in one piece.
pub fn pretokenize(text: &str) -> Vec<String> {
    PRETOKEN
        .find_iter(text)
        .map(|m| m.as_str().to_string())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    posts: Vec<Post>,
    label_space: LabelSpace,
    domains: Vec<String>,
}

impl Corpus {
    /// Validates every post against the label space and domain list.
    pub fn new(posts: Vec<Post>, label_space: LabelSpace, domains: Vec<String>) -> Result<Self> {
        let mut event_domain: HashMap<&str, &str> = HashMap::new();
        for p in &posts {
            if p.tokens.is_empty() {
                return Err(Error::Corpus(format!("post {} has no tokens", p.id)));
            }
            if let Some(&bad) = p.labels.iter().find(|&&l| l >= label_space.len()) {
                return Err(Error::Corpus(format!(
                    "post {} has label index {bad} outside the label space",
                    p.id
                )));
            }
            if p.labels.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Corpus(format!(
                    "post {} labels are not a sorted set",
                    p.id
                )));
            }
            match (label_space.task_kind, p.labels.len()) {
                (TaskKind::MultiClass, 1) => {}
                (TaskKind::MultiClass, n) => {
                    return Err(Error::Corpus(format!(
                        "multi-class post {} has {n} labels",
                        p.id
                    )))
                }
                (TaskKind::MultiLabel, 0) => {
                    return Err(Error::Corpus(format!("post {} has no labels", p.id)))
                }
                _ => {}
            }
            if !domains.contains(&p.domain) {
                return Err(Error::UnknownDomain(p.domain.clone()));
            }
            match event_domain.insert(&p.event_id, &p.domain) {
                Some(prev) if prev != p.domain => {
                    return Err(Error::Corpus(format!(
                        "event {} spans domains {prev:?} and {:?}",
                        p.event_id, p.domain
                    )))
                }
                _ => {}
            }
        }
        Ok(Self {
            posts,
            label_space,
            domains,
        })
    }

    pub fn posts(&self) -> &[Post] {
        &self.posts
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn domain_index(&self, domain: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == domain)
    }

    /// Distinct event ids in first-appearance order.
    pub fn event_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.posts
            .iter()
            .filter(|p| seen.insert(p.event_id.as_str()))
            .map(|p| p.event_id.clone())
            .collect()
    }

    /// Events ordered by earliest post timestamp, ties by event id.
    pub fn events_chronological(&self) -> Vec<String> {
        let mut earliest: BTreeMap<&str, DateTime<Utc>> = BTreeMap::new();
        for p in &self.posts {
            earliest
                .entry(&p.event_id)
                .and_modify(|t| *t = (*t).min(p.timestamp))
                .or_insert(p.timestamp);
        }
        let mut events: Vec<(DateTime<Utc>, &str)> =
            earliest.into_iter().map(|(e, t)| (t, e)).collect();
        events.sort();
        events.into_iter().map(|(_, e)| e.to_string()).collect()
    }

    /// Posts whose event id is in `events`, keeping corpus order.
    pub fn subset_events(&self, events: &BTreeSet<String>) -> Corpus {
        Corpus {
            posts: self
                .posts
                .iter()
                .filter(|p| events.contains(&p.event_id))
                .cloned()
                .collect(),
            label_space: self.label_space.clone(),
            domains: self.domains.clone(),
        }
    }
}

/// Merges labels through `merge_map` (old name → new name). The new label
/// order follows the first appearance of each target while walking the old
/// labels in order.
pub fn remap_labels(corpus: &Corpus, merge_map: &BTreeMap<String, String>) -> Result<Corpus> {
    let old = corpus.label_space();
    let mut new_names: Vec<String> = Vec::new();
    let mut mapping = Vec::with_capacity(old.len());
    for name in old.names() {
        let target = merge_map.get(name).ok_or_else(|| {
            Error::LabelSpace(format!("merge map has no entry for label {name:?}"))
        })?;
        let idx = match new_names.iter().position(|n| n == target) {
            Some(i) => i,
            None => {
                new_names.push(target.clone());
                new_names.len() - 1
            }
        };
        mapping.push(idx);
    }
    if new_names.is_empty() {
        return Err(Error::LabelSpace("merge produced an empty label space".into()));
    }
    let label_space = LabelSpace::new(old.task_kind(), new_names)?;
    let posts = corpus
        .posts()
        .iter()
        .map(|p| {
            let labels: BTreeSet<usize> = p.labels.iter().map(|&l| mapping[l]).collect();
            Post {
                labels: labels.into_iter().collect(),
                ..p.clone()
            }
        })
        .collect();
    Corpus::new(posts, label_space, corpus.domains().to_vec())
}

/// How events are assigned to train/valid/test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Number of events per split, taken in chronological order.
    Counts {
        train: usize,
        valid: usize,
        test: usize,
    },
    /// Explicit event-id assignment.
    Explicit(SplitManifest),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_events: Vec<String>,
    pub valid_events: Vec<String>,
    pub test_events: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TemporalSplit {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
    pub manifest: SplitManifest,
}

/// Event-disjoint split: the earliest events train, the latest test.
pub fn temporal_split(corpus: &Corpus, spec: &SplitSpec) -> Result<TemporalSplit> {
    let ordered = corpus.events_chronological();
    let manifest = match spec {
        SplitSpec::Counts { train, valid, test } => {
            if train + valid + test != ordered.len() {
                return Err(Error::Split(format!(
                    "split counts {train}+{valid}+{test} do not match {} events",
                    ordered.len()
                )));
            }
            SplitManifest {
                train_events: ordered[..*train].to_vec(),
                valid_events: ordered[*train..train + valid].to_vec(),
                test_events: ordered[train + valid..].to_vec(),
            }
        }
        SplitSpec::Explicit(m) => {
            let all: BTreeSet<&String> = ordered.iter().collect();
            let mut seen = BTreeSet::new();
            for e in m.train_events.iter().chain(&m.valid_events).chain(&m.test_events) {
                if !all.contains(e) {
                    return Err(Error::Split(format!("event {e:?} is not in the corpus")));
                }
                if !seen.insert(e) {
                    return Err(Error::Split(format!("event {e:?} assigned twice")));
                }
            }
            if seen.len() != all.len() {
                return Err(Error::Split(format!(
                    "assignment covers {} of {} events",
                    seen.len(),
                    all.len()
                )));
            }
            m.clone()
        }
    };
    let set = |v: &[String]| v.iter().cloned().collect::<BTreeSet<_>>();
    Ok(TemporalSplit {
        train: corpus.subset_events(&set(&manifest.train_events)),
        valid: corpus.subset_events(&set(&manifest.valid_events)),
        test: corpus.subset_events(&set(&manifest.test_events)),
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn space(n: usize) -> LabelSpace {
        LabelSpace::new(
            TaskKind::MultiClass,
            (0..n).map(|i| format!("label{i}")).collect(),
        )
        .unwrap()
    }

    fn post(id: &str, event: &str, domain: &str, label: usize, secs: i64) -> Post {
        Post {
            id: id.into(),
            text: "water rising".into(),
            tokens: vec!["water".into(), "rising".into()],
            labels: vec![label],
            event_id: event.into(),
            domain: domain.into(),
            timestamp: Utc.timestamp_opt(secs, 0).unwrap(),
        }
    }

    #[test]
    fn pretokenize_keeps_tags_and_numbers() {
        assert_eq!(
            pretokenize("#JakartaFlood water rising, 1,200 hurt @bnpb!"),
            vec!["#JakartaFlood", "water", "rising", ",", "1,200", "hurt", "@bnpb", "!"]
        );
        assert_eq!(pretokenize("3.5 magnitude. Don't"), vec!["3.5", "magnitude", ".", "Don't"]);
    }

    #[test]
    fn label_space_rejects_duplicates_and_singletons() {
        assert!(LabelSpace::new(TaskKind::MultiClass, vec!["a".into()]).is_err());
        assert!(LabelSpace::new(TaskKind::MultiClass, vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn corpus_rejects_event_in_two_domains() {
        let posts = vec![post("1", "e", "flood", 0, 0), post("2", "e", "fire", 0, 1)];
        let err = Corpus::new(posts, space(2), vec!["flood".into(), "fire".into()]).unwrap_err();
        assert!(err.to_string().contains("spans domains"));
    }

    #[test]
    fn remap_merges_and_collapses() {
        let mut p = post("1", "e", "flood", 0, 0);
        let ls = LabelSpace::new(TaskKind::MultiLabel, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        p.labels = vec![0, 1];
        let corpus = Corpus::new(vec![p], ls, vec!["flood".into()]).unwrap();
        let map: BTreeMap<String, String> = [("a", "ab"), ("b", "ab"), ("c", "c")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let merged = remap_labels(&corpus, &map).unwrap();
        assert_eq!(merged.label_space().names(), &["ab", "c"]);
        assert_eq!(merged.posts()[0].labels, vec![0]);

        let mut partial = map.clone();
        partial.remove("c");
        assert!(remap_labels(&corpus, &partial).is_err());
    }

    #[test]
    fn remap_identity_is_noop() {
        let corpus = Corpus::new(
            vec![post("1", "e", "flood", 1, 0), post("2", "e", "flood", 0, 5)],
            space(2),
            vec!["flood".into()],
        )
        .unwrap();
        let map = corpus
            .label_space()
            .names()
            .iter()
            .map(|n| (n.clone(), n.clone()))
            .collect();
        assert_eq!(remap_labels(&corpus, &map).unwrap(), corpus);
    }

    #[test]
    fn split_orders_events_by_earliest_post() {
        let posts = vec![
            post("1", "late", "flood", 0, 300),
            post("2", "early", "flood", 1, 100),
            post("3", "mid", "flood", 0, 200),
            post("4", "late", "flood", 1, 50),
        ];
        let corpus = Corpus::new(posts, space(2), vec!["flood".into()]).unwrap();
        // "late" has the earliest post overall
        let split = temporal_split(&corpus, &SplitSpec::Counts { train: 1, valid: 1, test: 1 }).unwrap();
        assert_eq!(split.manifest.train_events, vec!["late"]);
        assert_eq!(split.manifest.valid_events, vec!["early"]);
        assert_eq!(split.manifest.test_events, vec!["mid"]);
        assert_eq!(split.train.len(), 2);
        assert!(temporal_split(&corpus, &SplitSpec::Counts { train: 1, valid: 1, test: 2 }).is_err());
    }

    #[test]
    fn split_ties_break_on_event_id() {
        let posts = vec![post("1", "b", "flood", 0, 10), post("2", "a", "flood", 1, 10)];
        let corpus = Corpus::new(posts, space(2), vec!["flood".into()]).unwrap();
        assert_eq!(corpus.events_chronological(), vec!["a", "b"]);
    }

    #[test]
    fn explicit_split_must_partition() {
        let posts = vec![post("1", "a", "flood", 0, 1), post("2", "b", "flood", 1, 2)];
        let corpus = Corpus::new(posts, space(2), vec!["flood".into()]).unwrap();
        let overlap = SplitManifest {
            train_events: vec!["a".into()],
            valid_events: vec!["a".into()],
            test_events: vec!["b".into()],
        };
        assert!(temporal_split(&corpus, &SplitSpec::Explicit(overlap)).is_err());
        let missing = SplitManifest {
            train_events: vec!["a".into()],
            ..Default::default()
        };
        assert!(temporal_split(&corpus, &SplitSpec::Explicit(missing)).is_err());
    }
}
