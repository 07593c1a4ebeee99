//! Event-specific bias tokens: identification, the counterfactual
//! bias-only input, and masking augmentation.

use std::time::Duration;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::Post;
use crate::error::{Error, Result};
use crate::vocab::{CLS, MASK, SEP};

/// Categories in descending merge priority.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasCategory {
    Entity,
    Hashtag,
    Numeral,
    Mention,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasSpan {
    /// Pre-token range, end exclusive.
    pub start: usize,
    pub end: usize,
    pub category: BiasCategory,
    /// The covered pre-tokens joined by single spaces.
    pub surface: String,
}

impl BiasSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.surface.split(' ')
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasTokenSet {
    pub post_id: String,
    /// Non-overlapping, sorted by start.
    pub spans: Vec<BiasSpan>,
    /// Set when the external tagger failed and rules were used instead.
    #[serde(default)]
    pub degraded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaggerConfig {
    pub entities: bool,
    pub hashtags: bool,
    pub numerals: bool,
    /// @-mentions are off unless asked for.
    pub mentions: bool,
    pub hashtag_pattern: String,
    pub numeral_pattern: String,
    pub mention_pattern: String,
    /// Optional external entity tagger, e.g. `http://127.0.0.1:8080/tag`.
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        Self {
            entities: true,
            hashtags: true,
            numerals: true,
            mentions: false,
            hashtag_pattern: r"^#\w+".into(),
            numeral_pattern: r"\b\d+(?:[.,]\d+)*\b".into(),
            mention_pattern: r"^@\w+".into(),
            endpoint: None,
            timeout_ms: 2000,
        }
    }
}

/// A span proposed by an entity tagger, before merging.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSpan {
    pub start: usize,
    pub end: usize,
    pub category: BiasCategory,
}

/// Pluggable entity recognizer.
pub trait EntityTagger: Send + Sync {
    fn tag(&self, tokens: &[String]) -> Result<Vec<TaggedSpan>>;
}

/// Capitalized runs of tokens that do not start a sentence.
#[derive(Clone, Copy, Debug, Default)]
pub struct RuleTagger;

impl EntityTagger for RuleTagger {
    fn tag(&self, tokens: &[String]) -> Result<Vec<TaggedSpan>> {
        let capitalized = |t: &str| t.chars().next().is_some_and(char::is_uppercase);
        let mut spans = Vec::new();
        let mut run: Option<usize> = None;
        for (i, tok) in tokens.iter().enumerate() {
            let sentence_initial = i == 0 || matches!(tokens[i - 1].as_str(), "." | "!" | "?");
            let hit = capitalized(tok) && (run.is_some() || !sentence_initial);
            match (hit, run) {
                (true, None) => run = Some(i),
                (false, Some(s)) => {
                    spans.push(TaggedSpan { start: s, end: i, category: BiasCategory::Entity });
                    run = None;
                }
                _ => {}
            }
        }
        if let Some(s) = run {
            spans.push(TaggedSpan { start: s, end: tokens.len(), category: BiasCategory::Entity });
        }
        Ok(spans)
    }
}

#[derive(Serialize)]
struct TagRequest<'a> {
    tokens: &'a [String],
}

#[derive(Deserialize)]
struct TagResponse {
    spans: Vec<TaggedSpan>,
}

/// Client for a local tagging service speaking
/// `{"tokens": [..]}` → `{"spans": [{"start", "end", "category"}]}`.
#[derive(Debug)]
pub struct HttpTagger {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpTagger {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
        }
    }
}

impl EntityTagger for HttpTagger {
    fn tag(&self, tokens: &[String]) -> Result<Vec<TaggedSpan>> {
        let resp: TagResponse = self
            .agent
            .post(&self.endpoint)
            .send_json(TagRequest { tokens })
            .map_err(|e| Error::Tagger(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::Tagger(e.to_string()))?;
        for s in &resp.spans {
            if s.start >= s.end || s.end > tokens.len() {
                return Err(Error::Tagger(format!(
                    "span {}..{} invalid for {} tokens",
                    s.start,
                    s.end,
                    tokens.len()
                )));
            }
        }
        Ok(resp.spans)
    }
}

/// Compiled identification rules plus an optional external entity tagger.
pub struct BiasTokenIdentifier {
    cfg: TaggerConfig,
    hashtag: Regex,
    numeral: Regex,
    mention: Regex,
    external: Option<Box<dyn EntityTagger>>,
}

impl std::fmt::Debug for BiasTokenIdentifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BiasTokenIdentifier")
            .field("cfg", &self.cfg)
            .field("external", &self.external.is_some())
            .finish()
    }
}

impl BiasTokenIdentifier {
    /// Builds the identifier; an `endpoint` in the config installs an
    /// [`HttpTagger`].
    pub fn new(cfg: TaggerConfig) -> Result<Self> {
        let external: Option<Box<dyn EntityTagger>> = cfg.endpoint.as_ref().map(|url| {
            Box::new(HttpTagger::new(url.clone(), Duration::from_millis(cfg.timeout_ms)))
                as Box<dyn EntityTagger>
        });
        Self::with_tagger(cfg, external)
    }

    pub fn with_tagger(cfg: TaggerConfig, external: Option<Box<dyn EntityTagger>>) -> Result<Self> {
        if !(cfg.entities || cfg.hashtags || cfg.numerals || cfg.mentions) {
            return Err(Error::Config("tagger: no bias category enabled".into()));
        }
        let compile = |p: &str| {
            Regex::new(p).map_err(|e| Error::Config(format!("tagger pattern {p:?}: {e}")))
        };
        Ok(Self {
            hashtag: compile(&cfg.hashtag_pattern)?,
            numeral: compile(&cfg.numeral_pattern)?,
            mention: compile(&cfg.mention_pattern)?,
            cfg,
            external,
        })
    }

    pub fn config(&self) -> &TaggerConfig {
        &self.cfg
    }

    pub fn identify(&self, post: &Post) -> BiasTokenSet {
        let tokens = &post.tokens;
        let mut candidates: Vec<TaggedSpan> = Vec::new();
        let mut degraded = false;
        if self.cfg.entities {
            let entities = match &self.external {
                Some(ext) => ext.tag(tokens).unwrap_or_else(|e| {
                    log::warn!("external tagger failed for post {}: {e}; using rules", post.id);
                    degraded = true;
                    RuleTagger.tag(tokens).unwrap_or_default()
                }),
                None => RuleTagger.tag(tokens).unwrap_or_default(),
            };
            candidates.extend(entities);
        }
        for (i, tok) in tokens.iter().enumerate() {
            let single = |category| TaggedSpan { start: i, end: i + 1, category };
            if self.cfg.hashtags && self.hashtag.is_match(tok) {
                candidates.push(single(BiasCategory::Hashtag));
            }
            if self.cfg.mentions && self.mention.is_match(tok) {
                candidates.push(single(BiasCategory::Mention));
            }
            if self.cfg.numerals && self.numeral.is_match(tok) {
                candidates.push(single(BiasCategory::Numeral));
            }
        }
        BiasTokenSet {
            post_id: post.id.clone(),
            spans: merge_spans(tokens, candidates),
            degraded,
        }
    }
}

/// Rule-based identification with the default patterns.
pub fn identify_bias_tokens(post: &Post, cfg: &TaggerConfig) -> Result<BiasTokenSet> {
    Ok(BiasTokenIdentifier::with_tagger(cfg.clone(), None)?.identify(post))
}

/// Unions overlapping candidates; the merged span takes the
/// highest-priority category among its parts.
fn merge_spans(tokens: &[String], mut candidates: Vec<TaggedSpan>) -> Vec<BiasSpan> {
    candidates.sort_by_key(|s| (s.start, s.end));
    let mut merged: Vec<TaggedSpan> = Vec::new();
    for c in candidates {
        match merged.last_mut() {
            Some(last) if c.start < last.end => {
                last.end = last.end.max(c.end);
                last.category = last.category.min(c.category);
            }
            _ => merged.push(c),
        }
    }
    merged
        .into_iter()
        .map(|s| BiasSpan {
            start: s.start,
            end: s.end,
            category: s.category,
            surface: tokens[s.start..s.end].join(" "),
        })
        .collect()
}

/// `[CLS] u1 [SEP] u2 [SEP] …`; an empty set gives `[CLS] [SEP]`.
pub fn build_counterfactual_input(bias_set: &BiasTokenSet) -> Vec<String> {
    let mut out = vec![CLS.to_string()];
    for span in &bias_set.spans {
        out.extend(span.tokens().map(str::to_string));
        out.push(SEP.to_string());
    }
    if bias_set.spans.is_empty() {
        out.push(SEP.to_string());
    }
    out
}

/// Replaces each bias span, independently with probability `p`, by one
/// `[MASK]` per covered pre-token. Other tokens are never touched.
pub fn apply_masking<R: Rng + ?Sized>(
    tokens: &[String],
    bias_set: &BiasTokenSet,
    p: f64,
    rng: &mut R,
) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("mask probability {p} outside [0, 1]")));
    }
    for s in &bias_set.spans {
        if s.start >= s.end || s.end > tokens.len() {
            return Err(Error::SpanOutOfRange {
                start: s.start,
                end: s.end,
                len: tokens.len(),
            });
        }
    }
    let mut out = tokens.to_vec();
    for s in &bias_set.spans {
        if rng.random_bool(p) {
            out[s.start..s.end].iter_mut().for_each(|t| *t = MASK.to_string());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::pretokenize;
    use chrono::Utc;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn post(text: &str) -> Post {
        Post {
            id: "p".into(),
            text: text.into(),
            tokens: pretokenize(text),
            labels: vec![0],
            event_id: "e".into(),
            domain: "floods".into(),
            timestamp: Utc::now(),
        }
    }

    fn spans(text: &str) -> Vec<(usize, usize, BiasCategory, String)> {
        identify_bias_tokens(&post(text), &TaggerConfig::default())
            .unwrap()
            .spans
            .into_iter()
            .map(|s| (s.start, s.end, s.category, s.surface))
            .collect()
    }

    #[test]
    fn hashtag_example() {
        assert_eq!(
            spans("#JakartaFlood water rising"),
            vec![(0, 1, BiasCategory::Hashtag, "#JakartaFlood".into())]
        );
    }

    #[test]
    fn numeral_example() {
        assert_eq!(
            spans("12 people injured"),
            vec![(0, 1, BiasCategory::Numeral, "12".into())]
        );
    }

    #[test]
    fn digits_inside_words_are_not_numerals() {
        assert!(spans("w187 sig2x1x2 covid19").is_empty());
        assert_eq!(
            spans("toll 1,200 rising"),
            vec![(1, 2, BiasCategory::Numeral, "1,200".into())]
        );
    }

    #[test]
    fn nothing_to_find() {
        assert!(spans("stay safe everyone").is_empty());
    }

    #[test]
    fn entity_runs_and_sentence_starts() {
        assert_eq!(
            spans("Flooding hits North Jakarta today. Stay safe"),
            vec![(2, 4, BiasCategory::Entity, "North Jakarta".into())]
        );
    }

    #[test]
    fn overlap_prefers_entity() {
        struct Fixed;
        impl EntityTagger for Fixed {
            fn tag(&self, _: &[String]) -> Result<Vec<TaggedSpan>> {
                Ok(vec![TaggedSpan { start: 1, end: 3, category: BiasCategory::Entity }])
            }
        }
        let id = BiasTokenIdentifier::with_tagger(TaggerConfig::default(), Some(Box::new(Fixed))).unwrap();
        let set = id.identify(&post("help #Nepal 2015 now"));
        assert_eq!(set.spans.len(), 1);
        assert_eq!(set.spans[0].category, BiasCategory::Entity);
        assert_eq!(set.spans[0].surface, "#Nepal 2015");
        assert!(!set.degraded);
    }

    #[test]
    fn unreachable_tagger_degrades_to_rules() {
        let cfg = TaggerConfig {
            endpoint: Some("http://127.0.0.1:9/tag".into()),
            timeout_ms: 200,
            ..Default::default()
        };
        let id = BiasTokenIdentifier::new(cfg).unwrap();
        let set = id.identify(&post("rain in Jakarta #banjir"));
        assert!(set.degraded);
        assert_eq!(set.spans.len(), 2);
    }

    #[test]
    fn mentions_only_when_enabled() {
        assert!(spans("thanks @redcross").is_empty());
        let cfg = TaggerConfig { mentions: true, ..Default::default() };
        let set = identify_bias_tokens(&post("thanks @redcross"), &cfg).unwrap();
        assert_eq!(set.spans[0].category, BiasCategory::Mention);
    }

    #[test]
    fn no_category_is_a_config_error() {
        let cfg = TaggerConfig {
            entities: false,
            hashtags: false,
            numerals: false,
            mentions: false,
            ..Default::default()
        };
        assert!(identify_bias_tokens(&post("x"), &cfg).is_err());
    }

    fn set_of(surfaces: &[&str]) -> BiasTokenSet {
        let mut start = 0;
        let spans = surfaces
            .iter()
            .map(|s| {
                let n = s.split(' ').count();
                let span = BiasSpan { start, end: start + n, category: BiasCategory::Entity, surface: s.to_string() };
                start += n + 1;
                span
            })
            .collect();
        BiasTokenSet { post_id: "p".into(), spans, degraded: false }
    }

    #[test]
    fn counterfactual_inputs() {
        assert_eq!(
            build_counterfactual_input(&set_of(&["#JakartaFlood", "12"])),
            vec!["[CLS]", "#JakartaFlood", "[SEP]", "12", "[SEP]"]
        );
        assert_eq!(build_counterfactual_input(&set_of(&[])), vec!["[CLS]", "[SEP]"]);
        assert_eq!(build_counterfactual_input(&set_of(&["a", "b", "c"])).len(), 7);
        assert_eq!(build_counterfactual_input(&set_of(&["New York", "b"])).len(), 1 + 3 + 2);
    }

    #[test]
    fn masking_endpoints() {
        let p = post("#Flood hits North Jakarta , 12 dead");
        let set = identify_bias_tokens(&p, &TaggerConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = apply_masking(&p.tokens, &set, 1.0, &mut rng).unwrap();
        assert_eq!(all, vec!["[MASK]", "hits", "[MASK]", "[MASK]", ",", "[MASK]", "dead"]);
        let none = apply_masking(&p.tokens, &set, 0.0, &mut rng).unwrap();
        assert_eq!(none, p.tokens);
    }

    #[test]
    fn masking_rejects_out_of_range_spans() {
        let set = set_of(&["a", "b"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = apply_masking(&["a".to_string()], &set, 0.5, &mut rng).unwrap_err();
        assert!(matches!(err, Error::SpanOutOfRange { .. }));
    }

    #[test]
    fn masking_rate_is_near_p() {
        // Monte Carlo count over 10k single-token spans
        let tokens: Vec<String> = (0..100).map(|i| format!("#t{i}")).collect();
        let p = Post { tokens: tokens.clone(), ..post("x") };
        let set = identify_bias_tokens(&p, &TaggerConfig::default()).unwrap();
        assert_eq!(set.spans.len(), 100);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut masked = 0;
        for _ in 0..100 {
            let out = apply_masking(&tokens, &set, 0.5, &mut rng).unwrap();
            masked += out.iter().filter(|t| *t == MASK).count();
        }
        let rate = masked as f64 / 10_000.0;
        assert!((rate - 0.5).abs() <= 0.05, "rate {rate}");
    }

    #[test]
    fn different_seeds_give_different_masks() {
        let tokens: Vec<String> = (0..12).map(|i| format!("#t{i}")).collect();
        let p = Post { tokens: tokens.clone(), ..post("x") };
        let set = identify_bias_tokens(&p, &TaggerConfig::default()).unwrap();
        let a = apply_masking(&tokens, &set, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = apply_masking(&tokens, &set, 0.5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a, b);
    }

    proptest! {
        #[test]
        fn masking_only_touches_bias_positions(
            words in proptest::collection::vec("[A-Za-z#@0-9]{1,6}", 1..20),
            p in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let text = words.join(" ");
            let post = post(&text);
            let set = identify_bias_tokens(&post, &TaggerConfig::default()).unwrap();
            let covered: Vec<bool> = (0..post.tokens.len())
                .map(|i| set.spans.iter().any(|s| s.start <= i && i < s.end))
                .collect();
            let out = apply_masking(&post.tokens, &set, p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(out.len(), post.tokens.len());
            for (i, (a, b)) in out.iter().zip(&post.tokens).enumerate() {
                if a != b {
                    prop_assert!(covered[i]);
                }
            }
            // spans are sorted and disjoint
            for w in set.spans.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
            let cf = build_counterfactual_input(&set);
            let expected = 1 + set.spans.iter().map(BiasSpan::len).sum::<usize>()
                + set.spans.len() + usize::from(set.spans.is_empty());
            prop_assert_eq!(cf.len(), expected);
        }
    }
}
