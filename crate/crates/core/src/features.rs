//! Turns posts into model-ready token ids with their bias spans attached.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bias_tokens::{apply_masking, build_counterfactual_input, BiasTokenSet};
use crate::corpus::{Corpus, Post};
use crate::error::{Error, Result};
use crate::vocab::{Vocab, CLS, CLS_ID, SEP, SEP_ID};

/// One post after tokenization and bias-token identification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub post_id: String,
    pub tokens: Vec<String>,
    pub bias: BiasTokenSet,
    /// `[CLS] tokens [SEP]`, unmasked.
    pub main_ids: Vec<u32>,
    pub counterfactual_ids: Vec<u32>,
    pub domain: Option<usize>,
    pub domain_name: String,
    pub labels: Vec<usize>,
    pub event_id: String,
    /// Index among the training events; `None` for unseen events.
    pub event: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub vocab: Vocab,
    pub max_len: usize,
}

impl Featurizer {
    pub fn new(vocab: Vocab, max_len: usize) -> Result<Self> {
        if max_len < 3 {
            return Err(Error::Config(format!("max_len {max_len} leaves no room for tokens")));
        }
        Ok(Self { vocab, max_len })
    }

    /// Builds the vocabulary from the training posts.
    pub fn fit(train: &Corpus, min_count: usize, max_size: usize, max_len: usize) -> Result<Self> {
        let vocab = Vocab::build(train.posts().iter().map(|p| p.tokens.as_slice()), min_count, max_size);
        Self::new(vocab, max_len)
    }

    /// `[CLS] t_1 … t_k [SEP]`, truncated to `max_len`.
    pub fn main_ids(&self, tokens: &[String]) -> Vec<u32> {
        let keep = tokens.len().min(self.max_len - 2);
        let mut ids = Vec::with_capacity(keep + 2);
        ids.push(CLS_ID);
        ids.extend(tokens[..keep].iter().map(|t| self.vocab.id(t)));
        ids.push(SEP_ID);
        ids
    }

    /// Encodes a counterfactual input, keeping a closing `[SEP]` when it
    /// has to be truncated.
    pub fn counterfactual_ids(&self, counterfactual: &[String]) -> Vec<u32> {
        let mut ids: Vec<u32> = counterfactual
            .iter()
            .take(self.max_len)
            .map(|t| match t.as_str() {
                CLS => CLS_ID,
                SEP => SEP_ID,
                _ => self.vocab.id(t),
            })
            .collect();
        if counterfactual.len() > self.max_len {
            *ids.last_mut().expect("max_len ≥ 3") = SEP_ID;
        }
        ids
    }

    pub fn example(
        &self,
        post: &Post,
        bias: BiasTokenSet,
        domain: Option<usize>,
        event: Option<usize>,
    ) -> Example {
        let counterfactual = build_counterfactual_input(&bias);
        Example {
            post_id: post.id.clone(),
            tokens: post.tokens.clone(),
            main_ids: self.main_ids(&post.tokens),
            counterfactual_ids: self.counterfactual_ids(&counterfactual),
            bias,
            domain,
            domain_name: post.domain.clone(),
            labels: post.labels.clone(),
            event_id: post.event_id.clone(),
            event,
        }
    }

    /// Featurizes every post of `corpus`. Domains and events are indexed
    /// by their position in `domains` and `events`.
    pub fn examples(
        &self,
        corpus: &Corpus,
        domains: &[String],
        events: &[String],
        mut bias_of: impl FnMut(&Post) -> Result<BiasTokenSet>,
    ) -> Result<Vec<Example>> {
        let dom: BTreeMap<&str, usize> = domains.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
        let ev: BTreeMap<&str, usize> = events.iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
        corpus
            .posts()
            .iter()
            .map(|p| {
                let bias = bias_of(p)?;
                Ok(self.example(
                    p,
                    bias,
                    dom.get(p.domain.as_str()).copied(),
                    ev.get(p.event_id.as_str()).copied(),
                ))
            })
            .collect()
    }

    /// Main-branch ids with each bias span masked independently with
    /// probability `p`.
    pub fn masked_ids<R: Rng + ?Sized>(&self, ex: &Example, p: f64, rng: &mut R) -> Result<Vec<u32>> {
        if p == 0.0 || ex.bias.spans.is_empty() {
            return Ok(ex.main_ids.clone());
        }
        let masked = apply_masking(&ex.tokens, &ex.bias, p, rng)?;
        Ok(self.main_ids(&masked))
    }
}
