//! Text encoders. The framework only needs contextualized token
//! representations and (optionally) the per-layer attention maps, so any
//! implementation of [`TextEncoder`] can be plugged in. The bundled one is a
//! small post-LayerNorm transformer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, Linear};
use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::PAD_ID;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub embedding_init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            max_len: 64,
            d_model: 32,
            layers: 2,
            heads: 2,
            ffn_dim: 64,
            embedding_init_std: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.max_len < 2 || self.vocab_size < 5 {
            return Err(Error::Config("encoder max_len or vocab_size too small".into()));
        }
        Ok(())
    }
}

/// Contextualized representations of a single sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `m × d`
    pub h: Tensor,
    pub attention_mask: Vec<bool>,
}

/// Contextualized representations of a padded batch, as graph nodes.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    /// `(batch · seq_len) × d`, sequence `b` occupying rows
    /// `b·seq_len .. (b+1)·seq_len`.
    pub hidden: Var,
    /// `true` at real (non-padding) positions, one entry per row of `hidden`.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
    /// Attention probabilities per layer and head, each
    /// `(batch · seq_len) × seq_len`.
    pub attentions: Vec<Vec<Var>>,
}

pub trait TextEncoder {
    fn d_model(&self) -> usize;

    /// Encodes token-id sequences, padding to `max(longest, min_len)`.
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sequences: &[&[u32]],
        min_len: usize,
    ) -> Result<EncodedBatch>;

    fn params(&self) -> Vec<ParamId>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    attn_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: LayerNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerEncoder {
    cfg: EncoderConfig,
    token_embedding: ParamId,
    position_embedding: ParamId,
    embedding_norm: LayerNorm,
    blocks: Vec<Block>,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(
        cfg: EncoderConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let grp = ParamGroup::Encoder;
        let d = cfg.d_model;
        let token_embedding = store.add(
            "encoder.token_embedding",
            grp,
            Tensor::randn(cfg.vocab_size, d, cfg.embedding_init_std, rng),
        );
        let position_embedding = store.add(
            "encoder.position_embedding",
            grp,
            Tensor::randn(cfg.max_len, d, cfg.embedding_init_std, rng),
        );
        let embedding_norm = LayerNorm::new(store, "encoder.embedding_norm", grp, d);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let n = |s: &str| format!("encoder.layer{i}.{s}");
                Block {
                    query: Linear::new(store, &n("query"), grp, d, d, rng),
                    key: Linear::new(store, &n("key"), grp, d, d, rng),
                    value: Linear::new(store, &n("value"), grp, d, d, rng),
                    output: Linear::new(store, &n("output"), grp, d, d, rng),
                    attn_norm: LayerNorm::new(store, &n("attn_norm"), grp, d),
                    ffn_in: Linear::new(store, &n("ffn_in"), grp, d, cfg.ffn_dim, rng),
                    ffn_out: Linear::new(store, &n("ffn_out"), grp, cfg.ffn_dim, d, rng),
                    ffn_norm: LayerNorm::new(store, &n("ffn_norm"), grp, d),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            token_embedding,
            position_embedding,
            embedding_norm,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }
}

impl TextEncoder for TransformerEncoder {
    fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sequences: &[&[u32]],
        min_len: usize,
    ) -> Result<EncodedBatch> {
        if sequences.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let lengths: Vec<usize> = sequences.iter().map(|s| s.len()).collect();
        if lengths.contains(&0) {
            return Err(Error::Shape("empty token sequence".into()));
        }
        let seq_len = lengths.iter().copied().max().unwrap_or(1).max(min_len);
        if seq_len > self.cfg.max_len {
            return Err(Error::Shape(format!(
                "sequence length {seq_len} exceeds encoder max_len {}",
                self.cfg.max_len
            )));
        }
        let batch = sequences.len();
        let mut ids = Vec::with_capacity(batch * seq_len);
        let mut mask = Vec::with_capacity(batch * seq_len);
        let mut positions = Vec::with_capacity(batch * seq_len);
        for s in sequences {
            for t in 0..seq_len {
                let id = s.get(t).copied().unwrap_or(PAD_ID);
                if id as usize >= self.cfg.vocab_size {
                    return Err(Error::Shape(format!(
                        "token id {id} outside vocabulary of {}",
                        self.cfg.vocab_size
                    )));
                }
                ids.push(id as usize);
                mask.push(t < s.len());
                positions.push(t);
            }
        }

        let tok_table = g.param(store, self.token_embedding);
        let pos_table = g.param(store, self.position_embedding);
        let tok = g.gather_rows(tok_table, ids);
        let pos = g.gather_rows(pos_table, positions);
        let emb = g.add(tok, pos);
        let mut h = self.embedding_norm.forward(g, store, emb);

        // key mask, one row per query row
        let key_mask: Vec<bool> = (0..batch * seq_len)
            .flat_map(|r| {
                let b = r / seq_len;
                mask[b * seq_len..(b + 1) * seq_len].to_vec()
            })
            .collect();
        let head_dim = self.cfg.d_model / self.cfg.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut attentions = Vec::with_capacity(self.blocks.len());

        for block in &self.blocks {
            let q = block.query.forward(g, store, h);
            let k = block.key.forward(g, store, h);
            let v = block.value.forward(g, store, h);
            let mut heads = Vec::with_capacity(self.cfg.heads);
            let mut maps = Vec::with_capacity(self.cfg.heads);
            for hd in 0..self.cfg.heads {
                let (lo, hi) = (hd * head_dim, (hd + 1) * head_dim);
                let (qh, kh, vh) = if self.cfg.heads == 1 {
                    (q, k, v)
                } else {
                    (
                        g.slice_cols(q, lo, hi),
                        g.slice_cols(k, lo, hi),
                        g.slice_cols(v, lo, hi),
                    )
                };
                let scores = g.block_scores(qh, kh, seq_len);
                let scores = g.scale(scores, scale);
                let p = g.softmax_rows(scores, Some(&key_mask));
                heads.push(g.block_apply(p, vh, seq_len, seq_len));
                maps.push(p);
            }
            let ctx = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(heads)
            };
            let attn_out = block.output.forward(g, store, ctx);
            let res = g.add(h, attn_out);
            h = block.attn_norm.forward(g, store, res);
            let f = block.ffn_in.forward(g, store, h);
            let f = g.gelu(f);
            let f = block.ffn_out.forward(g, store, f);
            let res = g.add(h, f);
            h = block.ffn_norm.forward(g, store, res);
            attentions.push(maps);
        }

        Ok(EncodedBatch {
            hidden: h,
            mask,
            batch,
            seq_len,
            lengths,
            attentions,
        })
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.token_embedding, self.position_embedding];
        p.extend(self.embedding_norm.params());
        for b in &self.blocks {
            for l in [&b.query, &b.key, &b.value, &b.output, &b.ffn_in, &b.ffn_out] {
                p.extend(l.params());
            }
            p.extend(b.attn_norm.params());
            p.extend(b.ffn_norm.params());
        }
        p
    }
}

/// Encodes one sequence in evaluation mode.
pub fn encode(encoder: &dyn TextEncoder, store: &ParamStore, ids: &[u32]) -> Result<EncoderOutput> {
    let mut g = Graph::new();
    let out = encoder.forward(&mut g, store, &[ids], 1)?;
    Ok(EncoderOutput {
        h: g.value(out.hidden).clone(),
        attention_mask: out.mask,
    })
}
