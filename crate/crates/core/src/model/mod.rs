//! Encoder, domain experts, main predictor, bias branch and fusion.
//!
//! The main path is `encode → expert attention pooling → predictor`. The
//! bias branch re-encodes the counterfactual input (bias tokens only) with the
//! shared encoder and classifies it through a text-CNN; during training its
//! prediction is mixed into the main prediction, at inference it is dropped.

mod encoder;
mod experts;
mod heads;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use encoder::{encode, EncodedBatch, EncoderConfig, EncoderOutput, TextEncoder, TransformerEncoder};
pub use experts::{Expert, ExpertBank};
pub use heads::{BiasCnn, Predictor};
pub use layers::{dropout, LayerNorm, Linear, LAYER_NORM_EPS};

use crate::autograd::{self, Graph, ParamId, ParamStore, Var};
use crate::corpus::TaskKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TINY_TRANSFORMER: &str = "tiny-transformer";

/// How the main path turns token representations into one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Representation at position 0.
    Cls,
    /// Attention pooling with one expert per domain.
    Experts,
    /// Attention pooling with a single query shared by all domains.
    SharedQuery,
}

/// How the bias prediction enters the main training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combination {
    /// No bias branch.
    MainOnly,
    /// `(1 − α)·ŷ_m + α·ŷ_b` in probability space.
    Fused,
    /// Product of experts: `z_m + stopgrad(z_b)` in logit space.
    ProductOfExperts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_id: String,
    pub encoder: EncoderConfig,
    pub task_kind: TaskKind,
    pub num_labels: usize,
    pub num_domains: usize,
    pub pooling: Pooling,
    /// Whether position 0 (`[CLS]`) takes part in attention pooling.
    pub pool_include_cls: bool,
    /// Pool uniformly for domains without an expert instead of failing.
    pub uniform_expert_fallback: bool,
    pub expert_init_std: f64,
    pub combination: Combination,
    pub alpha: f64,
    pub cnn_widths: Vec<usize>,
    pub cnn_channels: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Stop `L_bias` gradients at the shared encoder.
    pub detach_bias_encoder: bool,
    /// Auxiliary domain classifier on the pooled representation.
    pub aux_domain_head: bool,
    /// Number of event classes for an adversarial event head; 0 disables it.
    pub event_head_classes: usize,
    pub event_reversal_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_id: TINY_TRANSFORMER.into(),
            encoder: EncoderConfig::default(),
            task_kind: TaskKind::MultiClass,
            num_labels: 2,
            num_domains: 1,
            pooling: Pooling::Experts,
            pool_include_cls: true,
            uniform_expert_fallback: false,
            expert_init_std: 0.02,
            combination: Combination::Fused,
            alpha: 0.1,
            cnn_widths: vec![1, 2, 3, 4, 5],
            cnn_channels: 64,
            hidden: 384,
            dropout: 0.2,
            detach_bias_encoder: false,
            aux_domain_head: false,
            event_head_classes: 0,
            event_reversal_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_id != TINY_TRANSFORMER {
            return Err(Error::Config(format!(
                "unknown encoder '{}' (available: {TINY_TRANSFORMER})",
                self.encoder_id
            )));
        }
        self.encoder.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.num_labels < 2 {
            return Err(Error::Config("at least two labels are required".into()));
        }
        if self.num_domains == 0 || self.hidden == 0 || self.cnn_channels == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.cnn_widths.is_empty() || self.cnn_widths.contains(&0) {
            return Err(Error::Config("CNN kernel widths must be positive".into()));
        }
        if self.combination != Combination::MainOnly
            && self.cnn_widths.iter().any(|&k| k > self.encoder.max_len)
        {
            return Err(Error::Config("CNN kernel wider than encoder max_len".into()));
        }
        if self.expert_init_std < 0.0 || self.event_reversal_scale < 0.0 {
            return Err(Error::Config("negative init std or reversal scale".into()));
        }
        Ok(())
    }

    pub fn has_bias_branch(&self) -> bool {
        self.combination != Combination::MainOnly
    }
}

/// Probability vector over the label space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub task_kind: TaskKind,
}

impl Prediction {
    /// Argmax with ties to the lowest index, or every label with
    /// probability ≥ 0.5.
    pub fn decide(&self) -> Vec<usize> {
        decide(&self.probs, self.task_kind)
    }
}

pub const MULTI_LABEL_THRESHOLD: f64 = 0.5;

pub fn decide(probs: &[f64], kind: TaskKind) -> Vec<usize> {
    match kind {
        TaskKind::MultiClass => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            if probs.is_empty() {
                vec![]
            } else {
                vec![best]
            }
        }
        TaskKind::MultiLabel => probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= MULTI_LABEL_THRESHOLD)
            .map(|(i, _)| i)
            .collect(),
    }
}

/// `(1 − α)·main + α·bias`, elementwise.
pub fn fuse(main: &Prediction, bias: &Prediction, alpha: f64) -> Result<Prediction> {
    if main.probs.len() != bias.probs.len() || main.task_kind != bias.task_kind {
        return Err(Error::Shape(format!(
            "cannot fuse predictions over {} and {} labels",
            main.probs.len(),
            bias.probs.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let probs = main
        .probs
        .iter()
        .zip(&bias.probs)
        .map(|(&m, &b)| (1.0 - alpha) * m + alpha * b)
        .collect();
    Ok(Prediction {
        probs,
        task_kind: main.task_kind,
    })
}

/// `R = Σ_i a_i h_i`.
pub fn pool(h: &Tensor, a: &[f64]) -> Result<Vec<f64>> {
    if a.len() != h.rows() {
        return Err(Error::Shape(format!(
            "attention of length {} for {} positions",
            a.len(),
            h.rows()
        )));
    }
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let av = g.constant(Tensor::row_vector(a.to_vec()));
    let r = g.block_apply(av, hv, h.rows(), 1);
    Ok(g.value(r).data().to_vec())
}

/// One model input batch. `counterfactual` is only read by the bias branch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelInput {
    pub main: Vec<Vec<u32>>,
    pub counterfactual: Vec<Vec<u32>>,
    pub domains: Vec<Option<usize>>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.main.len()
    }

    pub fn is_empty(&self) -> bool {
        self.main.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub encoded: EncodedBatch,
    /// `batch × d`
    pub pooled: Var,
    /// `batch × seq_len`, absent for `[CLS]` pooling.
    pub pooling_weights: Option<Var>,
    pub main_logits: Var,
    pub main_probs: Var,
    pub bias_feature: Option<Var>,
    pub bias_logits: Option<Var>,
    pub bias_probs: Option<Var>,
    /// Prediction the main loss is computed on.
    pub combined_probs: Var,
    pub aux_logits: Option<Var>,
    pub event_logits: Option<Var>,
}

/// Pooled representations in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Representations {
    /// Main-path pooled vectors, `batch × d`.
    pub main: Tensor,
    /// Bias features z_b, `batch × (widths · channels)`.
    pub bias: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: TransformerEncoder,
    experts: Option<ExpertBank>,
    main_head: Predictor,
    bias_cnn: Option<BiasCnn>,
    bias_head: Option<Predictor>,
    aux_head: Option<Predictor>,
    event_head: Option<Predictor>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = TransformerEncoder::new(cfg.encoder.clone(), &mut store, &mut rng)?;
        let d = cfg.encoder.d_model;
        let experts = match cfg.pooling {
            Pooling::Cls => None,
            Pooling::Experts => Some(ExpertBank::new(
                &mut store,
                "experts.domain",
                cfg.num_domains,
                d,
                cfg.expert_init_std,
                &mut rng,
            )?),
            Pooling::SharedQuery => Some(ExpertBank::new(
                &mut store,
                "experts.shared",
                1,
                d,
                cfg.expert_init_std,
                &mut rng,
            )?),
        };
        let main_head = Predictor::new(
            &mut store,
            "main_head",
            d,
            cfg.hidden,
            cfg.num_labels,
            cfg.dropout,
            &mut rng,
        );
        let (bias_cnn, bias_head) = if cfg.has_bias_branch() {
            let cnn = BiasCnn::new(
                &mut store,
                "bias_cnn",
                d,
                &cfg.cnn_widths,
                cfg.cnn_channels,
                &mut rng,
            )?;
            let head = Predictor::new(
                &mut store,
                "bias_head",
                d,
                cfg.hidden,
                cfg.num_labels,
                cfg.dropout,
                &mut rng,
            );
            (Some(cnn), Some(head))
        } else {
            (None, None)
        };
        let aux_head = cfg.aux_domain_head.then(|| {
            Predictor::new(
                &mut store,
                "aux_domain_head",
                d,
                cfg.hidden,
                cfg.num_domains,
                cfg.dropout,
                &mut rng,
            )
        });
        let event_head = (cfg.event_head_classes > 0).then(|| {
            Predictor::new(
                &mut store,
                "event_head",
                d,
                cfg.hidden,
                cfg.event_head_classes,
                cfg.dropout,
                &mut rng,
            )
        });
        Ok(Self {
            cfg,
            store,
            encoder,
            experts,
            main_head,
            bias_cnn,
            bias_head,
            aux_head,
            event_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn expert_bank(&self) -> Option<&ExpertBank> {
        self.experts.as_ref()
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.params()
    }

    pub fn main_head(&self) -> &Predictor {
        &self.main_head
    }

    pub fn bias_head(&self) -> Option<&Predictor> {
        self.bias_head.as_ref()
    }

    /// Parameters of expert `q` (the shared query for [`Pooling::SharedQuery`]).
    pub fn expert_params(&self, q: usize) -> Vec<ParamId> {
        self.experts
            .as_ref()
            .and_then(|b| b.expert(q))
            .map(|e| vec![e.weight, e.bias])
            .unwrap_or_default()
    }

    /// CNN and bias predictor parameters.
    pub fn bias_params(&self) -> Vec<ParamId> {
        let mut p = self.bias_cnn.as_ref().map(BiasCnn::params).unwrap_or_default();
        p.extend(self.bias_head.as_ref().map(Predictor::params).unwrap_or_default());
        p
    }

    pub fn aux_params(&self) -> Vec<ParamId> {
        let mut p = self.aux_head.as_ref().map(Predictor::params).unwrap_or_default();
        p.extend(self.event_head.as_ref().map(Predictor::params).unwrap_or_default());
        p
    }

    /// Domain actually used for pooling; `None` means uniform attention.
    fn route(&self, domain: Option<usize>) -> Result<Option<usize>> {
        match self.cfg.pooling {
            Pooling::Cls => Ok(None),
            Pooling::SharedQuery => Ok(Some(0)),
            Pooling::Experts => match domain {
                Some(q) if q < self.cfg.num_domains => Ok(Some(q)),
                _ if self.cfg.uniform_expert_fallback => Ok(None),
                Some(q) => Err(Error::UnknownDomain(format!(
                    "domain index {q} has no expert ({} experts)",
                    self.cfg.num_domains
                ))),
                None => Err(Error::UnknownDomain("post without a known domain".into())),
            },
        }
    }

    fn pool_mask(&self, mask: &[bool], seq_len: usize) -> Vec<bool> {
        let mut m = mask.to_vec();
        if !self.cfg.pool_include_cls {
            for (b, chunk) in mask.chunks(seq_len).enumerate() {
                if chunk.iter().filter(|&&v| v).count() > 1 {
                    m[b * seq_len] = false;
                }
            }
        }
        m
    }

    fn probs(&self, g: &mut Graph, logits: Var) -> Var {
        match self.cfg.task_kind {
            TaskKind::MultiClass => g.softmax_rows(logits, None),
            TaskKind::MultiLabel => g.sigmoid(logits),
        }
    }

    /// Encoder, pooling and main predictor. Never reads bias-branch
    /// parameters.
    fn main_path(
        &self,
        g: &mut Graph,
        ids: &[Vec<u32>],
        domains: &[Option<usize>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(EncodedBatch, Var, Option<Var>, Var)> {
        if ids.len() != domains.len() {
            return Err(Error::Shape(format!(
                "{} sequences but {} domains",
                ids.len(),
                domains.len()
            )));
        }
        let routed = domains
            .iter()
            .map(|&d| self.route(d))
            .collect::<Result<Vec<_>>>()?;
        let seqs: Vec<&[u32]> = ids.iter().map(Vec::as_slice).collect();
        let enc = self.encoder.forward(g, &self.store, &seqs, 1)?;
        let m = enc.seq_len;
        let (pooled, weights) = match &self.experts {
            None => {
                let rows = (0..enc.batch).map(|b| b * m).collect();
                (g.gather_rows(enc.hidden, rows), None)
            }
            Some(bank) => {
                let logits = bank.logits(g, &self.store, enc.hidden, m, &routed)?;
                let mask = self.pool_mask(&enc.mask, m);
                let a = g.softmax_rows(logits, Some(&mask));
                (g.block_apply(a, enc.hidden, m, 1), Some(a))
            }
        };
        let logits = self
            .main_head
            .forward(g, &self.store, pooled, rng.as_deref_mut());
        Ok((enc, pooled, weights, logits))
    }

    /// Counterfactual input through the shared encoder, CNN and bias
    /// predictor. Returns `(feature, logits)`.
    fn bias_path(
        &self,
        g: &mut Graph,
        ids: &[Vec<u32>],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let (Some(cnn), Some(head)) = (&self.bias_cnn, &self.bias_head) else {
            return Err(Error::MissingComponent("bias-branch".into()));
        };
        let seqs: Vec<&[u32]> = ids.iter().map(Vec::as_slice).collect();
        let enc = self
            .encoder
            .forward(g, &self.store, &seqs, cnn.max_width())?;
        let hidden = if self.cfg.detach_bias_encoder {
            g.detach(enc.hidden)
        } else {
            enc.hidden
        };
        let feature = cnn.forward(g, &self.store, hidden, enc.seq_len, &enc.lengths);
        let projected = cnn.project(g, &self.store, feature);
        let logits = head.forward(g, &self.store, projected, rng);
        Ok((feature, logits))
    }

    /// Training-time forward pass. Dropout is active only when `rng` is
    /// given. The bias branch runs when the model has one and
    /// `input.counterfactual` is non-empty.
    pub fn forward(
        &self,
        g: &mut Graph,
        input: &ModelInput,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        if input.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let (encoded, pooled, pooling_weights, main_logits) =
            self.main_path(g, &input.main, &input.domains, rng.as_deref_mut())?;
        let main_probs = self.probs(g, main_logits);

        let run_bias = self.cfg.has_bias_branch() && !input.counterfactual.is_empty();
        let (bias_feature, bias_logits, bias_probs) = if run_bias {
            if input.counterfactual.len() != input.len() {
                return Err(Error::Shape(format!(
                    "{} counterfactual inputs for {} posts",
                    input.counterfactual.len(),
                    input.len()
                )));
            }
            let (f, z) = self.bias_path(g, &input.counterfactual, rng.as_deref_mut())?;
            let p = self.probs(g, z);
            (Some(f), Some(z), Some(p))
        } else {
            (None, None, None)
        };

        let combined_probs = match (self.cfg.combination, bias_logits, bias_probs) {
            (Combination::Fused, Some(_), Some(pb)) => {
                let a = self.cfg.alpha;
                let m = g.scale(main_probs, 1.0 - a);
                let b = g.scale(pb, a);
                g.add(m, b)
            }
            (Combination::ProductOfExperts, Some(zb), Some(_)) => {
                let zb = g.detach(zb);
                let z = g.add(main_logits, zb);
                self.probs(g, z)
            }
            _ => main_probs,
        };

        let aux_logits = self
            .aux_head
            .as_ref()
            .map(|h| h.forward(g, &self.store, pooled, rng.as_deref_mut()));
        let event_logits = self.event_head.as_ref().map(|h| {
            let rev = g.grad_reverse(pooled, self.cfg.event_reversal_scale);
            h.forward(g, &self.store, rev, rng.as_deref_mut())
        });

        Ok(ForwardOutput {
            encoded,
            pooled,
            pooling_weights,
            main_logits,
            main_probs,
            bias_feature,
            bias_logits,
            bias_probs,
            combined_probs,
            aux_logits,
            event_logits,
        })
    }

    /// Encodes one token-id sequence in evaluation mode.
    pub fn encode(&self, ids: &[u32]) -> Result<EncoderOutput> {
        encode(&self.encoder, &self.store, ids)
    }

    /// Pooling weights of the expert for `domain` over `out.h`.
    pub fn expert_attention(&self, out: &EncoderOutput, domain: Option<usize>) -> Result<Vec<f64>> {
        let m = out.h.rows();
        if out.attention_mask.len() != m {
            return Err(Error::Shape("mask length differs from H".into()));
        }
        let Some(bank) = &self.experts else {
            let mut a = vec![0.0; m];
            a[0] = 1.0;
            return Ok(a);
        };
        let routed = self.route(domain)?;
        let mut g = Graph::new();
        let h = g.constant(out.h.clone());
        let logits = bank.logits(&mut g, &self.store, h, m, &[routed])?;
        let mask = self.pool_mask(&out.attention_mask, m);
        let a = g.softmax_rows(logits, Some(&mask));
        Ok(g.value(a).data().to_vec())
    }

    /// Main predictor on a pooled vector, evaluation mode.
    pub fn predict_main(&self, r: &[f64]) -> Result<Prediction> {
        self.head_prediction(&self.main_head, r)
    }

    fn head_prediction(&self, head: &Predictor, r: &[f64]) -> Result<Prediction> {
        if r.len() != self.cfg.encoder.d_model {
            return Err(Error::Shape(format!(
                "pooled vector of length {} for d = {}",
                r.len(),
                self.cfg.encoder.d_model
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(r.to_vec()));
        let z = head.forward(&mut g, &self.store, x, None);
        let p = self.probs(&mut g, z);
        Ok(Prediction {
            probs: g.value(p).data().to_vec(),
            task_kind: self.cfg.task_kind,
        })
    }

    /// Bias prediction `ŷ_b` for one counterfactual input, evaluation mode.
    pub fn bias_forward(&self, counterfactual: &[u32]) -> Result<Prediction> {
        let mut g = Graph::new();
        let (_, z) = self.bias_path(&mut g, &[counterfactual.to_vec()], None)?;
        let p = self.probs(&mut g, z);
        Ok(Prediction {
            probs: g.value(p).data().to_vec(),
            task_kind: self.cfg.task_kind,
        })
    }

    /// Bias-free prediction: the domain's expert and the main predictor only.
    pub fn infer(&self, ids: &[u32], domain: Option<usize>) -> Result<Prediction> {
        Ok(self
            .infer_batch(&[ids.to_vec()], &[domain])?
            .pop()
            .expect("one prediction per input"))
    }

    pub fn infer_batch(&self, ids: &[Vec<u32>], domains: &[Option<usize>]) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let (_, _, _, logits) = self.main_path(&mut g, ids, domains, None)?;
        let p = self.probs(&mut g, logits);
        Ok(g.value(p)
            .to_rows()
            .into_iter()
            .map(|probs| Prediction {
                probs,
                task_kind: self.cfg.task_kind,
            })
            .collect())
    }

    /// Evaluation-mode pooled representations for probing.
    pub fn representations(&self, input: &ModelInput) -> Result<Representations> {
        let mut g = Graph::new();
        let (_, pooled, _, _) = self.main_path(&mut g, &input.main, &input.domains, None)?;
        let main = g.value(pooled).clone();
        let bias = if self.cfg.has_bias_branch() && !input.counterfactual.is_empty() {
            let (f, _) = self.bias_path(&mut g, &input.counterfactual, None)?;
            Some(g.value(f).clone())
        } else {
            None
        };
        Ok(Representations { main, bias })
    }
}

/// Mean per-token attention entropy of each layer (valid query rows only,
/// averaged over heads), as a graph scalar per layer.
pub fn attention_entropies(g: &mut Graph, encoded: &EncodedBatch) -> Result<Vec<Var>> {
    if encoded.attentions.is_empty() {
        return Err(Error::MissingComponent(
            "encoder-attention".into(),
        ));
    }
    let valid = encoded.mask.iter().filter(|&&v| v).count();
    let weights: Vec<f64> = encoded
        .mask
        .iter()
        .map(|&v| if v { 1.0 / valid as f64 } else { 0.0 })
        .collect();
    let w = g.constant(Tensor::column_vector(weights));
    let mut out = Vec::with_capacity(encoded.attentions.len());
    for layer in &encoded.attentions {
        let mut total: Option<Var> = None;
        for &p in layer {
            let lp = g.log(p);
            let plp = g.mul(p, lp);
            let h = g.row_sum(plp);
            let h = g.mul(h, w);
            let h = g.sum(h);
            total = Some(match total {
                Some(t) => g.add(t, h),
                None => h,
            });
        }
        let t = total.expect("at least one head");
        out.push(g.scale(t, -1.0 / layer.len() as f64));
    }
    Ok(out)
}

/// Plain softmax over positions with `−∞` at masked ones.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    autograd::softmax_rows(&Tensor::row_vector(logits.to_vec()), Some(mask)).into_vec()
}
