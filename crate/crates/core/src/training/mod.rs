//! Joint optimization of the main and bias branches.

mod checkpoint;
mod optim;

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    config_hash, load_checkpoint, save_checkpoint, select_checkpoint, CheckpointConfig, CheckpointManifest,
    MANIFEST_FILE, PARAMS_FILE, VOCAB_FILE,
};
pub use optim::{Adam, Scheduler};

use crate::autograd::{Graph, ParamGroup, ParamId, Var};
use crate::corpus::{LabelSpace, TaskKind};
use crate::error::{Error, Result};
use crate::evaluation::{macro_prf, predict_labels};
use crate::features::{Example, Featurizer};
use crate::model::{attention_entropies, Model, ModelConfig, ModelInput};
use crate::tensor::Tensor;

pub const DEFAULT_SEEDS: [u64; 5] = [0, 42, 64, 86, 128];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// One combined loss over both branches.
    Joint,
    /// Bias branch alone first, then the main path with the bias branch frozen.
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of `L_bias`.
    pub lambda: f64,
    pub mask_prob: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub scheduler: Scheduler,
    pub seeds: Vec<u64>,
    /// Stop after this many epochs without a better validation score.
    pub patience: Option<usize>,
    pub regime: Regime,
    pub mask_at_validation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            mask_prob: 0.5,
            epochs: 30,
            batch_size: 32,
            lr_encoder: 1e-5,
            lr_head: 1e-4,
            scheduler: Scheduler::Cosine,
            seeds: DEFAULT_SEEDS.to_vec(),
            patience: None,
            regime: Regime::Joint,
            mask_at_validation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be ≥ 0", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask_prob {} outside [0, 1]", self.mask_prob)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.lr_encoder >= 0.0 && self.lr_head >= 0.0) {
            return Err(Error::Config("learning rates must be ≥ 0".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

/// Weights of every term that can enter the training loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Objective {
    pub lambda: f64,
    pub mask_prob: f64,
    /// Auxiliary domain classification.
    pub aux_weight: f64,
    /// Attention-entropy regularization strength.
    pub ear_strength: f64,
    /// Adversarial event classification behind gradient reversal.
    pub adversarial_weight: f64,
}

impl Default for Objective {
    fn default() -> Self {
        Self::from_config(&TrainConfig::default())
    }
}

impl Objective {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            lambda: cfg.lambda,
            mask_prob: cfg.mask_prob,
            aux_weight: 0.0,
            ear_strength: 0.0,
            adversarial_weight: 0.0,
        }
    }
}

/// A training batch: model input plus targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: ModelInput,
    pub labels: Vec<Vec<usize>>,
    pub events: Vec<Option<usize>>,
    pub post_ids: Vec<String>,
}

impl Batch {
    /// Builds a batch, masking bias spans of the main input with
    /// `mask_prob` when a generator is given.
    pub fn build(
        examples: &[&Example],
        featurizer: &Featurizer,
        mask_prob: f64,
        rng: Option<&mut ChaCha8Rng>,
        with_counterfactual: bool,
    ) -> Result<Self> {
        let main = match rng {
            Some(r) => examples
                .iter()
                .map(|e| featurizer.masked_ids(e, mask_prob, r))
                .collect::<Result<Vec<_>>>()?,
            None => examples.iter().map(|e| e.main_ids.clone()).collect(),
        };
        let counterfactual = if with_counterfactual {
            examples.iter().map(|e| e.counterfactual_ids.clone()).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            input: ModelInput {
                main,
                counterfactual,
                domains: examples.iter().map(|e| e.domain).collect(),
            },
            labels: examples.iter().map(|e| e.labels.clone()).collect(),
            events: examples.iter().map(|e| e.event).collect(),
            post_ids: examples.iter().map(|e| e.post_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Which losses drive the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Joint,
    BiasOnly,
    MainOnly,
}

/// Loss terms as graph nodes; `total` is what gets differentiated.
#[derive(Clone, Debug)]
pub struct Losses {
    pub main: Var,
    pub bias: Option<Var>,
    pub aux: Option<Var>,
    pub adversarial: Option<Var>,
    pub ear: Option<Var>,
    pub total: Var,
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub main: f64,
    pub bias: f64,
    pub total: f64,
}

fn targets(labels: &[Vec<usize>], width: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(labels.len(), width);
    for (r, ls) in labels.iter().enumerate() {
        for &c in ls {
            if c >= width {
                return Err(Error::LabelSpace(format!("label {c} outside {width} labels")));
            }
            t.set(r, c, 1.0);
        }
    }
    Ok(t)
}

/// Mean cross-entropy of probability rows against one-hot rows; rows of
/// all zeros are ignored.
fn cross_entropy(g: &mut Graph, probs: Var, onehot: Tensor) -> Var {
    let n = (0..onehot.rows())
        .filter(|&r| onehot.row(r).iter().any(|&x| x != 0.0))
        .count()
        .max(1);
    let t = g.constant(onehot);
    let lp = g.log(probs);
    let picked = g.mul(lp, t);
    let s = g.sum(picked);
    g.scale(s, -1.0 / n as f64)
}

/// Binary cross-entropy averaged over all entries.
fn binary_cross_entropy(g: &mut Graph, probs: Var, targets: Tensor) -> Var {
    let n = targets.len() as f64;
    let inv = targets.map(|y| 1.0 - y);
    let t = g.constant(targets);
    let ti = g.constant(inv);
    let lp = g.log(probs);
    let q = g.affine(probs, -1.0, 1.0);
    let lq = g.log(q);
    let a = g.mul(lp, t);
    let b = g.mul(lq, ti);
    let s = g.add(a, b);
    let s = g.sum(s);
    g.scale(s, -1.0 / n)
}

fn task_loss(g: &mut Graph, kind: TaskKind, probs: Var, labels: &[Vec<usize>], width: usize) -> Result<Var> {
    let t = targets(labels, width)?;
    Ok(match kind {
        TaskKind::MultiClass => cross_entropy(g, probs, t),
        TaskKind::MultiLabel => binary_cross_entropy(g, probs, t),
    })
}

/// `L = L_main + λ·L_bias` plus any auxiliary terms enabled in `obj`.
/// `L_main` is the cross-entropy of the combined prediction, `L_bias` that
/// of the bias branch alone.
pub fn compute_losses(
    g: &mut Graph,
    model: &Model,
    batch: &Batch,
    obj: &Objective,
    phase: Phase,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Losses> {
    let cfg = model.config();
    let out = model.forward(g, &batch.input, rng)?;
    let l = cfg.num_labels;
    let main = task_loss(g, cfg.task_kind, out.combined_probs, &batch.labels, l)?;
    let bias = match out.bias_probs {
        Some(p) => Some(task_loss(g, cfg.task_kind, p, &batch.labels, l)?),
        None => None,
    };
    let aux = match out.aux_logits {
        Some(z) if obj.aux_weight > 0.0 => {
            let doms: Vec<Vec<usize>> = batch
                .input
                .domains
                .iter()
                .map(|d| d.map(|x| vec![x]).unwrap_or_default())
                .collect();
            let p = g.softmax_rows(z, None);
            let t = targets(&doms, cfg.num_domains)?;
            Some(cross_entropy(g, p, t))
        }
        _ => None,
    };
    let adversarial = match out.event_logits {
        Some(z) if obj.adversarial_weight > 0.0 => {
            let evs: Vec<Vec<usize>> = batch
                .events
                .iter()
                .map(|e| e.map(|x| vec![x]).unwrap_or_default())
                .collect();
            let p = g.softmax_rows(z, None);
            let t = targets(&evs, cfg.event_head_classes)?;
            Some(cross_entropy(g, p, t))
        }
        _ => None,
    };
    let ear = if obj.ear_strength > 0.0 {
        let per_layer = attention_entropies(g, &out.encoded)?;
        let mut s = per_layer[0];
        for &v in &per_layer[1..] {
            s = g.add(s, v);
        }
        Some(g.scale(s, obj.ear_strength))
    } else {
        None
    };

    let mut total = match phase {
        Phase::BiasOnly => bias.ok_or_else(|| Error::MissingComponent("bias-branch".into()))?,
        Phase::Joint | Phase::MainOnly => main,
    };
    if phase == Phase::Joint && obj.lambda != 0.0 {
        if let Some(b) = bias {
            let wb = g.scale(b, obj.lambda);
            total = g.add(total, wb);
        }
    }
    if phase != Phase::BiasOnly {
        for (term, w) in [(aux, obj.aux_weight), (adversarial, obj.adversarial_weight), (ear, 1.0)] {
            if let Some(t) = term {
                let wt = if w == 1.0 { t } else { g.scale(t, w) };
                total = g.add(total, wt);
            }
        }
    }
    Ok(Losses {
        main,
        bias,
        aux,
        adversarial,
        ear,
        total,
    })
}

pub fn loss_values(g: &Graph, losses: &Losses) -> LossValues {
    LossValues {
        main: g.value(losses.main).scalar_value(),
        bias: losses.bias.map(|b| g.value(b).scalar_value()).unwrap_or(0.0),
        total: g.value(losses.total).scalar_value(),
    }
}

/// Mutable training state of one run.
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub step: usize,
    pub total_steps: usize,
    frozen: HashSet<ParamId>,
}

impl Trainer {
    pub fn new(model: Model, total_steps: usize) -> Self {
        Self {
            model,
            optimizer: Adam::default(),
            step: 0,
            total_steps,
            frozen: HashSet::new(),
        }
    }

    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    /// One optimizer update. Expert `q` only receives gradient from the
    /// batch's domain-`q` samples, so experts of absent domains keep their
    /// exact values.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        cfg: &TrainConfig,
        obj: &Objective,
        phase: Phase,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossValues> {
        let mut g = Graph::new();
        let losses = compute_losses(&mut g, &self.model, batch, obj, phase, dropout_rng)?;
        let values = loss_values(&g, &losses);
        if !(values.total.is_finite() && values.main.is_finite() && values.bias.is_finite()) {
            return Err(Error::Diverged {
                step: self.step,
                post_ids: batch.post_ids.clone(),
                detail: format!(
                    "L_main={} L_bias={} L={}; max |main logit| = {}",
                    values.main,
                    values.bias,
                    values.total,
                    self.max_abs_logit(batch)
                ),
            });
        }
        let grads = g.backward(losses.total);
        let factor = cfg.scheduler.factor(self.step, self.total_steps);
        let (lr_enc, lr_head) = (cfg.lr_encoder * factor, cfg.lr_head * factor);
        self.optimizer.step(
            self.model.store_mut(),
            &grads,
            |grp| match grp {
                ParamGroup::Encoder => lr_enc,
                ParamGroup::Head => lr_head,
            },
            &self.frozen,
        );
        self.step += 1;
        Ok(values)
    }

    fn max_abs_logit(&self, batch: &Batch) -> f64 {
        let mut g = Graph::new();
        match self.model.forward(&mut g, &batch.input, None) {
            Ok(out) => g
                .value(out.main_logits)
                .data()
                .iter()
                .fold(0.0_f64, |m, x| m.max(x.abs())),
            Err(_) => f64::NAN,
        }
    }
}

/// Metrics emitted after every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(rename = "L_main")]
    pub l_main: f64,
    #[serde(rename = "L_bias")]
    pub l_bias: f64,
    pub valid_macro_f1: f64,
}

pub struct FitResult {
    /// Parameters of the selected epoch.
    pub model: Model,
    pub manifest: CheckpointManifest,
    pub history: Vec<EpochMetrics>,
    pub group_steps: BTreeMap<String, usize>,
}

/// Everything needed to identify a run besides the data.
#[derive(Clone, Debug)]
pub struct RunSpec<'a> {
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub objective: Objective,
    pub strategy: &'a str,
    pub seed: u64,
    pub domains: &'a [String],
    pub events: &'a [String],
    pub labels: &'a LabelSpace,
}

/// Independent generator for one purpose of one run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_MASK: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

/// Macro-F1 of bias-free predictions on `examples`, optionally with
/// masked inputs.
pub fn validation_f1(
    model: &Model,
    examples: &[Example],
    labels: &LabelSpace,
    mask: Option<(&Featurizer, f64, &mut ChaCha8Rng)>,
) -> Result<f64> {
    let pred = match mask {
        None => predict_labels(model, examples)?,
        Some((f, p, rng)) => {
            let masked = examples
                .iter()
                .map(|e| {
                    let mut e = e.clone();
                    e.main_ids = f.masked_ids(&e, p, rng)?;
                    Ok(e)
                })
                .collect::<Result<Vec<_>>>()?;
            predict_labels(model, &masked)?
        }
    };
    let gold: Vec<Vec<usize>> = examples.iter().map(|e| e.labels.clone()).collect();
    Ok(macro_prf(&gold, &pred, labels)?.f1)
}

/// Trains one model and returns the checkpoint with the best validation
/// macro-F1 (earliest epoch on ties). `on_epoch` sees every epoch's
/// metrics as they are produced.
pub fn fit(
    spec: &RunSpec<'_>,
    featurizer: &Featurizer,
    train: &[Example],
    valid: &[Example],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<FitResult> {
    spec.training.validate()?;
    spec.model.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Insufficient("training and validation splits must be non-empty".into()));
    }
    let cfg = &spec.training;
    let model = Model::new(spec.model.clone(), spec.seed)?;
    let use_bias = model.config().has_bias_branch();
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let phases: Vec<Phase> = match (cfg.regime, use_bias) {
        (Regime::Sequential, true) => vec![Phase::BiasOnly, Phase::MainOnly],
        _ => vec![Phase::Joint],
    };
    let total_epochs = cfg.epochs * phases.len();
    let mut trainer = Trainer::new(model, cfg.epochs * batches_per_epoch);

    let mut shuffle_rng = stream_rng(spec.seed, STREAM_SHUFFLE);
    let mut mask_rng = stream_rng(spec.seed, STREAM_MASK);
    let mut dropout_rng = stream_rng(spec.seed, STREAM_DROPOUT);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut history = Vec::with_capacity(total_epochs);
    let mut best: Option<(usize, f64, Model)> = None;
    let mut since_best = 0usize;
    let mut epoch = 0usize;
    'phases: for (pi, &phase) in phases.iter().enumerate() {
        if pi > 0 {
            trainer.step = 0;
            trainer.optimizer = Adam::default();
            best = None;
            since_best = 0;
        }
        match phase {
            Phase::MainOnly => trainer.freeze(trainer.model.bias_params()),
            _ => trainer.unfreeze_all(),
        }
        for _ in 0..cfg.epochs {
            epoch += 1;
            order.shuffle(&mut shuffle_rng);
            let (mut sum_main, mut sum_bias) = (0.0, 0.0);
            for chunk in order.chunks(cfg.batch_size) {
                let exs: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
                let batch = Batch::build(&exs, featurizer, spec.objective.mask_prob, Some(&mut mask_rng), use_bias)?;
                let v = trainer.train_step(&batch, cfg, &spec.objective, phase, Some(&mut dropout_rng))?;
                sum_main += v.main;
                sum_bias += v.bias;
            }
            let valid_f1 = if cfg.mask_at_validation {
                let mut r = stream_rng(spec.seed ^ epoch as u64, STREAM_MASK);
                validation_f1(&trainer.model, valid, spec.labels, Some((featurizer, spec.objective.mask_prob, &mut r)))?
            } else {
                validation_f1(&trainer.model, valid, spec.labels, None)?
            };
            let m = EpochMetrics {
                epoch,
                l_main: sum_main / batches_per_epoch as f64,
                l_bias: sum_bias / batches_per_epoch as f64,
                valid_macro_f1: valid_f1,
            };
            log::info!(
                "seed {} epoch {epoch}: L_main={:.4} L_bias={:.4} valid_macro_f1={:.4}",
                spec.seed,
                m.l_main,
                m.l_bias,
                m.valid_macro_f1
            );
            on_epoch(&m);
            history.push(m);
            let improved = best.as_ref().is_none_or(|(_, f, _)| valid_f1 > *f);
            if improved {
                best = Some((epoch, valid_f1, trainer.model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    if pi + 1 == phases.len() {
                        break 'phases;
                    }
                    break;
                }
            }
        }
    }
    let (best_epoch, best_f1, best_model) = best.expect("at least one epoch ran");
    let manifest = CheckpointManifest::new(spec, best_epoch, best_f1);
    Ok(FitResult {
        model: best_model,
        manifest,
        history,
        group_steps: trainer.optimizer.group_steps().clone(),
    })
}
