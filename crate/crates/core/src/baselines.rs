//! Comparison strategies sharing encoder, data pipeline and metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, LOG_EPS, Var};
use crate::corpus::TaskKind;
use crate::error::{Error, Result};
use crate::features::{Example, Featurizer};
use crate::model::{Combination, ModelConfig, Pooling};
use crate::tensor::Tensor;
use crate::training::{fit, FitResult, Objective, Regime, RunSpec, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Vanilla,
    Multitask,
    Masking,
    Poe,
    Ear,
    Eann,
    /// Domain experts, bias branch and masking augmentation together.
    Full,
    /// Full method with one query shared across domains.
    NoExperts,
    /// Full method without the bias branch.
    NoDebias,
    /// Full method without masking augmentation.
    NoAugment,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 10] = [
        StrategyKind::Vanilla,
        StrategyKind::Multitask,
        StrategyKind::Masking,
        StrategyKind::Poe,
        StrategyKind::Ear,
        StrategyKind::Eann,
        StrategyKind::Full,
        StrategyKind::NoExperts,
        StrategyKind::NoDebias,
        StrategyKind::NoAugment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Vanilla => "vanilla",
            StrategyKind::Multitask => "multitask",
            StrategyKind::Masking => "masking",
            StrategyKind::Poe => "poe",
            StrategyKind::Ear => "ear",
            StrategyKind::Eann => "eann",
            StrategyKind::Full => "full",
            StrategyKind::NoExperts => "no-experts",
            StrategyKind::NoDebias => "no-debias",
            StrategyKind::NoAugment => "no-augment",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = StrategyKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown strategy '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyParams {
    pub aux_weight: f64,
    pub ear_strength: f64,
    pub reversal_scale: f64,
    /// Adversarial loss weight; unset means 0.2 for multi-label tasks and
    /// 1.0 otherwise.
    pub adversarial_weight: Option<f64>,
    pub masking_prob: f64,
    /// Train the product-of-experts bias branch before, not with, the main model.
    pub poe_separate: bool,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            aux_weight: 0.2,
            ear_strength: 0.01,
            reversal_scale: 1.0,
            adversarial_weight: None,
            masking_prob: 0.8,
            poe_separate: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    #[serde(default)]
    pub params: StrategyParams,
}

/// Fully resolved configuration of one strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub objective: Objective,
}

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            params: StrategyParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let weights = [p.aux_weight, p.ear_strength, p.reversal_scale, p.adversarial_weight.unwrap_or(0.0)];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("strategy weights must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&p.masking_prob) {
            return Err(Error::Config(format!("masking_prob {} outside [0, 1]", p.masking_prob)));
        }
        Ok(())
    }

    /// Derives model, training and loss settings from the shared base
    /// configuration. `num_events` sizes the adversarial event head.
    pub fn resolve(&self, base: &ModelConfig, training: &TrainConfig, num_events: usize) -> Result<Resolved> {
        self.validate()?;
        let p = &self.params;
        let mut model = base.clone();
        let mut training = training.clone();
        let mut obj = Objective::from_config(&training);
        model.aux_domain_head = false;
        model.event_head_classes = 0;
        let vanilla = |m: &mut ModelConfig, o: &mut Objective| {
            m.pooling = Pooling::Cls;
            m.combination = Combination::MainOnly;
            o.mask_prob = 0.0;
            o.lambda = 0.0;
        };
        match self.kind {
            StrategyKind::Vanilla => vanilla(&mut model, &mut obj),
            StrategyKind::Multitask => {
                vanilla(&mut model, &mut obj);
                model.aux_domain_head = true;
                obj.aux_weight = p.aux_weight;
            }
            StrategyKind::Masking => {
                vanilla(&mut model, &mut obj);
                obj.mask_prob = p.masking_prob;
            }
            StrategyKind::Poe => {
                vanilla(&mut model, &mut obj);
                model.combination = Combination::ProductOfExperts;
                obj.lambda = 1.0;
                if p.poe_separate {
                    training.regime = Regime::Sequential;
                }
            }
            StrategyKind::Ear => {
                vanilla(&mut model, &mut obj);
                obj.ear_strength = p.ear_strength;
            }
            StrategyKind::Eann => {
                if num_events < 2 {
                    return Err(Error::Config(
                        "the adversarial event head needs at least two training events".into(),
                    ));
                }
                vanilla(&mut model, &mut obj);
                model.event_head_classes = num_events;
                model.event_reversal_scale = p.reversal_scale;
                obj.adversarial_weight = p.adversarial_weight.unwrap_or(match base.task_kind {
                    TaskKind::MultiLabel => 0.2,
                    TaskKind::MultiClass => 1.0,
                });
            }
            StrategyKind::Full => {
                model.pooling = Pooling::Experts;
                model.combination = Combination::Fused;
            }
            StrategyKind::NoExperts => {
                model.pooling = Pooling::SharedQuery;
                model.combination = Combination::Fused;
            }
            StrategyKind::NoDebias => {
                model.pooling = Pooling::Experts;
                model.combination = Combination::MainOnly;
                obj.lambda = 0.0;
            }
            StrategyKind::NoAugment => {
                model.pooling = Pooling::Experts;
                model.combination = Combination::Fused;
                obj.mask_prob = 0.0;
            }
        }
        training.mask_prob = obj.mask_prob;
        training.lambda = obj.lambda;
        model.validate()?;
        Ok(Resolved {
            model,
            training,
            objective: obj,
        })
    }
}

/// `−Σ p ln p` of one distribution.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&x| x * x.max(LOG_EPS).ln()).sum::<f64>()
}

/// Per layer: mean entropy over rows (tokens) and heads. The penalty is
/// `−strength · Σ_layers mean entropy`, lowest for uniform attention.
/// `layers[l][h]` is one head's `tokens × positions` map; `valid` marks the
/// rows that count.
pub fn attention_entropy_penalty(layers: &[Vec<Tensor>], valid: &[bool], strength: f64) -> Result<f64> {
    if layers.is_empty() || layers.iter().any(Vec::is_empty) {
        return Err(Error::MissingComponent("encoder-attention".into()));
    }
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::Shape("no valid attention rows".into()));
    }
    let mut total = 0.0;
    for heads in layers {
        let mut layer = 0.0;
        for a in heads {
            if a.rows() != valid.len() {
                return Err(Error::Shape("attention rows differ from the validity mask".into()));
            }
            layer += (0..a.rows())
                .filter(|&r| valid[r])
                .map(|r| entropy(a.row(r)))
                .sum::<f64>()
                / n as f64;
        }
        total += layer / heads.len() as f64;
    }
    Ok(-strength * total)
}

/// Identity forward; the backward pass multiplies by `−scale`.
pub fn gradient_reversal(g: &mut Graph, x: Var, scale: f64) -> Var {
    g.grad_reverse(x, scale)
}

/// Trains `strategy` on shared data. `spec` carries the base model and
/// training configuration, which the strategy adapts.
pub fn train_baseline(
    strategy: &Strategy,
    spec: &RunSpec<'_>,
    featurizer: &Featurizer,
    train: &[Example],
    valid: &[Example],
    on_epoch: impl FnMut(&crate::training::EpochMetrics),
) -> Result<FitResult> {
    let resolved = strategy.resolve(&spec.model, &spec.training, spec.events.len())?;
    let spec = RunSpec {
        model: resolved.model,
        training: resolved.training,
        objective: resolved.objective,
        strategy: strategy.kind.name(),
        ..spec.clone()
    };
    fit(&spec, featurizer, train, valid, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_reference_values() {
        assert!((entropy(&[0.9, 0.1]) - 0.3251).abs() < 1e-4);
        assert!((entropy(&[0.5, 0.5]) - 0.6931).abs() < 1e-4);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    }

    #[test]
    fn penalty_extremes() {
        let m = 4;
        let uniform = Tensor::filled(m, m, 1.0 / m as f64);
        let mut onehot = Tensor::zeros(m, m);
        for r in 0..m {
            onehot.set(r, r, 1.0);
        }
        let valid = vec![true; m];
        let pu = attention_entropy_penalty(&[vec![uniform]], &valid, 0.01).unwrap();
        let po = attention_entropy_penalty(&[vec![onehot]], &valid, 0.01).unwrap();
        assert!((pu + 0.01 * (m as f64).ln()).abs() < 1e-12);
        assert_eq!(po, 0.0);
        assert!(pu < po);
        assert!(attention_entropy_penalty(&[], &valid, 0.01).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("bert".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn resolved_settings() {
        let base = ModelConfig::default();
        let t = TrainConfig::default();
        let r = Strategy::new(StrategyKind::Masking).resolve(&base, &t, 3).unwrap();
        assert_eq!(r.objective.mask_prob, 0.8);
        assert_eq!(r.model.pooling, Pooling::Cls);
        let r = Strategy::new(StrategyKind::Full).resolve(&base, &t, 3).unwrap();
        assert_eq!((r.objective.lambda, r.objective.mask_prob, r.model.alpha), (0.2, 0.5, 0.1));
        let mut ml = base.clone();
        ml.task_kind = TaskKind::MultiLabel;
        let r = Strategy::new(StrategyKind::Eann).resolve(&ml, &t, 3).unwrap();
        assert_eq!(r.objective.adversarial_weight, 0.2);
        let r = Strategy::new(StrategyKind::Eann).resolve(&base, &t, 3).unwrap();
        assert_eq!(r.objective.adversarial_weight, 1.0);
        assert!(Strategy::new(StrategyKind::Eann).resolve(&base, &t, 1).is_err());
        let mut s = Strategy::new(StrategyKind::Poe);
        s.params.poe_separate = true;
        assert_eq!(s.resolve(&base, &t, 3).unwrap().training.regime, Regime::Sequential);
    }
}
