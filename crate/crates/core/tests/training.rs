mod common;

use common::{small_spec, synthetic_prepared, tiny_config, tiny_model};
use eventshift_core::autograd::Graph;
use eventshift_core::baselines::{Strategy, StrategyKind};
use eventshift_core::model::{Model, ModelInput};
use eventshift_core::pipeline::{run_strategy, Preset};
use eventshift_core::tensor::Tensor;
use eventshift_core::training::{
    compute_losses, fit, loss_values, Batch, LossValues, Objective, Phase, RunSpec, TrainConfig, Trainer,
};
use eventshift_core::Error;

fn batch(domains: &[usize]) -> Batch {
    let n = domains.len();
    Batch {
        input: ModelInput {
            main: (0..n).map(|i| vec![2, 5 + i as u32, 9, 13 + (i as u32 % 4), 3]).collect(),
            counterfactual: (0..n).map(|i| vec![2, 6 + i as u32, 3]).collect(),
            domains: domains.iter().map(|&d| Some(d)).collect(),
        },
        labels: (0..n).map(|i| vec![i % 3]).collect(),
        events: vec![None; n],
        post_ids: (0..n).map(|i| format!("p{i}")).collect(),
    }
}

fn losses(model: &Model, b: &Batch, lambda: f64) -> LossValues {
    let obj = Objective {
        lambda,
        mask_prob: 0.0,
        ..Objective::default()
    };
    let mut g = Graph::new();
    let l = compute_losses(&mut g, model, b, &obj, Phase::Joint, None).unwrap();
    loss_values(&g, &l)
}

#[test]
fn zero_lambda_leaves_only_the_main_loss() {
    let v = losses(&tiny_model(0), &batch(&[0, 1, 0]), 0.0);
    assert_eq!(v.total, v.main);
    assert!(v.bias > 0.0);
}

#[test]
fn uniform_predictions_cost_ln_l() {
    let mut model = tiny_model(1);
    let mut ids = model.main_head().output.params().to_vec();
    ids.extend(model.bias_head().unwrap().output.params());
    for id in ids {
        model.store_mut().value_mut(id).data_mut().fill(0.0);
    }
    let v = losses(&model, &batch(&[0, 1, 1, 0]), 0.2);
    let ln3 = 3f64.ln();
    assert!((v.main - ln3).abs() < 1e-12);
    assert!((v.bias - ln3).abs() < 1e-12);
    assert!((v.total - 1.2 * ln3).abs() < 1e-12);
}

#[test]
fn losses_add_linearly_in_lambda() {
    let model = tiny_model(2);
    let b = batch(&[1, 0, 1]);
    let base = losses(&model, &b, 0.0);
    for lambda in [0.1, 0.2, 0.7, 1.0, 3.0] {
        let v = losses(&model, &b, lambda);
        assert!((v.total - base.total - lambda * v.bias).abs() < 1e-6);
        assert!(v.main >= 0.0 && v.bias >= 0.0);
    }
}

#[test]
fn single_domain_step_leaves_other_experts_untouched() {
    let mut trainer = Trainer::new(tiny_model(3), 10);
    let cfg = TrainConfig {
        lr_encoder: 1e-2,
        lr_head: 1e-2,
        ..TrainConfig::default()
    };
    let obj = Objective::from_config(&cfg);
    let expert = |t: &Trainer, q: usize| -> Vec<Tensor> {
        t.model.expert_params(q).iter().map(|&id| t.model.store().value(id).clone()).collect()
    };
    let (a0, b0) = (expert(&trainer, 0), expert(&trainer, 1));
    trainer.train_step(&batch(&[0, 0, 0]), &cfg, &obj, Phase::Joint, None).unwrap();
    assert_ne!(a0, expert(&trainer, 0));
    assert_eq!(b0, expert(&trainer, 1));
}

#[test]
fn fusion_is_the_only_route_from_main_loss_to_the_bias_predictor() {
    for (alpha, reached) in [(0.0, false), (0.1, true)] {
        let mut cfg = tiny_config();
        cfg.alpha = alpha;
        cfg.detach_bias_encoder = true;
        let model = Model::new(cfg, 4).unwrap();
        let obj = Objective {
            lambda: 0.0,
            mask_prob: 0.0,
            ..Objective::default()
        };
        let mut g = Graph::new();
        let l = compute_losses(&mut g, &model, &batch(&[0, 1]), &obj, Phase::Joint, None).unwrap();
        let grads = g.backward(l.total);
        let any = model.bias_head().unwrap().params().iter().any(|&id| {
            grads.get(id).is_some_and(|t| t.data().iter().any(|&x| x != 0.0))
        });
        assert_eq!(any, reached, "alpha {alpha}");
    }
}

#[test]
fn detached_bias_encoder_gets_no_encoder_gradient_from_the_bias_loss() {
    let mut cfg = tiny_config();
    cfg.detach_bias_encoder = true;
    let model = Model::new(cfg, 5).unwrap();
    let b = batch(&[0, 1]);
    let mut g = Graph::new();
    let obj = Objective::default();
    let l = compute_losses(&mut g, &model, &b, &obj, Phase::BiasOnly, None).unwrap();
    let grads = g.backward(l.total);
    for id in model.encoder_params() {
        assert!(grads.get(id).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
    }
}

#[test]
fn identical_runs_step_identically() {
    let cfg = TrainConfig::default();
    let obj = Objective::from_config(&cfg);
    let run = || {
        let mut t = Trainer::new(tiny_model(6), 5);
        for doms in [[0, 1, 1], [1, 1, 0]] {
            t.train_step(&batch(&doms), &cfg, &obj, Phase::Joint, None).unwrap();
        }
        t.model
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_aborts_with_the_batch_ids() {
    let mut model = tiny_model(7);
    let id = model.main_head().output.weight;
    model.store_mut().value_mut(id).data_mut()[0] = f64::NAN;
    let mut t = Trainer::new(model, 1);
    let cfg = TrainConfig::default();
    let err = t
        .train_step(&batch(&[0, 1]), &cfg, &Objective::from_config(&cfg), Phase::Joint, None)
        .unwrap_err();
    match err {
        Error::Diverged { post_ids, .. } => assert_eq!(post_ids, vec!["p0", "p1"]),
        e => panic!("unexpected error {e}"),
    }
}

#[test]
fn one_epoch_of_one_batch_steps_each_group_once() {
    let prepared = synthetic_prepared(&small_spec(), 0);
    let preset = Preset::synthetic_tiny();
    let training = TrainConfig {
        epochs: 1,
        batch_size: prepared.train.len(),
        ..preset.training.clone()
    };
    let spec = RunSpec {
        model: prepared.model_config(&preset.model),
        objective: Objective::from_config(&training),
        training,
        strategy: "full",
        seed: 0,
        domains: &prepared.domains,
        events: &prepared.events,
        labels: &prepared.labels,
    };
    let mut epochs = Vec::new();
    let fit = fit(&spec, &prepared.featurizer, &prepared.train, &prepared.valid, |m| epochs.push(m.clone())).unwrap();
    assert_eq!(fit.group_steps.values().copied().collect::<Vec<_>>(), vec![1, 1]);
    assert_eq!(epochs.len(), 1);
    assert_eq!(fit.manifest.epoch, 1);
    assert_eq!(fit.manifest.valid_macro_f1, epochs[0].valid_macro_f1);
}

#[test]
fn default_hyperparameters_are_recorded_in_the_manifest() {
    let prepared = synthetic_prepared(&small_spec(), 1);
    let preset = Preset::synthetic_tiny();
    let training = TrainConfig {
        epochs: 2,
        ..preset.training.clone()
    };
    let out = run_strategy(&prepared, &Strategy::new(StrategyKind::Full), &preset.model, &training, 3, "s", |_| {}).unwrap();
    let m = &out.fit.manifest;
    assert_eq!(m.config.model.alpha, 0.1);
    assert_eq!(m.config.training.lambda, 0.2);
    assert_eq!(m.config.training.mask_prob, 0.5);
    assert_eq!(m.config.objective.lambda, 0.2);
    assert_eq!(m.seed, 3);
    assert_eq!(m.strategy, "full");
    for e in &out.fit.history {
        assert!(e.l_main.is_finite() && e.l_main >= 0.0);
        assert!(e.l_bias.is_finite() && e.l_bias >= 0.0);
    }
}

#[test]
fn empty_training_split_is_rejected() {
    let prepared = synthetic_prepared(&small_spec(), 2);
    let preset = Preset::synthetic_tiny();
    let spec = RunSpec {
        model: prepared.model_config(&preset.model),
        objective: Objective::default(),
        training: preset.training.clone(),
        strategy: "full",
        seed: 0,
        domains: &prepared.domains,
        events: &prepared.events,
        labels: &prepared.labels,
    };
    assert!(fit(&spec, &prepared.featurizer, &[], &prepared.valid, |_| {}).is_err());
}
