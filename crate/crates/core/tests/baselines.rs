mod common;

use common::{synthetic_prepared, tiny_config};
use eventshift_core::autograd::{Graph, ParamGroup, ParamStore};
use eventshift_core::baselines::{gradient_reversal, Strategy, StrategyKind};
use eventshift_core::corpus::SyntheticSpec;
use eventshift_core::model::Model;
use eventshift_core::pipeline::{run_strategy, Preset};
use eventshift_core::tensor::Tensor;
use eventshift_core::training::TrainConfig;

#[test]
fn adversarial_event_head_does_not_touch_task_logits() {
    let base = tiny_config();
    let t = TrainConfig::default();
    let vanilla = Strategy::new(StrategyKind::Vanilla).resolve(&base, &t, 3).unwrap();
    let eann = Strategy::new(StrategyKind::Eann).resolve(&base, &t, 3).unwrap();
    assert_eq!(eann.model.event_head_classes, 3);
    for seed in [0, 1, 2] {
        let a = Model::new(vanilla.model.clone(), seed).unwrap();
        let b = Model::new(eann.model.clone(), seed).unwrap();
        for ids in [vec![2, 5, 6, 3], vec![2, 7, 11, 13, 17, 3]] {
            assert_eq!(a.infer(&ids, Some(0)).unwrap(), b.infer(&ids, Some(0)).unwrap());
        }
    }
}

#[test]
fn adversarial_head_needs_two_events() {
    let s = Strategy::new(StrategyKind::Eann);
    assert!(s.resolve(&tiny_config(), &TrainConfig::default(), 1).is_err());
}

#[test]
fn masking_baseline_echoes_its_probability() {
    let r = Strategy::new(StrategyKind::Masking)
        .resolve(&tiny_config(), &TrainConfig::default(), 0)
        .unwrap();
    assert_eq!(r.objective.mask_prob, 0.8);
    assert_eq!(r.training.mask_prob, 0.8);
    assert_eq!(r.objective.lambda, 0.0);
}

#[test]
fn invalid_strategy_parameters_are_rejected() {
    let mut s = Strategy::new(StrategyKind::Masking);
    s.params.masking_prob = 1.5;
    assert!(s.validate().is_err());
    let mut s = Strategy::new(StrategyKind::Ear);
    s.params.ear_strength = -1.0;
    assert!(s.validate().is_err());
}

/// `Σ a·gelu(x) + Σ b·sigmoid(R(x))` where `R` reverses gradients with `scale`.
fn composite(x: &Tensor, a: &Tensor, b: &Tensor, scale: Option<f64>) -> (f64, Option<Tensor>) {
    let mut store = ParamStore::new();
    let id = store.add("x", ParamGroup::Head, x.clone());
    let mut g = Graph::new();
    let xv = g.param(&store, id);
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let left = g.gelu(xv);
    let left = g.mul(left, av);
    let right = match scale {
        Some(s) => gradient_reversal(&mut g, xv, s),
        None => xv,
    };
    let right = g.sigmoid(right);
    let right = g.mul(right, bv);
    let (l, r) = (g.sum(left), g.sum(right));
    let r = if scale.is_none() { g.scale(r, -1.0) } else { r };
    let loss = g.add(l, r);
    let value = g.value(loss).get(0, 0);
    let grad = scale.map(|_| g.backward(loss).get(id).unwrap().clone());
    (value, grad)
}

#[test]
fn reversed_branch_gradient_matches_finite_differences_of_its_negation() {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.7], vec![2.0, -0.1, 0.05]]);
    let a = Tensor::from_rows(&[vec![1.0, -0.5, 2.0], vec![0.3, 0.9, -1.1]]);
    let b = Tensor::from_rows(&[vec![-0.4, 1.5, 0.6], vec![1.0, -2.0, 0.2]]);
    let (forward, grad) = composite(&x, &a, &b, Some(1.0));
    let (plain, _) = composite(&x, &a, &b, None);
    let reversed_sum: f64 = {
        let s: Vec<f64> = x.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        s.iter().zip(b.data()).map(|(s, b)| s * b).sum()
    };
    assert!((forward - plain - 2.0 * reversed_sum).abs() < 1e-12);
    let grad = grad.unwrap();
    let h = 1e-6;
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        let numeric = (composite(&up, &a, &b, None).0 - composite(&down, &a, &b, None).0) / (2.0 * h);
        assert!((grad.data()[i] - numeric).abs() < 1e-7, "entry {i}: {} vs {numeric}", grad.data()[i]);
    }
}

#[test]
fn reversal_scale_multiplies_the_upstream_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("x", ParamGroup::Head, Tensor::from_rows(&[vec![1.0, -2.0]]));
    let mut g = Graph::new();
    let x = g.param(&store, id);
    let y = gradient_reversal(&mut g, x, 0.5);
    assert_eq!(g.value(y), g.value(x));
    let w = g.constant(Tensor::from_rows(&[vec![3.0, -4.0]]));
    let z = g.mul(y, w);
    let loss = g.sum(z);
    let grad = g.backward(loss);
    assert_eq!(grad.get(id).unwrap().data(), &[-1.5, 2.0]);
}

#[test]
fn without_a_planted_shift_debiasing_matches_vanilla() {
    let spec = SyntheticSpec {
        rho_test: 0.9,
        ..SyntheticSpec::default()
    };
    let prepared = synthetic_prepared(&spec, 0);
    let preset = Preset::synthetic_tiny();
    let mean = |kind: StrategyKind| {
        let scores: Vec<f64> = [0, 42, 64]
            .iter()
            .map(|&seed| {
                run_strategy(&prepared, &Strategy::new(kind), &preset.model, &preset.training, seed, "synthetic", |_| {})
                    .unwrap()
                    .report
                    .macro_f1
            })
            .collect();
        100.0 * scores.iter().sum::<f64>() / scores.len() as f64
    };
    let (vanilla, full) = (mean(StrategyKind::Vanilla), mean(StrategyKind::Full));
    assert!((vanilla - full).abs() <= 2.0, "vanilla {vanilla:.2} vs full {full:.2}");
}
