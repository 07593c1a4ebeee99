use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use eventshift_bench::synthetic_prepared;
use eventshift_core::autograd::Graph;
use eventshift_core::baselines::{Strategy, StrategyKind};
use eventshift_core::corpus::{LabelSpace, TaskKind};
use eventshift_core::evaluation::macro_prf;
use eventshift_core::features::Example;
use eventshift_core::model::Model;
use eventshift_core::pipeline::Preset;
use eventshift_core::probing::{extract_representations, probe_seed, probe_targets, Component, ProbeTarget};
use eventshift_core::training::{compute_losses, stream_rng, Batch, Objective, Phase, Trainer};

fn bench_model(c: &mut Criterion) {
    let prepared = synthetic_prepared(0);
    let preset = Preset::synthetic_tiny();
    let resolved = Strategy::new(StrategyKind::Full)
        .resolve(&prepared.model_config(&preset.model), &preset.training, prepared.events.len())
        .expect("valid preset");
    let model = Model::new(resolved.model.clone(), 0).expect("valid config");
    let exs: Vec<&Example> = prepared.train.iter().take(32).collect();
    let batch = Batch::build(&exs, &prepared.featurizer, 0.5, Some(&mut stream_rng(0, 2)), true).unwrap();
    let obj = Objective::from_config(&resolved.training);

    c.bench_function("forward_backward_batch32", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let l = compute_losses(&mut g, &model, &batch, &obj, Phase::Joint, None).unwrap();
            g.backward(l.total)
        })
    });
    c.bench_function("train_step_batch32", |b| {
        b.iter_batched(
            || Trainer::new(model.clone(), 100),
            |mut t| t.train_step(&batch, &resolved.training, &obj, Phase::Joint, None).unwrap(),
            BatchSize::SmallInput,
        )
    });
    let ids: Vec<Vec<u32>> = exs.iter().map(|e| e.main_ids.clone()).collect();
    let doms: Vec<Option<usize>> = exs.iter().map(|e| e.domain).collect();
    c.bench_function("infer_batch32", |b| b.iter(|| model.infer_batch(&ids, &doms).unwrap()));

    let x = extract_representations(&model, Component::Bias, &prepared.train).unwrap();
    let y = probe_targets(&prepared.train, ProbeTarget::Event);
    c.bench_function("probe_one_seed", |b| b.iter(|| probe_seed(&x, &y, 0.05, 0).unwrap()));
}

fn bench_metrics(c: &mut Criterion) {
    let space = LabelSpace::new(TaskKind::MultiLabel, (0..10).map(|i| format!("l{i}")).collect()).unwrap();
    let gold: Vec<Vec<usize>> = (0..5000).map(|i| vec![i % 10, (i * 7) % 10]).collect();
    let pred: Vec<Vec<usize>> = (0..5000).map(|i| vec![(i * 3) % 10]).collect();
    c.bench_function("macro_prf_5000", |b| b.iter(|| macro_prf(&gold, &pred, &space).unwrap()));
}

criterion_group!(benches, bench_model, bench_metrics);
criterion_main!(benches);
