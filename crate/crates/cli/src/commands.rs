use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use eventshift_core::baselines::{Strategy, StrategyKind};
use eventshift_core::bias_tokens::BiasTokenIdentifier;
use eventshift_core::corpus::{generate_synthetic_corpus, read_split_manifest, temporal_split, write_corpus, SplitSpec};
use eventshift_core::evaluation::{compare, evaluate, render_csv, render_table, EvalReport, ReportKey};
use eventshift_core::features::{Example, Featurizer};
use eventshift_core::pipeline::{prepare, prepare_with, run_strategy, Prepared, RunOutcome};
use eventshift_core::probing::{
    extract_representations, probe_seed, probe_targets, render_probe_csv, Component, ProbeResult, ProbeTarget,
};
use eventshift_core::training::{load_checkpoint, save_checkpoint, CheckpointManifest, TrainConfig};
use eventshift_core::Error as CoreError;

use crate::config::{self, Config};
use crate::data::{
    load_input_corpus, load_split_dir, load_split_file, read_bias_dir, read_dataset_info, write_bias_sets,
    write_json, write_split_dir, write_text, DatasetInfo, SPLITS,
};
use crate::manifest::{now, RunManifest};
use crate::{Cli, CliError, Command};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const SPLIT_DIR: &str = "split";
pub const BIAS_DIR: &str = "bias_tokens";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REPORT_DIR: &str = "reports";
pub const PROBE_DIR: &str = "probes";
pub const TABLE_DIR: &str = "report";
pub const HISTORY_FILE: &str = "history.json";

fn default_run_dir(command: &str) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    PathBuf::from("runs").join(format!("{command}-{stamp}"))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

/// Resolves the configuration, runs the command and writes its manifest.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let base = if g.synthetic_preset {
        Config::synthetic_tiny()
    } else {
        Config::default()
    };
    let cfg = config::load_with_base(g.config.as_deref(), &g.set, base)?;
    let name = cli.command.name();
    let run_dir = g.run_dir.clone().unwrap_or_else(|| default_run_dir(name));
    create_dir(&run_dir)?;
    let mut manifest = RunManifest::start(name, &cfg, &g.set)?;
    manifest.inputs.extend(g.config.clone());
    let result = match &cli.command {
        Command::Synth { seed } => synth(&cfg, &run_dir, *seed, &mut manifest),
        Command::Split { corpus } => split(&cfg, &run_dir, corpus.as_deref(), &mut manifest),
        Command::Identify { split_dir } => identify(&cfg, &run_dir, split_dir, &mut manifest),
        Command::Train {
            split_dir,
            bias_dir,
            strategy,
            seeds,
            parallel_seeds,
        } => train(
            &cfg,
            &run_dir,
            TrainArgs {
                split_dir,
                bias_dir: bias_dir.as_deref(),
                strategy: *strategy,
                seeds,
                parallel: *parallel_seeds,
            },
            &mut manifest,
        ),
        Command::Evaluate {
            checkpoint,
            split_dir,
            split,
        } => evaluate_cmd(&cfg, &run_dir, checkpoint, split_dir, split, &mut manifest),
        Command::Probe {
            checkpoint,
            baseline_checkpoint,
            split_dir,
            components,
            tasks,
            parallel_seeds,
        } => probe(
            &cfg,
            &run_dir,
            ProbeArgs {
                checkpoint,
                baseline: baseline_checkpoint.as_deref(),
                split_dir,
                components,
                tasks,
                parallel: *parallel_seeds,
            },
            &mut manifest,
        ),
        Command::Report { from, split, reference } => report(&run_dir, from, split, reference, &mut manifest),
    };
    manifest.finished_at = now();
    manifest.status = match &result {
        Ok(()) => "ok".into(),
        Err(e) => e.to_string(),
    };
    manifest.write(&run_dir)?;
    result
}

fn synth(cfg: &Config, run_dir: &Path, seed: u64, m: &mut RunManifest) -> Result<(), CliError> {
    let generated = generate_synthetic_corpus(&cfg.synthetic, seed)?;
    let path = run_dir.join(CORPUS_FILE);
    write_corpus(&path, &generated.corpus)?;
    let planted = run_dir.join("planted.json");
    write_json(
        &planted,
        &serde_json::json!({
            "seed": seed,
            "planted_targets": generated.planted_targets,
            "train_events": generated.train_events,
            "valid_events": generated.valid_events,
            "test_events": generated.test_events,
        }),
    )?;
    m.seeds = vec![seed];
    m.outputs.extend([path.clone(), planted]);
    println!("wrote {} posts to {}", generated.corpus.len(), path.display());
    Ok(())
}

fn split_spec(cfg: &Config) -> Result<SplitSpec, CliError> {
    let s = &cfg.split;
    if let Some(path) = &s.manifest {
        return Ok(SplitSpec::Explicit(read_split_manifest(path)?));
    }
    match (s.train, s.valid, s.test) {
        (Some(train), Some(valid), Some(test)) => Ok(SplitSpec::Counts { train, valid, test }),
        _ => Err(CliError::Validation(
            "set split.manifest or all of split.train, split.valid, split.test".into(),
        )),
    }
}

fn split(cfg: &Config, run_dir: &Path, corpus: Option<&Path>, m: &mut RunManifest) -> Result<(), CliError> {
    let path = corpus
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.corpus.clone())
        .ok_or_else(|| CliError::Validation("no corpus: pass --corpus or set data.corpus".into()))?;
    m.inputs.push(path.clone());
    if let Some(p) = &cfg.split.manifest {
        m.inputs.push(p.clone());
    }
    let corpus = load_input_corpus(cfg, &path)?;
    let split = temporal_split(&corpus, &split_spec(cfg)?)?;
    let info = DatasetInfo {
        name: cfg.data.name.clone(),
        label_space: corpus.label_space().clone(),
        domains: corpus.domains().to_vec(),
    };
    let out = run_dir.join(SPLIT_DIR);
    m.outputs.extend(write_split_dir(&out, &info, &split)?);
    println!(
        "split {} posts: train {} ({} events), valid {} ({}), test {} ({}) -> {}",
        corpus.len(),
        split.train.len(),
        split.manifest.train_events.len(),
        split.valid.len(),
        split.manifest.valid_events.len(),
        split.test.len(),
        split.manifest.test_events.len(),
        out.display()
    );
    Ok(())
}

fn identify(cfg: &Config, run_dir: &Path, split_dir: &Path, m: &mut RunManifest) -> Result<(), CliError> {
    m.inputs.push(split_dir.to_path_buf());
    let (_, split) = load_split_dir(split_dir)?;
    let identifier = BiasTokenIdentifier::new(cfg.tagger.clone())?;
    let out = run_dir.join(BIAS_DIR);
    create_dir(&out)?;
    let mut summary = serde_json::Map::new();
    for (name, corpus) in [("train", &split.train), ("valid", &split.valid), ("test", &split.test)] {
        let sets: Vec<_> = corpus.posts().iter().map(|p| identifier.identify(p)).collect();
        let path = out.join(format!("{name}.jsonl"));
        write_bias_sets(&path, &sets)?;
        m.outputs.push(path);
        let spans: usize = sets.iter().map(|s| s.spans.len()).sum();
        let degraded = sets.iter().filter(|s| s.degraded).count();
        if degraded > 0 {
            log::warn!("{degraded} {name} posts fell back to rule-based entity tagging");
        }
        summary.insert(
            name.into(),
            serde_json::json!({ "posts": sets.len(), "spans": spans, "degraded": degraded }),
        );
        println!("{name}: {} posts, {spans} bias spans, {degraded} degraded", sets.len());
    }
    let path = out.join("summary.json");
    write_json(&path, &summary)?;
    m.outputs.push(path);
    Ok(())
}

struct TrainArgs<'a> {
    split_dir: &'a Path,
    bias_dir: Option<&'a Path>,
    strategy: Option<StrategyKind>,
    seeds: &'a [u64],
    parallel: bool,
}

fn prepared_from(cfg: &Config, split_dir: &Path, bias_dir: Option<&Path>) -> Result<(DatasetInfo, Prepared), CliError> {
    let (info, split) = load_split_dir(split_dir)?;
    let prepared = match bias_dir {
        Some(dir) => {
            let sets = read_bias_dir(dir)?;
            prepare_with(&split, &cfg.vocab, |p| {
                sets.get(&p.id)
                    .cloned()
                    .ok_or_else(|| CoreError::Corpus(format!("no bias tokens for post {}", p.id)))
            })?
        }
        None => prepare(&split, &BiasTokenIdentifier::new(cfg.tagger.clone())?, &cfg.vocab)?,
    };
    Ok((info, prepared))
}

pub fn checkpoint_dir(run_dir: &Path, strategy: &str, seed: u64) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(strategy).join(format!("seed-{seed}"))
}

pub fn report_path(run_dir: &Path, split: &str, strategy: &str, seed: u64) -> PathBuf {
    run_dir
        .join(REPORT_DIR)
        .join(split)
        .join(strategy)
        .join(format!("seed-{seed}.json"))
}

/// Runs `f` for every item, on one scoped thread each when `parallel`;
/// results keep the input order.
fn fan_out<T: Sync, R: Send>(
    items: &[T],
    parallel: bool,
    f: impl Fn(&T) -> Result<R, CliError> + Sync,
) -> Result<Vec<R>, CliError> {
    if !parallel || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    thread::scope(|s| {
        let handles: Vec<_> = items.iter().map(|it| s.spawn(|| f(it))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Runtime("worker thread panicked".into()))))
            .collect()
    })
}

fn train(cfg: &Config, run_dir: &Path, args: TrainArgs<'_>, m: &mut RunManifest) -> Result<(), CliError> {
    m.inputs.push(args.split_dir.to_path_buf());
    m.inputs.extend(args.bias_dir.map(Path::to_path_buf));
    let (info, prepared) = prepared_from(cfg, args.split_dir, args.bias_dir)?;
    let strategy = Strategy {
        kind: args.strategy.unwrap_or(cfg.strategy.kind),
        params: cfg.strategy.params.clone(),
    };
    let training = TrainConfig {
        seeds: if args.seeds.is_empty() {
            cfg.training.seeds.clone()
        } else {
            args.seeds.to_vec()
        },
        ..cfg.training.clone()
    };
    training.validate()?;
    m.seeds = training.seeds.clone();
    let name = strategy.kind.name();
    let outcomes: Vec<RunOutcome> = fan_out(&training.seeds, args.parallel, |&seed| {
        log::info!("training {name} with seed {seed}");
        Ok(run_strategy(&prepared, &strategy, &cfg.model, &training, seed, &info.name, |_| {})?)
    })?;
    for (seed, out) in training.seeds.iter().zip(outcomes) {
        let dir = checkpoint_dir(run_dir, name, *seed);
        let saved = save_checkpoint(&dir, &out.fit.model, &prepared.featurizer, &out.fit.manifest)?;
        let history = dir.join(HISTORY_FILE);
        write_json(&history, &out.fit.history)?;
        let report = report_path(run_dir, "test", name, *seed);
        write_json(&report, &out.report)?;
        m.outputs.extend([dir, history, report]);
        println!(
            "{name} seed {seed}: best epoch {} (valid macro-F1 {:.4}), test macro-F1 {:.4}",
            saved.epoch, saved.valid_macro_f1, out.report.macro_f1
        );
    }
    Ok(())
}

/// Examples of `split` under a checkpoint's vocabulary, domain and event order.
fn checkpoint_examples(
    cfg: &Config,
    featurizer: &Featurizer,
    ckpt: &CheckpointManifest,
    split_dir: &Path,
    split: &str,
) -> Result<(DatasetInfo, Vec<Example>), CliError> {
    let info = read_dataset_info(split_dir)?;
    if ckpt.labels != info.label_space.names() {
        return Err(CliError::Validation(format!(
            "checkpoint labels {:?} differ from the split's {:?}",
            ckpt.labels,
            info.label_space.names()
        )));
    }
    let corpus = load_split_file(split_dir, &info, split)?;
    let identifier = BiasTokenIdentifier::new(cfg.tagger.clone())?;
    let examples = featurizer.examples(&corpus, &ckpt.domains, &ckpt.events, |p| Ok(identifier.identify(p)))?;
    Ok((info, examples))
}

fn evaluate_cmd(
    cfg: &Config,
    run_dir: &Path,
    checkpoint: &Path,
    split_dir: &Path,
    split: &str,
    m: &mut RunManifest,
) -> Result<(), CliError> {
    m.inputs.extend([checkpoint.to_path_buf(), split_dir.to_path_buf()]);
    if !SPLITS.contains(&split) {
        return Err(CliError::Validation(format!("unknown split {split:?} (train, valid or test)")));
    }
    let (model, featurizer, ckpt) = load_checkpoint(checkpoint)?;
    m.seeds = vec![ckpt.seed];
    let (info, examples) = checkpoint_examples(cfg, &featurizer, &ckpt, split_dir, split)?;
    let report = evaluate(
        &model,
        &examples,
        &info.label_space,
        ReportKey {
            dataset: &info.name,
            split,
            strategy: &ckpt.strategy,
            seed: ckpt.seed,
        },
    )?;
    let path = report_path(run_dir, split, &ckpt.strategy, ckpt.seed);
    write_json(&path, &report)?;
    m.outputs.push(path);
    println!(
        "{} seed {} on {split}: macro P {:.4} R {:.4} F1 {:.4} ({} posts)",
        ckpt.strategy, ckpt.seed, report.macro_precision, report.macro_recall, report.macro_f1, report.support
    );
    Ok(())
}

struct ProbeArgs<'a> {
    checkpoint: &'a Path,
    baseline: Option<&'a Path>,
    split_dir: &'a Path,
    components: &'a [Component],
    tasks: &'a [ProbeTarget],
    parallel: bool,
}

fn probe(cfg: &Config, run_dir: &Path, args: ProbeArgs<'_>, m: &mut RunManifest) -> Result<(), CliError> {
    let components = if args.components.is_empty() {
        cfg.probe.components.clone()
    } else {
        args.components.to_vec()
    };
    let tasks = if args.tasks.is_empty() {
        cfg.probe.tasks.clone()
    } else {
        args.tasks.to_vec()
    };
    m.inputs.extend([args.checkpoint.to_path_buf(), args.split_dir.to_path_buf()]);
    m.inputs.extend(args.baseline.map(Path::to_path_buf));
    let seeds: Vec<u64> = (0..cfg.probe.seeds).collect();
    m.seeds = seeds.clone();
    let split = cfg.probe.split.as_str();
    let out = run_dir.join(PROBE_DIR);
    let mut results = Vec::new();
    for component in components {
        let source = match component {
            Component::Baseline => args.baseline.ok_or_else(|| {
                CliError::Validation("the baseline component needs --baseline-checkpoint".into())
            })?,
            Component::Bias | Component::Main => args.checkpoint,
        };
        let (model, featurizer, ckpt) = load_checkpoint(source)?;
        let (_, examples) = checkpoint_examples(cfg, &featurizer, &ckpt, args.split_dir, split)?;
        let x = extract_representations(&model, component, &examples)?;
        for &task in &tasks {
            let y = probe_targets(&examples, task);
            let fraction = cfg.probe.fraction;
            let scores = fan_out(&seeds, args.parallel, |&s| Ok(probe_seed(&x, &y, fraction, s)?))?;
            let r = ProbeResult::from_scores(task, component, fraction, seeds.clone(), scores)?;
            let path = out.join(format!("{task}-{component}.json"));
            write_json(&path, &r)?;
            m.outputs.push(path);
            println!("{task:<17} {component:<8} macro-F1 {:.4} ± {:.4}", r.mean, r.std);
            results.push(r);
        }
    }
    let csv = out.join("probes.csv");
    write_text(&csv, &render_probe_csv(&results))?;
    m.outputs.push(csv);
    Ok(())
}

fn collect_reports(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_reports(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "json") {
            out.push(p);
        }
    }
    Ok(())
}

fn report(run_dir: &Path, from: &[PathBuf], split: &str, reference: &str, m: &mut RunManifest) -> Result<(), CliError> {
    let sources = if from.is_empty() {
        vec![run_dir.to_path_buf()]
    } else {
        from.to_vec()
    };
    let mut files = Vec::new();
    for src in &sources {
        let dir = src.join(REPORT_DIR).join(split);
        if !dir.is_dir() {
            return Err(CliError::Validation(format!("no {split} reports under {}", src.display())));
        }
        collect_reports(&dir, &mut files)?;
    }
    if files.is_empty() {
        return Err(CliError::Validation(format!("no {split} reports found")));
    }
    let reports: Vec<EvalReport> = files.iter().map(|f| crate::data::read_json(f)).collect::<Result<_, _>>()?;
    m.inputs.extend(sources);
    let rows = compare(&reports, reference)?;
    let table = render_table(&rows);
    let out = run_dir.join(TABLE_DIR);
    let (tpath, cpath) = (out.join(format!("{split}.md")), out.join(format!("{split}.csv")));
    write_text(&tpath, &table)?;
    write_text(&cpath, &render_csv(&rows))?;
    m.outputs.extend([tpath, cpath]);
    print!("{table}");
    Ok(())
}
