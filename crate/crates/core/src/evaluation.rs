//! Macro-averaged P/R/F1, paired significance tests, and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{LabelSpace, TaskKind};
use crate::error::{Error, Result};
use crate::features::Example;
use crate::model::{Model, MULTI_LABEL_THRESHOLD};

/// Counts and scores for one label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroPrf {
    pub per_class: Vec<ClassScores>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-label binary counts over decided label sets. Multi-class decisions
/// are singleton sets, so both task kinds share one computation. A zero
/// denominator scores 0, and labels absent from `gold` still enter the
/// macro mean.
pub fn macro_prf(gold: &[Vec<usize>], pred: &[Vec<usize>], labels: &LabelSpace) -> Result<MacroPrf> {
    if gold.len() != pred.len() {
        return Err(Error::IdMismatch(format!(
            "{} gold entries but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let l = labels.len();
    let mut tp = vec![0usize; l];
    let mut fp = vec![0usize; l];
    let mut fn_ = vec![0usize; l];
    let mut support = vec![0usize; l];
    for (g, p) in gold.iter().zip(pred) {
        for &c in g.iter().chain(p) {
            if c >= l {
                return Err(Error::LabelSpace(format!("label index {c} outside {l} labels")));
            }
        }
        for c in 0..l {
            let (ig, ip) = (g.contains(&c), p.contains(&c));
            support[c] += ig as usize;
            match (ig, ip) {
                (true, true) => tp[c] += 1,
                (false, true) => fp[c] += 1,
                (true, false) => fn_[c] += 1,
                (false, false) => {}
            }
        }
    }
    let per_class: Vec<ClassScores> = (0..l)
        .map(|c| {
            let precision = ratio(tp[c], tp[c] + fp[c]);
            let recall = ratio(tp[c], tp[c] + fn_[c]);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                label: labels.names()[c].clone(),
                precision,
                recall,
                f1,
                support: support[c],
                tp: tp[c],
                fp: fp[c],
                fn_: fn_[c],
            }
        })
        .collect();
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / l as f64;
    Ok(MacroPrf {
        precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
        f1: mean(|c| c.f1),
        per_class,
    })
}

/// Pairs predictions with gold labels by post id.
pub fn align_by_id(
    gold: &[(String, Vec<usize>)],
    pred: &[(String, Vec<usize>)],
) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    if gold.len() != pred.len() {
        return Err(Error::IdMismatch(format!(
            "{} gold entries but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let mut by_id: BTreeMap<&str, &Vec<usize>> = BTreeMap::new();
    for (id, p) in pred {
        if by_id.insert(id.as_str(), p).is_some() {
            return Err(Error::IdMismatch(format!("duplicate prediction for post {id}")));
        }
    }
    let mut g_out = Vec::with_capacity(gold.len());
    let mut p_out = Vec::with_capacity(gold.len());
    for (id, g) in gold {
        let p = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::IdMismatch(format!("no prediction for post {id}")))?;
        g_out.push(g.clone());
        p_out.push((*p).clone());
    }
    Ok((g_out, p_out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TTestFlag {
    /// All differences are zero.
    Identical,
    /// Constant nonzero difference.
    ZeroVariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p_value: f64,
    pub flag: Option<TTestFlag>,
}

/// Two-sided paired t-test on `a[i] − b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Insufficient(format!(
            "paired test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Insufficient(format!("paired test needs ≥ 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if d.iter().all(|&x| x == 0.0) {
        return Ok(TTest {
            n,
            mean_diff: 0.0,
            t: 0.0,
            p_value: 1.0,
            flag: Some(TTestFlag::Identical),
        });
    }
    if var == 0.0 {
        return Ok(TTest {
            n,
            mean_diff: mean,
            t: mean.signum() * f64::INFINITY,
            p_value: 0.0,
            flag: Some(TTestFlag::ZeroVariance),
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Insufficient(format!("t distribution: {e}")))?;
    let p_value = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest {
        n,
        mean_diff: mean,
        t,
        p_value,
        flag: None,
    })
}

/// Scoring conventions stored with every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub zero_division: f64,
    pub absent_classes_in_macro: bool,
    pub multi_label_threshold: f64,
    pub multi_class_tie_break: String,
    pub masking_at_evaluation: bool,
    pub bias_branch_at_inference: bool,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            zero_division: 0.0,
            absent_classes_in_macro: true,
            multi_label_threshold: MULTI_LABEL_THRESHOLD,
            multi_class_tie_break: "lowest-index".into(),
            masking_at_evaluation: false,
            bias_branch_at_inference: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScores {
    pub macro_f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub split: String,
    pub strategy: String,
    pub seed: u64,
    pub task_kind: TaskKind,
    pub support: usize,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    pub per_domain: BTreeMap<String, DomainScores>,
    pub conventions: Conventions,
}

/// Decided labels for every example via bias-free inference.
pub fn predict_labels(model: &Model, examples: &[Example]) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let ids: Vec<Vec<u32>> = chunk.iter().map(|e| e.main_ids.clone()).collect();
        let domains: Vec<Option<usize>> = chunk.iter().map(|e| e.domain).collect();
        out.extend(model.infer_batch(&ids, &domains)?.iter().map(|p| p.decide()));
    }
    Ok(out)
}

/// Identifies a report in the comparison tables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportKey<'a> {
    pub dataset: &'a str,
    pub split: &'a str,
    pub strategy: &'a str,
    pub seed: u64,
}

pub fn evaluate(
    model: &Model,
    examples: &[Example],
    labels: &LabelSpace,
    key: ReportKey<'_>,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Insufficient("cannot evaluate an empty split".into()));
    }
    if labels.len() != model.config().num_labels {
        return Err(Error::LabelSpace(format!(
            "model predicts {} labels, split has {}",
            model.config().num_labels,
            labels.len()
        )));
    }
    let pred = predict_labels(model, examples)?;
    let gold: Vec<Vec<usize>> = examples.iter().map(|e| e.labels.clone()).collect();
    let overall = macro_prf(&gold, &pred, labels)?;

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        groups.entry(e.domain_name.as_str()).or_default().push(i);
    }
    let mut per_domain = BTreeMap::new();
    for (dom, idx) in groups {
        let g: Vec<Vec<usize>> = idx.iter().map(|&i| gold[i].clone()).collect();
        let p: Vec<Vec<usize>> = idx.iter().map(|&i| pred[i].clone()).collect();
        let s = macro_prf(&g, &p, labels)?;
        per_domain.insert(
            dom.to_string(),
            DomainScores {
                macro_f1: s.f1,
                support: idx.len(),
            },
        );
    }
    Ok(EvalReport {
        dataset: key.dataset.into(),
        split: key.split.into(),
        strategy: key.strategy.into(),
        seed: key.seed,
        task_kind: labels.task_kind(),
        support: examples.len(),
        macro_precision: overall.precision,
        macro_recall: overall.recall,
        macro_f1: overall.f1,
        per_class: overall.per_class,
        per_domain,
        conventions: Conventions::default(),
    })
}

/// One row of the cross-strategy comparison for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub dataset: String,
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_f1_std: f64,
    /// Mean F1 minus the reference strategy's, in F1 units.
    pub delta_f1: Option<f64>,
    pub p_value: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Aggregates per-seed reports into one row per (dataset, strategy), with
/// the difference to `reference` and a paired t-test over the seeds both
/// share. Rows keep the first-seen strategy order within each dataset.
pub fn compare(reports: &[EvalReport], reference: &str) -> Result<Vec<ComparisonRow>> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut by_key: BTreeMap<(String, String), BTreeMap<u64, &EvalReport>> = BTreeMap::new();
    for r in reports {
        let k = (r.dataset.clone(), r.strategy.clone());
        if !by_key.contains_key(&k) {
            order.push(k.clone());
        }
        if by_key.entry(k).or_default().insert(r.seed, r).is_some() {
            return Err(Error::IdMismatch(format!(
                "two reports for {}/{} seed {}",
                r.dataset, r.strategy, r.seed
            )));
        }
    }
    order.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rows = Vec::with_capacity(order.len());
    for (dataset, strategy) in order {
        let runs = &by_key[&(dataset.clone(), strategy.clone())];
        let f1: Vec<f64> = runs.values().map(|r| r.macro_f1).collect();
        let p: Vec<f64> = runs.values().map(|r| r.macro_precision).collect();
        let rc: Vec<f64> = runs.values().map(|r| r.macro_recall).collect();
        let (delta_f1, p_value) = match by_key.get(&(dataset.clone(), reference.to_string())) {
            Some(refs) if strategy != reference => {
                let shared: Vec<u64> = runs.keys().filter(|s| refs.contains_key(s)).copied().collect();
                let a: Vec<f64> = shared.iter().map(|s| runs[s].macro_f1).collect();
                let b: Vec<f64> = shared.iter().map(|s| refs[s].macro_f1).collect();
                let ref_all: Vec<f64> = refs.values().map(|r| r.macro_f1).collect();
                let pv = if shared.len() >= 2 {
                    Some(paired_t_test(&a, &b)?.p_value)
                } else {
                    None
                };
                (Some(mean(&f1) - mean(&ref_all)), pv)
            }
            _ => (None, None),
        };
        rows.push(ComparisonRow {
            dataset,
            strategy,
            seeds: runs.keys().copied().collect(),
            macro_precision: mean(&p),
            macro_recall: mean(&rc),
            macro_f1: mean(&f1),
            macro_f1_std: std(&f1),
            delta_f1,
            p_value,
        });
    }
    Ok(rows)
}

/// Strategies as rows, datasets as column groups of P, R, F1 and Δ F1
/// (all in points). A `*` marks p < 0.05 against the reference.
pub fn render_table(rows: &[ComparisonRow]) -> String {
    let mut datasets: Vec<&str> = Vec::new();
    let mut strategies: Vec<&str> = Vec::new();
    for r in rows {
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
        if !strategies.contains(&r.strategy.as_str()) {
            strategies.push(&r.strategy);
        }
    }
    let width = strategies.iter().map(|s| s.len()).max().unwrap_or(8).max(8);
    let mut out = String::new();
    let _ = write!(out, "{:width$}", "strategy");
    for d in &datasets {
        let _ = write!(out, " | {:^31}", d);
    }
    out.push('\n');
    let _ = write!(out, "{:width$}", "");
    for _ in &datasets {
        let _ = write!(out, " | {:>6} {:>6} {:>6} {:>8}", "P", "R", "F1", "ΔF1");
    }
    out.push('\n');
    for s in &strategies {
        let _ = write!(out, "{s:width$}");
        for d in &datasets {
            match rows.iter().find(|r| r.dataset == *d && r.strategy == *s) {
                Some(r) => {
                    let delta = match r.delta_f1 {
                        Some(x) => {
                            let star = if r.p_value.is_some_and(|p| p < 0.05) { "*" } else { "" };
                            format!("{:+.2}{star}", 100.0 * x)
                        }
                        None => "-".into(),
                    };
                    let _ = write!(
                        out,
                        " | {:>6.2} {:>6.2} {:>6.2} {:>8}",
                        100.0 * r.macro_precision,
                        100.0 * r.macro_recall,
                        100.0 * r.macro_f1,
                        delta
                    );
                }
                None => {
                    let _ = write!(out, " | {:>6} {:>6} {:>6} {:>8}", "-", "-", "-", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn render_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("dataset,strategy,seeds,precision,recall,f1,f1_std,delta_f1,p_value\n");
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.dataset,
            r.strategy,
            seeds.join(" "),
            r.macro_precision,
            r.macro_recall,
            r.macro_f1,
            r.macro_f1_std,
            opt(r.delta_f1),
            opt(r.p_value)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(n: usize) -> LabelSpace {
        LabelSpace::new(TaskKind::MultiClass, (0..n).map(|i| format!("c{i}")).collect()).unwrap()
    }

    #[test]
    fn hand_computed_confusion() {
        let gold = vec![vec![0], vec![0], vec![1], vec![1]];
        let pred = vec![vec![0], vec![1], vec![1], vec![1]];
        let s = macro_prf(&gold, &pred, &space(2)).unwrap();
        assert_eq!(s.per_class[0].precision, 1.0);
        assert_eq!(s.per_class[0].recall, 0.5);
        assert!((s.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.per_class[1].precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.per_class[1].recall, 1.0);
        assert!((s.per_class[1].f1 - 0.8).abs() < 1e-12);
        assert!((s.f1 - 0.733_333_333_333).abs() < 1e-9);
    }

    #[test]
    fn perfect_and_absent_classes() {
        let gold = vec![vec![0], vec![1]];
        let s = macro_prf(&gold, &gold, &space(2)).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = macro_prf(&gold, &gold, &space(4)).unwrap();
        assert_eq!(s.f1, 0.5);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(matches!(
            macro_prf(&[vec![0]], &[], &space(2)),
            Err(Error::IdMismatch(_))
        ));
        let gold = vec![("a".to_string(), vec![0])];
        let pred = vec![("b".to_string(), vec![0])];
        assert!(align_by_id(&gold, &pred).is_err());
    }

    #[test]
    fn t_test_closed_form_and_flags() {
        let a = [2.0, -1.0, 3.0, 1.0, 0.0];
        let b = [0.0; 5];
        let t = paired_t_test(&a, &b).unwrap();
        assert!((t.t - 1.414_213_562).abs() < 1e-6);
        assert!((t.p_value - 0.2302).abs() < 1e-3);
        let back = paired_t_test(&b, &a).unwrap();
        assert_eq!(t.p_value, back.p_value);

        let same = paired_t_test(&a, &a).unwrap();
        assert_eq!((same.p_value, same.flag), (1.0, Some(TTestFlag::Identical)));
        let ones = [1.0; 5];
        let c = paired_t_test(&ones, &b).unwrap();
        assert_eq!((c.p_value, c.flag), (0.0, Some(TTestFlag::ZeroVariance)));
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[0.0]).is_err());
    }

    fn report(strategy: &str, seed: u64, f1: f64) -> EvalReport {
        EvalReport {
            dataset: "synthetic".into(),
            split: "test".into(),
            strategy: strategy.into(),
            seed,
            task_kind: TaskKind::MultiClass,
            support: 10,
            macro_precision: f1,
            macro_recall: f1,
            macro_f1: f1,
            per_class: vec![],
            per_domain: BTreeMap::new(),
            conventions: Conventions::default(),
        }
    }

    #[test]
    fn comparison_deltas() {
        let reports = vec![
            report("vanilla", 0, 0.50),
            report("vanilla", 1, 0.52),
            report("full", 0, 0.60),
            report("full", 1, 0.63),
        ];
        let rows = compare(&reports, "vanilla").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].strategy, "vanilla");
        assert_eq!(rows[0].delta_f1, None);
        assert!((rows[1].delta_f1.unwrap() - 0.105).abs() < 1e-12);
        let table = render_table(&rows);
        assert!(table.contains("+10.50"));
        assert!(render_csv(&rows).lines().count() == 3);
    }
}
