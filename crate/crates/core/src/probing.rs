//! Linear probes on frozen representations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSpace, TaskKind};
use crate::error::{Error, Result};
use crate::evaluation::macro_prf;
use crate::features::Example;
use crate::model::{Model, ModelInput};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeTarget {
    Domain,
    Event,
    InformationType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    /// Pooled representation of a vanilla model.
    Baseline,
    /// Bias-branch feature of a debiased model.
    Bias,
    /// Expert-pooled representation of a debiased model.
    Main,
}

macro_rules! kebab_enum {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl $t {
            pub fn name(self) -> &'static str {
                match self { $(Self::$v => $s),+ }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)+
                    _ => Err(Error::Config(format!("unknown {} '{s}'", stringify!($t)))),
                }
            }
        }
    };
}

kebab_enum!(ProbeTarget, Domain => "domain", Event => "event", InformationType => "information-type");
kebab_enum!(Component, Baseline => "baseline", Bias => "bias", Main => "main");

/// Representations, one row per example.
pub fn extract_representations(model: &Model, component: Component, examples: &[Example]) -> Result<Tensor> {
    if examples.is_empty() {
        return Err(Error::Insufficient("no posts to encode".into()));
    }
    if component == Component::Bias && !model.config().has_bias_branch() {
        return Err(Error::MissingComponent("bias-branch".into()));
    }
    let mut rows = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let input = ModelInput {
            main: chunk.iter().map(|e| e.main_ids.clone()).collect(),
            counterfactual: if component == Component::Bias {
                chunk.iter().map(|e| e.counterfactual_ids.clone()).collect()
            } else {
                Vec::new()
            },
            domains: chunk.iter().map(|e| e.domain).collect(),
        };
        let reps = model.representations(&input)?;
        let t = match component {
            Component::Bias => reps.bias.expect("bias branch present"),
            Component::Baseline | Component::Main => reps.main,
        };
        rows.extend(t.to_rows());
    }
    Ok(Tensor::from_rows(&rows))
}

/// Class index per example for a probe target. Domains and events are
/// numbered in order of first appearance; information type uses the first
/// gold label.
pub fn probe_targets(examples: &[Example], target: ProbeTarget) -> Vec<usize> {
    if target == ProbeTarget::InformationType {
        return examples.iter().map(|e| e.labels[0]).collect();
    }
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    examples
        .iter()
        .map(|e| {
            let key = match target {
                ProbeTarget::Domain => e.domain_name.as_str(),
                _ => e.event_id.as_str(),
            };
            let next = ids.len();
            *ids.entry(key).or_insert(next)
        })
        .collect()
}

/// L2-regularized multinomial logistic regression, minimizing
/// `½‖W‖² + C · Σ_i −log softmax(x_i W + b)[y_i]` (intercept unpenalized)
/// with L-BFGS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub c: f64,
    pub max_iter: usize,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl LogisticRegression {
    pub const DEFAULT_C: f64 = 1.0;
    pub const DEFAULT_MAX_ITER: usize = 100;

    pub fn fit(x: &Tensor, y: &[usize], classes: usize, c: f64, max_iter: usize) -> Result<Self> {
        if x.rows() != y.len() || x.rows() == 0 {
            return Err(Error::Shape("probe features and targets differ in length".into()));
        }
        if y.iter().any(|&t| t >= classes) {
            return Err(Error::Shape("probe target outside class range".into()));
        }
        let (n, k) = (x.rows(), x.cols());
        let dim = (k + 1) * classes;
        let objective = |theta: &[f64], grad: &mut [f64]| -> f64 {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            let mut z = vec![0.0; classes];
            for i in 0..n {
                let row = x.row(i);
                for (cl, zc) in z.iter_mut().enumerate() {
                    let mut s = theta[k * classes + cl];
                    for (j, &xj) in row.iter().enumerate() {
                        s += xj * theta[j * classes + cl];
                    }
                    *zc = s;
                }
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                loss += c * (lse - z[y[i]]);
                for cl in 0..classes {
                    let p = (z[cl] - lse).exp() - if cl == y[i] { 1.0 } else { 0.0 };
                    let p = c * p;
                    for (j, &xj) in row.iter().enumerate() {
                        grad[j * classes + cl] += p * xj;
                    }
                    grad[k * classes + cl] += p;
                }
            }
            for idx in 0..k * classes {
                loss += 0.5 * theta[idx] * theta[idx];
                grad[idx] += theta[idx];
            }
            loss
        };
        let theta = lbfgs(vec![0.0; dim], objective, max_iter, 10);
        Ok(Self {
            c,
            max_iter,
            weights: Tensor::from_vec(k, classes, theta[..k * classes].to_vec()),
            bias: theta[k * classes..].to_vec(),
        })
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        let z = x.matmul(&self.weights);
        (0..z.rows())
            .map(|r| {
                let row = z.row(r);
                let mut best = 0;
                for cl in 1..row.len() {
                    if row[cl] + self.bias[cl] > row[best] + self.bias[best] {
                        best = cl;
                    }
                }
                best
            })
            .collect()
    }
}

/// Limited-memory BFGS with a backtracking Armijo line search.
fn lbfgs(
    mut x: Vec<f64>,
    mut f: impl FnMut(&[f64], &mut [f64]) -> f64,
    max_iter: usize,
    memory: usize,
) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut g_new = vec![0.0; n];
    for _ in 0..max_iter {
        if dot(&g, &g).sqrt() < 1e-6 {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, yv, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(yv).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, yv, _)) = hist.last() {
            let gamma = dot(s, yv) / dot(yv, yv);
            q.iter_mut().for_each(|qi| *qi *= gamma);
        }
        for ((s, yv, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(yv, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            hist.clear();
        }
        let mut step = if hist.is_empty() { 1.0 / dot(&g, &g).sqrt().max(1.0) } else { 1.0 };
        let mut x_new = vec![0.0; n];
        let mut f_new;
        let mut accepted = false;
        for _ in 0..40 {
            x_new.iter_mut().zip(&x).zip(&dir).for_each(|((xn, xi), d)| *xn = xi + step * d);
            f_new = f(&x_new, &mut g_new);
            if f_new <= fx + 1e-4 * step * slope {
                let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
                let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &yv);
                if sy > 1e-12 {
                    hist.push((s, yv, 1.0 / sy));
                    if hist.len() > memory {
                        hist.remove(0);
                    }
                }
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut g, &mut g_new);
                let done = (fx - f_new).abs() <= 1e-10 * fx.abs().max(1.0);
                fx = f_new;
                accepted = true;
                if done {
                    return x;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    x
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: ProbeTarget,
    pub component: Component,
    pub fraction: f64,
    pub seeds: Vec<u64>,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

const MAX_SUBSET_ATTEMPTS: usize = 10;

/// Per-class stratified sample of about `fraction` of the rows, at least
/// one per class.
fn stratified_subset(targets: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &t) in targets.iter().enumerate() {
        by_class.entry(t).or_default().push(i);
    }
    let mut picked = Vec::new();
    for (_, mut idx) in by_class {
        idx.shuffle(rng);
        let k = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len());
        picked.extend_from_slice(&idx[..k]);
    }
    picked.sort_unstable();
    picked
}

fn check_inputs(x: &Tensor, targets: &[usize], fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("probe fraction {fraction} outside (0, 1]")));
    }
    if x.rows() != targets.len() {
        return Err(Error::Shape("representation rows differ from targets".into()));
    }
    let present = targets.iter().collect::<BTreeSet<_>>().len();
    if present < 2 {
        return Err(Error::Insufficient("probe targets have a single class".into()));
    }
    if (fraction * targets.len() as f64).round() < 2.0 * present as f64 {
        return Err(Error::Insufficient(format!(
            "fraction {fraction} of {} rows gives fewer than 2 samples per class",
            targets.len()
        )));
    }
    Ok(targets.iter().copied().max().map_or(0, |m| m + 1))
}

/// Macro-F1 of one probe: fit on a stratified `fraction` of the rows drawn
/// with `seed`, score on the remaining rows.
pub fn probe_seed(x: &Tensor, targets: &[usize], fraction: f64, seed: u64) -> Result<f64> {
    let classes = check_inputs(x, targets, fraction)?;
    let space = LabelSpace::new(
        TaskKind::MultiClass,
        (0..classes).map(|c| format!("class{c}")).collect(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempt = 0;
    let subset = loop {
        let s = stratified_subset(targets, fraction, &mut rng);
        let distinct = s.iter().map(|&i| targets[i]).collect::<BTreeSet<_>>().len();
        if distinct >= 2 && s.len() < targets.len() {
            break s;
        }
        attempt += 1;
        if attempt >= MAX_SUBSET_ATTEMPTS {
            return Err(Error::Insufficient(format!(
                "fraction {fraction} leaves no usable probe split"
            )));
        }
    };
    let in_subset: BTreeSet<usize> = subset.iter().copied().collect();
    let rest: Vec<usize> = (0..targets.len()).filter(|i| !in_subset.contains(i)).collect();
    let pick = |idx: &[usize]| Tensor::from_rows(&idx.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
    let ys: Vec<usize> = subset.iter().map(|&i| targets[i]).collect();
    let probe = LogisticRegression::fit(
        &pick(&subset),
        &ys,
        classes,
        LogisticRegression::DEFAULT_C,
        LogisticRegression::DEFAULT_MAX_ITER,
    )?;
    let pred = probe.predict(&pick(&rest));
    let gold: Vec<Vec<usize>> = rest.iter().map(|&i| vec![targets[i]]).collect();
    let pred: Vec<Vec<usize>> = pred.into_iter().map(|p| vec![p]).collect();
    Ok(macro_prf(&gold, &pred, &space)?.f1)
}

impl ProbeResult {
    /// Mean and sample standard deviation of per-seed scores.
    pub fn from_scores(
        task: ProbeTarget,
        component: Component,
        fraction: f64,
        seeds: Vec<u64>,
        scores: Vec<f64>,
    ) -> Result<Self> {
        if scores.is_empty() || scores.len() != seeds.len() {
            return Err(Error::Shape(format!("{} scores for {} seeds", scores.len(), seeds.len())));
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let std = if scores.len() > 1 {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            task,
            component,
            fraction,
            seeds,
            scores,
            mean,
            std,
        })
    }
}

/// [`probe_seed`] for every seed, aggregated.
pub fn run_probe(
    x: &Tensor,
    targets: &[usize],
    fraction: f64,
    seeds: &[u64],
    task: ProbeTarget,
    component: Component,
) -> Result<ProbeResult> {
    if seeds.is_empty() {
        return Err(Error::Config("probe needs at least one seed".into()));
    }
    check_inputs(x, targets, fraction)?;
    let scores = seeds
        .iter()
        .map(|&s| probe_seed(x, targets, fraction, s))
        .collect::<Result<Vec<_>>>()?;
    ProbeResult::from_scores(task, component, fraction, seeds.to_vec(), scores)
}

/// One row per (task, component): the bar heights of a grouped bar chart.
pub fn render_probe_csv(results: &[ProbeResult]) -> String {
    let mut out = String::from("task,component,mean_macro_f1,std,seeds\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            r.task,
            r.component,
            r.mean,
            r.std,
            r.seeds.len()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, sep: f64, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -sep } else { sep };
            rows.push(vec![centre + noise.sample(&mut rng), noise.sample(&mut rng)]);
            y.push(c);
        }
        (Tensor::from_rows(&rows), y)
    }

    #[test]
    fn separable_blobs_are_probed_perfectly() {
        let (x, y) = blobs(400, 6.0, 1);
        let seeds: Vec<u64> = (0..25).collect();
        let r = run_probe(&x, &y, 0.05, &seeds, ProbeTarget::Domain, Component::Main).unwrap();
        assert_eq!(r.scores.len(), 25);
        assert!(r.mean >= 0.99, "mean {}", r.mean);
    }

    #[test]
    fn noise_features_score_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..2000).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<usize> = (0..2000).map(|i| i % 4).collect();
        let r = run_probe(&Tensor::from_rows(&rows), &y, 0.05, &[0, 1, 2, 3, 4], ProbeTarget::Event, Component::Bias)
            .unwrap();
        assert!(r.mean < 0.35, "mean {}", r.mean);
    }

    #[test]
    fn logistic_regression_gradient_vanishes_at_optimum() {
        let (x, y) = blobs(60, 1.0, 3);
        let lr = LogisticRegression::fit(&x, &y, 2, 1.0, 500).unwrap();
        // stationarity: W + C Σ x_i (p_i − e_i) = 0
        let z = x.matmul(&lr.weights);
        let mut grad = lr.weights.clone();
        for i in 0..x.rows() {
            let zi: Vec<f64> = (0..2).map(|c| z.get(i, c) + lr.bias[c]).collect();
            let m = zi[0].max(zi[1]);
            let lse = m + zi.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for c in 0..2 {
                let p = (zi[c] - lse).exp() - if c == y[i] { 1.0 } else { 0.0 };
                for j in 0..2 {
                    grad.set(j, c, grad.get(j, c) + p * x.get(i, j));
                }
            }
        }
        assert!(grad.data().iter().all(|g| g.abs() < 1e-3), "{:?}", grad.data());
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Tensor::zeros(10, 2);
        assert!(run_probe(&x, &[0; 10], 0.5, &[0], ProbeTarget::Domain, Component::Main).is_err());
    }
}
