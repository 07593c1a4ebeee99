use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheduler {
    /// Cosine decay from the base rate to zero, no warmup.
    Cosine,
    Constant,
}

impl Scheduler {
    /// Multiplier on the base learning rate at `step` of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Scheduler::Constant => 1.0,
            Scheduler::Cosine if total == 0 => 1.0,
            Scheduler::Cosine => 0.5 * (1.0 + (PI * step as f64 / total as f64).cos()),
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: i32,
}

/// Adam with per-parameter step counts. Parameters without a gradient in a
/// step are left untouched, moments included.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<ParamId, Moments>,
    group_steps: BTreeMap<String, usize>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            state: HashMap::new(),
            group_steps: BTreeMap::new(),
        }
    }

    /// Number of steps in which at least one parameter of each group moved.
    pub fn group_steps(&self) -> &BTreeMap<String, usize> {
        &self.group_steps
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr: impl Fn(ParamGroup) -> f64,
        frozen: &HashSet<ParamId>,
    ) {
        let mut touched: BTreeMap<String, bool> = BTreeMap::new();
        let mut ids: Vec<ParamId> = grads.ids().filter(|id| !frozen.contains(id)).collect();
        ids.sort_unstable();
        for id in ids {
            let g = grads.get(id).expect("listed gradient");
            let group = store.get(id).group;
            let rate = lr(group);
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(g.rows(), g.cols()),
                v: Tensor::zeros(g.rows(), g.cols()),
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t);
            let bc2 = 1.0 - self.beta2.powi(st.t);
            let value = store.value_mut(id);
            for (((w, &gi), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.data_mut())
                .zip(st.v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= rate * m_hat / (v_hat.sqrt() + self.eps);
            }
            touched.insert(format!("{group:?}").to_lowercase(), true);
        }
        for g in touched.into_keys() {
            *self.group_steps.entry(g).or_default() += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(Scheduler::Cosine.factor(0, 10), 1.0);
        assert!(Scheduler::Cosine.factor(10, 10).abs() < 1e-15);
        assert!((Scheduler::Cosine.factor(5, 10) - 0.5).abs() < 1e-15);
        assert_eq!(Scheduler::Constant.factor(7, 10), 1.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Head, Tensor::row_vector(vec![1.0, -1.0]));
        let b = store.add("b", ParamGroup::Encoder, Tensor::row_vector(vec![3.0]));
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let loss = g.sum(va);
        let grads = g.backward(loss);
        let mut adam = Adam::default();
        adam.step(&mut store, &grads, |_| 0.1, &HashSet::new());
        let v = store.value(a).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.1).abs() < 1e-6);
        assert_eq!(store.value(b).data(), &[3.0]);
        assert_eq!(adam.group_steps().get("head"), Some(&1));
        assert_eq!(adam.group_steps().get("encoder"), None);
    }
}
