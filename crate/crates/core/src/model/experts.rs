use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One scoring vector `W_q` (`d × 1`) and scalar bias `b_q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expert {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Expert {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                ParamGroup::Head,
                Tensor::randn(d, 1, std, rng),
            ),
            bias: store.add(format!("{name}.bias"), ParamGroup::Head, Tensor::zeros(1, 1)),
        }
    }

    fn scores(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let s = g.matmul(h, w);
        g.add_row(s, b)
    }
}

/// One attention-pooling expert per domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertBank {
    experts: Vec<Expert>,
}

impl ExpertBank {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        domains: usize,
        d: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if domains == 0 {
            return Err(Error::Config("expert bank needs at least one domain".into()));
        }
        let experts = (0..domains)
            .map(|q| Expert::new(store, &format!("{prefix}{q}"), d, init_std, rng))
            .collect();
        Ok(Self { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn expert(&self, q: usize) -> Option<&Expert> {
        self.experts.get(q)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.experts.iter().flat_map(|e| [e.weight, e.bias]).collect()
    }

    /// Attention logits for a stacked batch `hidden` (`batch·seq_len × d`),
    /// sequence `b` scored by expert `domains[b]`. Rows of each domain are
    /// gathered and scored together, so an expert's parameters only enter
    /// the graph through its own domain's samples. `None` scores all
    /// positions equally. Returns a `batch × seq_len` matrix.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hidden: Var,
        seq_len: usize,
        domains: &[Option<usize>],
    ) -> Result<Var> {
        let batch = domains.len();
        let mut groups: Vec<(Option<usize>, Vec<usize>)> = Vec::new();
        for (b, &dom) in domains.iter().enumerate() {
            if let Some(q) = dom {
                if q >= self.experts.len() {
                    return Err(Error::UnknownDomain(format!(
                        "domain index {q} outside expert bank of {}",
                        self.experts.len()
                    )));
                }
            }
            match groups.iter_mut().find(|(k, _)| *k == dom) {
                Some((_, members)) => members.push(b),
                None => groups.push((dom, vec![b])),
            }
        }
        let mut parts = Vec::with_capacity(groups.len());
        let mut place = vec![(0, 0); batch * seq_len];
        for (part, (dom, members)) in groups.iter().enumerate() {
            let rows: Vec<usize> = members
                .iter()
                .flat_map(|&b| b * seq_len..(b + 1) * seq_len)
                .collect();
            for (i, &r) in rows.iter().enumerate() {
                place[r] = (part, i);
            }
            let scored = match dom {
                Some(q) => {
                    let sub = g.gather_rows(hidden, rows);
                    self.experts[*q].scores(g, store, sub)
                }
                None => g.constant(Tensor::zeros(rows.len(), 1)),
            };
            parts.push(scored);
        }
        let flat = g.assemble_rows(parts, place);
        Ok(g.reshape(flat, batch, seq_len))
    }
}
