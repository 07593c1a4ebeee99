use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{dropout, Linear};
use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Two-layer feed-forward classifier: `Linear → GELU → dropout → Linear`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub hidden: Linear,
    pub output: Linear,
    pub dropout: f64,
}

impl Predictor {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), ParamGroup::Head, input, hidden, rng),
            output: Linear::new(store, &format!("{name}.output"), ParamGroup::Head, hidden, output, rng),
            dropout,
        }
    }

    /// Logits. Dropout is active only when a generator is supplied.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let h = self.hidden.forward(g, store, x);
        let h = g.gelu(h);
        let h = dropout(g, h, self.dropout, rng);
        self.output.forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hidden.params().to_vec();
        p.extend(self.output.params());
        p
    }
}

/// Text-CNN over contextualized counterfactual representations: one
/// convolution per kernel width, GELU, max over time, concatenation, and
/// a linear projection back to the encoder width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasCnn {
    pub widths: Vec<usize>,
    pub channels: usize,
    pub convs: Vec<Linear>,
    pub projection: Linear,
}

impl BiasCnn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        widths: &[usize],
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || channels == 0 {
            return Err(Error::Config("CNN widths and channels must be positive".into()));
        }
        let convs = widths
            .iter()
            .map(|&k| {
                Linear::new(store, &format!("{name}.conv{k}"), ParamGroup::Head, k * d, channels, rng)
            })
            .collect();
        let projection = Linear::new(
            store,
            &format!("{name}.projection"),
            ParamGroup::Head,
            widths.len() * channels,
            d,
            rng,
        );
        Ok(Self {
            widths: widths.to_vec(),
            channels,
            convs,
            projection,
        })
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(1)
    }

    /// The bias feature z_b: max-over-time pooled GELU convolutions, one
    /// block of `channels` columns per kernel width.
    ///
    /// `hidden` stacks `lengths.len()` sequences of `seq_len` rows each;
    /// `seq_len` must be at least [`Self::max_width`]. A sequence shorter
    /// than a kernel contributes its single, padded window.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        hidden: Var,
        seq_len: usize,
        lengths: &[usize],
    ) -> Var {
        let mut pooled = Vec::with_capacity(self.convs.len());
        for (&k, conv) in self.widths.iter().zip(&self.convs) {
            let steps = seq_len - k + 1;
            let windows = g.unfold(hidden, seq_len, k);
            let c = conv.forward(g, store, windows);
            let c = g.gelu(c);
            let valid: Vec<usize> = lengths
                .iter()
                .map(|&n| n.saturating_sub(k - 1).clamp(1, steps))
                .collect();
            pooled.push(g.block_max(c, steps, &valid));
        }
        if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat_cols(pooled)
        }
    }

    /// Maps z_b to the predictor's input width `d`.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Var {
        self.projection.forward(g, store, z)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.convs.iter().flat_map(|c| c.params()).collect();
        p.extend(self.projection.params());
        p
    }
}
