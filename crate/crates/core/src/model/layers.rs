use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

/// `x W + b`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Glorot-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            group,
            Tensor::randn(fan_in, fan_out, std, rng),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Row standardization followed by a learned gain and shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), group, Tensor::filled(1, width, 1.0)),
            shift: store.add(format!("{name}.shift"), group, Tensor::zeros(1, width)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm_rows(x, LAYER_NORM_EPS);
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, shift)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.shift]
    }
}

/// Inverted dropout; identity when `rate == 0` or no generator is given.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut R>) -> Var {
    let Some(rng) = rng else { return x };
    if rate <= 0.0 {
        return x;
    }
    let (rows, cols) = g.value(x).shape();
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..rows * cols)
        .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.constant(Tensor::from_vec(rows, cols, mask));
    g.mul(x, m)
}
