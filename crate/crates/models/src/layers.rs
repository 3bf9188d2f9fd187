//! Parameterized building blocks shared by the VAEs and the denoiser.

use bihoi_nn::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (input as f64).sqrt();
        Linear {
            w: store.randn(format!("{name}.w"), input, output, std, rng),
            b: store.zeros(format!("{name}.b"), 1, output),
        }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        Linear {
            w: store.zeros(format!("{name}.w"), input, output),
            b: store.zeros(format!("{name}.b"), 1, output),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).rows()
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).cols()
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0)),
            bias: store.zeros(format!("{name}.bias"), 1, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x, 1e-5);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let s = g.mul_row(n, gain);
        g.add_row(s, bias)
    }
}

/// `(silu(x W1) * (x W2)) W3`.
#[derive(Clone, Copy, Debug)]
pub struct GatedMlp {
    gate: Linear,
    up: Linear,
    down: Linear,
}

impl GatedMlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, zero_out: bool, rng: &mut impl Rng) -> Self {
        GatedMlp {
            gate: Linear::new(store, &format!("{name}.gate"), dim, hidden, rng),
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: if zero_out {
                Linear::zeroed(store, &format!("{name}.down"), hidden, dim)
            } else {
                Linear::new(store, &format!("{name}.down"), hidden, dim, rng)
            },
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let a = self.gate.forward(g, store, x);
        let a = g.silu(a);
        let b = self.up.forward(g, store, x);
        let h = g.mul(a, b);
        self.down.forward(g, store, h)
    }
}

/// Input projection, residual SiLU blocks, output projection.
#[derive(Clone, Debug)]
pub struct ResMlp {
    input: Linear,
    blocks: Vec<(Linear, Linear)>,
    output: Linear,
}

impl ResMlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = (0..depth)
            .map(|k| {
                (
                    Linear::new(store, &format!("{name}.block{k}.a"), hidden, hidden, rng),
                    Linear::new(store, &format!("{name}.block{k}.b"), hidden, hidden, rng),
                )
            })
            .collect();
        ResMlp {
            input: Linear::new(store, &format!("{name}.in"), input, hidden, rng),
            blocks,
            output: Linear::new(store, &format!("{name}.out"), hidden, output, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.input.forward(g, store, x);
        let mut h = g.silu(h);
        for (a, b) in &self.blocks {
            let u = a.forward(g, store, h);
            let u = g.silu(u);
            let u = b.forward(g, store, u);
            h = g.add(h, u);
        }
        self.output.forward(g, store, h)
    }
}

/// Sinusoidal features of a scalar position, `dim` wide (sin half, cos half).
pub fn sinusoidal(position: f64, dim: usize, base: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = base.powf(-(k as f64) / half.max(1) as f64);
        out[k] = (position * freq).sin();
        out[half + k] = (position * freq).cos();
    }
    out
}

/// Elementwise Gaussian KL to the standard normal, summed per row (`B x 1`).
pub fn kl_rows(g: &mut Graph, mu: Var, logvar: Var) -> Var {
    // 0.5 * (mu^2 + exp(logvar) - 1 - logvar)
    let m2 = g.square(mu);
    let ev = g.exp(logvar);
    let s = g.add(m2, ev);
    let s = g.sub(s, logvar);
    let s = g.offset(s, -1.0);
    let s = g.scale(s, 0.5);
    g.sum_cols(s)
}

/// Closed-form KL of a diagonal Gaussian to the standard normal.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}
