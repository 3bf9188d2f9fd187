//! Temporal mixing backbones: a diagonal selective state-space block plus
//! GRU, temporal-convolution and attention baselines behind one interface.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use bihoi_nn::graph::scan_forward;
use bihoi_nn::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::layers::{GatedMlp, LayerNorm, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Ssm,
    Gru,
    Tconv,
    Attention,
}

impl Backbone {
    /// Ablation row order.
    pub const ALL: [Backbone; 4] = [Backbone::Gru, Backbone::Tconv, Backbone::Attention, Backbone::Ssm];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Ssm => "ssm",
            Backbone::Gru => "gru",
            Backbone::Tconv => "tconv",
            Backbone::Attention => "attention",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ssm" | "mamba" => Ok(Backbone::Ssm),
            "gru" => Ok(Backbone::Gru),
            "tconv" | "conv" => Ok(Backbone::Tconv),
            "attention" | "transformer" => Ok(Backbone::Attention),
            other => Err(ModelError::InvalidConfig(format!("unknown backbone {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsmBlockConfig {
    pub model_dim: usize,
    pub state_dim: usize,
    pub num_blocks: usize,
    pub backbone: Backbone,
    /// Restrict every mixer to past and present tokens.
    pub causal: bool,
    /// Zero the residual-branch output projections so each block starts as the identity.
    pub zero_init: bool,
    pub heads: usize,
    pub kernel: usize,
}

impl Default for SsmBlockConfig {
    fn default() -> Self {
        SsmBlockConfig {
            model_dim: 128,
            state_dim: 16,
            num_blocks: 8,
            backbone: Backbone::Ssm,
            causal: false,
            zero_init: false,
            heads: 4,
            kernel: 5,
        }
    }
}

impl SsmBlockConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.model_dim == 0 || self.state_dim == 0 || self.num_blocks == 0 {
            return bad("backbone dimensions must be positive");
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad("model_dim must be divisible by heads");
        }
        if self.kernel == 0 {
            return bad("kernel must be positive");
        }
        if self.backbone == Backbone::Gru && !self.causal && self.model_dim % 2 != 0 {
            return bad("bidirectional gru needs an even model_dim");
        }
        Ok(())
    }
}

/// Hidden state of the diagonal recurrence: `channels x state_dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmState {
    pub channels: usize,
    pub state_dim: usize,
    pub h: Vec<f64>,
}

impl SsmState {
    pub fn zeros(channels: usize, state_dim: usize) -> Self {
        SsmState {
            channels,
            state_dim,
            h: vec![0.0; channels * state_dim],
        }
    }

    pub fn norm(&self) -> f64 {
        self.h.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One recurrence step: `h = a ⊙ h + b x`, `y = h c`.
/// `a_t` and `x_t` have one entry per channel; `b_t` and `c_t` one per state.
pub fn ssm_step(state: &mut SsmState, x_t: &[f64], a_t: &[f64], b_t: &[f64], c_t: &[f64]) -> Vec<f64> {
    let s = state.state_dim;
    assert_eq!(x_t.len(), state.channels);
    assert_eq!(a_t.len(), state.channels);
    assert_eq!(b_t.len(), s);
    assert_eq!(c_t.len(), s);
    (0..state.channels)
        .map(|d| {
            let h = &mut state.h[d * s..(d + 1) * s];
            let mut y = 0.0;
            for k in 0..s {
                h[k] = a_t[d] * h[k] + b_t[k] * x_t[d];
                y += c_t[k] * h[k];
            }
            y
        })
        .collect()
}

/// Whole-sequence recurrence from a zero state. Linear in the sequence length.
pub fn ssm_scan(x: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor) -> Tensor {
    scan_forward(x, a, b, c, None)
}

#[derive(Clone, Debug)]
struct ScanDirection {
    decay: Linear,
    input: Linear,
    output: Linear,
    skip: ParamId,
}

/// Input-dependent gates of one scan direction.
pub struct Gates {
    pub a: Var,
    pub b: Var,
    pub c: Var,
}

impl ScanDirection {
    fn new(store: &mut ParamStore, name: &str, inner: usize, state: usize, rng: &mut impl Rng) -> Self {
        let decay = Linear::new(store, &format!("{name}.decay"), inner, inner, rng);
        // spread initial decay rates: softplus(bias) log-uniform in [0.01, 0.5]
        let bias = store.get_mut(decay.b).expect("fresh store");
        for (k, v) in bias.data_mut().iter_mut().enumerate() {
            let f = if inner > 1 { k as f64 / (inner - 1) as f64 } else { 0.0 };
            let rate = (0.01f64.ln() + f * (0.5f64.ln() - 0.01f64.ln())).exp();
            *v = rate.exp_m1().ln();
        }
        ScanDirection {
            decay,
            input: Linear::new(store, &format!("{name}.input"), inner, state, rng),
            output: Linear::new(store, &format!("{name}.output"), inner, state, rng),
            skip: store.add(format!("{name}.skip"), Tensor::filled(1, inner, 1.0)),
        }
    }

    fn gates(&self, g: &mut Graph, store: &ParamStore, u: Var) -> Gates {
        let z = self.decay.forward(g, store, u);
        let sp = g.softplus(z);
        let neg = g.neg(sp);
        Gates {
            a: g.exp(neg),
            b: self.input.forward(g, store, u),
            c: self.output.forward(g, store, u),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, u: Var) -> Var {
        let gates = self.gates(g, store, u);
        let y = g.selective_scan(u, gates.a, gates.b, gates.c);
        let d = g.param(store, self.skip);
        let skip = g.mul_row(u, d);
        g.add(y, skip)
    }
}

#[derive(Clone, Debug)]
pub struct SsmMixer {
    in_proj: Linear,
    directions: Vec<ScanDirection>,
    out_proj: Linear,
    inner: usize,
}

impl SsmMixer {
    fn new(store: &mut ParamStore, name: &str, cfg: &SsmBlockConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        let n_dirs = if cfg.causal { 1 } else { 2 };
        SsmMixer {
            in_proj: Linear::new(store, &format!("{name}.in"), d, 2 * d, rng),
            directions: (0..n_dirs)
                .map(|k| ScanDirection::new(store, &format!("{name}.dir{k}"), d, cfg.state_dim, rng))
                .collect(),
            out_proj: out_linear(store, &format!("{name}.out"), d, d, cfg.zero_init, rng),
            inner: d,
        }
    }

    /// Gate values of direction `dir` for pre-activation inputs `u` (`L x inner`).
    pub fn gates(&self, store: &ParamStore, u: &Tensor, dir: usize) -> (Tensor, Tensor, Tensor) {
        let mut g = Graph::new();
        let uv = g.input(u.clone());
        let gates = self.directions[dir].gates(&mut g, store, uv);
        (g.value(gates.a).clone(), g.value(gates.b).clone(), g.value(gates.c).clone())
    }

    pub fn num_directions(&self) -> usize {
        self.directions.len()
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let xz = self.in_proj.forward(g, store, x);
        let xs = g.slice_cols(xz, 0, self.inner);
        let z = g.slice_cols(xz, self.inner, self.inner);
        let u = g.silu(xs);
        let mut y = self.directions[0].forward(g, store, u);
        if let Some(back) = self.directions.get(1) {
            let ur = g.reverse_rows(u);
            let yr = back.forward(g, store, ur);
            let yb = g.reverse_rows(yr);
            y = g.add(y, yb);
        }
        let gate = g.silu(z);
        let y = g.mul(y, gate);
        self.out_proj.forward(g, store, y)
    }
}

#[derive(Clone, Debug)]
struct GruDirection {
    input: Linear,
    recurrent: ParamId,
    hidden: usize,
}

impl GruDirection {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h_dim = self.hidden;
        let len = g.shape(x).0;
        let xp = self.input.forward(g, store, x);
        let u = g.param(store, self.recurrent);
        let mut h = g.input(Tensor::zeros(1, h_dim));
        let mut outs = Vec::with_capacity(len);
        for t in 0..len {
            let xt = g.slice_rows(xp, t, 1);
            let gh = g.matmul(h, u);
            let xr = g.slice_cols(xt, 0, h_dim);
            let hr = g.slice_cols(gh, 0, h_dim);
            let r = g.add(xr, hr);
            let r = g.sigmoid(r);
            let xu = g.slice_cols(xt, h_dim, h_dim);
            let hu = g.slice_cols(gh, h_dim, h_dim);
            let zt = g.add(xu, hu);
            let zt = g.sigmoid(zt);
            let xn = g.slice_cols(xt, 2 * h_dim, h_dim);
            let hn = g.slice_cols(gh, 2 * h_dim, h_dim);
            let rn = g.mul(r, hn);
            let n = g.add(xn, rn);
            let n = g.tanh(n);
            let diff = g.sub(h, n);
            let keep = g.mul(zt, diff);
            h = g.add(n, keep);
            outs.push(h);
        }
        g.concat_rows(&outs)
    }
}

#[derive(Clone, Debug)]
pub struct GruMixer {
    directions: Vec<GruDirection>,
    out_proj: Linear,
}

impl GruMixer {
    fn new(store: &mut ParamStore, name: &str, cfg: &SsmBlockConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        let (n_dirs, hidden) = if cfg.causal { (1, d) } else { (2, d / 2) };
        let directions = (0..n_dirs)
            .map(|k| GruDirection {
                input: Linear::new(store, &format!("{name}.dir{k}.input"), d, 3 * hidden, rng),
                recurrent: store.randn(format!("{name}.dir{k}.recurrent"), hidden, 3 * hidden, 1.0 / (hidden as f64).sqrt(), rng),
                hidden,
            })
            .collect();
        GruMixer {
            directions,
            out_proj: out_linear(store, &format!("{name}.out"), d, d, cfg.zero_init, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let fwd = self.directions[0].forward(g, store, x);
        let h = match self.directions.get(1) {
            Some(back) => {
                let xr = g.reverse_rows(x);
                let hr = back.forward(g, store, xr);
                let hb = g.reverse_rows(hr);
                g.concat_cols(&[fwd, hb])
            }
            None => fwd,
        };
        self.out_proj.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct ConvMixer {
    shifts: Vec<isize>,
    conv: Linear,
    out_proj: Linear,
}

impl ConvMixer {
    fn new(store: &mut ParamStore, name: &str, cfg: &SsmBlockConfig, rng: &mut impl Rng) -> Self {
        let k = cfg.kernel as isize;
        let shifts: Vec<isize> = if cfg.causal {
            (0..k).collect()
        } else {
            (0..k).map(|i| i - (k - 1) / 2).collect()
        };
        let d = cfg.model_dim;
        ConvMixer {
            conv: Linear::new(store, &format!("{name}.conv"), d * shifts.len(), d, rng),
            shifts,
            out_proj: out_linear(store, &format!("{name}.out"), d, d, cfg.zero_init, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let taps: Vec<Var> = self.shifts.iter().map(|&s| g.shift_rows(x, s)).collect();
        let stacked = g.concat_cols(&taps);
        let h = self.conv.forward(g, store, stacked);
        let h = g.silu(h);
        self.out_proj.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionMixer {
    q: Linear,
    k: Linear,
    v: Linear,
    out_proj: Linear,
    heads: usize,
    causal: bool,
}

impl AttentionMixer {
    fn new(store: &mut ParamStore, name: &str, cfg: &SsmBlockConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        AttentionMixer {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            out_proj: out_linear(store, &format!("{name}.out"), d, d, cfg.zero_init, rng),
            heads: cfg.heads,
            causal: cfg.causal,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let (len, d) = g.shape(x);
        let dh = d / self.heads;
        let q = self.q.forward(g, store, x);
        let k = self.k.forward(g, store, x);
        let v = self.v.forward(g, store, x);
        let mask = self
            .causal
            .then(|| g.input(Tensor::from_fn(len, len, |i, j| if j > i { -1e9 } else { 0.0 })));
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let mut s = g.scale(s, 1.0 / (dh as f64).sqrt());
            if let Some(m) = mask {
                s = g.add(s, m);
            }
            let p = g.softmax_rows(s);
            outs.push(g.matmul(p, vh));
        }
        let cat = g.concat_cols(&outs);
        self.out_proj.forward(g, store, cat)
    }
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Ssm(SsmMixer),
    Gru(GruMixer),
    Tconv(ConvMixer),
    Attention(AttentionMixer),
}

impl Mixer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &SsmBlockConfig, rng: &mut impl Rng) -> Self {
        match cfg.backbone {
            Backbone::Ssm => Mixer::Ssm(SsmMixer::new(store, name, cfg, rng)),
            Backbone::Gru => Mixer::Gru(GruMixer::new(store, name, cfg, rng)),
            Backbone::Tconv => Mixer::Tconv(ConvMixer::new(store, name, cfg, rng)),
            Backbone::Attention => Mixer::Attention(AttentionMixer::new(store, name, cfg, rng)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        match self {
            Mixer::Ssm(m) => m.forward(g, store, x),
            Mixer::Gru(m) => m.forward(g, store, x),
            Mixer::Tconv(m) => m.forward(g, store, x),
            Mixer::Attention(m) => m.forward(g, store, x),
        }
    }
}

fn out_linear(store: &mut ParamStore, name: &str, i: usize, o: usize, zero: bool, rng: &mut impl Rng) -> Linear {
    if zero {
        Linear::zeroed(store, name, i, o)
    } else {
        Linear::new(store, name, i, o, rng)
    }
}

/// `h = x + mixer(norm(x))`, then `h + mlp(norm(h))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    norm1: LayerNorm,
    pub mixer: Mixer,
    norm2: LayerNorm,
    mlp: GatedMlp,
}

impl ResidualBlock {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = self.norm1.forward(g, store, x);
        let m = self.mixer.forward(g, store, n);
        let h = g.add(x, m);
        let n = self.norm2.forward(g, store, h);
        let f = self.mlp.forward(g, store, n);
        g.add(h, f)
    }
}

/// Stack of residual blocks sharing one backbone kind.
#[derive(Clone, Debug)]
pub struct BackboneStack {
    pub config: SsmBlockConfig,
    pub blocks: Vec<ResidualBlock>,
}

impl BackboneStack {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &SsmBlockConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let blocks = (0..cfg.num_blocks)
            .map(|k| {
                let p = format!("{name}.block{k}");
                ResidualBlock {
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d),
                    mixer: Mixer::new(store, &format!("{p}.mixer"), cfg, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
                    mlp: GatedMlp::new(store, &format!("{p}.mlp"), d, 2 * d, cfg.zero_init, rng),
                }
            })
            .collect();
        Ok(BackboneStack {
            config: cfg.clone(),
            blocks,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        self.blocks.iter().fold(x, |h, b| b.forward(g, store, h))
    }

    /// Graph-free convenience wrapper returning the output tensor.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, store, xv);
        g.value(y).clone()
    }
}

/// Builds a one-block stack of `backbone` at width `dim` and returns the
/// fastest of `reps` forward-pass wall times (seconds) for each length.
pub fn forward_wall_times(backbone: Backbone, dim: usize, lengths: &[usize], reps: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SsmBlockConfig {
        model_dim: dim,
        num_blocks: 1,
        backbone,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let stack = BackboneStack::new(&mut store, "bench", &cfg, &mut rng)?;
    store.freeze();
    Ok(lengths
        .iter()
        .map(|&len| {
            let x = Tensor::randn(&mut rng, len, dim, 1.0);
            (0..reps.max(1))
                .map(|_| {
                    let start = Instant::now();
                    std::hint::black_box(stack.apply(&store, &x));
                    start.elapsed().as_secs_f64()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Least-squares slope of `log(time)` against `log(length)`.
pub fn scaling_exponent(lengths: &[usize], times: &[f64]) -> f64 {
    let xs: Vec<f64> = lengths.iter().map(|&l| (l as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.max(1e-12).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}
