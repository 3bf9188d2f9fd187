//! Latent diffusion over the per-frame composite `[z^M | T | O^α | O^β]`.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use bihoi_core::{HandType, MAX_FRAMES};
use bihoi_nn::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ModelError, Result};
use crate::layers::{sinusoidal, Linear};
use crate::ssm::{BackboneStack, SsmBlockConfig};

pub const AGENTS: usize = 4;
pub const TRANS_DIM: usize = 6;
pub const OBJ_TRANS_DIM: usize = 3;
pub const OBJ_ROT_DIM: usize = 6;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Squared-cosine noise schedule. Index 0 is the clean signal.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    betas: Vec<f64>,
}

pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(ModelError::InvalidConfig("schedule needs at least one step".into()));
    }
    let f = |t: usize| {
        let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (u * FRAC_PI_2).cos().powi(2)
    };
    let mut betas = vec![0.0; steps + 1];
    let mut alpha_bar = vec![1.0; steps + 1];
    for t in 1..=steps {
        let beta = (1.0 - f(t) / f(t - 1)).clamp(0.0, MAX_BETA);
        betas[t] = beta;
        alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta);
    }
    Ok(NoiseSchedule { alpha_bar, betas })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    /// `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.betas[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(ModelError::InvalidTimestep { t, max: self.steps() });
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eta`.
pub fn forward_noise(schedule: &NoiseSchedule, x0: &Tensor, t: usize, eta: &Tensor) -> Result<Tensor> {
    schedule.check_timestep(t)?;
    if x0.shape() != eta.shape() {
        return Err(ModelError::ShapeMismatch(format!("signal {:?} vs noise {:?}", x0.shape(), eta.shape())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eta, |x, e| a * x + b * e))
}

/// Channel widths of the four agents.
pub fn agent_dims(latent_dim: usize) -> [usize; AGENTS] {
    [latent_dim, TRANS_DIM, OBJ_TRANS_DIM, OBJ_ROT_DIM]
}

pub fn composite_width(latent_dim: usize) -> usize {
    agent_dims(latent_dim).iter().sum()
}

fn agent_offsets(latent_dim: usize) -> [usize; AGENTS] {
    let dims = agent_dims(latent_dim);
    let mut off = [0; AGENTS];
    for a in 1..AGENTS {
        off[a] = off[a - 1] + dims[a - 1];
    }
    off
}

/// Token `4i + a` reads row `a n + i` of an agent-major stack.
pub fn interleave_index(n: usize) -> Arc<Vec<Option<usize>>> {
    Arc::new((0..n * AGENTS).map(|r| Some((r % AGENTS) * n + r / AGENTS)).collect())
}

/// Inverse of [`interleave_index`].
pub fn deinterleave_index(n: usize) -> Arc<Vec<Option<usize>>> {
    Arc::new((0..n * AGENTS).map(|r| Some((r % n) * AGENTS + r / n)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub backbone: SsmBlockConfig,
    pub latent_dim: usize,
    pub text_dim: usize,
    pub object_dim: usize,
    pub steps: usize,
    /// Start with zero output projections (the denoiser predicts zero).
    pub zero_output: bool,
    /// Bound on the predicted clean sample during sampling; 0 disables it.
    pub clip_x0: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            backbone: SsmBlockConfig::default(),
            latent_dim: 64,
            text_dim: 64,
            object_dim: 64,
            steps: 1000,
            zero_output: false,
            clip_x0: 5.0,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.latent_dim == 0 || self.text_dim == 0 || self.object_dim == 0 || self.steps == 0 {
            return Err(ModelError::InvalidConfig("diffusion dimensions must be positive".into()));
        }
        if !(self.clip_x0 >= 0.0) {
            return Err(ModelError::InvalidConfig("clip_x0 must be non-negative".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        composite_width(self.latent_dim)
    }

    pub fn clip(&self) -> Option<f64> {
        (self.clip_x0 > 0.0).then_some(self.clip_x0)
    }
}

/// The four additive condition embeddings and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub t_embed: Vec<f64>,
    pub text_embed: Vec<f64>,
    pub obj_embed: Vec<f64>,
    pub type_embed: Vec<f64>,
    pub c: Vec<f64>,
}

/// Per-sequence conditioning inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub text: Arc<Vec<f64>>,
    pub object: Arc<Vec<f64>>,
    pub hand_type: HandType,
    /// Joint-angle prior, one value per frame.
    pub gamma: Vec<f64>,
}

/// Per-channel affine normalization of the composite.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CompositeStats {
    pub const MIN_STD: f64 = 1e-2;

    pub fn identity(width: usize) -> Self {
        CompositeStats {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn fit(sequences: &[&Tensor]) -> Result<Self> {
        let width = sequences.first().map(|t| t.cols()).unwrap_or(0);
        let rows: usize = sequences.iter().map(|t| t.rows()).sum();
        if rows == 0 {
            return Err(ModelError::InvalidInput("no frames to fit normalization".into()));
        }
        let mut mean = vec![0.0; width];
        for t in sequences {
            for r in 0..t.rows() {
                mean.iter_mut().zip(t.row(r)).for_each(|(m, v)| *m += v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; width];
        for t in sequences {
            for r in 0..t.rows() {
                var.iter_mut().zip(t.row(r)).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2));
            }
        }
        let std = var.into_iter().map(|s| (s / rows as f64).sqrt().max(Self::MIN_STD)).collect();
        Ok(CompositeStats { mean, std })
    }

    pub fn normalize(&self, x: &Tensor) -> Tensor {
        Tensor::from_fn(x.rows(), x.cols(), |r, c| (x.get(r, c) - self.mean[c]) / self.std[c])
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        Tensor::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) * self.std[c] + self.mean[c])
    }
}

/// Noise predictor over normalized composites.
pub trait EpsPredictor {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub store: ParamStore,
    pub stats: CompositeStats,
    pub schedule: NoiseSchedule,
    agent_in: Vec<Linear>,
    agent_out: Vec<Linear>,
    frame_pe: ParamId,
    agent_pe: ParamId,
    time_mlp: (Linear, Linear),
    text_proj: Linear,
    object_proj: Linear,
    type_table: ParamId,
    gamma_proj: Linear,
    pub backbone: BackboneStack,
}

impl DiffusionModel {
    pub const KIND: &'static str = "diffusion";

    pub fn new(config: DiffusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.backbone.model_dim;
        let dims = agent_dims(config.latent_dim);
        let agent_in = (0..AGENTS)
            .map(|a| Linear::new(&mut store, &format!("agent{a}.in"), dims[a], d, &mut rng))
            .collect();
        let agent_out = (0..AGENTS)
            .map(|a| {
                let name = format!("agent{a}.out");
                if config.zero_output {
                    Linear::zeroed(&mut store, &name, d, dims[a])
                } else {
                    Linear::new(&mut store, &name, d, dims[a], &mut rng)
                }
            })
            .collect();
        let frame_pe = store.add("pe.frame", Tensor::from_fn(MAX_FRAMES, d, |i, k| sinusoidal(i as f64, d, 10_000.0)[k]));
        // agent slots use a coarser frequency base and a phase offset so their
        // codes stay distinct from every frame code
        let agent_pe = store.add(
            "pe.agent",
            Tensor::from_fn(AGENTS, d, |a, k| 0.5 * sinusoidal(a as f64 * 1.7 + 0.3, d, 100.0)[k]),
        );
        let time_mlp = (
            Linear::new(&mut store, "cond.time1", d, d, &mut rng),
            Linear::new(&mut store, "cond.time2", d, d, &mut rng),
        );
        let text_proj = Linear::new(&mut store, "cond.text", config.text_dim, d, &mut rng);
        let object_proj = Linear::new(&mut store, "cond.object", config.object_dim, d, &mut rng);
        let type_table = store.randn("cond.type", 3, d, 0.1, &mut rng);
        let gamma_proj = Linear::new(&mut store, "cond.gamma", 1, d, &mut rng);
        let backbone = BackboneStack::new(&mut store, "backbone", &config.backbone, &mut rng)?;
        let width = config.width();
        let schedule = cosine_schedule(config.steps)?;
        Ok(DiffusionModel {
            config,
            store,
            stats: CompositeStats::identity(width),
            schedule,
            agent_in,
            agent_out,
            frame_pe,
            agent_pe,
            time_mlp,
            text_proj,
            object_proj,
            type_table,
            gamma_proj,
            backbone,
        })
    }

    pub fn width(&self) -> usize {
        self.config.width()
    }

    fn check_condition(&self, c: &Conditioning, n: usize) -> Result<()> {
        if c.text.len() != self.config.text_dim || c.object.len() != self.config.object_dim {
            return Err(ModelError::ShapeMismatch("condition feature width".into()));
        }
        if c.gamma.len() != n {
            return Err(ModelError::ShapeMismatch(format!("joint prior of {} frames for {n}", c.gamma.len())));
        }
        ensure_finite(&c.text, "text feature")?;
        ensure_finite(&c.object, "object feature")?;
        ensure_finite(&c.gamma, "joint prior")
    }

    /// The four condition embeddings (each `1 x d`) in graph form.
    pub fn condition_terms(&self, g: &mut Graph, t: usize, c: &Conditioning) -> [Var; 4] {
        let d = self.config.backbone.model_dim;
        let s = &self.store;
        let feat = g.input(Tensor::row_vector(sinusoidal(t as f64, d, 10_000.0)));
        let h = self.time_mlp.0.forward(g, s, feat);
        let h = g.silu(h);
        let te = self.time_mlp.1.forward(g, s, h);
        let text = g.input(Tensor::row_vector(c.text.to_vec()));
        let xe = self.text_proj.forward(g, s, text);
        let obj = g.input(Tensor::row_vector(c.object.to_vec()));
        let oe = self.object_proj.forward(g, s, obj);
        let onehot = g.input(Tensor::row_vector(c.hand_type.one_hot().0.to_vec()));
        let table = g.param(s, self.type_table);
        let ye = g.matmul(onehot, table);
        [te, xe, oe, ye]
    }

    pub fn fuse_conditions(&self, t: usize, c: &Conditioning) -> Result<ConditionBundle> {
        self.schedule.check_timestep(t)?;
        let mut g = Graph::new();
        let terms = self.condition_terms(&mut g, t, c);
        let v = |i: usize| g.value(terms[i]).data().to_vec();
        let (t_embed, text_embed, obj_embed, type_embed) = (v(0), v(1), v(2), v(3));
        let c = (0..t_embed.len())
            .map(|k| t_embed[k] + text_embed[k] + obj_embed[k] + type_embed[k])
            .collect();
        Ok(ConditionBundle {
            t_embed,
            text_embed,
            obj_embed,
            type_embed,
            c,
        })
    }

    /// Adds frame and agent codes to a frame-major `4N x d` token grid.
    pub fn positional_encode(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let (rows, d) = g.shape(tokens);
        if rows % AGENTS != 0 || rows / AGENTS > MAX_FRAMES || d != self.config.backbone.model_dim {
            return Err(ModelError::ShapeMismatch(format!("token grid {rows}x{d}")));
        }
        let fpe = g.param(&self.store, self.frame_pe);
        let ape = g.param(&self.store, self.agent_pe);
        let fi = g.gather_rows(fpe, Arc::new((0..rows).map(|r| Some(r / AGENTS)).collect()));
        let ai = g.gather_rows(ape, Arc::new((0..rows).map(|r| Some(r % AGENTS)).collect()));
        let x = g.add(tokens, fi);
        Ok(g.add(x, ai))
    }

    /// Predicted noise (`N x width`) for a normalized noisy composite.
    pub fn eps_graph(&self, g: &mut Graph, x_t: Var, t: usize, c: &Conditioning) -> Result<Var> {
        let (n, width) = g.shape(x_t);
        if width != self.width() || n == 0 || n > MAX_FRAMES {
            return Err(ModelError::ShapeMismatch(format!("composite {n}x{width}")));
        }
        self.schedule.check_timestep(t)?;
        self.check_condition(c, n)?;
        let s = &self.store;
        let dims = agent_dims(self.config.latent_dim);
        let offs = agent_offsets(self.config.latent_dim);
        let per_agent: Vec<Var> = (0..AGENTS)
            .map(|a| {
                let x = g.slice_cols(x_t, offs[a], dims[a]);
                self.agent_in[a].forward(g, s, x)
            })
            .collect();
        let stacked = g.concat_rows(&per_agent);
        let tokens = g.gather_rows(stacked, interleave_index(n));
        let tokens = self.positional_encode(g, tokens)?;
        let terms = self.condition_terms(g, t, c);
        let c01 = g.add(terms[0], terms[1]);
        let c23 = g.add(terms[2], terms[3]);
        let cvec = g.add(c01, c23);
        let tokens = g.add_row(tokens, cvec);
        let gamma = g.input(Tensor::new(n, 1, c.gamma.clone()));
        let ge = self.gamma_proj.forward(g, s, gamma);
        let ge = g.gather_rows(ge, Arc::new((0..n * AGENTS).map(|r| Some(r / AGENTS)).collect()));
        let tokens = g.add(tokens, ge);
        let h = self.backbone.forward(g, s, tokens);
        let agent_major = g.gather_rows(h, deinterleave_index(n));
        let outs: Vec<Var> = (0..AGENTS)
            .map(|a| {
                let rows = g.slice_rows(agent_major, a * n, n);
                self.agent_out[a].forward(g, s, rows)
            })
            .collect();
        Ok(g.concat_cols(&outs))
    }

    pub fn predict_eps(&self, x_t: &Tensor, t: usize, c: &Conditioning) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(x_t.clone());
        let out = self.eps_graph(&mut g, x, t, c)?;
        let v = g.value(out);
        if !v.is_finite() {
            return Err(ModelError::Numerical { step: t, what: "denoiser output".into() });
        }
        Ok(v.clone())
    }

    /// Noise-prediction loss on one normalized clean composite.
    pub fn loss_graph(&self, g: &mut Graph, x0: &Tensor, c: &Conditioning, t: usize, eps: &Tensor) -> Result<Var> {
        let xt = forward_noise(&self.schedule, x0, t, eps)?;
        let x = g.input(xt);
        let pred = self.eps_graph(g, x, t, c)?;
        let target = g.input(eps.clone());
        let diff = g.sub(pred, target);
        let sq = g.square(diff);
        Ok(g.mean(sq))
    }

    pub fn conditioned<'a>(&'a self, c: &'a Conditioning) -> ConditionedDenoiser<'a> {
        ConditionedDenoiser { model: self, condition: c }
    }
}

pub struct ConditionedDenoiser<'a> {
    model: &'a DiffusionModel,
    condition: &'a Conditioning,
}

impl EpsPredictor for ConditionedDenoiser<'_> {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.model.predict_eps(x_t, t, self.condition)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerNoise {
    /// `sigma_t^2` = posterior variance.
    Ancestral,
    /// `sigma_t = 0`.
    Deterministic,
}

/// Reverse chain from `x_init` (or fresh Gaussian noise) down to `x_0`.
pub fn sample_chain(
    schedule: &NoiseSchedule,
    predictor: &impl EpsPredictor,
    rows: usize,
    cols: usize,
    x_init: Option<Tensor>,
    noise: SamplerNoise,
    clip: Option<f64>,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let mut x = match x_init {
        Some(x) if x.shape() == (rows, cols) => x,
        Some(x) => return Err(ModelError::ShapeMismatch(format!("initial state {:?}", x.shape()))),
        None => Tensor::randn(rng, rows, cols, 1.0),
    };
    for t in (1..=schedule.steps()).rev() {
        let eps = predictor.predict(&x, t)?;
        if eps.shape() != x.shape() {
            return Err(ModelError::ShapeMismatch(format!("prediction {:?} at step {t}", eps.shape())));
        }
        x = match clip {
            None => {
                let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
                let inv = 1.0 / schedule.alpha(t).sqrt();
                x.zip_map(&eps, |xv, e| inv * (xv - coef * e))
            }
            Some(c) => {
                let ab = schedule.alpha_bar(t);
                let ab_prev = if t > 1 { schedule.alpha_bar(t - 1) } else { 1.0 };
                let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
                let c0 = ab_prev.sqrt() * schedule.beta(t) / (1.0 - ab);
                let ct = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                x.zip_map(&eps, |xv, e| c0 * ((xv - sn * e) / sa).clamp(-c, c) + ct * xv)
            }
        };
        if noise == SamplerNoise::Ancestral && t > 1 {
            let sigma = schedule.posterior_variance(t).sqrt();
            let z = Tensor::randn(rng, rows, cols, sigma);
            x.add_assign(&z);
        }
        if !x.is_finite() {
            return Err(ModelError::Numerical { step: t, what: "reverse chain state".into() });
        }
    }
    Ok(x)
}

/// Ancestral sample of a composite of `n` frames, returned in native units.
pub fn sample(model: &DiffusionModel, c: &Conditioning, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if n == 0 || n > MAX_FRAMES {
        return Err(ModelError::InvalidLength(format!("{n} frames, expected 1..={MAX_FRAMES}")));
    }
    let x = sample_chain(&model.schedule, &model.conditioned(c), n, model.width(), None, SamplerNoise::Ancestral, model.config.clip(), rng)?;
    Ok(model.stats.denormalize(&x))
}
