//! Single optimization steps. Each step draws its randomness from
//! `(seed, step)` alone, so a resumed run replays the same stream.

use bihoi_nn::{Adam, Graph, Tensor};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{forward_noise, CompositeStats, Conditioning, DiffusionModel, EpsPredictor, NoiseSchedule};
use crate::error::{ModelError, Result};
use crate::jointvae::{JointExample, JointLossBreakdown, JointVae};
use crate::manivae::{ManiFrame, ManiLossBreakdown, ManiVae};
use crate::pipeline::{composite_from_sample, PreparedSample};

pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Sorted minibatch indices; the whole set when `batch >= len`.
fn pick(rng: &mut impl Rng, len: usize, batch: usize) -> Vec<usize> {
    if batch == 0 || batch >= len {
        return (0..len).collect();
    }
    let mut idx = index::sample(rng, len, batch).into_vec();
    idx.sort_unstable();
    idx
}

fn finite(step: u64, value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(ModelError::Numerical {
            step: step as usize,
            what: format!("{what} loss"),
        })
    }
}

pub fn joint_step(vae: &mut JointVae, adam: &mut Adam, data: &[JointExample], batch: usize, seed: u64, step: u64) -> Result<JointLossBreakdown> {
    let mut rng = step_rng(seed, step);
    let batch: Vec<JointExample> = pick(&mut rng, data.len(), batch).into_iter().map(|i| data[i].clone()).collect();
    let eps = Tensor::randn(&mut rng, batch.len(), vae.config.latent_dim, 1.0);
    let mut g = Graph::new();
    let vars = vae.loss_graph(&mut g, &batch, &eps)?;
    let total = finite(step, g.value(vars.total).item(), "jointvae")?;
    let out = JointLossBreakdown {
        recon_nll: g.value(vars.recon_nll).item(),
        kl: g.value(vars.kl).item(),
        rec: g.value(vars.rec).item(),
        total,
    };
    let grads = g.backward(vars.total);
    adam.step(&mut vae.store, &grads)?;
    Ok(out)
}

pub fn mani_step(vae: &mut ManiVae, adam: &mut Adam, data: &[ManiFrame], batch: usize, seed: u64, step: u64) -> Result<ManiLossBreakdown> {
    let mut rng = step_rng(seed, step);
    let batch: Vec<ManiFrame> = pick(&mut rng, data.len(), batch).into_iter().map(|i| data[i].clone()).collect();
    let eps = Tensor::randn(&mut rng, batch.len(), vae.config.latent_dim, 1.0);
    let mut g = Graph::new();
    let v = vae.loss_graph(&mut g, &batch, &eps)?;
    let total = finite(step, g.value(v.total).item(), "manivae")?;
    let val = |x| g.value(x).item();
    let out = ManiLossBreakdown {
        elbo: val(v.elbo),
        mesh: val(v.mesh),
        dist: val(v.dist),
        ro: val(v.ro),
        kl: val(v.kl),
        total,
    };
    let grads = g.backward(v.total);
    adam.step(&mut vae.store, &grads)?;
    Ok(out)
}

/// A normalized clean composite with its conditioning.
#[derive(Clone, Debug)]
pub struct DiffusionExample {
    pub x0: Tensor,
    pub condition: Conditioning,
}

/// Encodes every sample through the frozen grasp VAE, fits the channel
/// normalization and returns normalized training pairs.
pub fn prepare_diffusion(mani: &ManiVae, joint: &JointVae, samples: &[PreparedSample]) -> Result<(Vec<DiffusionExample>, CompositeStats)> {
    if !joint.store.is_frozen() || !mani.store.is_frozen() {
        return Err(ModelError::Config("both VAEs must be frozen before diffusion training".into()));
    }
    let raw: Vec<Tensor> = samples.iter().map(|s| composite_from_sample(mani, s)).collect::<Result<_>>()?;
    let stats = CompositeStats::fit(&raw.iter().collect::<Vec<_>>())?;
    let data = raw
        .iter()
        .zip(samples)
        .map(|(x, s)| DiffusionExample {
            x0: stats.normalize(x),
            condition: s.conditioning(),
        })
        .collect();
    Ok((data, stats))
}

/// Mean noise-prediction loss over a minibatch; updates the parameters.
pub fn diffusion_step(model: &mut DiffusionModel, adam: &mut Adam, data: &[DiffusionExample], batch: usize, seed: u64, step: u64) -> Result<f64> {
    let mut rng = step_rng(seed, step);
    let idx = pick(&mut rng, data.len(), batch);
    let steps = model.schedule.steps();
    let mut g = Graph::new();
    let mut losses = Vec::with_capacity(idx.len());
    for i in &idx {
        let ex = &data[*i];
        let t = rng.random_range(1..=steps);
        let eps = Tensor::randn(&mut rng, ex.x0.rows(), ex.x0.cols(), 1.0);
        losses.push(model.loss_graph(&mut g, &ex.x0, &ex.condition, t, &eps)?);
    }
    let sum = losses[1..].iter().fold(losses[0], |acc, v| g.add(acc, *v));
    let loss = g.scale(sum, 1.0 / idx.len() as f64);
    let value = finite(step, g.value(loss).item(), "diffusion")?;
    let grads = g.backward(loss);
    adam.step(&mut model.store, &grads)?;
    Ok(value)
}

/// Noise-prediction MSE for one draw of `t ~ U{1..T}` and `eps ~ N(0, I)`.
pub fn noise_prediction_loss(schedule: &NoiseSchedule, predictor: &impl EpsPredictor, x0: &Tensor, rng: &mut impl Rng) -> Result<f64> {
    let t = rng.random_range(1..=schedule.steps());
    let eps = Tensor::randn(rng, x0.rows(), x0.cols(), 1.0);
    let xt = forward_noise(schedule, x0, t, &eps)?;
    let pred = predictor.predict(&xt, t)?;
    if pred.shape() != eps.shape() {
        return Err(ModelError::ShapeMismatch(format!("prediction {:?}", pred.shape())));
    }
    Ok(pred.zip_map(&eps, |a, b| (a - b) * (a - b)).sum() / eps.len() as f64)
}
