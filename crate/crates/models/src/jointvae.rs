//! Conditional VAE over the joint-angle trajectory of the articulated object.

use bihoi_core::MAX_FRAMES;
use bihoi_nn::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ModelError, Result};
use crate::layers::{kl_divergence, kl_rows, ResMlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointVaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub text_dim: usize,
    pub object_dim: usize,
    pub lambda_elbo: f64,
    pub lambda_rec: f64,
}

impl Default for JointVaeConfig {
    fn default() -> Self {
        JointVaeConfig {
            latent_dim: 32,
            hidden: 256,
            depth: 2,
            text_dim: 64,
            object_dim: 64,
            lambda_elbo: 1.0,
            lambda_rec: 1.0,
        }
    }
}

impl JointVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.text_dim == 0 || self.object_dim == 0 {
            return Err(ModelError::InvalidConfig("jointvae dimensions must be positive".into()));
        }
        if !(self.lambda_elbo >= 0.0 && self.lambda_rec >= 0.0) {
            return Err(ModelError::InvalidConfig("jointvae loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian posterior over the trajectory latent.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLatent {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl JointLatent {
    /// Reparameterized draw `mu + exp(logvar / 2) * eps`.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.logvar)
            .map(|(m, lv)| {
                let e: f64 = StandardNormal.sample(rng);
                m + (0.5 * lv).exp() * e
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointTrajectory {
    pub gamma: Vec<f64>,
}

/// One training example: a trajectory with its condition features.
#[derive(Clone, Debug, PartialEq)]
pub struct JointExample {
    pub gamma: Vec<f64>,
    pub object: Vec<f64>,
    pub text: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JointLossBreakdown {
    /// Unit-variance Gaussian negative log-likelihood, `0.5 * sum (g - g_hat)^2`.
    pub recon_nll: f64,
    pub kl: f64,
    /// Squared error `sum (g - g_hat)^2`.
    pub rec: f64,
    pub total: f64,
}

/// Loss of one trajectory given its reconstruction and posterior.
pub fn jointvae_loss(
    gamma: &[f64],
    gamma_hat: &[f64],
    latent: &JointLatent,
    lambda_elbo: f64,
    lambda_rec: f64,
) -> Result<JointLossBreakdown> {
    if gamma.len() != gamma_hat.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "trajectory of {} frames vs reconstruction of {}",
            gamma.len(),
            gamma_hat.len()
        )));
    }
    let rec: f64 = gamma.iter().zip(gamma_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    let recon_nll = 0.5 * rec;
    let kl = kl_divergence(&latent.mu, &latent.logvar);
    Ok(JointLossBreakdown {
        recon_nll,
        kl,
        rec,
        total: lambda_elbo * (recon_nll + kl) + lambda_rec * rec,
    })
}

/// Graph handles of a batched loss evaluation.
pub struct JointLossVars {
    pub total: Var,
    pub recon_nll: Var,
    pub kl: Var,
    pub rec: Var,
}

#[derive(Clone, Debug)]
pub struct JointVae {
    pub config: JointVaeConfig,
    pub store: ParamStore,
    encoder: ResMlp,
    decoder: ResMlp,
}

impl JointVae {
    pub const KIND: &'static str = "jointvae";

    pub fn new(config: JointVaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cond = config.object_dim + config.text_dim + 1;
        let h = config.hidden;
        let encoder = ResMlp::new(&mut store, "enc", 2 * MAX_FRAMES + cond, h, 2 * config.latent_dim, config.depth, &mut rng);
        let decoder = ResMlp::new(&mut store, "dec", config.latent_dim + cond, h, MAX_FRAMES, config.depth, &mut rng);
        Ok(JointVae {
            config,
            store,
            encoder,
            decoder,
        })
    }

    fn check_features(&self, object: &[f64], text: &[f64]) -> Result<()> {
        if object.len() != self.config.object_dim || text.len() != self.config.text_dim {
            return Err(ModelError::ShapeMismatch(format!(
                "expected object/text features of {}/{}, got {}/{}",
                self.config.object_dim,
                self.config.text_dim,
                object.len(),
                text.len()
            )));
        }
        ensure_finite(object, "object feature")?;
        ensure_finite(text, "text feature")
    }

    fn condition_row(object: &[f64], text: &[f64], n: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(object.len() + text.len() + 1);
        row.extend_from_slice(object);
        row.extend_from_slice(text);
        row.push(n as f64 / MAX_FRAMES as f64);
        row
    }

    fn encoder_row(ex: &JointExample) -> Vec<f64> {
        let n = ex.gamma.len();
        let mut row = vec![0.0; 2 * MAX_FRAMES];
        row[..n].copy_from_slice(&ex.gamma);
        row[MAX_FRAMES..MAX_FRAMES + n].iter_mut().for_each(|m| *m = 1.0);
        row.extend(Self::condition_row(&ex.object, &ex.text, n));
        row
    }

    fn check_example(&self, ex: &JointExample) -> Result<()> {
        if ex.gamma.is_empty() || ex.gamma.len() > MAX_FRAMES {
            return Err(ModelError::InvalidLength(format!("{} frames, expected 1..={MAX_FRAMES}", ex.gamma.len())));
        }
        ensure_finite(&ex.gamma, "joint trajectory")?;
        self.check_features(&ex.object, &ex.text)
    }

    /// Posterior `(mu, logvar)` rows for a batch, `B x d_J` each.
    pub fn encode_graph(&self, g: &mut Graph, batch: &[JointExample]) -> Result<(Var, Var)> {
        let width = 2 * MAX_FRAMES + self.config.object_dim + self.config.text_dim + 1;
        let mut data = Vec::with_capacity(batch.len() * width);
        for ex in batch {
            self.check_example(ex)?;
            data.extend(Self::encoder_row(ex));
        }
        let x = g.input(Tensor::new(batch.len(), width, data));
        let out = self.encoder.forward(g, &self.store, x);
        let d = self.config.latent_dim;
        Ok((g.slice_cols(out, 0, d), g.slice_cols(out, d, d)))
    }

    /// Unclamped trajectories, `B x 150`, for latents `z` (`B x d_J`).
    pub fn decode_graph(&self, g: &mut Graph, z: Var, conds: &[(&[f64], &[f64], usize)]) -> Result<Var> {
        let width = self.config.object_dim + self.config.text_dim + 1;
        let mut data = Vec::with_capacity(conds.len() * width);
        for (object, text, n) in conds {
            self.check_features(object, text)?;
            data.extend(Self::condition_row(object, text, *n));
        }
        let c = g.input(Tensor::new(conds.len(), width, data));
        let x = g.concat_cols(&[z, c]);
        Ok(self.decoder.forward(g, &self.store, x))
    }

    pub fn encode(&self, gamma: &[f64], object: &[f64], text: &[f64]) -> Result<JointLatent> {
        let mut g = Graph::new();
        let ex = JointExample {
            gamma: gamma.to_vec(),
            object: object.to_vec(),
            text: text.to_vec(),
        };
        let (mu, logvar) = self.encode_graph(&mut g, std::slice::from_ref(&ex))?;
        Ok(JointLatent {
            mu: g.value(mu).data().to_vec(),
            logvar: g.value(logvar).data().to_vec(),
        })
    }

    /// Decoder output truncated to `n` frames, before clamping.
    pub fn decode_raw(&self, z: &[f64], object: &[f64], text: &[f64], n: usize) -> Result<Vec<f64>> {
        if n == 0 || n > MAX_FRAMES {
            return Err(ModelError::InvalidLength(format!("{n} frames, expected 1..={MAX_FRAMES}")));
        }
        if z.len() != self.config.latent_dim {
            return Err(ModelError::ShapeMismatch(format!("latent of {} values, expected {}", z.len(), self.config.latent_dim)));
        }
        ensure_finite(z, "latent")?;
        let mut g = Graph::new();
        let zv = g.input(Tensor::row_vector(z.to_vec()));
        let out = self.decode_graph(&mut g, zv, &[(object, text, n)])?;
        Ok(g.value(out).data()[..n].to_vec())
    }

    /// Trajectory of `n` frames clamped to `limits`.
    pub fn decode(&self, z: &[f64], object: &[f64], text: &[f64], n: usize, limits: (f64, f64)) -> Result<JointTrajectory> {
        let raw = self.decode_raw(z, object, text, n)?;
        Ok(JointTrajectory {
            gamma: raw.into_iter().map(|v| v.clamp(limits.0, limits.1)).collect(),
        })
    }

    /// Batch-mean loss with reparameterization noise `eps` (`B x d_J`).
    pub fn loss_graph(&self, g: &mut Graph, batch: &[JointExample], eps: &Tensor) -> Result<JointLossVars> {
        let b = batch.len();
        if eps.shape() != (b, self.config.latent_dim) {
            return Err(ModelError::ShapeMismatch(format!("noise {:?} for batch {b}", eps.shape())));
        }
        let (mu, logvar) = self.encode_graph(g, batch)?;
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let e = g.input(eps.clone());
        let noise = g.mul(std, e);
        let z = g.add(mu, noise);
        let conds: Vec<(&[f64], &[f64], usize)> = batch
            .iter()
            .map(|ex| (ex.object.as_slice(), ex.text.as_slice(), ex.gamma.len()))
            .collect();
        let out = self.decode_graph(g, z, &conds)?;
        let mut target = Tensor::zeros(b, MAX_FRAMES);
        let mut mask = Tensor::zeros(b, MAX_FRAMES);
        for (r, ex) in batch.iter().enumerate() {
            target.row_mut(r)[..ex.gamma.len()].copy_from_slice(&ex.gamma);
            mask.row_mut(r)[..ex.gamma.len()].iter_mut().for_each(|m| *m = 1.0);
        }
        let t = g.input(target);
        let m = g.input(mask);
        let diff = g.sub(out, t);
        let diff = g.mul(diff, m);
        let sq = g.square(diff);
        let rec_sum = g.sum(sq);
        let inv_b = 1.0 / b as f64;
        let rec = g.scale(rec_sum, inv_b);
        let recon_nll = g.scale(rec, 0.5);
        let kl_per = kl_rows(g, mu, logvar);
        let kl_sum = g.sum(kl_per);
        let kl = g.scale(kl_sum, inv_b);
        let elbo = g.add(recon_nll, kl);
        let elbo = g.scale(elbo, self.config.lambda_elbo);
        let rec_w = g.scale(rec, self.config.lambda_rec);
        let total = g.add(elbo, rec_w);
        Ok(JointLossVars { total, recon_nll, kl, rec })
    }
}
