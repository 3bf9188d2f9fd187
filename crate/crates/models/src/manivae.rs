//! Frame-level conditional VAE over hand poses with the interaction-aware
//! loss stack (reconstruction, mesh, distance field, relative rotation, KL).

use std::sync::Arc;

use bihoi_core::geometry::{relative_rotation, validity_mask, DistanceField, HandModel, SkeletalHandModel, PARENTS};
use bihoi_core::{rot6d_to_matrix, HandPose, HandSide, HandState, HandType, HandTypeFlag, ObjectState, NUM_JOINTS, POSE_DIM};
use bihoi_core::types::Vec3;
use bihoi_nn::{Graph, ParamStore, Tensor, Var};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ModelError, Result};
use crate::layers::{kl_divergence, kl_rows, ResMlp};

/// Object translation, rotation and joint angle of one frame.
pub const OBJECT_STATE_DIM: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub elbo: f64,
    pub mesh: f64,
    pub dist: f64,
    pub ro: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            elbo: 1.0,
            mesh: 1.0,
            dist: 1.0,
            ro: 1.0,
            kl: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.elbo, self.mesh, self.dist, self.ro, self.kl];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(format!("loss weights must be finite and non-negative: {all:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManiVaeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub text_dim: usize,
    pub object_dim: usize,
    pub hand_points: usize,
    /// Distance-field entries count only where the target exceeds this value.
    pub contact_eps: f64,
    pub weights: LossWeights,
}

impl Default for ManiVaeConfig {
    fn default() -> Self {
        ManiVaeConfig {
            latent_dim: 64,
            hidden: 256,
            depth: 2,
            text_dim: 64,
            object_dim: 64,
            hand_points: 64,
            contact_eps: 0.0,
            weights: LossWeights::default(),
        }
    }
}

impl ManiVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.text_dim == 0 || self.object_dim == 0 || self.hand_points == 0 {
            return Err(ModelError::InvalidConfig("manivae dimensions must be positive".into()));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManiLatent {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl ManiLatent {
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

/// Decoded pose blocks; only active hands are present.
#[derive(Clone, Debug, PartialEq)]
pub struct ManiPose {
    pub left: Option<HandPose>,
    pub right: Option<HandPose>,
}

impl ManiPose {
    pub fn side(&self, side: HandSide) -> Option<&HandPose> {
        match side {
            HandSide::Left => self.left.as_ref(),
            HandSide::Right => self.right.as_ref(),
        }
    }

    pub fn blocks(&self) -> usize {
        usize::from(self.left.is_some()) + usize::from(self.right.is_some())
    }
}

/// Per-frame condition shared by encoder and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameCondition {
    pub object_state: ObjectState,
    pub object_feat: Arc<Vec<f64>>,
    pub text_feat: Arc<Vec<f64>>,
    pub hand_type: HandType,
}

impl FrameCondition {
    fn row(&self) -> Vec<f64> {
        let mut row = object_state_row(&self.object_state).to_vec();
        row.extend_from_slice(&self.object_feat);
        row.extend_from_slice(&self.text_feat);
        row.extend_from_slice(&self.hand_type.one_hot().0);
        row
    }
}

pub fn object_state_row(o: &ObjectState) -> [f64; OBJECT_STATE_DIM] {
    let mut row = [0.0; OBJECT_STATE_DIM];
    row[..3].copy_from_slice(&o.trans);
    row[3..9].copy_from_slice(&o.rot.0);
    row[9] = o.joint_angle;
    row
}

/// Supervision for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ManiFrame {
    pub hands: HandState,
    pub condition: FrameCondition,
    /// Ground-truth object points at this frame.
    pub object_points: Arc<Vec<[f64; 3]>>,
    pub field: DistanceField,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ManiLossBreakdown {
    pub elbo: f64,
    pub mesh: f64,
    pub dist: f64,
    pub ro: f64,
    pub kl: f64,
    pub total: f64,
}

impl ManiLossBreakdown {
    /// Weighted total of already computed components.
    pub fn from_components(elbo: f64, mesh: f64, dist: f64, ro: f64, kl: f64, w: &LossWeights) -> Result<Self> {
        w.validate()?;
        Ok(ManiLossBreakdown {
            elbo,
            mesh,
            dist,
            ro,
            kl,
            total: w.elbo * elbo + w.mesh * mesh + w.dist * dist + w.ro * ro + w.kl * kl,
        })
    }
}

pub struct ManiLossVars {
    pub total: Var,
    pub elbo: Var,
    pub mesh: Var,
    pub dist: Var,
    pub ro: Var,
    pub kl: Var,
}

#[derive(Clone, Debug)]
pub struct ManiVae {
    pub config: ManiVaeConfig,
    pub store: ParamStore,
    encoder: ResMlp,
    decoder: ResMlp,
    hands: [SkeletalHandModel; 2],
}

impl ManiVae {
    pub const KIND: &'static str = "manivae";

    pub fn new(config: ManiVaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cond = OBJECT_STATE_DIM + config.object_dim + config.text_dim + 3;
        let enc_in = 2 * POSE_DIM + 6 + cond;
        let h = config.hidden;
        let encoder = ResMlp::new(&mut store, "enc", enc_in, h, 2 * config.latent_dim, config.depth, &mut rng);
        let decoder = ResMlp::new(&mut store, "dec", config.latent_dim + cond, h, 2 * POSE_DIM, config.depth, &mut rng);
        let hands = [
            SkeletalHandModel::new(HandSide::Left, config.hand_points),
            SkeletalHandModel::new(HandSide::Right, config.hand_points),
        ];
        Ok(ManiVae {
            config,
            store,
            encoder,
            decoder,
            hands,
        })
    }

    pub fn hand_model(&self, side: HandSide) -> &SkeletalHandModel {
        &self.hands[side.index()]
    }

    fn check_condition(&self, c: &FrameCondition) -> Result<()> {
        if c.object_feat.len() != self.config.object_dim || c.text_feat.len() != self.config.text_dim {
            return Err(ModelError::ShapeMismatch("condition feature width".into()));
        }
        ensure_finite(&c.object_feat, "object feature")?;
        ensure_finite(&c.text_feat, "text feature")?;
        ensure_finite(&object_state_row(&c.object_state), "object state")
    }

    fn encoder_row(hands: &HandState, c: &FrameCondition) -> Vec<f64> {
        let mut row = Vec::with_capacity(2 * POSE_DIM + 6);
        for side in HandSide::BOTH {
            if c.hand_type.is_active(side) {
                row.extend_from_slice(&hands.pose(side).to_flat());
            } else {
                row.extend(std::iter::repeat_n(0.0, POSE_DIM));
            }
        }
        for side in HandSide::BOTH {
            if c.hand_type.is_active(side) {
                row.extend_from_slice(hands.trans(side));
            } else {
                row.extend([0.0; 3]);
            }
        }
        row.extend(c.row());
        row
    }

    /// Posterior rows for a batch of frames.
    pub fn encode_graph(&self, g: &mut Graph, frames: &[(&HandState, &FrameCondition)]) -> Result<(Var, Var)> {
        let mut data = Vec::new();
        for (h, c) in frames {
            self.check_condition(c)?;
            let row = Self::encoder_row(h, c);
            ensure_finite(&row, "hand state")?;
            data.extend(row);
        }
        let width = data.len() / frames.len().max(1);
        let x = g.input(Tensor::new(frames.len(), width, data));
        let out = self.encoder.forward(g, &self.store, x);
        let d = self.config.latent_dim;
        Ok((g.slice_cols(out, 0, d), g.slice_cols(out, d, d)))
    }

    /// Raw pose outputs (`B x 192`, left block first) for latents `z`.
    pub fn decode_graph(&self, g: &mut Graph, z: Var, conds: &[&FrameCondition]) -> Result<Var> {
        let mut data = Vec::new();
        for c in conds {
            self.check_condition(c)?;
            data.extend(c.row());
        }
        let width = data.len() / conds.len().max(1);
        let c = g.input(Tensor::new(conds.len(), width, data));
        let x = g.concat_cols(&[z, c]);
        Ok(self.decoder.forward(g, &self.store, x))
    }

    pub fn encode(&self, hands: &HandState, condition: &FrameCondition, flag: &HandTypeFlag) -> Result<ManiLatent> {
        let hand_type = flag.hand_type()?;
        let c = FrameCondition {
            hand_type,
            ..condition.clone()
        };
        let mut g = Graph::new();
        let (mu, logvar) = self.encode_graph(&mut g, &[(hands, &c)])?;
        Ok(ManiLatent {
            mu: g.value(mu).data().to_vec(),
            logvar: g.value(logvar).data().to_vec(),
        })
    }

    /// Posterior means for many frames, `B x d_M`.
    pub fn encode_means(&self, frames: &[(&HandState, &FrameCondition)]) -> Result<Tensor> {
        let mut g = Graph::new();
        let (mu, _) = self.encode_graph(&mut g, frames)?;
        Ok(g.value(mu).clone())
    }

    /// Raw decoder rows for a batch of latents (`B x d_M`).
    pub fn decode_raw(&self, z: &Tensor, conds: &[&FrameCondition]) -> Result<Tensor> {
        if z.cols() != self.config.latent_dim || z.rows() != conds.len() {
            return Err(ModelError::ShapeMismatch(format!("latents {:?} for {} frames", z.shape(), conds.len())));
        }
        if !z.is_finite() {
            return Err(ModelError::InvalidInput("latent contains NaN or infinity".into()));
        }
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let out = self.decode_graph(&mut g, zv, conds)?;
        Ok(g.value(out).clone())
    }

    /// Pose blocks of the active hands, each row re-orthonormalized.
    pub fn decode(&self, z: &[f64], condition: &FrameCondition, flag: &HandTypeFlag) -> Result<ManiPose> {
        let hand_type = flag.hand_type()?;
        let c = FrameCondition {
            hand_type,
            ..condition.clone()
        };
        let raw = self.decode_raw(&Tensor::row_vector(z.to_vec()), &[&c])?;
        pose_from_row(raw.row(0), hand_type)
    }

    /// Batch-mean weighted loss with reparameterization noise `eps`.
    pub fn loss_graph(&self, g: &mut Graph, frames: &[ManiFrame], eps: &Tensor) -> Result<ManiLossVars> {
        let b = frames.len();
        let d = self.config.latent_dim;
        if b == 0 || eps.shape() != (b, d) {
            return Err(ModelError::ShapeMismatch(format!("noise {:?} for batch {b}", eps.shape())));
        }
        let pairs: Vec<(&HandState, &FrameCondition)> = frames.iter().map(|f| (&f.hands, &f.condition)).collect();
        let (mu, logvar) = self.encode_graph(g, &pairs)?;
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let e = g.input(eps.clone());
        let noise = g.mul(std, e);
        let z = g.add(mu, noise);
        let conds: Vec<&FrameCondition> = frames.iter().map(|f| &f.condition).collect();
        let pred = self.decode_graph(g, z, &conds)?;
        let inv_b = 1.0 / b as f64;

        let mut target = Tensor::zeros(b, 2 * POSE_DIM);
        let mut block_mask = Tensor::zeros(b, 2 * POSE_DIM);
        for (r, f) in frames.iter().enumerate() {
            for side in HandSide::BOTH {
                if f.condition.hand_type.is_active(side) {
                    let off = side.index() * POSE_DIM;
                    target.row_mut(r)[off..off + POSE_DIM].copy_from_slice(&f.hands.pose(side).to_flat());
                    block_mask.row_mut(r)[off..off + POSE_DIM].iter_mut().for_each(|m| *m = 1.0);
                }
            }
        }
        let t = g.input(target);
        let m = g.input(block_mask);
        let diff = g.sub(pred, t);
        let diff = g.mul(diff, m);
        let sq = g.square(diff);
        let recon = g.sum(sq);
        let recon = g.scale(recon, 0.5 * inv_b);
        let kl = kl_rows(g, mu, logvar);
        let kl = g.sum(kl);
        let kl = g.scale(kl, inv_b);
        let elbo = g.add(recon, kl);

        let targets = Arc::new(frames.iter().map(|f| f.object_points.as_ref().clone()).collect::<Vec<_>>());
        let mut mesh_terms = Vec::new();
        let mut dist_terms = Vec::new();
        let mut ro_terms = Vec::new();
        for side in HandSide::BOTH {
            let model = &self.hands[side.index()];
            let v = model.num_points();
            let active = Tensor::new(
                b,
                1,
                frames.iter().map(|f| f64::from(u8::from(f.condition.hand_type.is_active(side)))).collect(),
            );
            let active = g.input(active);
            let pose = g.slice_cols(pred, side.index() * POSE_DIM, POSE_DIM);
            let trans = g.input(Tensor::new(b, 3, frames.iter().flat_map(|f| *f.hands.trans(side)).collect()));
            let pts = fk_graph(g, model, pose, trans);

            let mut gt_pts = Vec::with_capacity(b * 3 * v);
            let mut gt_field = Vec::with_capacity(b * v);
            let mut field_mask = Vec::with_capacity(b * v);
            let mut rel_gt = Vec::with_capacity(b * 9);
            let mut obj_t = Vec::with_capacity(b * 9);
            for f in frames {
                let pose = f.hands.pose(side);
                let posed = model.forward(pose, f.hands.trans(side))?;
                gt_pts.extend(posed.iter().flat_map(|p| [p.x, p.y, p.z]));
                let field = f.field.hand(side);
                if field.len() != v {
                    return Err(ModelError::ShapeMismatch(format!(
                        "distance field of {} entries for a {v}-point hand",
                        field.len()
                    )));
                }
                gt_field.extend_from_slice(field);
                field_mask.extend(validity_mask(field, self.config.contact_eps));
                let r_obj = rot6d_to_matrix(&f.condition.object_state.rot)?;
                let r_hand = rot6d_to_matrix(pose.global())?;
                rel_gt.extend_from_slice(relative_rotation(&r_hand, &r_obj)?.as_slice());
                obj_t.extend_from_slice(r_obj.transpose().as_slice());
            }
            let gt = g.input(Tensor::new(b, 3 * v, gt_pts));
            let dp = g.sub(pts, gt);
            let dp = g.square(dp);
            let dp = g.mul_col(dp, active);
            mesh_terms.push(g.sum(dp));

            let dist = g.nearest_distance(pts, targets.clone());
            let dgt = g.input(Tensor::new(b, v, gt_field));
            let fm = g.input(Tensor::new(b, v, field_mask));
            let dd = g.sub(dist, dgt);
            let dd = g.mul(dd, fm);
            let dd = g.square(dd);
            let dd = g.mul_col(dd, active);
            dist_terms.push(g.sum(dd));

            let rot6 = g.slice_cols(pose, 0, 6);
            let r_hand = gram_schmidt_graph(g, rot6);
            let ot = g.input(Tensor::new(b, 9, obj_t));
            let rel = g.mat3_mul(ot, r_hand);
            let rg = g.input(Tensor::new(b, 9, rel_gt));
            let dr = g.sub(rel, rg);
            let dr = g.square(dr);
            let dr = g.mul_col(dr, active);
            ro_terms.push(g.sum(dr));
        }
        let sum2 = |g: &mut Graph, t: &[Var]| {
            let s = g.add(t[0], t[1]);
            g.scale(s, inv_b)
        };
        let mesh = sum2(g, &mesh_terms);
        let dist = sum2(g, &dist_terms);
        let ro = sum2(g, &ro_terms);

        let w = &self.config.weights;
        let parts = [(elbo, w.elbo), (mesh, w.mesh), (dist, w.dist), (ro, w.ro), (kl, w.kl)];
        let scaled: Vec<Var> = parts.iter().map(|(v, wt)| g.scale(*v, *wt)).collect();
        let total = scaled[1..].iter().fold(scaled[0], |acc, v| g.add(acc, *v));
        Ok(ManiLossVars {
            total,
            elbo,
            mesh,
            dist,
            ro,
            kl,
        })
    }
}

/// Re-orthonormalized pose blocks of the active hands from a `192`-wide row.
pub fn pose_from_row(row: &[f64], hand_type: HandType) -> Result<ManiPose> {
    let block = |side: HandSide| -> Result<Option<HandPose>> {
        if !hand_type.is_active(side) {
            return Ok(None);
        }
        let off = side.index() * POSE_DIM;
        Ok(Some(HandPose::from_flat(&row[off..off + POSE_DIM])?.canonical()?))
    };
    Ok(ManiPose {
        left: block(HandSide::Left)?,
        right: block(HandSide::Right)?,
    })
}

/// Gram-Schmidt decoding of `B x 6` rows into column-major `B x 9` rotations.
pub fn gram_schmidt_graph(g: &mut Graph, rot6: Var) -> Var {
    let a1 = g.slice_cols(rot6, 0, 3);
    let a2 = g.slice_cols(rot6, 3, 3);
    let b1 = g.normalize_rows(a1);
    let prod = g.mul(b1, a2);
    let dot = g.sum_cols(prod);
    let proj = g.mul_col(b1, dot);
    let u2 = g.sub(a2, proj);
    let b2 = g.normalize_rows(u2);
    let b3 = g.cross_rows(b1, b2);
    g.concat_cols(&[b1, b2, b3])
}

/// Differentiable forward kinematics: `pose` is `B x 96`, `trans` `B x 3`;
/// returns `B x 3V` point coordinates.
pub fn fk_graph(g: &mut Graph, model: &SkeletalHandModel, pose: Var, trans: Var) -> Var {
    let b = g.shape(pose).0;
    let repeat = |v: [f64; 3]| Tensor::from_fn(b, 3, |_, c| v[c]);
    let mut rot: Vec<Var> = Vec::with_capacity(NUM_JOINTS);
    let mut pos: Vec<Var> = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let r6 = g.slice_cols(pose, 6 * j, 6);
        let local = gram_schmidt_graph(g, r6);
        match PARENTS[j] {
            None => {
                rot.push(local);
                pos.push(trans);
            }
            Some(p) => {
                let off = model.bone_offset(j);
                let off = g.input(repeat([off.x, off.y, off.z]));
                let moved = g.mat3_vec(rot[p], off);
                pos.push(g.add(pos[p], moved));
                rot.push(g.mat3_mul(rot[p], local));
            }
        }
    }
    let points: Vec<Var> = model
        .point_bone()
        .iter()
        .zip(model.point_offsets())
        .map(|(&bone, q)| {
            let q = g.input(repeat([q.x, q.y, q.z]));
            let moved = g.mat3_vec(rot[bone], q);
            g.add(pos[bone], moved)
        })
        .collect();
    g.concat_cols(&points)
}

fn check_frames<T>(a: &[T], b: &[T], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(ModelError::ShapeMismatch(format!("{what}: {} vs {} frames", a.len(), b.len())));
    }
    Ok(())
}

/// Mean over frames of the summed squared point distances between posed hands.
pub fn mesh_loss(pred: &[(HandPose, Vec3)], gt: &[(HandPose, Vec3)], model: &impl HandModel) -> Result<f64> {
    check_frames(pred, gt, "mesh loss")?;
    if pred.is_empty() {
        return Err(ModelError::ShapeMismatch("mesh loss over zero frames".into()));
    }
    let mut total = 0.0;
    for ((pp, pt), (gp, gtr)) in pred.iter().zip(gt) {
        let a = model.forward(pp, pt)?;
        let b = model.forward(gp, gtr)?;
        total += a.iter().zip(&b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>();
    }
    Ok(total / pred.len() as f64)
}

/// `(1/N) sum_i sum_h |M ⊙ (D - D*)|^2`.
pub fn dist_loss(pred: &[DistanceField], gt: &[DistanceField], mask: &[DistanceField]) -> Result<f64> {
    check_frames(pred, gt, "distance loss")?;
    check_frames(pred, mask, "distance mask")?;
    if pred.is_empty() {
        return Err(ModelError::ShapeMismatch("distance loss over zero frames".into()));
    }
    let mut total = 0.0;
    for ((p, t), m) in pred.iter().zip(gt).zip(mask) {
        for side in HandSide::BOTH {
            let (p, t, m) = (p.hand(side), t.hand(side), m.hand(side));
            if p.len() != t.len() || p.len() != m.len() {
                return Err(ModelError::ShapeMismatch("distance field widths differ".into()));
            }
            total += p
                .iter()
                .zip(t)
                .zip(m)
                .map(|((a, b), w)| (w * (a - b)).powi(2))
                .sum::<f64>();
        }
    }
    Ok(total / pred.len() as f64)
}

/// `(1/N) sum_i sum_h |R_o^T R_h - R_o*^T R_h*|_F^2`; hand rotations are `[left, right]`.
pub fn ro_loss(
    r_hand: &[[Matrix3<f64>; 2]],
    r_obj: &[Matrix3<f64>],
    r_hand_gt: &[[Matrix3<f64>; 2]],
    r_obj_gt: &[Matrix3<f64>],
) -> Result<f64> {
    check_frames(r_hand, r_hand_gt, "rotation loss")?;
    check_frames(r_obj, r_obj_gt, "rotation loss")?;
    if r_obj.len() != r_hand.len() {
        return Err(ModelError::ShapeMismatch(format!("rotation loss: {} vs {} frames", r_hand.len(), r_obj.len())));
    }
    if r_hand.is_empty() {
        return Err(ModelError::ShapeMismatch("rotation loss over zero frames".into()));
    }
    let mut total = 0.0;
    for i in 0..r_hand.len() {
        for h in 0..2 {
            let a = relative_rotation(&r_hand[i][h], &r_obj[i])?;
            let b = relative_rotation(&r_hand_gt[i][h], &r_obj_gt[i])?;
            total += (a - b).norm_squared();
        }
    }
    Ok(total / r_hand.len() as f64)
}

/// KL of the posterior to the standard normal (the separately weighted term).
pub fn kl_loss(latent: &ManiLatent) -> f64 {
    kl_divergence(&latent.mu, &latent.logvar)
}
