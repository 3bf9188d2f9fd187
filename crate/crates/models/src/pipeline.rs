//! Dataset preparation, composite encoding, output assembly and the
//! end-to-end generator.

use std::sync::Arc;

use bihoi_core::data::{Dataset, EmbeddingProvider, Sample};
use bihoi_core::geometry::{articulate_object, ArticulatedObjectModel};
use bihoi_core::{HandPose, HandState, HandType, MotionSequence, ObjectState, Rotation6D, MAX_FRAMES};
use bihoi_nn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::{agent_dims, sample, Conditioning, DiffusionModel};
use crate::error::{ModelError, Result};
use crate::jointvae::{JointExample, JointTrajectory, JointVae};
use crate::manivae::{pose_from_row, FrameCondition, ManiFrame, ManiVae};

/// A dataset sample with its condition features attached.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample: Sample,
    pub text: Arc<Vec<f64>>,
    pub object: Arc<Vec<f64>>,
}

pub fn prepare(dataset: &Dataset, embedder: &dyn EmbeddingProvider) -> Result<Vec<PreparedSample>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            Ok(PreparedSample {
                text: Arc::new(embedder.embed_text(&s.instruction)?),
                object: Arc::new(embedder.embed_object(&s.object)),
                sample: s.clone(),
            })
        })
        .collect()
}

impl PreparedSample {
    pub fn joint_example(&self) -> JointExample {
        JointExample {
            gamma: self.sample.sequence.joint_angles(),
            object: self.object.to_vec(),
            text: self.text.to_vec(),
        }
    }

    pub fn frame_conditions(&self) -> Vec<FrameCondition> {
        self.sample
            .sequence
            .objects()
            .iter()
            .map(|o| FrameCondition {
                object_state: *o,
                object_feat: self.object.clone(),
                text_feat: self.text.clone(),
                hand_type: self.sample.hand_type,
            })
            .collect()
    }

    pub fn mani_frames(&self) -> Result<Vec<ManiFrame>> {
        let seq = &self.sample.sequence;
        self.frame_conditions()
            .into_iter()
            .enumerate()
            .map(|(i, condition)| {
                let pts = articulate_object(&self.sample.object, &seq.objects()[i])?;
                Ok(ManiFrame {
                    hands: seq.hands()[i].clone(),
                    condition,
                    object_points: Arc::new(pts.iter().map(|p| [p.x, p.y, p.z]).collect()),
                    field: self.sample.fields[i].clone(),
                })
            })
            .collect()
    }

    /// Diffusion conditioning with the ground-truth joint trajectory as prior.
    pub fn conditioning(&self) -> Conditioning {
        Conditioning {
            text: self.text.clone(),
            object: self.object.clone(),
            hand_type: self.sample.hand_type,
            gamma: self.sample.sequence.joint_angles(),
        }
    }
}

fn require_frozen(mani: &ManiVae) -> Result<()> {
    if mani.store.is_frozen() {
        Ok(())
    } else {
        Err(ModelError::Config("the grasp VAE must be frozen before diffusion training".into()))
    }
}

/// Native-unit composite rows `[z^M | T_l T_r | O^α | O^β]` for a sequence.
pub fn build_composite(mani: &ManiVae, hands: &[HandState], conds: &[FrameCondition]) -> Result<Tensor> {
    require_frozen(mani)?;
    if hands.len() != conds.len() || hands.is_empty() {
        return Err(ModelError::ShapeMismatch(format!("{} hand frames vs {} conditions", hands.len(), conds.len())));
    }
    let pairs: Vec<(&HandState, &FrameCondition)> = hands.iter().zip(conds).collect();
    let z = mani.encode_means(&pairs)?;
    let width: usize = agent_dims(mani.config.latent_dim).iter().sum();
    let mut out = Tensor::zeros(hands.len(), width);
    for (i, (h, c)) in pairs.iter().enumerate() {
        let row = out.row_mut(i);
        let d = mani.config.latent_dim;
        row[..d].copy_from_slice(z.row(i));
        row[d..d + 3].copy_from_slice(&h.trans_left);
        row[d + 3..d + 6].copy_from_slice(&h.trans_right);
        row[d + 6..d + 9].copy_from_slice(&c.object_state.trans);
        row[d + 9..d + 15].copy_from_slice(&c.object_state.rot.0);
    }
    Ok(out)
}

pub fn composite_from_sample(mani: &ManiVae, s: &PreparedSample) -> Result<Tensor> {
    build_composite(mani, s.sample.sequence.hands(), &s.frame_conditions())
}

/// Static conditions needed to turn a composite back into a sequence.
#[derive(Clone, Debug)]
pub struct AssemblyCondition {
    pub text: Arc<Vec<f64>>,
    pub object: Arc<Vec<f64>>,
    pub hand_type: HandType,
    pub limits: (f64, f64),
}

/// Decodes poses from the latent channel and combines them with the global
/// channels and the joint trajectory.
pub fn assemble_output(mani: &ManiVae, x0: &Tensor, gamma_hat: &JointTrajectory, cond: &AssemblyCondition) -> Result<MotionSequence> {
    let n = x0.rows();
    let d = mani.config.latent_dim;
    if gamma_hat.gamma.len() != n {
        return Err(ModelError::ShapeMismatch(format!("{} joint angles for {n} frames", gamma_hat.gamma.len())));
    }
    if x0.cols() != agent_dims(d).iter().sum::<usize>() {
        return Err(ModelError::ShapeMismatch(format!("composite width {}", x0.cols())));
    }
    if !x0.is_finite() {
        return Err(ModelError::Assembly("composite contains NaN or infinity".into()));
    }
    let assembly = |e: bihoi_core::CoreError| ModelError::Assembly(e.to_string());
    let mut objects = Vec::with_capacity(n);
    for i in 0..n {
        let row = x0.row(i);
        let rot = Rotation6D::from_slice(&row[d + 9..d + 15]).and_then(|r| r.canonical()).map_err(assembly)?;
        objects.push(ObjectState {
            trans: [row[d + 6], row[d + 7], row[d + 8]],
            rot,
            joint_angle: gamma_hat.gamma[i],
        });
    }
    let conds: Vec<FrameCondition> = objects
        .iter()
        .map(|o| FrameCondition {
            object_state: *o,
            object_feat: cond.object.clone(),
            text_feat: cond.text.clone(),
            hand_type: cond.hand_type,
        })
        .collect();
    let z = x0.slice_cols(0, d);
    let raw = mani.decode_raw(&z, &conds.iter().collect::<Vec<_>>())?;
    let mut hands = Vec::with_capacity(n);
    for i in 0..n {
        let row = x0.row(i);
        let pose = pose_from_row(raw.row(i), cond.hand_type).map_err(|e| ModelError::Assembly(e.to_string()))?;
        hands.push(HandState {
            trans_left: [row[d], row[d + 1], row[d + 2]],
            trans_right: [row[d + 3], row[d + 4], row[d + 5]],
            pose_left: pose.left.unwrap_or_else(HandPose::identity),
            pose_right: pose.right.unwrap_or_else(HandPose::identity),
        });
    }
    let seq = MotionSequence::new(hands, objects).map_err(assembly)?;
    seq.validate(cond.limits).map_err(assembly)?;
    Ok(seq)
}

/// Frozen models chained for generation.
#[derive(Clone, Debug)]
pub struct Generator {
    pub joint: JointVae,
    pub mani: ManiVae,
    pub diffusion: DiffusionModel,
}

impl Generator {
    pub fn new(mut joint: JointVae, mut mani: ManiVae, mut diffusion: DiffusionModel) -> Result<Self> {
        if mani.config.latent_dim != diffusion.config.latent_dim {
            return Err(ModelError::InvalidConfig("grasp latent width differs between VAE and diffusion".into()));
        }
        joint.store.freeze();
        mani.store.freeze();
        diffusion.store.freeze();
        Ok(Generator { joint, mani, diffusion })
    }

    /// Joint prior from a standard-normal latent, then the diffusion chain,
    /// then assembly. All randomness comes from `seed`.
    pub fn generate(
        &self,
        instruction: &str,
        object: &ArticulatedObjectModel,
        hand_type: HandType,
        n: usize,
        seed: u64,
        embedder: &dyn EmbeddingProvider,
    ) -> Result<MotionSequence> {
        if n == 0 || n > MAX_FRAMES {
            return Err(ModelError::InvalidLength(format!("{n} frames, expected 1..={MAX_FRAMES}")));
        }
        let text = Arc::new(embedder.embed_text(instruction)?);
        let obj = Arc::new(embedder.embed_object(object));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..self.joint.config.latent_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let gamma_hat = self.joint.decode(&z, &obj, &text, n, object.limits())?;
        let cond = Conditioning {
            text: text.clone(),
            object: obj.clone(),
            hand_type,
            gamma: gamma_hat.gamma.clone(),
        };
        let x0 = sample(&self.diffusion, &cond, n, &mut rng)?;
        assemble_output(
            &self.mani,
            &x0,
            &gamma_hat,
            &AssemblyCondition {
                text,
                object: obj,
                hand_type,
                limits: object.limits(),
            },
        )
    }
}
