//! Procedural hand-object manipulation sequences.
//!
//! Four task families split by hand count and articulation: bimanual or
//! single-hand, articulated (hinged lid or door) or rigid. Hands are attached
//! to grasp frames on the object parts, so they follow the object and the
//! moving part; finger curl tightens as the joint opens.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::geometry::{
    articulate_object, distance_field, ArticulatedObjectModel, DistanceField, HandModel,
    SkeletalHandModel, DEFAULT_HAND_POINTS, DEFAULT_OBJECT_POINTS,
};
use crate::rotation::{matrix_to_rot6d, rot_x, rot_y, rot_z};
use crate::types::{
    check_length, HandPose, HandSide, HandState, HandType, MotionSequence, ObjectState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    BiArt,
    BiRigid,
    SingleArt,
    SingleRigid,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::BiArt, Family::BiRigid, Family::SingleArt, Family::SingleRigid];

    pub fn bit(self) -> u8 {
        1 << self.index()
    }

    pub fn index(self) -> usize {
        match self {
            Family::BiArt => 0,
            Family::BiRigid => 1,
            Family::SingleArt => 2,
            Family::SingleRigid => 3,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Family::ALL
            .get(i)
            .copied()
            .ok_or_else(|| CoreError::Parse(format!("family index {i}")))
    }

    pub fn is_bimanual(self) -> bool {
        matches!(self, Family::BiArt | Family::BiRigid)
    }

    pub fn is_articulated(self) -> bool {
        matches!(self, Family::BiArt | Family::SingleArt)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::BiArt => "bi-art",
            Family::BiRigid => "bi-rigid",
            Family::SingleArt => "single-art",
            Family::SingleRigid => "single-rigid",
        }
    }

    pub fn mask(families: &[Family]) -> u8 {
        families.iter().fold(0, |m, f| m | f.bit())
    }

    pub fn from_mask(mask: u8) -> Vec<Family> {
        Family::ALL.into_iter().filter(|f| mask & f.bit() != 0).collect()
    }
}

impl std::str::FromStr for Family {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.to_lowercase().chars().filter(|c| c.is_alphanumeric()).collect();
        match key.as_str() {
            "biart" => Ok(Family::BiArt),
            "birigid" => Ok(Family::BiRigid),
            "singleart" => Ok(Family::SingleArt),
            "singlerigid" => Ok(Family::SingleRigid),
            _ => Err(CoreError::InvalidInput(format!("unknown family {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaProfile {
    Constant,
    Open,
    Close,
    OpenClose,
}

impl GammaProfile {
    fn verb(self) -> &'static str {
        match self {
            GammaProfile::Constant => "hold",
            GammaProfile::Open => "open",
            GammaProfile::Close => "close",
            GammaProfile::OpenClose => "open and then close",
        }
    }

    /// Joint angle at normalized time `s` in [0, 1].
    pub fn angle(self, s: f64, amplitude: f64) -> f64 {
        let smooth = s * s * (3.0 - 2.0 * s);
        match self {
            GammaProfile::Constant => 0.0,
            GammaProfile::Open => amplitude * smooth,
            GammaProfile::Close => amplitude * (1.0 - smooth),
            GammaProfile::OpenClose => amplitude * (PI * s).sin().powi(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    /// Lid hinged along the top back edge.
    Box,
    /// Door hinged along a vertical front edge.
    Cabinet,
}

impl ObjectKind {
    fn name(self) -> &'static str {
        match self {
            ObjectKind::Box => "box",
            ObjectKind::Cabinet => "cabinet",
        }
    }
}

/// Everything needed to render one sequence.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub family: Family,
    pub object: ArticulatedObjectModel,
    pub instruction: String,
    pub hand_type: HandType,
    pub profile: GammaProfile,
    /// Fraction of the upper joint limit reached at full opening.
    pub amplitude: f64,
    pub start: Vector3<f64>,
    pub yaw: f64,
    pub yaw_drift: f64,
    pub lift: f64,
    pub curl: f64,
    pub curl_phase: f64,
    pub frames: usize,
    pub seed: u64,
}

/// One dataset record: a sequence with its conditions and per-frame
/// ground-truth distance fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub family: Family,
    pub hand_type: HandType,
    pub instruction: String,
    pub object: ArticulatedObjectModel,
    pub sequence: MotionSequence,
    pub fields: Vec<DistanceField>,
}

fn box_surface(rng: &mut ChaCha8Rng, min: Vector3<f64>, max: Vector3<f64>, n: usize) -> Vec<Vector3<f64>> {
    let ext = max - min;
    let areas = [ext.y * ext.z, ext.x * ext.z, ext.x * ext.y];
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut face = 0;
            while face < 5 && pick > areas[face / 2] {
                pick -= areas[face / 2];
                face += 1;
            }
            let axis = face / 2;
            let mut p = Vector3::new(
                min.x + rng.random::<f64>() * ext.x,
                min.y + rng.random::<f64>() * ext.y,
                min.z + rng.random::<f64>() * ext.z,
            );
            p[axis] = if face % 2 == 0 { min[axis] } else { max[axis] };
            p
        })
        .collect()
}

pub fn random_object(rng: &mut ChaCha8Rng, articulated: bool) -> Result<ArticulatedObjectModel> {
    let kind = if rng.random_bool(0.5) { ObjectKind::Box } else { ObjectKind::Cabinet };
    let w = rng.random_range(0.14..0.26);
    let d = rng.random_range(0.12..0.22);
    let h = rng.random_range(0.08..0.16);
    let t = 0.015;
    let half = DEFAULT_OBJECT_POINTS / 2;
    let upper = if articulated { rng.random_range(1.2..1.9) } else { 0.0 };
    let base = box_surface(rng, Vector3::new(-w / 2.0, -d / 2.0, 0.0), Vector3::new(w / 2.0, d / 2.0, h), half);
    match kind {
        ObjectKind::Box => {
            let lid = box_surface(
                rng,
                Vector3::new(-w / 2.0, -d / 2.0, h),
                Vector3::new(w / 2.0, d / 2.0, h + t),
                half,
            );
            // negative x so positive angles lift the front edge
            ArticulatedObjectModel::new(
                kind.name(),
                base,
                lid,
                -Vector3::x(),
                Vector3::new(0.0, d / 2.0, h),
                (0.0, upper),
            )
        }
        ObjectKind::Cabinet => {
            let door = box_surface(
                rng,
                Vector3::new(-w / 2.0, -d / 2.0 - t, 0.0),
                Vector3::new(w / 2.0, -d / 2.0, h),
                half,
            );
            ArticulatedObjectModel::new(
                kind.name(),
                base,
                door,
                -Vector3::z(),
                Vector3::new(-w / 2.0, -d / 2.0, 0.0),
                (0.0, upper),
            )
        }
    }
}

pub fn random_task(family: Family, frames: usize, seed: u64) -> Result<SyntheticTask> {
    check_length(frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let object = random_object(&mut rng, family.is_articulated())?;
    let hand_type = if family.is_bimanual() {
        HandType::Bimanual
    } else if rng.random_bool(0.5) {
        HandType::RightOnly
    } else {
        HandType::LeftOnly
    };
    let profile = if family.is_articulated() {
        [GammaProfile::Open, GammaProfile::Close, GammaProfile::OpenClose][rng.random_range(0..3)]
    } else {
        GammaProfile::Constant
    };
    let lift = if family.is_articulated() { 0.0 } else { rng.random_range(0.03..0.12) };
    let instruction = if family.is_articulated() {
        let who = match hand_type {
            HandType::Bimanual => "with both hands",
            HandType::LeftOnly => "with the left hand",
            HandType::RightOnly => "with the right hand",
        };
        format!("{} the {} {}", profile.verb(), object.name, who)
    } else {
        let verb = ["lift", "move", "turn"][rng.random_range(0..3)];
        format!("{verb} the {}", object.name)
    };
    Ok(SyntheticTask {
        family,
        instruction,
        hand_type,
        profile,
        amplitude: rng.random_range(0.7..1.0),
        start: Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(0.25..0.35), rng.random_range(-0.05..0.0)),
        yaw: rng.random_range(-0.4..0.4),
        yaw_drift: rng.random_range(-0.3..0.3),
        lift,
        curl: rng.random_range(0.3..0.7),
        curl_phase: rng.random_range(0.0..2.0 * PI),
        object,
        frames,
        seed,
    })
}

/// Grasp frame on a part: contact point and hand orientation in the part's
/// canonical frame.
struct Grasp {
    part: usize,
    point: Vector3<f64>,
    rot: Matrix3<f64>,
}

/// Palm center relative to the wrist in the hand's rest frame.
fn palm_offset(side: HandSide) -> Vector3<f64> {
    let x = if side == HandSide::Right { 0.01 } else { -0.01 };
    Vector3::new(x, 0.085, -0.02)
}

fn grasp_for(task: &SyntheticTask, side: HandSide) -> Grasp {
    let obj = &task.object;
    let b0 = obj.part_box(0);
    let b1 = obj.part_box(1);
    let sign = if side == HandSide::Right { 1.0 } else { -1.0 };
    let on_moving = task.family.is_articulated()
        && (task.hand_type != HandType::Bimanual || side == HandSide::Right);
    if on_moving {
        // the handle sits on the face of the moving part away from the hinge
        let c = b1.center();
        let (point, rot) = match obj.name.as_str() {
            "box" => (
                Vector3::new(c.x, b1.min.y - 0.01, c.z),
                rot_x(-PI / 2.0) * rot_y(sign * 0.3),
            ),
            _ => (
                Vector3::new(b1.max.x - 0.02, b1.min.y - 0.01, c.z),
                rot_z(PI) * rot_x(PI / 2.0),
            ),
        };
        Grasp { part: 1, point, rot }
    } else {
        // side of the base
        let c = b0.center();
        let x = if sign > 0.0 { b0.max.x + 0.01 } else { b0.min.x - 0.01 };
        Grasp {
            part: 0,
            point: Vector3::new(x, c.y, c.z),
            rot: rot_z(sign * PI / 2.0) * rot_x(-0.3),
        }
    }
}

fn finger_pose(side: HandSide, global: &Matrix3<f64>, curl: f64) -> Result<HandPose> {
    let mut pose = HandPose::identity();
    pose.0[0] = matrix_to_rot6d(global)?;
    for f in 0..5 {
        for k in 0..3 {
            let j = 1 + 3 * f + k;
            let local = if f == 4 {
                let s = if side == HandSide::Right { 1.0 } else { -1.0 };
                rot_z(s * 0.4 * curl) * rot_x(-0.3 * curl)
            } else {
                rot_x(-(0.7 + 0.15 * k as f64) * curl)
            };
            pose.0[j] = matrix_to_rot6d(&local)?;
        }
    }
    Ok(pose)
}

const PARK_LEFT: [f64; 3] = [-0.35, 0.0, -0.1];
const PARK_RIGHT: [f64; 3] = [0.35, 0.0, -0.1];

pub fn render_task(task: &SyntheticTask) -> Result<MotionSequence> {
    let n = task.frames;
    let (_, upper) = task.object.limits();
    let mut hands = Vec::with_capacity(n);
    let mut objects = Vec::with_capacity(n);
    for i in 0..n {
        let s = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let smooth = s * s * (3.0 - 2.0 * s);
        let gamma = task.profile.angle(s, task.amplitude * upper).clamp(0.0, upper);
        let rot = rot_z(task.yaw + task.yaw_drift * smooth);
        let trans = task.start + Vector3::new(0.0, 0.0, task.lift * (PI * s).sin());
        let obj_state = ObjectState {
            trans: trans.into(),
            rot: matrix_to_rot6d(&rot)?,
            joint_angle: gamma,
        };
        let open = if upper > 0.0 { gamma / upper } else { 0.0 };
        let mut hand = HandState {
            trans_left: PARK_LEFT,
            trans_right: PARK_RIGHT,
            pose_left: HandPose::identity(),
            pose_right: HandPose::identity(),
        };
        for &side in task.hand_type.active_sides() {
            let g = grasp_for(task, side);
            let tf = task.object.part_transform(&obj_state, g.part)?;
            let hand_rot = tf.rot * g.rot;
            let contact = tf.apply(&g.point);
            let wrist = contact - hand_rot * palm_offset(side);
            let curl = task.curl + 0.1 * (2.0 * PI * s + task.curl_phase).sin() + 0.25 * open;
            *hand.pose_mut(side) = finger_pose(side, &hand_rot, curl)?;
            *hand.trans_mut(side) = wrist.into();
        }
        hands.push(hand);
        objects.push(obj_state);
    }
    let seq = MotionSequence::new(hands, objects)?;
    seq.validate(task.object.limits())?;
    Ok(seq)
}

pub fn distance_fields(
    seq: &MotionSequence,
    object: &ArticulatedObjectModel,
    hand_models: &[SkeletalHandModel; 2],
) -> Result<Vec<DistanceField>> {
    seq.hands()
        .iter()
        .zip(seq.objects())
        .map(|(h, o)| {
            let obj_pts = articulate_object(object, o)?;
            let mut per = [Vec::new(), Vec::new()];
            for side in HandSide::BOTH {
                let model = &hand_models[side.index()];
                let pts = model.forward(h.pose(side), h.trans(side))?;
                per[side.index()] = distance_field(&pts, &obj_pts)?;
            }
            let [left, right] = per;
            Ok(DistanceField { left, right })
        })
        .collect()
}

pub fn default_hand_models() -> [SkeletalHandModel; 2] {
    [
        SkeletalHandModel::new(HandSide::Left, DEFAULT_HAND_POINTS),
        SkeletalHandModel::new(HandSide::Right, DEFAULT_HAND_POINTS),
    ]
}

pub fn generate_sample(family: Family, frames: usize, seed: u64) -> Result<Sample> {
    let task = random_task(family, frames, seed)?;
    let sequence = render_task(&task)?;
    let fields = distance_fields(&sequence, &task.object, &default_hand_models())?;
    Ok(Sample {
        family,
        hand_type: task.hand_type,
        instruction: task.instruction,
        object: task.object,
        sequence,
        fields,
    })
}

/// Per-sample seed derived from the dataset seed and the sample index.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rigid_has_constant_zero_angle_and_one_hand() {
        for seed in 0..8 {
            let s = generate_sample(Family::SingleRigid, 20, seed).unwrap();
            assert!(s.sequence.joint_angles().iter().all(|&g| g == 0.0));
            assert_ne!(s.hand_type, HandType::Bimanual);
        }
    }

    #[test]
    fn bi_art_full_length() {
        let s = generate_sample(Family::BiArt, 150, 3).unwrap();
        assert_eq!(s.sequence.len(), 150);
        assert_eq!(s.hand_type, HandType::Bimanual);
        let g = s.sequence.joint_angles();
        let spread = g.iter().cloned().fold(f64::MIN, f64::max) - g.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.5);
    }

    #[test]
    fn hands_touch_the_object() {
        let s = generate_sample(Family::BiArt, 30, 11).unwrap();
        for f in &s.fields {
            let min_l = f.left.iter().cloned().fold(f64::MAX, f64::min);
            let min_r = f.right.iter().cloned().fold(f64::MAX, f64::min);
            assert!(min_l < 0.05 && min_r < 0.05, "{min_l} {min_r}");
        }
    }

    #[test]
    fn family_parsing() {
        assert_eq!("Bi-Art.".parse::<Family>().unwrap(), Family::BiArt);
        assert_eq!("single_rigid".parse::<Family>().unwrap(), Family::SingleRigid);
        assert!("tri-art".parse::<Family>().is_err());
        assert_eq!(Family::from_mask(Family::mask(&[Family::BiArt, Family::SingleRigid])),
            vec![Family::BiArt, Family::SingleRigid]);
    }

    #[test]
    fn sample_seeds_differ() {
        assert_ne!(sample_seed(7, 0), sample_seed(7, 1));
        assert_eq!(sample_seed(7, 2), sample_seed(7, 2));
    }
}
