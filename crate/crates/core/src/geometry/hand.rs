//! Rigid-skeleton hand: a 16-joint kinematic tree with surface sample points
//! rigidly attached to the bones. Stands in for a parametric hand mesh; any
//! model that maps a 16x6 pose plus wrist translation to a fixed point set can
//! implement [`HandModel`].

use nalgebra::{Matrix3, Vector3};

use crate::error::Result;
use crate::rotation::rot6d_to_matrix;
use crate::types::{HandPose, HandSide, Vec3, NUM_JOINTS};

pub const DEFAULT_HAND_POINTS: usize = 64;
const SURFACE_RADIUS: f64 = 0.008;
const TIP_LENGTH: f64 = 0.02;

/// Parent joint of each joint; the wrist (joint 0) is the root.
/// Joints `1+3f ..= 3+3f` form finger `f` (index, middle, pinky, ring, thumb).
pub const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(0),
    Some(4),
    Some(5),
    Some(0),
    Some(7),
    Some(8),
    Some(0),
    Some(10),
    Some(11),
    Some(0),
    Some(13),
    Some(14),
];

/// Pose-to-points map shared by the losses and the metrics.
pub trait HandModel {
    fn side(&self) -> HandSide;
    fn num_points(&self) -> usize;
    fn forward(&self, pose: &HandPose, trans: &Vec3) -> Result<Vec<Vector3<f64>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletalHandModel {
    side: HandSide,
    /// Rest position of every joint relative to the wrist.
    rest_joints: [Vector3<f64>; NUM_JOINTS],
    /// Bone each surface point is attached to.
    point_bone: Vec<usize>,
    /// Surface point offset from its bone's joint, in the rest frame.
    point_offsets: Vec<Vector3<f64>>,
}

/// Global rotations and joint positions after forward kinematics.
#[derive(Debug, Clone)]
pub struct JointFrames {
    pub rotations: [Matrix3<f64>; NUM_JOINTS],
    pub positions: [Vector3<f64>; NUM_JOINTS],
}

impl SkeletalHandModel {
    pub fn new(side: HandSide, num_points: usize) -> Self {
        let mut rest = right_hand_joints();
        let mut point_bone = Vec::with_capacity(num_points);
        let mut point_offsets = Vec::with_capacity(num_points);
        for k in 0..num_points {
            let bone = k % NUM_JOINTS;
            let slot = k / NUM_JOINTS;
            let per_bone = num_points / NUM_JOINTS + usize::from(bone < num_points % NUM_JOINTS);
            let dir = bone_direction(&rest, bone);
            let (e1, e2) = orthonormal_pair(&dir);
            let frac = (slot as f64 + 0.5) / per_bone as f64;
            let theta = 2.0 * std::f64::consts::PI * (slot as f64 + 0.25 * bone as f64) / per_bone as f64;
            let offset = dir * frac + (e1 * theta.cos() + e2 * theta.sin()) * SURFACE_RADIUS;
            point_bone.push(bone);
            point_offsets.push(offset);
        }
        // the left hand mirrors the right across x = 0
        if side == HandSide::Left {
            for p in rest.iter_mut().chain(point_offsets.iter_mut()) {
                p.x = -p.x;
            }
        }
        SkeletalHandModel {
            side,
            rest_joints: rest,
            point_bone,
            point_offsets,
        }
    }

    pub fn right() -> Self {
        Self::new(HandSide::Right, DEFAULT_HAND_POINTS)
    }

    pub fn left() -> Self {
        Self::new(HandSide::Left, DEFAULT_HAND_POINTS)
    }

    pub fn for_side(side: HandSide, num_points: usize) -> Self {
        Self::new(side, num_points)
    }

    pub fn rest_joints(&self) -> &[Vector3<f64>; NUM_JOINTS] {
        &self.rest_joints
    }

    /// Offset of joint `j` from its parent in the rest pose (zero for the wrist).
    pub fn bone_offset(&self, j: usize) -> Vector3<f64> {
        match PARENTS[j] {
            Some(p) => self.rest_joints[j] - self.rest_joints[p],
            None => Vector3::zeros(),
        }
    }

    pub fn point_bone(&self) -> &[usize] {
        &self.point_bone
    }

    pub fn point_offsets(&self) -> &[Vector3<f64>] {
        &self.point_offsets
    }

    pub fn rest_points(&self) -> Vec<Vector3<f64>> {
        self.point_bone
            .iter()
            .zip(&self.point_offsets)
            .map(|(&b, q)| self.rest_joints[b] + q)
            .collect()
    }

    pub fn joint_frames(&self, pose: &HandPose, trans: &Vec3) -> Result<JointFrames> {
        let mut rotations = [Matrix3::identity(); NUM_JOINTS];
        let mut positions = [Vector3::zeros(); NUM_JOINTS];
        let root = Vector3::from(*trans);
        // parents always precede children in PARENTS
        for j in 0..NUM_JOINTS {
            let local = rot6d_to_matrix(&pose.0[j])?;
            match PARENTS[j] {
                None => {
                    rotations[j] = local;
                    positions[j] = root;
                }
                Some(p) => {
                    rotations[j] = rotations[p] * local;
                    positions[j] = positions[p] + rotations[p] * self.bone_offset(j);
                }
            }
        }
        Ok(JointFrames {
            rotations,
            positions,
        })
    }
}

impl HandModel for SkeletalHandModel {
    fn side(&self) -> HandSide {
        self.side
    }

    fn num_points(&self) -> usize {
        self.point_bone.len()
    }

    fn forward(&self, pose: &HandPose, trans: &Vec3) -> Result<Vec<Vector3<f64>>> {
        let frames = self.joint_frames(pose, trans)?;
        Ok(self
            .point_bone
            .iter()
            .zip(&self.point_offsets)
            .map(|(&b, q)| frames.positions[b] + frames.rotations[b] * q)
            .collect())
    }
}

/// Surface points of `model` posed by `pose` with the wrist at `trans`.
pub fn hand_fk(pose: &HandPose, trans: &Vec3, model: &impl HandModel) -> Result<Vec<Vector3<f64>>> {
    model.forward(pose, trans)
}

fn right_hand_joints() -> [Vector3<f64>; NUM_JOINTS] {
    // (base, direction, phalanx lengths) per finger, right hand, fingers along +y
    let fingers: [([f64; 3], [f64; 3], [f64; 3]); 5] = [
        ([0.024, 0.085, 0.0], [0.05, 1.0, 0.0], [0.038, 0.024, 0.020]),
        ([0.004, 0.090, 0.0], [0.0, 1.0, 0.0], [0.042, 0.028, 0.022]),
        ([-0.034, 0.075, 0.0], [-0.12, 1.0, 0.0], [0.028, 0.018, 0.016]),
        ([-0.016, 0.085, 0.0], [-0.06, 1.0, 0.0], [0.038, 0.026, 0.020]),
        ([0.030, 0.025, -0.010], [0.8, 0.6, -0.2], [0.035, 0.030, 0.025]),
    ];
    let mut joints = [Vector3::zeros(); NUM_JOINTS];
    for (f, (base, dir, lengths)) in fingers.iter().enumerate() {
        let dir = Vector3::from(*dir).normalize();
        let mut p = Vector3::from(*base);
        for (k, len) in lengths.iter().enumerate() {
            joints[1 + 3 * f + k] = p;
            p += dir * *len;
        }
    }
    joints
}

fn bone_direction(rest: &[Vector3<f64>; NUM_JOINTS], bone: usize) -> Vector3<f64> {
    if bone == 0 {
        // palm: wrist towards the middle finger base
        return rest[4] * 0.9;
    }
    match PARENTS.iter().position(|&p| p == Some(bone)) {
        Some(child) => rest[child] - rest[bone],
        None => {
            let parent = PARENTS[bone].expect("finger joints have parents");
            (rest[bone] - rest[parent]).normalize() * TIP_LENGTH
        }
    }
}

fn orthonormal_pair(dir: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let d = dir.normalize();
    let helper = if d.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    let e1 = d.cross(&helper).normalize();
    let e2 = d.cross(&e1);
    (e1, e2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::{matrix_to_rot6d, rot_x, rot_z};
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_pose_reproduces_rest_points() {
        let model = SkeletalHandModel::right();
        let pts = hand_fk(&HandPose::identity(), &[0.0; 3], &model).unwrap();
        assert_eq!(pts.len(), 64);
        for (a, b) in pts.iter().zip(model.rest_points()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn translation_shifts_rigidly() {
        let model = SkeletalHandModel::left();
        let pts = hand_fk(&HandPose::identity(), &[1.0, 0.0, 0.0], &model).unwrap();
        for (a, b) in pts.iter().zip(model.rest_points()) {
            assert_relative_eq!(*a, b + Vector3::x(), epsilon = 1e-15);
        }
    }

    #[test]
    fn wrist_rotation_rotates_whole_hand() {
        let model = SkeletalHandModel::right();
        let mut pose = HandPose::identity();
        pose.0[0] = matrix_to_rot6d(&rot_z(FRAC_PI_2)).unwrap();
        let pts = hand_fk(&pose, &[0.0; 3], &model).unwrap();
        for (a, b) in pts.iter().zip(model.rest_points()) {
            // analytic quarter turn about z: (x, y, z) -> (-y, x, z)
            assert_relative_eq!(*a, Vector3::new(-b.y, b.x, b.z), epsilon = 1e-12);
        }
    }

    #[test]
    fn left_hand_mirrors_right() {
        let l = SkeletalHandModel::left().rest_points();
        let r = SkeletalHandModel::right().rest_points();
        for (a, b) in l.iter().zip(&r) {
            assert_relative_eq!(a.x, -b.x);
            assert_relative_eq!(a.y, b.y);
        }
    }

    #[test]
    fn bone_point_sets_are_rigid() {
        let model = SkeletalHandModel::right();
        let mut pose = HandPose::identity();
        for (j, row) in pose.0.iter_mut().enumerate() {
            *row = matrix_to_rot6d(&(rot_x(0.1 * j as f64) * rot_z(-0.05 * j as f64))).unwrap();
        }
        let rest = model.rest_points();
        let posed = hand_fk(&pose, &[0.3, -0.2, 0.1], &model).unwrap();
        let bones = model.point_bone();
        for i in 0..rest.len() {
            for k in 0..rest.len() {
                if bones[i] == bones[k] {
                    let d0 = (rest[i] - rest[k]).norm();
                    let d1 = (posed[i] - posed[k]).norm();
                    assert!((d0 - d1).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn point_count_is_configurable() {
        let model = SkeletalHandModel::new(HandSide::Right, 8);
        assert_eq!(model.num_points(), 8);
        assert_eq!(model.point_bone(), &[0, 1, 2, 3, 4, 5, 6, 7]);
    }
}
