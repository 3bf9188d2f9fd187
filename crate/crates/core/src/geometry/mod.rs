//! Hand forward model, articulated objects and hand-object interaction fields.

mod hand;
mod object;

pub use hand::{hand_fk, HandModel, JointFrames, SkeletalHandModel, DEFAULT_HAND_POINTS, PARENTS};
pub use object::{
    articulate_object, ArticulatedObjectModel, ObjectAsset, PartBox, RigidTransform,
    DEFAULT_OBJECT_POINTS,
};

use nalgebra::{Matrix3, Vector3};

use crate::error::{CoreError, Result};
use crate::rotation::check_rotation;

/// Per hand-point distance to the nearest object point, for both hands.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl DistanceField {
    pub fn hand(&self, side: crate::types::HandSide) -> &[f64] {
        match side {
            crate::types::HandSide::Left => &self.left,
            crate::types::HandSide::Right => &self.right,
        }
    }
}

/// `D(v) = min_p ||hand_v - obj_p||` for every hand point.
pub fn distance_field(hand_points: &[Vector3<f64>], object_points: &[Vector3<f64>]) -> Result<Vec<f64>> {
    if hand_points.is_empty() || object_points.is_empty() {
        return Err(CoreError::EmptyGeometry(format!(
            "distance field over {} hand and {} object points",
            hand_points.len(),
            object_points.len()
        )));
    }
    Ok(hand_points
        .iter()
        .map(|h| {
            object_points
                .iter()
                .map(|o| (h - o).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

/// 1 where the ground-truth distance exceeds `eps` (0 by default), else 0.
pub fn validity_mask(field: &[f64], eps: f64) -> Vec<f64> {
    field.iter().map(|&d| if d > eps { 1.0 } else { 0.0 }).collect()
}

/// Hand rotation expressed in the object frame, `R_objᵀ R_hand`.
pub fn relative_rotation(r_hand: &Matrix3<f64>, r_obj: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    check_rotation(r_hand)?;
    check_rotation(r_obj)?;
    Ok(r_obj.transpose() * r_hand)
}
