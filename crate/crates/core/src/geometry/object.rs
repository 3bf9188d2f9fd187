//! Two-part articulated objects with a single revolute joint.
//!
//! Part 0 is the base and follows the object pose `(rot, trans)`. Part 1 is
//! first rotated by the joint angle about `axis` through `pivot` (object
//! frame), then follows the same object pose. Rigid objects use limits
//! `[0, 0]`.

use std::path::Path;

use nalgebra::{Matrix3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rotation::{axis_angle, rot6d_to_matrix};
use crate::types::ObjectState;

pub const DEFAULT_OBJECT_POINTS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ArticulatedObjectModel {
    pub name: String,
    parts: [Vec<Vector3<f64>>; 2],
    axis: Unit<Vector3<f64>>,
    pivot: Vector3<f64>,
    limits: (f64, f64),
}

/// Axis-aligned box in a part's canonical frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl PartBox {
    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn half_extents(&self) -> Vector3<f64> {
        (self.max - self.min) * 0.5
    }

    /// Signed distance, negative inside.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        let q = (p - self.center()).abs() - self.half_extents();
        let outside = q.map(|v| v.max(0.0)).norm();
        let inside = q.x.max(q.y).max(q.z).min(0.0);
        outside + inside
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

/// Rigid transform `x -> rot * x + trans`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
}

impl RigidTransform {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot * p + self.trans
    }

    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot.transpose() * (p - self.trans)
    }
}

impl ArticulatedObjectModel {
    pub fn new(
        name: impl Into<String>,
        base: Vec<Vector3<f64>>,
        moving: Vec<Vector3<f64>>,
        axis: Vector3<f64>,
        pivot: Vector3<f64>,
        limits: (f64, f64),
    ) -> Result<Self> {
        if base.is_empty() || moving.is_empty() {
            return Err(CoreError::EmptyGeometry("object parts need at least one point".into()));
        }
        let n = axis.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(CoreError::InvalidGeometry("joint axis has zero length".into()));
        }
        if !(limits.0 <= limits.1) || !limits.0.is_finite() || !limits.1.is_finite() {
            return Err(CoreError::InvalidGeometry(format!("bad joint limits {limits:?}")));
        }
        if base.iter().chain(&moving).chain([&pivot]).any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(CoreError::InvalidGeometry("non-finite coordinates".into()));
        }
        Ok(ArticulatedObjectModel {
            name: name.into(),
            parts: [base, moving],
            axis: Unit::new_normalize(axis),
            pivot,
            limits,
        })
    }

    pub fn part(&self, k: usize) -> &[Vector3<f64>] {
        &self.parts[k]
    }

    pub fn axis(&self) -> Vector3<f64> {
        self.axis.into_inner()
    }

    pub fn pivot(&self) -> Vector3<f64> {
        self.pivot
    }

    pub fn limits(&self) -> (f64, f64) {
        self.limits
    }

    pub fn is_articulated(&self) -> bool {
        self.limits.1 > self.limits.0
    }

    pub fn num_points(&self) -> usize {
        self.parts[0].len() + self.parts[1].len()
    }

    pub fn check_angle(&self, angle: f64) -> Result<()> {
        let (min, max) = self.limits;
        if !(min..=max).contains(&angle) {
            return Err(CoreError::JointLimitViolation { angle, min, max });
        }
        Ok(())
    }

    /// World transform of part `k` at `state`.
    pub fn part_transform(&self, state: &ObjectState, k: usize) -> Result<RigidTransform> {
        self.check_angle(state.joint_angle)?;
        let rot = rot6d_to_matrix(&state.rot)?;
        let trans = Vector3::from(state.trans);
        if k == 0 {
            return Ok(RigidTransform { rot, trans });
        }
        let hinge = axis_angle(&self.axis, state.joint_angle);
        // x -> R (H (x - pivot) + pivot) + t
        Ok(RigidTransform {
            rot: rot * hinge,
            trans: rot * (self.pivot - hinge * self.pivot) + trans,
        })
    }

    pub fn part_box(&self, k: usize) -> PartBox {
        let pts = &self.parts[k];
        let mut min = pts[0];
        let mut max = pts[0];
        for p in pts {
            min = min.inf(p);
            max = max.sup(p);
        }
        PartBox { min, max }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let asset: ObjectAsset = toml::from_str(text).map_err(|e| CoreError::Parse(e.to_string()))?;
        asset.into_model()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&ObjectAsset::from_model(self)).expect("object asset serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}

/// All object points at `state`, base part first.
pub fn articulate_object(
    model: &ArticulatedObjectModel,
    state: &ObjectState,
) -> Result<Vec<Vector3<f64>>> {
    let mut out = Vec::with_capacity(model.num_points());
    for k in 0..2 {
        let tf = model.part_transform(state, k)?;
        out.extend(model.part(k).iter().map(|p| tf.apply(p)));
    }
    Ok(out)
}

/// Text asset schema (TOML):
///
/// ```toml
/// name = "box"
/// axis = [1.0, 0.0, 0.0]
/// pivot = [0.0, 0.05, 0.04]
/// limits = [0.0, 1.6]
/// base = [[x, y, z], ...]
/// moving = [[x, y, z], ...]
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectAsset {
    pub name: String,
    pub axis: [f64; 3],
    pub pivot: [f64; 3],
    pub limits: [f64; 2],
    pub base: Vec<[f64; 3]>,
    pub moving: Vec<[f64; 3]>,
}

impl ObjectAsset {
    pub fn into_model(self) -> Result<ArticulatedObjectModel> {
        let conv = |v: Vec<[f64; 3]>| v.into_iter().map(Vector3::from).collect::<Vec<_>>();
        ArticulatedObjectModel::new(
            self.name,
            conv(self.base),
            conv(self.moving),
            Vector3::from(self.axis),
            Vector3::from(self.pivot),
            (self.limits[0], self.limits[1]),
        )
    }

    pub fn from_model(m: &ArticulatedObjectModel) -> Self {
        let conv = |v: &[Vector3<f64>]| v.iter().map(|p| [p.x, p.y, p.z]).collect();
        let a = m.axis();
        ObjectAsset {
            name: m.name.clone(),
            axis: [a.x, a.y, a.z],
            pivot: [m.pivot.x, m.pivot.y, m.pivot.z],
            limits: [m.limits.0, m.limits.1],
            base: conv(m.part(0)),
            moving: conv(m.part(1)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::Rotation6D;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn toy() -> ArticulatedObjectModel {
        ArticulatedObjectModel::new(
            "toy",
            vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)],
            vec![Vector3::new(1.0, 0.0, 1.0), Vector3::new(0.0, 2.0, 1.0)],
            Vector3::new(0.0, 0.0, 2.0),
            Vector3::zeros(),
            (-FRAC_PI_2, FRAC_PI_2),
        )
        .unwrap()
    }

    #[test]
    fn axis_is_normalized() {
        assert_relative_eq!(toy().axis().norm(), 1.0);
    }

    #[test]
    fn rest_state_is_canonical() {
        let m = toy();
        let pts = articulate_object(&m, &ObjectState::rest()).unwrap();
        let canon: Vec<_> = m.part(0).iter().chain(m.part(1)).copied().collect();
        assert_eq!(pts, canon);
    }

    #[test]
    fn translation_only() {
        let m = toy();
        let mut s = ObjectState::rest();
        s.trans = [0.0, 0.0, 1.0];
        let pts = articulate_object(&m, &s).unwrap();
        for (p, q) in pts.iter().zip(m.part(0).iter().chain(m.part(1))) {
            assert_relative_eq!(*p, q + Vector3::z(), epsilon = 1e-15);
        }
    }

    #[test]
    fn hinge_rotates_moving_part_only() {
        let m = toy();
        let mut s = ObjectState::rest();
        s.joint_angle = FRAC_PI_2;
        let pts = articulate_object(&m, &s).unwrap();
        assert_relative_eq!(pts[0], m.part(0)[0]);
        assert_relative_eq!(pts[1], m.part(0)[1]);
        // quarter turn about z through the origin: (x, y, z) -> (-y, x, z)
        assert_relative_eq!(pts[2], Vector3::new(0.0, 1.0, 1.0), epsilon = 1e-12);
        assert_relative_eq!(pts[3], Vector3::new(-2.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn pivot_is_fixed_point_of_hinge() {
        let m = ArticulatedObjectModel::new(
            "p",
            vec![Vector3::zeros()],
            vec![Vector3::new(1.0, 1.0, 0.0)],
            Vector3::z(),
            Vector3::new(1.0, 0.0, 0.0),
            (0.0, 3.2),
        )
        .unwrap();
        let mut s = ObjectState::rest();
        s.joint_angle = std::f64::consts::PI;
        let pts = articulate_object(&m, &s).unwrap();
        assert_relative_eq!(pts[1], Vector3::new(1.0, -1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn limits_enforced() {
        let mut s = ObjectState::rest();
        s.joint_angle = 2.0;
        assert!(matches!(
            articulate_object(&toy(), &s),
            Err(CoreError::JointLimitViolation { .. })
        ));
    }

    #[test]
    fn object_pose_applies_to_both_parts() {
        let m = toy();
        let s = ObjectState {
            trans: [1.0, 2.0, 3.0],
            rot: Rotation6D([0.0, 1.0, 0.0, -1.0, 0.0, 0.0]),
            joint_angle: 0.3,
        };
        let pts = articulate_object(&m, &s).unwrap();
        let r = crate::rotation::rot_z(FRAC_PI_2);
        let h = crate::rotation::rot_z(0.3);
        assert_relative_eq!(pts[1], r * m.part(0)[1] + Vector3::new(1.0, 2.0, 3.0), epsilon = 1e-12);
        assert_relative_eq!(pts[2], r * h * m.part(1)[0] + Vector3::new(1.0, 2.0, 3.0), epsilon = 1e-12);
    }

    #[test]
    fn box_signed_distance() {
        let b = PartBox {
            min: Vector3::zeros(),
            max: Vector3::repeat(1.0),
        };
        assert_relative_eq!(b.signed_distance(&Vector3::repeat(0.5)), -0.5);
        assert_relative_eq!(b.signed_distance(&Vector3::new(2.0, 0.5, 0.5)), 1.0);
        assert_relative_eq!(b.signed_distance(&Vector3::new(0.9, 0.5, 0.5)), -0.1, epsilon = 1e-12);
    }

    #[test]
    fn toml_round_trip() {
        let m = toy();
        let back = ArticulatedObjectModel::from_toml(&m.to_toml()).unwrap();
        assert_eq!(back.part(0), m.part(0));
        assert_eq!(back.part(1), m.part(1));
        assert_eq!(back.limits(), m.limits());
        assert_relative_eq!(back.axis(), m.axis());
    }

    #[test]
    fn asset_rejects_unknown_keys() {
        let text = "name='x'\naxis=[0,0,1]\npivot=[0,0,0]\nlimits=[0,1]\nbase=[[0,0,0]]\nmoving=[[1,0,0]]\ncolor='red'\n";
        assert!(matches!(
            ArticulatedObjectModel::from_toml(text),
            Err(CoreError::Parse(_))
        ));
    }
}
