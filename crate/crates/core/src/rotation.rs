//! Continuous 6D rotation representation.
//!
//! A rotation is stored as the first two columns of its matrix, column-major:
//! `[r00, r10, r20, r01, r11, r21]`. Decoding runs Gram–Schmidt on the two
//! columns and completes the frame with a cross product, so every
//! non-degenerate 6-vector maps to a proper rotation.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::error::{CoreError, Result};

const MIN_NORM: f64 = 1e-8;
const MAX_ABS_COS: f64 = 1.0 - 1e-8;
const ORTHO_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; 6] = values.try_into().map_err(|_| {
            CoreError::ShapeMismatch(format!("6D rotation needs 6 values, got {}", values.len()))
        })?;
        Ok(Rotation6D(arr))
    }

    pub fn first(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn second(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }

    pub fn to_matrix(&self) -> Result<Matrix3<f64>> {
        rot6d_to_matrix(self)
    }

    /// Re-encodes the decoded matrix, snapping the 6 values onto the
    /// rotation manifold.
    pub fn canonical(&self) -> Result<Rotation6D> {
        Ok(encode_unchecked(&rot6d_to_matrix(self)?))
    }
}

impl Default for Rotation6D {
    fn default() -> Self {
        Self::IDENTITY
    }
}

pub fn rot6d_to_matrix(r: &Rotation6D) -> Result<Matrix3<f64>> {
    let a1 = r.first();
    let a2 = r.second();
    let n1 = a1.norm();
    let n2 = a2.norm();
    if !(n1.is_finite() && n2.is_finite()) {
        return Err(CoreError::DegenerateRotation("non-finite components".into()));
    }
    if n1 < MIN_NORM || n2 < MIN_NORM {
        return Err(CoreError::DegenerateRotation(format!(
            "column norms {n1:e}, {n2:e} below {MIN_NORM:e}"
        )));
    }
    let cos = a1.dot(&a2) / (n1 * n2);
    if cos.abs() > MAX_ABS_COS {
        return Err(CoreError::DegenerateRotation(format!(
            "columns are parallel (cos = {cos})"
        )));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let b2 = u2 / u2.norm();
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Result<Rotation6D> {
    check_rotation(m)?;
    Ok(encode_unchecked(m))
}

fn encode_unchecked(m: &Matrix3<f64>) -> Rotation6D {
    Rotation6D([
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ])
}

/// Accepts `m` when `mᵀm = I` to within 1e-5 (max-abs) and `det(m) > 0`.
pub fn check_rotation(m: &Matrix3<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::InvalidRotationMatrix("non-finite entries".into()));
    }
    let err = (m.transpose() * m - Matrix3::identity()).amax();
    if err > ORTHO_TOL {
        return Err(CoreError::InvalidRotationMatrix(format!(
            "not orthonormal (max |RᵀR - I| = {err:e})"
        )));
    }
    let det = m.determinant();
    if det <= 0.0 {
        return Err(CoreError::InvalidRotationMatrix(format!(
            "determinant {det} is not positive"
        )));
    }
    Ok(())
}

pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).matrix()
}

pub fn rot_x(angle: f64) -> Matrix3<f64> {
    axis_angle(&Vector3::x(), angle)
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    axis_angle(&Vector3::y(), angle)
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    axis_angle(&Vector3::z(), angle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_decodes_to_identity() {
        let m = rot6d_to_matrix(&Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])).unwrap();
        assert_relative_eq!(m, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn quarter_turn_about_z() {
        // columns (0,1,0) and (-1,0,0) are already orthonormal
        let m = rot6d_to_matrix(&Rotation6D([0.0, 1.0, 0.0, -1.0, 0.0, 0.0])).unwrap();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(m, expected, epsilon = 1e-15);
        assert_relative_eq!(m, rot_z(FRAC_PI_2), epsilon = 1e-12);
    }

    #[test]
    fn gram_schmidt_removes_parallel_part() {
        // b1 = (1,0,0); a2 - (b1·a2) b1 = (0,1,0)
        let m = rot6d_to_matrix(&Rotation6D([2.0, 0.0, 0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_relative_eq!(m, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        for bad in [
            [0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0, 1e-9, 0.0, 0.0],
            [1.0, 2.0, 3.0, 2.0, 4.0, 6.0],
            [1.0, 0.0, 0.0, -3.0, 0.0, 0.0],
            [f64::NAN, 0.0, 0.0, 0.0, 1.0, 0.0],
        ] {
            assert!(matches!(
                rot6d_to_matrix(&Rotation6D(bad)),
                Err(CoreError::DegenerateRotation(_))
            ));
        }
    }

    #[test]
    fn encode_reads_first_two_columns() {
        assert_eq!(
            matrix_to_rot6d(&Matrix3::identity()).unwrap(),
            Rotation6D::IDENTITY
        );
        let r = matrix_to_rot6d(&rot_z(FRAC_PI_2)).unwrap();
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in r.0.iter().zip(expected) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn reflection_is_invalid() {
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matches!(
            matrix_to_rot6d(&reflection),
            Err(CoreError::InvalidRotationMatrix(_))
        ));
        let skewed = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matrix_to_rot6d(&skewed).is_err());
    }
}
