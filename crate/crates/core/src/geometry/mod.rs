//! Two-view epipolar geometry in normalized camera coordinates.
//!
//! Convention: a world point seen at `x1` in the first camera is at
//! `R * X1 + t` in the second camera, and `x2ᵀ E x1 = 0` with `E = [t]x R`.

mod eight_point;
mod pose;

pub use eight_point::{
    epipolar_loss, hartley_transform, project_rank2, weighted_eight_point, EightPointOp,
    EFFECTIVE_WEIGHT,
};
pub use pose::{
    decompose_essential, pose_error, recover_pose, rotation_error_deg, translation_error_deg,
    CHEIRALITY_POINTS,
};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, Scalar};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Denominators below this make the epipolar residual degenerate.
pub const RESIDUAL_DENOM_FLOOR: f64 = 1e-15;

/// Putative matches `(x, y, x', y')` in normalized camera coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    points: Vec<[f64; 4]>,
}

impl CorrespondenceSet {
    pub fn new(points: Vec<[f64; 4]>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Parse {
                index: i,
                message: "non-finite coordinate".into(),
            });
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 4]] {
        &self.points
    }

    pub fn first(&self, i: usize) -> [f64; 2] {
        [self.points[i][0], self.points[i][1]]
    }

    pub fn second(&self, i: usize) -> [f64; 2] {
        [self.points[i][2], self.points[i][3]]
    }

    /// `N x 4` matrix of all coordinates.
    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        Matrix::from_fn(self.len(), 4, |i, j| T::of(self.points[i][j]))
    }

    /// `N x 2` coordinates of one view (`0` or `1`).
    pub fn view_matrix<T: Scalar>(&self, view: usize) -> Matrix<T> {
        Matrix::from_fn(self.len(), 2, |i, j| T::of(self.points[i][2 * view + j]))
    }

    /// Row `i` of the result is row `index[i]` of `self`.
    pub fn select(&self, index: &[usize]) -> Self {
        Self {
            points: index.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// Rotation plus unit translation direction of the second camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl CameraPose {
    /// Validates orthonormality and normalizes the translation.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        Self::check_rotation(&rotation)?;
        let n = translation.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Degenerate("zero translation".into()));
        }
        Ok(Self {
            rotation,
            translation: translation / n,
        })
    }

    /// Validates without rescaling; the translation must already be unit length.
    pub fn from_unit(rotation: Mat3, translation: Vec3) -> Result<Self> {
        Self::check_rotation(&rotation)?;
        if (translation.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Degenerate("translation is not unit length".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    fn check_rotation(rotation: &Mat3) -> Result<()> {
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if ortho > 1e-10 || (rotation.determinant() - 1.0).abs() > 1e-10 {
            return Err(Error::Degenerate(format!(
                "rotation not orthonormal (deviation {ortho:.3e})"
            )));
        }
        Ok(())
    }
}

/// 3x3 rank-2 matrix scaled to unit Frobenius norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EssentialMatrix(Mat3);

impl EssentialMatrix {
    /// Normalizes to unit Frobenius norm; no rank projection.
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        let n = m.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Degenerate("zero essential matrix".into()));
        }
        Ok(Self(m / n))
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::Shape {
                op: "EssentialMatrix::from_row_major",
                detail: format!("{} values", v.len()),
            });
        }
        Self::from_matrix(Mat3::from_row_slice(v))
    }

    /// Takes a row-major matrix that is already unit norm, keeping its bits.
    pub fn from_unit_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::Shape {
                op: "EssentialMatrix::from_unit_row_major",
                detail: format!("{} values", v.len()),
            });
        }
        let m = Mat3::from_row_slice(v);
        if (m.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Degenerate("essential matrix is not unit norm".into()));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)], m[(0, 1)], m[(0, 2)],
            m[(1, 0)], m[(1, 1)], m[(1, 2)],
            m[(2, 0)], m[(2, 1)], m[(2, 2)],
        ]
    }

    /// Frobenius distance to `other`, minimized over the sign ambiguity.
    pub fn distance_up_to_sign(&self, other: &Self) -> f64 {
        (self.0 - other.0).norm().min((self.0 + other.0).norm())
    }
}

/// Cross-product matrix `[v]x`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `[t]x R`, normalized to unit Frobenius norm.
pub fn compose_essential(pose: &CameraPose) -> EssentialMatrix {
    // ‖[t]x R‖ = √2 ‖t‖ for any rotation, so this never degenerates.
    EssentialMatrix(skew(&pose.translation) * pose.rotation / (2f64.sqrt() * pose.translation.norm()))
}

/// Epipolar residual together with a degeneracy flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Residual {
    pub value: f64,
    /// Both points sit at (or extremely near) their epipoles; `value` uses a
    /// floored denominator.
    pub degenerate: bool,
}

fn residual_parts(e: &Mat3, p: [f64; 2], q: [f64; 2]) -> (f64, f64) {
    let p = Vec3::new(p[0], p[1], 1.0);
    let q = Vec3::new(q[0], q[1], 1.0);
    let ep = e * p;
    let etq = e.transpose() * q;
    let num = q.dot(&ep);
    let den = ep.x * ep.x + ep.y * ep.y + etq.x * etq.x + etq.y * etq.y;
    (num, den)
}

/// Squared algebraic error `(p'ᵀ E p)²` normalized by the first two
/// components of both epipolar lines.
pub fn epipolar_residual_checked(e: &EssentialMatrix, p: [f64; 2], p_prime: [f64; 2]) -> Residual {
    let (num, den) = residual_parts(&e.0, p, p_prime);
    Residual {
        value: num * num / den.max(RESIDUAL_DENOM_FLOOR),
        degenerate: den < RESIDUAL_DENOM_FLOOR,
    }
}

pub fn epipolar_residual(e: &EssentialMatrix, p: [f64; 2], p_prime: [f64; 2]) -> f64 {
    epipolar_residual_checked(e, p, p_prime).value
}

/// Residual of every correspondence in `s`.
pub fn residuals(e: &EssentialMatrix, s: &CorrespondenceSet) -> Vec<f64> {
    (0..s.len())
        .map(|i| epipolar_residual(e, s.first(i), s.second(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forward_motion() -> EssentialMatrix {
        compose_essential(&CameraPose::new(Mat3::identity(), Vec3::z()).unwrap())
    }

    #[test]
    fn forward_motion_essential_is_skew_of_z() {
        let e = forward_motion();
        let s = 1.0 / 2f64.sqrt();
        let expected = [0.0, -s, 0.0, s, 0.0, 0.0, 0.0, 0.0, 0.0];
        for (a, b) in e.row_major().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn negated_translation_negates_essential() {
        let r = nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.3).into_inner();
        let t = Vec3::new(0.3, -0.5, 0.8);
        let a = compose_essential(&CameraPose::new(r, t).unwrap());
        let b = compose_essential(&CameraPose::new(r, -t).unwrap());
        assert!((a.0 + b.0).norm() < 1e-15);
    }

    #[test]
    fn radial_motion_has_zero_residual() {
        assert_eq!(epipolar_residual(&forward_motion(), [1.0, 0.0], [2.0, 0.0]), 0.0);
    }

    #[test]
    fn residual_at_both_epipoles_is_flagged() {
        let r = epipolar_residual_checked(&forward_motion(), [0.0, 0.0], [0.0, 0.0]);
        assert!(r.degenerate);
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn orthogonal_offset_gives_half_delta_squared() {
        // Sideways motion: symmetric line gradients at these points.
        let e = compose_essential(&CameraPose::new(Mat3::identity(), Vec3::x()).unwrap());
        for delta in [1e-4, 1e-3, 1e-2, 1e-1] {
            let r = epipolar_residual(&e, [0.0, 0.2], [0.5, 0.2 + delta]);
            assert!((r - delta * delta / 2.0).abs() < 1e-12 * (1.0 + delta * delta), "{delta}: {r}");
        }
    }

    #[test]
    fn pose_rejects_reflections() {
        let mut r = Mat3::identity();
        r[(2, 2)] = -1.0;
        assert!(CameraPose::new(r, Vec3::z()).is_err());
    }
}
