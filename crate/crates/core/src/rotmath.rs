//! SO(3) primitives: exponential and logarithm maps, geodesic error,
//! swing-twist decomposition and the right Jacobian of `Exp`.
//!
//! Rotation vectors are plain `Vector3<f64>` (axis times angle, radians).
//! Rotation matrices are `nalgebra::Rotation3<f64>`; the checked entry points
//! validate orthonormality before use, the `*_unchecked` variants skip the
//! validation for hot loops that only ever compose valid rotations.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// A rotation vector: direction is the axis, magnitude the angle in radians.
pub type RotationVector = Vector3<f64>;

/// A proper rotation matrix.
pub type RotationMatrix = Rotation3<f64>;

/// Below this angle exp/log switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Tolerance on `RᵀR = I` and `det R = 1` for externally supplied matrices.
pub const ORTHO_TOL: f64 = 1e-9;

/// Skew-symmetric cross-product matrix, `skew(a) * b == a × b`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Checks a raw matrix against the rotation invariants and wraps it.
pub fn validate_rotation(m: &Matrix3<f64>) -> Result<RotationMatrix> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("rotation matrix".into()));
    }
    let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
    let det = m.determinant();
    if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
        return Err(Error::NotARotation { ortho, det });
    }
    Ok(Rotation3::from_matrix_unchecked(*m))
}

/// Rodrigues' formula. Rejects non-finite input.
pub fn exp_map(v: &RotationVector) -> Result<RotationMatrix> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("rotation vector".into()));
    }
    Ok(exp_unchecked(v))
}

/// Rodrigues' formula without the finiteness check.
pub fn exp_unchecked(v: &RotationVector) -> RotationMatrix {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(v);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation3::from_matrix_unchecked(Matrix3::identity() + k * a + k * k * b)
}

/// Logarithm map returning the canonical rotation vector, `‖v‖ ≤ π`.
pub fn log_map(r: &RotationMatrix) -> Result<RotationVector> {
    validate_rotation(r.matrix())?;
    Ok(log_unchecked(r))
}

/// Logarithm via the unit quaternion, which stays well conditioned both near
/// the identity and near a half turn.
pub fn log_unchecked(r: &RotationMatrix) -> RotationVector {
    let q = UnitQuaternion::from_rotation_matrix(r);
    quat_log(q.quaternion())
}

pub(crate) fn quat_log(q: &Quaternion<f64>) -> RotationVector {
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let n = v.norm();
    if n < SMALL_ANGLE {
        // atan2(n, w) / n ≈ (1 - n²/(3w²)) / w
        v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
    } else {
        v * (2.0 * n.atan2(w) / n)
    }
}

/// `Log(R_aᵀ R_b)`: the rotation taking `a` to `b`, expressed in `a`'s frame.
pub fn geodesic_error(a: &RotationMatrix, b: &RotationMatrix) -> Result<RotationVector> {
    validate_rotation(a.matrix())?;
    validate_rotation(b.matrix())?;
    Ok(geodesic_error_unchecked(a, b))
}

#[inline]
pub fn geodesic_error_unchecked(a: &RotationMatrix, b: &RotationMatrix) -> RotationVector {
    log_unchecked(&(a.transpose() * b))
}

/// Geodesic angle between two rotations in radians.
pub fn geodesic_angle(a: &RotationMatrix, b: &RotationMatrix) -> f64 {
    geodesic_error_unchecked(a, b).norm()
}

/// Result of [`swing_twist`]: `rotation = swing * twist`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwingTwist {
    pub swing: RotationMatrix,
    pub twist: RotationMatrix,
    /// Set when the rotation is a half turn about an axis perpendicular to
    /// the twist axis; the twist is then ambiguous and returned as identity.
    pub degenerate: bool,
}

/// Splits `r` into a twist about `axis` and the remaining swing, using the
/// quaternion projection onto the axis.
pub fn swing_twist(r: &RotationMatrix, axis: &Vector3<f64>) -> Result<SwingTwist> {
    if axis.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("twist axis".into()));
    }
    if (axis.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "twist axis must be unit length, got norm {}",
            axis.norm()
        )));
    }
    validate_rotation(r.matrix())?;
    Ok(swing_twist_unchecked(r, axis))
}

pub fn swing_twist_unchecked(r: &RotationMatrix, axis: &Vector3<f64>) -> SwingTwist {
    let q = UnitQuaternion::from_rotation_matrix(r);
    let (twist_q, degenerate) = twist_quaternion(q.quaternion(), axis);
    let swing_q = q * twist_q.inverse();
    SwingTwist {
        swing: swing_q.to_rotation_matrix(),
        twist: twist_q.to_rotation_matrix(),
        degenerate,
    }
}

pub(crate) const TWIST_DEGENERATE: f64 = 1e-9;

pub(crate) fn twist_quaternion(
    q: &Quaternion<f64>,
    axis: &Vector3<f64>,
) -> (UnitQuaternion<f64>, bool) {
    let proj = axis * q.imag().dot(axis);
    let t = Quaternion::from_parts(q.w, proj);
    let n = t.norm();
    if n < TWIST_DEGENERATE {
        (UnitQuaternion::identity(), true)
    } else {
        (UnitQuaternion::new_unchecked(t / n), false)
    }
}

/// Right Jacobian of `Exp`: `Exp(v + δ) ≈ Exp(v) Exp(Jr(v) δ)`.
pub fn right_jacobian(v: &RotationVector) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(v);
    let (a, b) = if theta < 1e-5 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() - k * a + k * k * b
}

/// Inverse of [`right_jacobian`]; singular at `‖v‖ = 2π`, fine on the
/// canonical ball.
pub fn right_jacobian_inv(v: &RotationVector) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(v);
    let c = if theta < 1e-5 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + k * 0.5 + k * k * c
}

/// Re-orthonormalizes a drifting rotation by round-tripping through a unit
/// quaternion.
pub fn renormalize(r: &RotationMatrix) -> RotationMatrix {
    UnitQuaternion::from_rotation_matrix(r).to_rotation_matrix()
}
