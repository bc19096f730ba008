//! Rotation representations: the continuous 6D form, intrinsic XYZ Euler
//! angles, and a few SO(3) helpers shared by the rest of the crate.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::KinematicsError;

/// Norm below which a 6D column is treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Tolerance used when checking that a matrix is a rotation.
pub const SO3_TOLERANCE: f64 = 1e-6;

/// Threshold on `|cos(pitch)|` below which an Euler decomposition is flagged as
/// gimbal locked.
pub const GIMBAL_LOCK_THRESHOLD: f64 = 1e-7;

/// First two columns of a rotation matrix, column-major:
/// `(c0.x, c0.y, c0.z, c1.x, c1.y, c1.z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn first_column(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn second_column(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Gram-Schmidt reconstruction of a rotation matrix from its 6D form.
///
/// The first column of the result is the normalized first input column; the
/// second is the normalized remainder of the second input column after
/// removing its projection on the first; the third completes a right-handed
/// frame.
pub fn rotation6d_to_matrix(r: &Rotation6D) -> Result<Matrix3<f64>, KinematicsError> {
    let a1 = r.first_column();
    let a2 = r.second_column();
    let n1 = a1.norm();
    if !(n1 > DEGENERATE_NORM) {
        return Err(KinematicsError::DegenerateInput);
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if !(n2 > DEGENERATE_NORM) {
        return Err(KinematicsError::DegenerateInput);
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Reads the first two columns of a rotation matrix.
pub fn matrix_to_rotation6d(m: &Matrix3<f64>) -> Result<Rotation6D, KinematicsError> {
    if !is_rotation(m, SO3_TOLERANCE) {
        return Err(KinematicsError::NotARotation);
    }
    Ok(Rotation6D([
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ]))
}

/// `true` when `m` is orthonormal with determinant +1 within `tol`.
pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    if !m.iter().all(|v| v.is_finite()) {
        return false;
    }
    let err = (m.transpose() * m - Matrix3::identity()).amax();
    err <= tol && (m.determinant() - 1.0).abs() <= tol
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Intrinsic X-then-Y-then-Z composition: `Rx(a) * Ry(b) * Rz(c)`.
pub fn euler_to_matrix(angles: &Vector3<f64>) -> Matrix3<f64> {
    rot_x(angles.x) * rot_y(angles.y) * rot_z(angles.z)
}

/// Result of decomposing a rotation into intrinsic XYZ Euler angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerDecomposition {
    /// `(a, b, c)` in `[-pi, pi] x [-pi/2, pi/2] x [-pi, pi]`.
    pub angles: Vector3<f64>,
    /// Set when `|cos(b)|` fell below [`GIMBAL_LOCK_THRESHOLD`]. The third
    /// angle is then fixed to zero and the first absorbs the combined roll.
    pub gimbal_lock: bool,
}

/// Inverse of [`euler_to_matrix`].
pub fn matrix_to_euler(m: &Matrix3<f64>) -> Result<EulerDecomposition, KinematicsError> {
    if !is_rotation(m, SO3_TOLERANCE) {
        return Err(KinematicsError::NotARotation);
    }
    let cos_b = m[(0, 0)].hypot(m[(0, 1)]);
    let b = m[(0, 2)].atan2(cos_b);
    if cos_b < GIMBAL_LOCK_THRESHOLD {
        let a = m[(2, 1)].atan2(m[(1, 1)]);
        return Ok(EulerDecomposition {
            angles: Vector3::new(a, b, 0.0),
            gimbal_lock: true,
        });
    }
    let a = (-m[(1, 2)]).atan2(m[(2, 2)]);
    let c = (-m[(0, 1)]).atan2(m[(0, 0)]);
    Ok(EulerDecomposition {
        angles: Vector3::new(a, b, c),
        gimbal_lock: false,
    })
}

/// Closest rotation in the Frobenius sense (polar decomposition via SVD).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u requested");
    let v_t = svd.v_t.expect("svd v_t requested");
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// Geodesic angle (radians) between two rotations.
pub fn geodesic_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let r = a.transpose() * b;
    let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin_part = 0.5 * skew.norm();
    let cos_part = 0.5 * (r.trace() - 1.0);
    sin_part.atan2(cos_part)
}

/// Rotation by `angle` radians about `axis` (need not be normalized).
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.norm();
    if n == 0.0 || angle == 0.0 {
        return Matrix3::identity();
    }
    Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis / n), angle).into_inner()
}

/// Rotation vector (axis times angle) of `m`.
pub fn log_map(m: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*m).scaled_axis()
}

/// Uniformly distributed rotation (Shoemake's quaternion method).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let u3: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = nalgebra::Quaternion::new(b * u3.cos(), a * u2.sin(), a * u2.cos(), b * u3.sin());
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

/// Rotation by exactly `angle` radians about a uniformly random axis.
pub fn random_rotation_with_angle<R: Rng + ?Sized>(rng: &mut R, angle: f64) -> Matrix3<f64> {
    let axis = random_unit_vector(rng);
    axis_angle(&axis, angle)
}

pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Spherical interpolation between two rotations, `w` in `[0, 1]`.
pub fn slerp(a: &Matrix3<f64>, b: &Matrix3<f64>, w: f64) -> Matrix3<f64> {
    let qa = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*a));
    let qb = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*b));
    match qa.try_slerp(&qb, w, 1e-12) {
        Some(q) => q.to_rotation_matrix().into_inner(),
        // half-turn apart: any great circle works, go through the relative axis
        None => a * axis_angle(&log_map(&(a.transpose() * b)), w * std::f64::consts::PI),
    }
}

/// Row-major flattening.
pub fn to_row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

pub fn from_row_major(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn identity_6d() {
        let m = rotation6d_to_matrix(&Rotation6D::IDENTITY).unwrap();
        assert_eq!(m, Matrix3::identity());
    }

    #[test]
    fn gram_schmidt_is_scale_invariant() {
        let m = rotation6d_to_matrix(&Rotation6D([2.0, 0.0, 0.0, 0.0, 3.0, 0.0])).unwrap();
        assert!((m - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn degenerate_columns_are_rejected() {
        assert_eq!(
            rotation6d_to_matrix(&Rotation6D([0.0; 6])),
            Err(KinematicsError::DegenerateInput)
        );
        // second column parallel to the first
        assert_eq!(
            rotation6d_to_matrix(&Rotation6D([1.0, 2.0, 3.0, 2.0, 4.0, 6.0])),
            Err(KinematicsError::DegenerateInput)
        );
    }

    #[test]
    fn quarter_turn_about_z_reads_columns() {
        let r = matrix_to_rotation6d(&rot_z(FRAC_PI_2)).unwrap();
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in r.0.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(
            matrix_to_rotation6d(&Matrix3::identity()).unwrap(),
            Rotation6D::IDENTITY
        );
    }

    #[test]
    fn non_rotation_is_rejected() {
        let m = Matrix3::identity() * 1.1;
        assert_eq!(matrix_to_rotation6d(&m), Err(KinematicsError::NotARotation));
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matrix_to_euler(&reflect).is_err());
    }

    #[test]
    fn euler_basics() {
        assert_eq!(euler_to_matrix(&Vector3::zeros()), Matrix3::identity());
        let m = euler_to_matrix(&Vector3::new(FRAC_PI_2, 0.0, 0.0));
        let y = m * Vector3::y();
        assert!((y - Vector3::z()).norm() < 1e-15);
    }

    #[test]
    fn euler_ranges_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let m = random_rotation(&mut rng);
            let d = matrix_to_euler(&m).unwrap();
            assert!(!d.gimbal_lock);
            assert!(d.angles.x.abs() <= PI && d.angles.z.abs() <= PI);
            assert!(d.angles.y.abs() <= FRAC_PI_2);
            assert!((euler_to_matrix(&d.angles) - m).amax() < 1e-9);
        }
    }

    #[test]
    fn gimbal_lock_is_flagged_and_matrix_preserved() {
        for pitch in [FRAC_PI_2, -FRAC_PI_2] {
            let m = euler_to_matrix(&Vector3::new(0.3, pitch, -0.7));
            let d = matrix_to_euler(&m).unwrap();
            assert!(d.gimbal_lock);
            assert_eq!(d.angles.z, 0.0);
            assert!((euler_to_matrix(&d.angles) - m).amax() < 1e-9);
        }
    }

    #[test]
    fn geodesic_angle_matches_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in 1..50 {
            let angle = k as f64 * 0.06;
            let a = random_rotation(&mut rng);
            let b = a * random_rotation_with_angle(&mut rng, angle);
            assert!((geodesic_angle(&a, &b) - angle).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_rotation_recovers_perturbed_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random_rotation(&mut rng);
        assert!((nearest_rotation(&(r * 2.5)) - r).amax() < 1e-12);
        let reflected = -r;
        assert!(is_rotation(&nearest_rotation(&reflected), 1e-12));
    }
}
