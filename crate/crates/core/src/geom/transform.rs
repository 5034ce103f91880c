//! SE(3) rigid transforms, the exponential/log maps, and their Jacobians.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::de::Error as DeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Orthonormality drift above which a rotation matrix is re-orthonormalized.
pub const ROT_DRIFT_TOL: f64 = 1e-8;

/// Rotation angles closer to pi than this margin make the log map
/// ill-conditioned and are rejected.
const ANGLE_NEAR_PI_MARGIN: f64 = 1e-6;

/// Below this angle the trig coefficient ratios switch to Taylor series.
const SMALL_ANGLE: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    /// The rotation angle is within `margin` of pi where the log map loses
    /// precision; the caller should re-center the estimate first.
    #[error("rotation angle {angle} rad is within {margin} of pi; log map rejected")]
    AngleNearPi { angle: f64, margin: f64 },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("needle body spanning {fraction_of_circle} of a circle exceeds the supported half circle")]
    ArcTooLong { fraction_of_circle: f64 },
}

/// A rigid transform: `p_out = R * p_in + t`.
///
/// The rotation is matrix-stored; [`RigidTransform::new`] and [`compose`]
/// re-orthonormalize when drift exceeds [`ROT_DRIFT_TOL`]. Serializes as a
/// row-major 3x4 matrix (rotation columns 0..3, translation column 3).
///
/// [`compose`]: RigidTransform::compose
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, re-orthonormalizing `rotation` if it has drifted.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renormalize_if_drifted(rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotates a direction without translating it.
    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self.compose(&other)` applies `other` first: `(self ∘ other)(p)`.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle of `self.inverse() * other` — a metric on SO(3).
    ///
    /// Uses the atan2 form, which keeps full precision for tiny angles where
    /// the plain acos-of-trace formulation bottoms out around 1e-8.
    pub fn rotation_angle_to(&self, other: &Self) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let sin = vee(&(rel - rel.transpose())).norm() / 2.0;
        let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        sin.atan2(cos)
    }

    /// Euclidean distance between the two translations.
    pub fn translation_distance_to(&self, other: &Self) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Row-major 3x4 representation used in JSON reports.
    pub fn to_rows_3x4(&self) -> [[f64; 4]; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2]],
        ]
    }

    pub fn from_rows_3x4(rows: &[[f64; 4]; 3]) -> Result<Self, String> {
        let rotation = Matrix3::new(
            rows[0][0], rows[0][1], rows[0][2], //
            rows[1][0], rows[1][1], rows[1][2], //
            rows[2][0], rows[2][1], rows[2][2],
        );
        let drift = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if drift > 1e-6 {
            return Err(format!("rotation block is not orthonormal (drift {drift:.3e})"));
        }
        if rotation.determinant() < 0.0 {
            return Err("rotation block is a reflection (determinant < 0)".to_string());
        }
        let translation = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        Ok(Self::new(rotation, translation))
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_rows_3x4().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows = <[[f64; 4]; 3]>::deserialize(deserializer)?;
        Self::from_rows_3x4(&rows).map_err(D::Error::custom)
    }
}

fn renormalize_if_drifted(r: Matrix3<f64>) -> Matrix3<f64> {
    let drift = (r.transpose() * r - Matrix3::identity()).abs().max();
    if drift <= ROT_DRIFT_TOL {
        return r;
    }
    // Nearest rotation in Frobenius norm via SVD, with the determinant forced
    // positive so reflections cannot creep in.
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd of 3x3 always yields u");
    let v_t = svd.v_t.expect("svd of 3x3 always yields v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Skew-symmetric matrix such that `so3_hat(w) * v == w.cross(&v)`.
pub fn so3_hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -w[2], w[1], //
        w[2], 0.0, -w[0], //
        -w[1], w[0], 0.0,
    )
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues' formula: `exp(hat(w))`.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let hat = so3_hat(w);
    let (a, b) = if theta < SMALL_ANGLE {
        // sin(t)/t and (1-cos(t))/t^2
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + hat * a + hat * hat * b
}

/// Inverse of [`so3_exp`]. Fails within [`ANGLE_NEAR_PI_MARGIN`] of pi.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeomError> {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = c.acos();
    if theta > std::f64::consts::PI - ANGLE_NEAR_PI_MARGIN {
        return Err(GeomError::AngleNearPi {
            angle: theta,
            margin: ANGLE_NEAR_PI_MARGIN,
        });
    }
    let antisym = vee(&(r - r.transpose()));
    if theta < SMALL_ANGLE {
        // theta/(2 sin theta) -> 1/2 * (1 + t^2/6 + 7 t^4/360)
        let t2 = theta * theta;
        return Ok(antisym * (0.5 * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)));
    }
    Ok(antisym * (theta / (2.0 * theta.sin())))
}

/// Left Jacobian of SO(3); also the `V` matrix in the SE(3) exponential.
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let hat = so3_hat(w);
    let (b, c) = if theta < SMALL_ANGLE {
        // (1-cos t)/t^2 and (t - sin t)/t^3
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + hat * b + hat * hat * c
}

/// Inverse of [`so3_left_jacobian`], in closed form.
pub fn so3_left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let hat = so3_hat(w);
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - hat * 0.5 + hat * hat * c
}

/// SE(3) exponential. `xi` is rotation-first: `[w, v]`.
pub fn se3_exp(xi: &Vector6<f64>) -> RigidTransform {
    let w = Vector3::new(xi[0], xi[1], xi[2]);
    let v = Vector3::new(xi[3], xi[4], xi[5]);
    RigidTransform::new(so3_exp(&w), so3_left_jacobian(&w) * v)
}

/// SE(3) log. Rotation-first ordering; fails near a pi rotation.
pub fn se3_log(t: &RigidTransform) -> Result<Vector6<f64>, GeomError> {
    let w = so3_log(t.rotation())?;
    let v = so3_left_jacobian_inv(&w) * t.translation();
    Ok(Vector6::new(w[0], w[1], w[2], v[0], v[1], v[2]))
}

/// Adjoint of a transform in the `[w, v]` ordering:
/// `Ad_T * xi = log(T * exp(xi) * T^-1)` to first order (exact on twists).
pub fn se3_adjoint(t: &RigidTransform) -> Matrix6<f64> {
    let r = t.rotation();
    let t_hat_r = so3_hat(t.translation()) * r;
    let mut ad = Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&t_hat_r);
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    ad
}

/// The `Q` block of the SE(3) left Jacobian (Barfoot-style closed form).
fn se3_q_block(w: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let wh = so3_hat(w);
    let vh = so3_hat(v);
    let (m1, m2, m3) = if theta < SMALL_ANGLE {
        (
            1.0 / 6.0 - theta2 / 120.0,
            -1.0 / 24.0 + theta2 / 720.0,
            -1.0 / 120.0 + theta2 / 5040.0,
        )
    } else {
        let t3 = theta2 * theta;
        (
            (theta - theta.sin()) / t3,
            (1.0 - theta2 / 2.0 - theta.cos()) / (theta2 * theta2),
            (theta - theta.sin() - t3 / 6.0) / (theta2 * t3),
        )
    };
    let a = wh * vh + vh * wh + wh * vh * wh;
    let b = wh * wh * vh + vh * wh * wh - wh * vh * wh * 3.0;
    let c = wh * vh * wh * wh + wh * wh * vh * wh;
    vh * 0.5 + a * m1 - b * m2 - c * (0.5 * (m2 - 3.0 * m3))
}

/// Left Jacobian of SE(3) in the `[w, v]` ordering:
/// `log(exp(d) * exp(xi)) ≈ xi + se3_left_jacobian_inv(xi) * d`.
pub fn se3_left_jacobian(xi: &Vector6<f64>) -> Matrix6<f64> {
    let w = Vector3::new(xi[0], xi[1], xi[2]);
    let v = Vector3::new(xi[3], xi[4], xi[5]);
    let j = so3_left_jacobian(&w);
    let q = se3_q_block(&w, &v);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out
}

/// Inverse of [`se3_left_jacobian`], in closed form.
pub fn se3_left_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    let w = Vector3::new(xi[0], xi[1], xi[2]);
    let v = Vector3::new(xi[3], xi[4], xi[5]);
    let j_inv = so3_left_jacobian_inv(&w);
    let q = se3_q_block(&w, &v);
    let lower_left = -j_inv * q * j_inv;
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&lower_left);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out
}

/// Right Jacobian inverse: `log(exp(xi) * exp(d)) ≈ xi + se3_right_jacobian_inv(xi) * d`.
pub fn se3_right_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    se3_left_jacobian_inv(&(-xi))
}
