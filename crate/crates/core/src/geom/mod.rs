//! Rigid-body geometry shared across the pipeline.
//!
//! Transforms are stored as a rotation matrix plus translation vector and are
//! re-orthonormalized whenever accumulated drift exceeds [`ROT_DRIFT_TOL`].
//! se(3) tangent vectors are ordered rotation-first: `[wx, wy, wz, vx, vy, vz]`.

mod cloud;
mod needle;
mod transform;

pub use cloud::{CloudIoError, PointCloud};
pub use needle::{
    needle_from_spec, sample_needle_surface, sample_needle_surface_detailed, NeedleModel,
    NeedleSurface,
};
pub use transform::{
    se3_adjoint, se3_exp, se3_left_jacobian, se3_left_jacobian_inv, se3_log,
    se3_right_jacobian_inv, so3_exp, so3_hat, so3_left_jacobian, so3_left_jacobian_inv, so3_log,
    GeomError, RigidTransform, ROT_DRIFT_TOL,
};
