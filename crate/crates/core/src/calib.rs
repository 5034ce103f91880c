//! Joint scanner/needle calibration from registered needle poses.
//!
//! The rig has two fixed unknowns: the scanner frame in the world
//! (`t_oct`) and the needle frame in the end-effector frame (`t_n`).
//! Each observation pairs a forward-kinematics end-effector pose
//! `t_ee` (world frame) with a registered needle pose `t_icp` (scanner
//! frame); with perfect data the chain closes,
//!
//! ```text
//! t_icp = t_oct⁻¹ · t_ee · t_n.
//! ```
//!
//! [`solve_calibration`] minimizes the squared se(3) log of the chain's
//! error transform over both unknowns with Levenberg–Marquardt, using
//! analytic Jacobians. [`rough_calibrate`] bootstraps the two transforms
//! from three poses without an initial guess, and
//! [`sample_calibration_poses`] spreads follow-up needle poses across the
//! scanner field of view, converting each into the end-effector pose the
//! robot must reach.

use crate::geom::{
    se3_adjoint, se3_exp, se3_left_jacobian_inv, se3_log, se3_right_jacobian_inv, so3_exp,
    so3_log, GeomError, RigidTransform,
};
use crate::octsim::{DriverSpec, NeedlePlacement, SceneSpec};
use crate::rng::{hash2, hash_unit_f64};
use crate::NeedleModel;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Rotation residuals are weighed at this many millimetres per radian by
/// default — the standard needle's radius, so one radian of orientation
/// error counts like the arc it sweeps at needle scale.
pub const DEFAULT_ROTATION_SCALE_MM_PER_RAD: f64 = 13.0 / PI;

const MAX_ITERATIONS: usize = 200;
const INITIAL_DAMPING: f64 = 1e-3;
/// Gradient threshold, relative to the Jacobian's largest entry so
/// metre-scale lever arms don't make an absolute tolerance unreachable.
const GRADIENT_TOL: f64 = 1e-14;
const STEP_TOL: f64 = 1e-12;
const COST_REDUCTION_TOL: f64 = 1e-15;
const RANK_RATIO_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("calibration needs at least {min} poses, got {got}")]
    TooFewPoses { min: usize, got: usize },
    #[error("rough calibration takes exactly 3 poses, got {got}")]
    RoughPoseCount { got: usize },
    #[error("pose set is rank-deficient: rotations lack axis diversity")]
    RankDeficient,
    #[error("residual at pose {index} is outside the log map's range: {source}")]
    ResidualOutOfRange {
        index: usize,
        #[source]
        source: GeomError,
    },
}

/// One paired observation: the end-effector pose in the world from forward
/// kinematics and the needle pose in the scanner frame from registration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationObservation {
    pub t_ee: RigidTransform,
    pub t_icp: RigidTransform,
}

/// Error-transform breakdown for one pose after the solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseResidual {
    /// Rotation part of the error twist, per axis (rad).
    pub rotation_rad: [f64; 3],
    /// Translation of the error transform, per axis (mm).
    pub translation_mm: [f64; 3],
    pub rotation_angle_rad: f64,
    pub translation_norm_mm: f64,
}

/// Solved rig transforms plus residual statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSolution {
    /// Scanner frame in the world.
    pub t_oct: RigidTransform,
    /// Needle frame in the end-effector frame.
    pub t_n: RigidTransform,
    /// RMS over poses of the error transform's translation norm.
    pub translation_rmse_mm: f64,
    /// RMS over poses of the error transform's rotation angle.
    pub rotation_rmse_rad: f64,
    pub per_pose: Vec<PoseResidual>,
    /// False when the iteration budget ran out; the solution is then the
    /// best iterate found.
    pub converged: bool,
    pub iterations: usize,
    /// Rotation weight used in the objective (mm per rad).
    pub rotation_scale_mm_per_rad: f64,
}

/// Which chain converts a desired needle pose into an end-effector target.
///
/// `RoundTrip` is self-consistent: feeding the produced end-effector pose
/// back through the calibration chain reproduces the desired needle pose
/// exactly. `InvertedDesired` uses the inverse of the desired pose in the
/// chain instead; it is kept selectable for comparison but does not round-
/// trip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EeChainConvention {
    RoundTrip,
    InvertedDesired,
}

/// Error transform of one observation under candidate rig transforms.
fn error_transform(
    ob: &CalibrationObservation,
    t_oct: &RigidTransform,
    t_n: &RigidTransform,
) -> RigidTransform {
    ob.t_icp
        .inverse()
        .compose(&t_oct.inverse())
        .compose(&ob.t_ee)
        .compose(t_n)
}

/// Stacked residual vector and Jacobian of the calibration objective at
/// `(t_oct, t_n)`.
///
/// Rows come in blocks of six per pose: the se(3) log of the pose's error
/// transform, rotation components first and scaled by `rotation_scale`
/// (mm/rad). Columns 0..6 differentiate with respect to a local
/// right-multiplied update `t_oct · exp(δ)`, columns 6..12 with respect to
/// `t_n · exp(δ)`.
pub fn calibration_jacobian(
    obs: &[CalibrationObservation],
    t_oct: &RigidTransform,
    t_n: &RigidTransform,
    rotation_scale: f64,
) -> Result<(DVector<f64>, DMatrix<f64>), CalibError> {
    let m = obs.len();
    let mut r = DVector::zeros(6 * m);
    let mut jac = DMatrix::zeros(6 * m, 12);
    for (i, ob) in obs.iter().enumerate() {
        let e = error_transform(ob, t_oct, t_n);
        let xi = se3_log(&e).map_err(|source| CalibError::ResidualOutOfRange { index: i, source })?;
        // t_n · exp(δ) appends the increment to the chain's tail:
        //   log(E · exp(δ)) ≈ ξ + Jr⁻¹(ξ) δ.
        let block_n = se3_right_jacobian_inv(&xi);
        // t_oct · exp(δ) turns into a head factor after conjugation:
        //   E(δ) = exp(−Ad_{t_icp⁻¹} δ) · E, so
        //   log(E(δ)) ≈ ξ − Jl⁻¹(ξ) Ad_{t_icp⁻¹} δ.
        let block_o = -(se3_left_jacobian_inv(&xi) * se3_adjoint(&ob.t_icp.inverse()));
        for row in 0..6 {
            let w = if row < 3 { rotation_scale } else { 1.0 };
            r[6 * i + row] = w * xi[row];
            for col in 0..6 {
                jac[(6 * i + row, col)] = w * block_o[(row, col)];
                jac[(6 * i + row, 6 + col)] = w * block_n[(row, col)];
            }
        }
    }
    Ok((r, jac))
}

/// Per-pose residual statistics at `(t_oct, t_n)`.
fn residual_stats(
    obs: &[CalibrationObservation],
    t_oct: &RigidTransform,
    t_n: &RigidTransform,
) -> Result<(Vec<PoseResidual>, f64, f64), CalibError> {
    let mut per_pose = Vec::with_capacity(obs.len());
    let (mut sum_t2, mut sum_r2) = (0.0, 0.0);
    for (i, ob) in obs.iter().enumerate() {
        let e = error_transform(ob, t_oct, t_n);
        let xi = se3_log(&e).map_err(|source| CalibError::ResidualOutOfRange { index: i, source })?;
        let angle = e.rotation_angle_to(&RigidTransform::identity());
        let t_norm = e.translation().norm();
        sum_t2 += t_norm * t_norm;
        sum_r2 += angle * angle;
        per_pose.push(PoseResidual {
            rotation_rad: [xi[0], xi[1], xi[2]],
            translation_mm: [e.translation()[0], e.translation()[1], e.translation()[2]],
            rotation_angle_rad: angle,
            translation_norm_mm: t_norm,
        });
    }
    let m = obs.len() as f64;
    Ok((per_pose, (sum_t2 / m).sqrt(), (sum_r2 / m).sqrt()))
}

/// Solves for the scanner and needle-mount transforms from paired
/// observations, starting at `init = (t_oct, t_n)`, with the default
/// rotation weight.
///
/// Levenberg–Marquardt with analytic Jacobians; damping starts at 1e-3,
/// ×10 on a rejected step, ÷10 on an accepted one. Runs at most 200
/// candidate steps; if the budget runs out the best iterate is returned
/// with `converged` unset. Fails with [`CalibError::RankDeficient`] when
/// the pose set leaves directions unobservable (for example, all rotations
/// about one axis).
pub fn solve_calibration(
    obs: &[CalibrationObservation],
    init: (&RigidTransform, &RigidTransform),
) -> Result<CalibrationSolution, CalibError> {
    solve_calibration_scaled(obs, init, DEFAULT_ROTATION_SCALE_MM_PER_RAD)
}

/// As [`solve_calibration`] with an explicit rotation weight (mm/rad).
pub fn solve_calibration_scaled(
    obs: &[CalibrationObservation],
    init: (&RigidTransform, &RigidTransform),
    rotation_scale: f64,
) -> Result<CalibrationSolution, CalibError> {
    if obs.len() < 3 {
        return Err(CalibError::TooFewPoses {
            min: 3,
            got: obs.len(),
        });
    }
    let mut t_oct = *init.0;
    let mut t_n = *init.1;
    let (mut r, mut jac) = calibration_jacobian(obs, &t_oct, &t_n, rotation_scale)?;
    {
        let svd = jac.clone().svd(false, false);
        let ratio = svd.singular_values.min() / svd.singular_values.max();
        // NaN (all-zero Jacobian) must land on the deficient side too.
        if !ratio.is_finite() || ratio < RANK_RATIO_TOL {
            return Err(CalibError::RankDeficient);
        }
    }
    let mut cost = r.norm_squared();
    let mut mu = INITIAL_DAMPING;
    let mut iterations = 0;
    let mut converged = false;
    'outer: while iterations < MAX_ITERATIONS {
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if g.amax() < GRADIENT_TOL * (1.0 + jac.amax()) {
            converged = true;
            break;
        }
        loop {
            if iterations >= MAX_ITERATIONS {
                break 'outer;
            }
            iterations += 1;
            let mut damped = jtj.clone();
            for d in 0..12 {
                damped[(d, d)] += mu;
            }
            let Some(chol) = damped.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let delta = chol.solve(&(-&g));
            let step_oct = se3_exp(&Vector6::new(
                delta[0], delta[1], delta[2], delta[3], delta[4], delta[5],
            ));
            let step_n = se3_exp(&Vector6::new(
                delta[6], delta[7], delta[8], delta[9], delta[10], delta[11],
            ));
            let cand_oct = t_oct.compose(&step_oct);
            let cand_n = t_n.compose(&step_n);
            match calibration_jacobian(obs, &cand_oct, &cand_n, rotation_scale) {
                Ok((r2, j2)) if r2.norm_squared() < cost => {
                    let reduction = cost - r2.norm_squared();
                    cost = r2.norm_squared();
                    t_oct = cand_oct;
                    t_n = cand_n;
                    r = r2;
                    jac = j2;
                    mu = (mu / 10.0).max(1e-15);
                    if delta.amax() < STEP_TOL || reduction <= COST_REDUCTION_TOL * cost {
                        converged = true;
                        break 'outer;
                    }
                    break;
                }
                // Worse, or the candidate left the log map's range: damp
                // more and retry from the same linearization. Damping
                // exhaustion means no representable step improves the cost
                // — the iterate sits at the numerical floor of a minimum.
                _ => {
                    mu *= 10.0;
                    if mu > 1e16 {
                        converged = true;
                        break 'outer;
                    }
                }
            }
        }
    }
    let (per_pose, translation_rmse_mm, rotation_rmse_rad) = residual_stats(obs, &t_oct, &t_n)?;
    Ok(CalibrationSolution {
        t_oct,
        t_n,
        translation_rmse_mm,
        rotation_rmse_rad,
        per_pose,
        converged,
        iterations,
        rotation_scale_mm_per_rad: rotation_scale,
    })
}

/// Orthogonal Procrustes: rotation minimizing Σ‖a_k − R b_k‖².
fn procrustes_rotation(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Matrix3<f64> {
    let mut h = Matrix3::zeros();
    for (a, b) in pairs {
        h += b * a.transpose();
    }
    polar_rotation(&h)
}

/// Nearest rotation to an arbitrary 3×3 matrix (Frobenius sense), via SVD
/// with a determinant correction. For `h = Σ b aᵀ` this is the Procrustes
/// rotation taking the `b`s onto the `a`s.
fn polar_rotation(h: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let d = (v_t.transpose() * u.transpose()).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    v_t.transpose() * correction * u.transpose()
}

/// Closed-form bootstrap of `(t_oct, t_n)` from the observations, used to
/// initialize the solver when no guess exists.
///
/// Eliminating `t_oct` between two observations leaves the classic
/// hand-eye relation `A_ij · t_n = t_n · B_ij` on relative motions
/// (A from the robot, B from registration). The needle-mount rotation
/// comes from Procrustes on the paired relative rotation axes, the scanner
/// rotation by averaging the per-pose closures, and both translations from
/// one joint linear least-squares solve.
fn closed_form_init(
    obs: &[CalibrationObservation],
) -> Result<(RigidTransform, RigidTransform), CalibError> {
    let mut axis_pairs = Vec::new();
    for i in 0..obs.len() {
        for j in (i + 1)..obs.len() {
            let a = obs[j].t_ee.inverse().compose(&obs[i].t_ee);
            let b = obs[j].t_icp.inverse().compose(&obs[i].t_icp);
            let (Ok(alpha), Ok(beta)) = (so3_log(a.rotation()), so3_log(b.rotation())) else {
                continue; // π-rotation pair carries no usable axis
            };
            axis_pairs.push((alpha, beta));
        }
    }
    // The axis cross-covariance must have two well-separated directions:
    // zero relative rotation or a shared single axis leaves the mount
    // rotation undetermined.
    let mut h = Matrix3::zeros();
    for (a, b) in &axis_pairs {
        h += b * a.transpose();
    }
    let s = h.svd(false, false).singular_values;
    if s[0] < 1e-12 || s[1] / s[0] < 1e-6 {
        return Err(CalibError::RankDeficient);
    }
    let r_n = procrustes_rotation(&axis_pairs);

    // Each pose closes the chain on its own: t_oct = t_ee·t_n·t_icp⁻¹.
    let mut closure_sum = Matrix3::zeros();
    for ob in obs {
        closure_sum += ob.t_ee.rotation() * r_n * ob.t_icp.rotation().transpose();
    }
    let r_oct = polar_rotation(&closure_sum.transpose());

    // Translations: R_oct·t_icp + t_oct = R_ee·t_n + t_ee per pose, linear
    // in the stacked unknown [t_n; t_oct].
    let m = obs.len();
    let mut a = DMatrix::zeros(3 * m, 6);
    let mut rhs = DVector::zeros(3 * m);
    for (i, ob) in obs.iter().enumerate() {
        let lhs = r_oct * ob.t_icp.translation() - ob.t_ee.translation();
        for row in 0..3 {
            for col in 0..3 {
                a[(3 * i + row, col)] = ob.t_ee.rotation()[(row, col)];
            }
            a[(3 * i + row, 3 + row)] = -1.0;
            rhs[3 * i + row] = lhs[row];
        }
    }
    let svd = a.svd(true, true);
    if svd.singular_values.min() / svd.singular_values.max() < RANK_RATIO_TOL {
        return Err(CalibError::RankDeficient);
    }
    let x = svd
        .solve(&rhs, 1e-12)
        .expect("svd computed with u and v_t");
    let t_n_vec = Vector3::new(x[0], x[1], x[2]);
    let t_oct_vec = Vector3::new(x[3], x[4], x[5]);
    Ok((
        RigidTransform::new(r_oct, t_oct_vec),
        RigidTransform::new(r_n, t_n_vec),
    ))
}

/// Bootstrap calibration from exactly three poses taken near the volume
/// center, with no initial guess: a closed-form estimate refined by
/// [`solve_calibration`].
pub fn rough_calibrate(
    obs: &[CalibrationObservation],
) -> Result<(RigidTransform, RigidTransform), CalibError> {
    if obs.len() != 3 {
        return Err(CalibError::RoughPoseCount { got: obs.len() });
    }
    let (oct0, n0) = closed_form_init(obs)?;
    let sol = solve_calibration(obs, (&oct0, &n0))?;
    Ok((sol.t_oct, sol.t_n))
}

/// End-effector pose that places the needle at `desired_icp` in the
/// scanner frame, under rough rig transforms.
pub fn ee_for_desired_pose(
    rough_oct: &RigidTransform,
    rough_n: &RigidTransform,
    desired_icp: &RigidTransform,
    convention: EeChainConvention,
) -> RigidTransform {
    match convention {
        EeChainConvention::RoundTrip => rough_oct
            .compose(desired_icp)
            .compose(&rough_n.inverse()),
        EeChainConvention::InvertedDesired => rough_oct
            .compose(&desired_icp.inverse())
            .compose(&rough_n.inverse()),
    }
}

/// Spreads `m` desired needle poses over the central 80% of the scanner
/// field of view and converts each into the end-effector pose that reaches
/// it. Returns `(desired needle pose in scanner frame, end-effector pose
/// in world)` pairs.
///
/// Positions form a ⌈√m⌉² lateral grid trimmed to `m`, alternating between
/// two depths; orientations tilt deterministically by up to 15° about the
/// lateral and depth axes so poses differ in more than position. The
/// sequence is a pure function of `(fov, m)`.
pub fn sample_calibration_poses(
    rough: (&RigidTransform, &RigidTransform),
    fov_mm: [f64; 3],
    m: usize,
    convention: EeChainConvention,
) -> Vec<(RigidTransform, RigidTransform)> {
    const TILT_LIMIT_RAD: f64 = 15.0 * PI / 180.0;
    const SALT: u64 = 0x0c7_5ca1e;
    let grid = (m as f64).sqrt().ceil() as usize;
    let lattice = |k: usize, extent: f64| -> f64 {
        if grid <= 1 {
            extent / 2.0
        } else {
            extent * (0.1 + 0.8 * k as f64 / (grid - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(m);
    for idx in 0..m {
        let x = lattice(idx % grid, fov_mm[0]);
        let z = lattice(idx / grid, fov_mm[2]);
        let y = if idx % 2 == 0 { 0.35 } else { 0.65 } * fov_mm[1];
        let tilt_a =
            (2.0 * hash_unit_f64(hash2(SALT, 2 * idx as u64)) - 1.0) * TILT_LIMIT_RAD;
        let tilt_b =
            (2.0 * hash_unit_f64(hash2(SALT, 2 * idx as u64 + 1)) - 1.0) * TILT_LIMIT_RAD;
        let rot = so3_exp(&Vector3::new(tilt_a, 0.0, 0.0))
            * so3_exp(&Vector3::new(0.0, 0.0, tilt_b));
        let desired = RigidTransform::new(rot, Vector3::new(x, y, z));
        let ee = ee_for_desired_pose(rough.0, rough.1, &desired, convention);
        out.push((desired, ee));
    }
    out
}

/// Scene for one calibration capture: the needle alone at `pose` with the
/// driver gripping its tail, no tissue. Segmentation assumes the needle is
/// the only bright structure apart from the driver it clips away.
pub fn calibration_scene(model: &NeedleModel, pose: &RigidTransform, seed: u64) -> SceneSpec {
    let placement = NeedlePlacement {
        model: *model,
        pose: *pose,
    };
    let mut scene = SceneSpec::new(seed);
    scene.driver = Some(DriverSpec::gripping_tail(&placement));
    scene.needle = Some(placement);
    scene
}

/// True when a straight vertical path from the needle tip to the top of
/// the volume crosses neither tissue nor the driver box — whether the
/// scanner can see the tip unshadowed. A scene without a needle has no tip
/// to see and reports `false`.
pub fn needle_tip_visibility(scene: &SceneSpec) -> bool {
    let Some(needle) = &scene.needle else {
        return false;
    };
    let tip = needle.pose.apply_point(&needle.model.tip_apex());
    if let Some(tissue) = &scene.tissue {
        if tip[1] > tissue.surface_depth_at(tip[0], tip[2], scene.fov_mm) {
            return false;
        }
    }
    if let Some(driver) = &scene.driver {
        // Slab test for the segment tip → volume top against the box.
        let inv = driver.pose.inverse();
        let origin = inv.apply_point(&tip);
        let dir = inv.apply_vector(&Vector3::new(0.0, -1.0, 0.0));
        let mut t_min: f64 = 0.0;
        let mut t_max = tip[1];
        let mut hit = t_max > 0.0;
        for axis in 0..3 {
            let he = driver.half_extents_mm[axis];
            if dir[axis].abs() < 1e-12 {
                if origin[axis].abs() > he {
                    hit = false;
                    break;
                }
                continue;
            }
            let t1 = (-he - origin[axis]) / dir[axis];
            let t2 = (he - origin[axis]) / dir[axis];
            t_min = t_min.max(t1.min(t2));
            t_max = t_max.min(t1.max(t2));
            if t_min > t_max {
                hit = false;
                break;
            }
        }
        if hit {
            return false;
        }
    }
    true
}
