//! Core library for an OCT-guided autonomous suturing pipeline.
//!
//! The crate is organized around the stages of the physical system:
//!
//! * [`geom`] — rigid transforms on SE(3), point clouds, and the circular
//!   needle model shared by every other module.
//! * [`octsim`] — synthetic OCT volume renderer with ground truth, the test
//!   bed for everything downstream.
//! * [`segment`] — needle segmentation from volumes (projection threshold,
//!   connected components, artifact and outlier removal).
//! * [`register`] — weighted ICP and the two-pass tip-weighted variant that
//!   registers the needle model to a segmented cloud.
//! * [`calib`] — joint robot/scanner/needle calibration from registered
//!   needle poses (Levenberg–Marquardt on SE(3)).
//! * [`wound`] — top-layer detection in B-scans and wound keypoint analysis.
//! * [`kin`] — 6R serial-arm kinematics: FK, damped least-squares IK, and a
//!   capsule collision proxy.
//! * [`plan`] — suture path planning in the B-scan plane and conversion to
//!   joint trajectories.
//! * [`grade`] — RMSE grading of achieved vs. planned suture points.
//!
//! All lengths are millimetres and all angles radians unless a name says
//! otherwise. The OCT frame is the volume frame: X is the fast lateral
//! (B-scan) axis, Y is depth along the A-scan, Z is the slow lateral axis.

pub mod calib;
pub mod geom;
pub mod octsim;
pub mod register;
pub mod rng;
pub mod segment;
pub mod wound;

pub use calib::{
    calibration_jacobian, needle_tip_visibility, rough_calibrate, sample_calibration_poses,
    solve_calibration, CalibError, CalibrationObservation, CalibrationSolution,
    EeChainConvention,
};
pub use geom::{
    needle_from_spec, sample_needle_surface, se3_exp, se3_log, GeomError, NeedleModel,
    PointCloud, RigidTransform,
};
pub use register::{icp, tip_weighted_icp, IcpConfig, IcpResult, TipWeightedOutcome};
pub use segment::{segment_needle, SegmentParams, SegmentationResult};
pub use wound::{analyze_wound, detect_top_layer, DepthCurve, WoundError, WoundProfile};
