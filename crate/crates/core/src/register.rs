//! Needle pose estimation by weighted ICP.
//!
//! [`icp`] is a plain weighted point-to-point fit between two clouds. The
//! needle-specific entry point is [`tip_weighted_icp`]: a first pass fits the
//! cloud to the sampled needle surface, then the points matched near the tip
//! are up-weighted and the fit repeats, pulling the pose error out of the
//! clinically critical tip region at the cost of a little body residual.

use std::fmt;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geom::{sample_needle_surface_detailed, NeedleModel, PointCloud, RigidTransform};

/// Errors from registration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegisterError {
    /// Source or target cloud is empty.
    EmptyCloud,
    /// Correspondences cannot pin down a rigid transform (fewer than three
    /// accepted pairs, or the pairs are collinear).
    Degenerate { iteration: usize },
}

impl fmt::Display for RegisterError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegisterError::EmptyCloud => write!(f, "point cloud is empty"),
            RegisterError::Degenerate { iteration } => {
                write!(f, "rank-deficient correspondences at iteration {iteration}")
            }
        }
    }
}

impl std::error::Error for RegisterError {}

/// Tuning for [`icp`] and [`tip_weighted_icp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    /// Convergence threshold on the relative RMS change between iterations.
    pub tol: f64,
    /// Iteration cap (counted as transform updates).
    pub max_iters: usize,
    /// Correspondences farther than this multiple of the median match
    /// distance are dropped each iteration.
    pub rejection_ratio: f64,
    /// Arc-length distance from the tip apex within which a matched model
    /// point marks its source point as a tip point, mm.
    pub tip_band_mm: f64,
    /// Weight assigned to tip points in the second pass.
    pub tip_weight: f64,
    /// Sampling density of the model surface used as the fit target, points
    /// per square millimetre.
    pub model_density_per_mm2: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            tol: 1e-6,
            max_iters: 100,
            rejection_ratio: 5.0,
            tip_band_mm: 0.5,
            tip_weight: 10.0,
            model_density_per_mm2: 1500.0,
        }
    }
}

/// Result of an ICP fit.
///
/// For [`icp`] the transform maps the source frame onto the target frame;
/// for [`tip_weighted_icp`] it maps the needle frame onto the volume frame
/// (the registration the calibration chain consumes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// Weighted RMS point-to-match distance at convergence, mm.
    pub rms_residual: f64,
    /// Number of transform updates performed.
    pub iterations: usize,
    /// RMS distance over tip-band points, mm; `None` when no tip band was
    /// identified (plain ICP, or fallback).
    pub tip_residual: Option<f64>,
    /// Weighted RMS before each update plus the final value, for
    /// convergence inspection.
    pub rms_history: Vec<f64>,
}

/// Outcome of the two-pass fit: the final result plus the first pass for
/// comparison, and whether the second pass had to be skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TipWeightedOutcome {
    /// The pose estimate to use (second pass, or first on fallback).
    pub result: IcpResult,
    /// The unweighted first pass.
    pub pass1: IcpResult,
    /// True when no source point matched within the tip band, so the
    /// second pass could not run.
    pub fell_back: bool,
}

struct Matches {
    /// (source index, target index, distance) for accepted pairs.
    pairs: Vec<(usize, usize, f64)>,
    /// Weighted RMS over accepted pairs.
    rms: f64,
}

fn match_nearest(
    tree: &ImmutableKdTree<f64, 3>,
    source: &PointCloud,
    t: &RigidTransform,
    rejection_ratio: Option<f64>,
) -> Matches {
    let n = source.len();
    let mut raw = Vec::with_capacity(n);
    for p in source.points() {
        let q = t.apply_point(p);
        let nn = tree.nearest_one::<SquaredEuclidean>(&[q[0], q[1], q[2]]);
        raw.push((nn.item as usize, nn.distance.sqrt()));
    }
    let keep_all = rejection_ratio.is_none();
    let cutoff = match rejection_ratio {
        Some(ratio) => {
            let mut dists: Vec<f64> = raw.iter().map(|&(_, d)| d).collect();
            dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
            let median = if dists.len() % 2 == 1 {
                dists[dists.len() / 2]
            } else {
                0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
            };
            ratio * median
        }
        None => f64::INFINITY,
    };
    let mut pairs = Vec::with_capacity(n);
    let mut sq_sum = 0.0;
    let mut w_sum = 0.0;
    for (i, &(j, d)) in raw.iter().enumerate() {
        if keep_all || d <= cutoff {
            let w = source.weights()[i];
            pairs.push((i, j, d));
            sq_sum += w * d * d;
            w_sum += w;
        }
    }
    let rms = if w_sum > 0.0 { (sq_sum / w_sum).sqrt() } else { 0.0 };
    Matches { pairs, rms }
}

/// Closed-form weighted rigid fit (Kabsch) for fixed correspondences.
fn weighted_fit(
    source: &PointCloud,
    target: &PointCloud,
    pairs: &[(usize, usize, f64)],
    iteration: usize,
) -> Result<RigidTransform, RegisterError> {
    if pairs.len() < 3 {
        return Err(RegisterError::Degenerate { iteration });
    }
    let mut w_sum = 0.0;
    let mut src_c = Vector3::zeros();
    let mut tgt_c = Vector3::zeros();
    for &(i, j, _) in pairs {
        let w = source.weights()[i];
        w_sum += w;
        src_c += w * source.points()[i];
        tgt_c += w * target.points()[j];
    }
    src_c /= w_sum;
    tgt_c /= w_sum;
    let mut h = Matrix3::zeros();
    for &(i, j, _) in pairs {
        let w = source.weights()[i];
        h += w * (source.points()[i] - src_c) * (target.points()[j] - tgt_c).transpose();
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    // Collinear correspondences leave a rotation axis free.
    if sv[0] <= 0.0 || sv[1] <= 1e-12 * sv[0] {
        return Err(RegisterError::Degenerate { iteration });
    }
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let v = v_t.transpose();
    let det = (v * u.transpose()).determinant();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, if det < 0.0 { -1.0 } else { 1.0 }));
    let r = v * fix * u.transpose();
    let t = tgt_c - r * src_c;
    Ok(RigidTransform::new(r, t))
}

/// Weighted point-to-point ICP aligning `source` onto `target`.
///
/// Each iteration matches every source point to its nearest target point,
/// drops matches beyond `rejection_ratio` times the median distance, and
/// refits the transform in closed form over the survivors. Stops when the
/// relative RMS change falls below `cfg.tol` or after `cfg.max_iters`
/// updates.
pub fn icp(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    cfg: &IcpConfig,
) -> Result<IcpResult, RegisterError> {
    if source.is_empty() || target.is_empty() {
        return Err(RegisterError::EmptyCloud);
    }
    let coords: Vec<[f64; 3]> = target.points().iter().map(|p| [p[0], p[1], p[2]]).collect();
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::from(coords.as_slice());
    icp_with_tree(&tree, source, target, init, cfg, Some(cfg.rejection_ratio))
}

fn icp_with_tree(
    tree: &ImmutableKdTree<f64, 3>,
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    cfg: &IcpConfig,
    rejection: Option<f64>,
) -> Result<IcpResult, RegisterError> {
    let mut t = *init;
    let mut iterations = 0;
    let mut matches = match_nearest(tree, source, &t, rejection);
    let mut history = vec![matches.rms];
    for _ in 0..cfg.max_iters {
        if matches.rms <= f64::EPSILON {
            break;
        }
        let t_new = weighted_fit(source, target, &matches.pairs, iterations)?;
        iterations += 1;
        let next = match_nearest(tree, source, &t_new, rejection);
        let prev_rms = *history.last().expect("history is non-empty");
        history.push(next.rms);
        t = t_new;
        matches = next;
        if (prev_rms - matches.rms).abs() < cfg.tol * prev_rms.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    if matches.pairs.len() < 3 {
        return Err(RegisterError::Degenerate { iteration: iterations });
    }
    Ok(IcpResult {
        transform: t,
        rms_residual: matches.rms,
        iterations,
        tip_residual: None,
        rms_history: history,
    })
}

/// Proper-rotation initial guesses from principal-axes alignment: the base
/// alignment plus the three double sign flips that keep the determinant +1.
fn principal_axis_inits(source: &PointCloud, target: &PointCloud) -> Vec<RigidTransform> {
    let axes_of = |cloud: &PointCloud| {
        let n = cloud.len() as f64;
        let c: Vector3<f64> = cloud.points().iter().sum::<Vector3<f64>>() / n;
        let mut cov = Matrix3::zeros();
        for p in cloud.points() {
            let d = p - c;
            cov += d * d.transpose();
        }
        let eig = nalgebra::SymmetricEigen::new(cov / n);
        // Columns ordered by descending eigenvalue, right-handed.
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .expect("eigenvalues are finite")
        });
        let mut axes = Matrix3::zeros();
        for (col, &idx) in order.iter().enumerate() {
            axes.set_column(col, &eig.eigenvectors.column(idx).into_owned());
        }
        if axes.determinant() < 0.0 {
            let flipped = -axes.column(2).into_owned();
            axes.set_column(2, &flipped);
        }
        (c, axes)
    };
    let (src_c, src_axes) = axes_of(source);
    let (tgt_c, tgt_axes) = axes_of(target);
    let flips = [
        Vector3::new(1.0, 1.0, 1.0),
        Vector3::new(1.0, -1.0, -1.0),
        Vector3::new(-1.0, 1.0, -1.0),
        Vector3::new(-1.0, -1.0, 1.0),
    ];
    flips
        .iter()
        .map(|f| {
            let r = tgt_axes * Matrix3::from_diagonal(f) * src_axes.transpose();
            let t = tgt_c - r * src_c;
            RigidTransform::new(r, t)
        })
        .collect()
}

/// Rigid slide along the needle's own arc: rotation about the arc axis
/// through the arc center, the tube's near-symmetry direction. Positive
/// angles move points apex-ward (arc coordinate decreases by r * angle).
fn arc_slide(model: &NeedleModel, angle_rad: f64) -> RigidTransform {
    let c = model.arc_center();
    let (s, co) = angle_rad.sin_cos();
    let r = Matrix3::new(co, -s, 0.0, s, co, 0.0, 0.0, 0.0, 1.0);
    RigidTransform::new(r, c - r * c)
}

/// Distance from a model-frame point to the needle's centerline path: the
/// body arc plus the tip cone's axis segment.
fn path_distance(model: &NeedleModel, q: &Vector3<f64>) -> f64 {
    let l = model.tip_cone_length_mm;
    let rho2 = q[1] * q[1] + q[2] * q[2];
    let dx = if q[0] < 0.0 {
        q[0]
    } else {
        (q[0] - l).max(0.0)
    };
    let axis = (dx * dx + rho2).sqrt();
    axis.min(model.distance_to_body_centerline(q))
}

/// Signed arc distance the fitted pose should slide apex-ward to bring the
/// cloud's tapered end onto the model tip, or `None` when the cloud's
/// apex-most end shows no taper — the blunt cut of a cloud whose tip is out
/// of view.
///
/// The magnitude comes from the cloud's arc-coordinate edge: the apex-most
/// occupied arc, minus the clearance a sampled cloud keeps from the sharp
/// apex (the cone's last fraction is thinner than any sample spacing). The
/// clearance is scene-dependent, so the estimate is coarse — but it only
/// has to land the pose within the tip band, where the tip-weighted pass
/// takes over. Taper presence is judged on the path-distance envelope of
/// the end bins relative to the plateau further in, which also tolerates a
/// residual rigid offset inflating all distances alike.
fn taper_slide_estimate(
    model: &NeedleModel,
    source: &PointCloud,
    t: &RigidTransform,
) -> Option<f64> {
    const BIN_MM: f64 = 0.25;
    const RANGE_MM: f64 = 5.0;
    const OVERSHOOT_TOL_MM: f64 = 0.1;
    const APEX_CLEARANCE_MM: f64 = 0.15;
    let half = model.width_mm / 2.0;
    let l = model.tip_cone_length_mm;
    let nbins = (RANGE_MM / BIN_MM) as usize;
    let mut env = vec![0.0f64; nbins];
    let mut count = vec![0usize; nbins];
    let mut overshoot = 0.0f64;
    let mut arcs: Vec<f64> = Vec::new();
    for p in source.points() {
        let q = t.apply_point(p);
        if q[1] * q[1] + q[2] * q[2] <= model.width_mm * model.width_mm {
            overshoot = overshoot.max(q[0] - l);
        }
        let a = model.arc_coord_from_apex(&q);
        if a < RANGE_MM {
            let b = (a / BIN_MM) as usize;
            env[b] = env[b].max(path_distance(model, &q));
            count[b] += 1;
            arcs.push(a);
        }
    }
    if overshoot > OVERSHOOT_TOL_MM {
        return Some(-overshoot);
    }
    let first = (0..nbins).find(|&b| count[b] >= 3)?;
    let plateau = env[first..(first + 8).min(nbins)]
        .iter()
        .copied()
        .fold(0.0f64, f64::max)
        .max(half);
    if env[first] >= 0.8 * plateau {
        return None;
    }
    // Third-smallest arc, so a stray point cannot masquerade as the edge.
    if arcs.len() < 3 {
        return None;
    }
    let (_, edge, _) = arcs.select_nth_unstable_by(2, |a, b| a.total_cmp(b));
    Some(*edge - APEX_CLEARANCE_MM)
}

/// Recovery for pass-1 fits that slid along the arc — the tube's
/// near-symmetry — far enough that no point matches near the tip. The
/// rejection-filtered refits cannot pull such a fit back: they re-reject
/// their own tip-region mismatch each iteration, and the symmetry keeps
/// the residual flat along the slide, so no fit score can see the offset
/// either. What does see it is the tip taper: each round slides the pose
/// by the taper estimate and stops once the estimate is small, leaving the
/// tip-weighted pass to finish the job. A blunt-ended cloud — tip genuinely
/// out of view — yields no estimate, and the original fit is returned
/// untouched so the no-tip fallback stays intact.
fn rescue_arc_slide(
    tree: &ImmutableKdTree<f64, 3>,
    source: &PointCloud,
    model: &NeedleModel,
    fit: IcpResult,
    cfg: &IcpConfig,
) -> Result<IcpResult, RegisterError> {
    const ALIGN_TOL_MM: f64 = 0.2;
    const ROUNDS: usize = 3;
    let mut current = fit.clone();
    for round in 0..ROUNDS {
        let Some(est) = taper_slide_estimate(model, source, &current.transform) else {
            // Blunt end: tip out of view. Keep the original fit so the
            // caller's no-tip fallback still applies.
            return Ok(if round == 0 { fit } else { current });
        };
        if est.abs() <= ALIGN_TOL_MM {
            break;
        }
        // Positive angle slides the cloud apex-ward along the arc.
        let slid = arc_slide(model, est / model.radius_mm).compose(&current.transform);
        let m = match_nearest(tree, source, &slid, Some(cfg.rejection_ratio));
        current = IcpResult {
            transform: slid,
            rms_residual: m.rms,
            rms_history: vec![m.rms],
            ..current.clone()
        };
    }
    Ok(current)
}

/// Two-pass tip-weighted registration of a measured cloud to the needle
/// model. Returns the needle-frame → volume-frame transform.
///
/// Pass 1 fits the cloud to the sampled model surface (from `init` when
/// given, otherwise from the best principal-axes hypothesis), then checks
/// slid variants of the converged pose along the arc — the tube's
/// near-symmetry — and restarts once if one fits better. Source points
/// whose pass-1 match lies within `cfg.tip_band_mm` of the tip apex along
/// the centerline are re-weighted to `cfg.tip_weight`, and pass 2 refits. If
/// no point matches inside the band, the pass-1 result is returned with
/// `fell_back` set.
pub fn tip_weighted_icp(
    source: &PointCloud,
    model: &NeedleModel,
    init: Option<&RigidTransform>,
    cfg: &IcpConfig,
) -> Result<TipWeightedOutcome, RegisterError> {
    if source.is_empty() {
        return Err(RegisterError::EmptyCloud);
    }
    let surface = sample_needle_surface_detailed(model, cfg.model_density_per_mm2);
    let target = &surface.cloud;
    let coords: Vec<[f64; 3]> = target.points().iter().map(|p| [p[0], p[1], p[2]]).collect();
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::from(coords.as_slice());

    // Inner fits map cloud -> model, the inverse of the reported transform.
    let inner_init = match init {
        Some(t) => t.inverse(),
        None => principal_axis_inits(source, target)
            .into_iter()
            .min_by(|a, b| {
                let ra = match_nearest(&tree, source, a, None).rms;
                let rb = match_nearest(&tree, source, b, None).rms;
                ra.partial_cmp(&rb).expect("rms values are finite")
            })
            .expect("hypothesis list is non-empty"),
    };

    let mut pass1_inner =
        icp_with_tree(&tree, source, target, &inner_init, cfg, Some(cfg.rejection_ratio))?;
    let band_of = |t: &RigidTransform| {
        let full = match_nearest(&tree, source, t, None);
        let tip: Vec<usize> = full
            .pairs
            .iter()
            .filter(|&&(_, j, _)| surface.arc_from_apex[j] <= cfg.tip_band_mm)
            .map(|&(i, _, _)| i)
            .collect();
        (full, tip)
    };
    let (mut full, mut tip_sources) = band_of(&pass1_inner.transform);
    if tip_sources.is_empty() {
        // No point matched near the tip: either the tip is out of view, or
        // pass 1 slid along the arc out of tip contact. Try the recovery and
        // re-derive the band from wherever it lands.
        pass1_inner = rescue_arc_slide(&tree, source, model, pass1_inner, cfg)?;
        (full, tip_sources) = band_of(&pass1_inner.transform);
    }
    let tip_rms = |matches: &Matches| -> Option<f64> {
        let dists: Vec<f64> = matches
            .pairs
            .iter()
            .filter(|&&(i, _, _)| tip_sources.binary_search(&i).is_ok())
            .map(|&(_, _, d)| d)
            .collect();
        if dists.is_empty() {
            None
        } else {
            Some((dists.iter().map(|d| d * d).sum::<f64>() / dists.len() as f64).sqrt())
        }
    };
    let mut pass1 = IcpResult {
        transform: pass1_inner.transform.inverse(),
        tip_residual: tip_rms(&full),
        ..pass1_inner.clone()
    };

    if tip_sources.is_empty() {
        pass1.tip_residual = None;
        return Ok(TipWeightedOutcome {
            result: pass1.clone(),
            pass1,
            fell_back: true,
        });
    }

    let mut weights = source.weights().to_vec();
    for &i in &tip_sources {
        weights[i] = cfg.tip_weight;
    }
    let reweighted = PointCloud::with_weights(source.points().to_vec(), weights);
    let pass2_inner = icp_with_tree(&tree, &reweighted, target, &pass1_inner.transform, cfg, Some(cfg.rejection_ratio))?;
    let full2 = match_nearest(&tree, &reweighted, &pass2_inner.transform, None);
    let result = IcpResult {
        transform: pass2_inner.transform.inverse(),
        tip_residual: tip_rms(&full2),
        ..pass2_inner
    };
    Ok(TipWeightedOutcome {
        result,
        pass1,
        fell_back: false,
    })
}
