//! Wound top-layer detection and keypoint analysis on B-scans.
//!
//! [`detect_top_layer`] traces the air/tissue boundary across a B-scan with
//! an arc-length-adjusted graph search: a left-to-right path over
//! `(column, row)` nodes whose accumulated cost is normalized by the path's
//! arc length raised to an exponent slightly above one, which favors
//! following a long true contour over cutting across a faint bridge.
//! [`analyze_wound`] then levels the traced curve (the tissue may be tilted),
//! smooths it, and finds the wound's start, end, and deepest keypoints from
//! slope-threshold crossings.
//!
//! Parameter units follow the scanner's full sampling density (725 × 800
//! lateral × depth pixels over a 10 × 10 mm B-scan): the smoothing width is
//! given in native lateral pixels and the slope thresholds in native depth
//! pixels per analysis column, both converted to millimetres internally so
//! behavior does not change with image resolution.

use crate::octsim::{GrayImage, OctVolume, VolumeError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lateral pitch of the scanner's full sampling density (mm per pixel).
const NATIVE_LATERAL_SPACING_MM: f64 = 10.0 / 725.0;
/// Depth pitch of the scanner's full sampling density (mm per pixel).
const NATIVE_DEPTH_SPACING_MM: f64 = 10.0 / 800.0;
/// Column pitch the per-column slope thresholds are calibrated against —
/// the desk-scale default B-scan (182 columns over 10 mm).
const REFERENCE_COL_SPACING_MM: f64 = 10.0 / 182.0;

/// Vertical jump limit of the layer search, rows per column step, at the
/// desk-scale default depth resolution (200 rows); scaled proportionally
/// for other image heights. Bounds graph size and exceeds the steepest
/// synthetic wall slope.
const JUMP_LIMIT_AT_200_ROWS: usize = 16;
/// Extra edge cost per unit of arc length beyond the horizontal step,
/// discouraging gratuitous vertical zig-zag.
const STEP_LENGTH_PENALTY: f64 = 0.05;
/// Fraction of columns on each side treated as outside the wound when
/// leveling the curve.
const LEVEL_BAND_FRACTION: f64 = 0.25;

#[derive(Debug, Error)]
pub enum WoundError {
    #[error("no top-layer path exists: image is {width}×{height}")]
    NoPath { width: usize, height: usize },
    #[error("depth curve has {got} columns; analysis needs at least {min}")]
    CurveTooShort { min: usize, got: usize },
    #[error("no slope crossing found: surface looks healthy/flat")]
    NoWound,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Surface depth sampled at every image column, with the lateral geometry
/// needed to map columns back to millimetres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthCurve {
    /// Depth (mm, larger is deeper) per column, left to right.
    pub depth_mm: Vec<f64>,
    pub col_spacing_mm: f64,
    /// Lateral position of the first column's center.
    pub first_col_x_mm: f64,
}

impl DepthCurve {
    pub fn x_at(&self, col: usize) -> f64 {
        self.first_col_x_mm + col as f64 * self.col_spacing_mm
    }
}

/// Wound geometry extracted from one B-scan. Keypoints are `(x, depth)` in
/// mm in the image frame (depth grows downward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WoundProfile {
    pub top_layer: DepthCurve,
    /// Left edge of the wound opening.
    pub start_mm: [f64; 2],
    /// Right edge of the wound opening.
    pub end_mm: [f64; 2],
    pub deepest_mm: [f64; 2],
    /// Surface tilt the analysis leveled away, radians (positive when the
    /// surface falls to the right).
    pub tilt_rad: f64,
    pub bscan_index: usize,
}

/// Traces the top tissue boundary across the image; returns the row of the
/// boundary for every column.
///
/// Minimal-normalized-cost path over `(column, row)` nodes: each step moves
/// one column right with a vertical jump of at most the scaled jump limit;
/// a step to a node costs one minus the node's normalized vertical
/// intensity gradient, plus a small penalty on arc length beyond the
/// horizontal step. Competing paths compare by accumulated cost divided by
/// accumulated arc length raised to `amal_x`; above one, the exponent
/// rewards a path for tracing a longer contour.
pub fn detect_top_layer(image: &GrayImage, amal_x: f64) -> Result<Vec<usize>, WoundError> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h < 3 {
        return Err(WoundError::NoPath {
            width: w,
            height: h,
        });
    }
    let jump = ((JUMP_LIMIT_AT_200_ROWS * h + 100) / 200).max(1);

    // Node cost: 1 − normalized vertical gradient of a lightly blurred
    // image (3×3 binomial; keeps speckle from shredding the boundary).
    let blurred = binomial_blur(image);
    let mut grad = vec![0.0f64; w * h];
    let (mut g_min, mut g_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in 0..w {
        for y in 1..h - 1 {
            let g = 0.5 * f64::from(blurred.get(x, y + 1) - blurred.get(x, y - 1));
            grad[y * w + x] = g;
            g_min = g_min.min(g);
            g_max = g_max.max(g);
        }
    }
    let span = (g_max - g_min).max(f64::MIN_POSITIVE);
    let cost_at = |x: usize, y: usize| 1.0 - (grad[y * w + x] - g_min) / span;

    // Forward pass: per node, the best (cost, length) prefix by normalized
    // score, plus its predecessor row.
    let mut cum_cost = vec![0.0f64; w * h];
    let mut cum_len = vec![0.0f64; w * h];
    let mut prev = vec![0u32; w * h];
    for y in 0..h {
        cum_cost[y * w] = cost_at(0, y);
        cum_len[y * w] = 1.0;
    }
    for x in 1..w {
        for y in 0..h {
            let (mut best_score, mut best) = (f64::INFINITY, (0.0, 0.0, 0u32));
            let node_cost = cost_at(x, y);
            for yp in y.saturating_sub(jump)..(y + jump + 1).min(h) {
                let dy = y.abs_diff(yp) as f64;
                let step = (1.0 + dy * dy).sqrt();
                let cost = cum_cost[yp * w + x - 1]
                    + node_cost
                    + STEP_LENGTH_PENALTY * (step - 1.0);
                let len = cum_len[yp * w + x - 1] + step;
                let score = cost / len.powf(amal_x);
                if score < best_score {
                    best_score = score;
                    best = (cost, len, yp as u32);
                }
            }
            cum_cost[y * w + x] = best.0;
            cum_len[y * w + x] = best.1;
            prev[y * w + x] = best.2;
        }
    }

    // Best endpoint by the same normalized score, then backtrack.
    let last = w - 1;
    let end_row = (0..h)
        .min_by(|&a, &b| {
            let sa = cum_cost[a * w + last] / cum_len[a * w + last].powf(amal_x);
            let sb = cum_cost[b * w + last] / cum_len[b * w + last].powf(amal_x);
            sa.total_cmp(&sb)
        })
        .expect("h >= 3");
    let mut rows = vec![0usize; w];
    rows[last] = end_row;
    for x in (1..w).rev() {
        rows[x - 1] = prev[rows[x] * w + x] as usize;
    }
    Ok(rows)
}

fn binomial_blur(image: &GrayImage) -> GrayImage {
    let (w, h) = (image.width(), image.height());
    let mut out = GrayImage::new(w, h);
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        f64::from(image.get(xc, yc))
    };
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (dy, wy) in [(-1isize, 1.0), (0, 2.0), (1, 1.0)] {
                for (dx, wx) in [(-1isize, 1.0), (0, 2.0), (1, 1.0)] {
                    acc += wy * wx * at(x as isize + dx, y as isize + dy);
                }
            }
            out.set(x, y, (acc / 16.0) as f32);
        }
    }
    out
}

/// Traces the top layer of one B-scan and converts it to millimetres.
pub fn top_layer_curve(
    volume: &OctVolume,
    bscan_index: usize,
    amal_x: f64,
) -> Result<DepthCurve, WoundError> {
    let image = volume.extract_bscan(bscan_index)?;
    let rows = detect_top_layer(&image, amal_x)?;
    let [sx, sy, _] = volume.spacing();
    let [ox, oy, _] = volume.origin();
    Ok(DepthCurve {
        depth_mm: rows
            .iter()
            .map(|&r| oy + (r as f64 + 0.5) * sy)
            .collect(),
        col_spacing_mm: sx,
        first_col_x_mm: ox + 0.5 * sx,
    })
}

/// Extracts wound keypoints from a traced surface curve.
///
/// The curve is leveled by the line fit to the outer quarter of columns on
/// each side (one robust refit drops wall columns that leak into the
/// bands), rotating by the fitted tilt; the leveled curve is smoothed with
/// a Gaussian of width `sigma_px` native lateral pixels; the start point is
/// the first column left-to-right whose smoothed slope falls below `g_lo`,
/// the end point the first right-to-left above `g_hi` (thresholds in
/// native depth pixels per reference column), and the deepest point the
/// depth maximum between them. Keypoints are reported in the image frame.
/// A surface with no qualifying slope crossing is healthy: `NoWound`.
pub fn analyze_wound(
    curve: &DepthCurve,
    sigma_px: f64,
    g_lo: f64,
    g_hi: f64,
) -> Result<WoundProfile, WoundError> {
    let n = curve.depth_mm.len();
    if n < 8 {
        return Err(WoundError::CurveTooShort { min: 8, got: n });
    }
    let dx = curve.col_spacing_mm;
    let sigma_mm = sigma_px * NATIVE_LATERAL_SPACING_MM;
    let slope_lo = g_lo * NATIVE_DEPTH_SPACING_MM / REFERENCE_COL_SPACING_MM;
    let slope_hi = g_hi * NATIVE_DEPTH_SPACING_MM / REFERENCE_COL_SPACING_MM;

    // Height grows upward so that entering the wound left-to-right gives a
    // negative slope.
    let xs: Vec<f64> = (0..n).map(|i| curve.x_at(i)).collect();
    let heights: Vec<f64> = curve.depth_mm.iter().map(|d| -d).collect();

    // Level: fit the out-of-wound bands, rotate the curve so they read
    // horizontal, and resample onto the original column grid.
    let band = ((n as f64 * LEVEL_BAND_FRACTION) as usize).max(2);
    let band_idx: Vec<usize> = (0..band).chain(n - band..n).collect();
    let (slope, intercept) = robust_line_fit(&xs, &heights, &band_idx);
    let tilt = slope.atan();
    let pivot = [xs[n / 2], intercept + slope * xs[n / 2]];
    let (sin_t, cos_t) = tilt.sin_cos();
    let rotated: Vec<[f64; 2]> = xs
        .iter()
        .zip(&heights)
        .map(|(&x, &hgt)| {
            let (du, dv) = (x - pivot[0], hgt - pivot[1]);
            [
                pivot[0] + du * cos_t + dv * sin_t,
                pivot[1] - du * sin_t + dv * cos_t,
            ]
        })
        .collect();
    let level = resample_to_grid(&rotated, &xs);

    let smoothed = gaussian_smooth(&level, sigma_mm / dx);
    // Central-difference slope of the smoothed curve, mm per mm.
    let gradient: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            (smoothed[b] - smoothed[a]) / ((b - a) as f64 * dx)
        })
        .collect();

    let start = gradient.iter().position(|&g| g < slope_lo);
    let end = gradient.iter().rposition(|&g| g > slope_hi);
    let (Some(start), Some(end)) = (start, end) else {
        return Err(WoundError::NoWound);
    };
    if start >= end {
        return Err(WoundError::NoWound);
    }
    let deepest = (start..=end)
        .min_by(|&a, &b| smoothed[a].total_cmp(&smoothed[b]))
        .expect("nonempty range");

    // Report keypoints in the image frame: rotate back, heights to depths.
    let unrotate = |i: usize| -> [f64; 2] {
        let (du, dv) = (xs[i] - pivot[0], smoothed[i] - pivot[1]);
        let x = pivot[0] + du * cos_t - dv * sin_t;
        let hgt = pivot[1] + du * sin_t + dv * cos_t;
        [x, -hgt]
    };
    Ok(WoundProfile {
        top_layer: curve.clone(),
        start_mm: unrotate(start),
        end_mm: unrotate(end),
        deepest_mm: unrotate(deepest),
        tilt_rad: tilt,
        bscan_index: 0,
    })
}

/// Traces and analyzes one B-scan of a volume in a single call.
pub fn analyze_wound_bscan(
    volume: &OctVolume,
    bscan_index: usize,
    amal_x: f64,
    sigma_px: f64,
    g_lo: f64,
    g_hi: f64,
) -> Result<WoundProfile, WoundError> {
    let curve = top_layer_curve(volume, bscan_index, amal_x)?;
    let mut profile = analyze_wound(&curve, sigma_px, g_lo, g_hi)?;
    profile.bscan_index = bscan_index;
    Ok(profile)
}

/// Least-squares line through the selected samples, with one refit that
/// drops gross outliers (wound walls leaking into the level bands).
fn robust_line_fit(xs: &[f64], ys: &[f64], idx: &[usize]) -> (f64, f64) {
    let fit = |sel: &[usize]| -> (f64, f64) {
        let m = sel.len() as f64;
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for &i in sel {
            sx += xs[i];
            sy += ys[i];
            sxx += xs[i] * xs[i];
            sxy += xs[i] * ys[i];
        }
        let denom = m * sxx - sx * sx;
        if denom.abs() < 1e-12 {
            return (0.0, sy / m.max(1.0));
        }
        let slope = (m * sxy - sx * sy) / denom;
        (slope, (sy - slope * sx) / m)
    };
    let (slope, intercept) = fit(idx);
    let mut resid: Vec<f64> = idx
        .iter()
        .map(|&i| (ys[i] - slope * xs[i] - intercept).abs())
        .collect();
    resid.sort_by(f64::total_cmp);
    let mad = resid[resid.len() / 2];
    if mad < 1e-12 {
        return (slope, intercept);
    }
    let kept: Vec<usize> = idx
        .iter()
        .copied()
        .filter(|&i| (ys[i] - slope * xs[i] - intercept).abs() <= 3.5 * mad)
        .collect();
    if kept.len() < 2 {
        (slope, intercept)
    } else {
        fit(&kept)
    }
}

/// Linear resampling of a left-to-right polyline onto the given x grid;
/// positions outside the polyline's span take the nearest end value.
fn resample_to_grid(points: &[[f64; 2]], grid: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.len());
    let mut seg = 0usize;
    for &x in grid {
        if x <= points[0][0] {
            out.push(points[0][1]);
            continue;
        }
        if x >= points[points.len() - 1][0] {
            out.push(points[points.len() - 1][1]);
            continue;
        }
        while seg + 2 < points.len() && points[seg + 1][0] < x {
            seg += 1;
        }
        let (a, b) = (points[seg], points[seg + 1]);
        let t = if b[0] > a[0] {
            ((x - a[0]) / (b[0] - a[0])).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(a[1] + t * (b[1] - a[1]));
    }
    out
}

/// Gaussian smoothing with reflection at the ends; `sigma` in samples.
fn gaussian_smooth(values: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 || values.len() < 2 {
        return values.to_vec();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let n = values.len() as isize;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (j, w) in kernel.iter().enumerate() {
                let mut k = i + j as isize - radius;
                // Reflect off both ends.
                if k < 0 {
                    k = -k;
                }
                if k >= n {
                    k = 2 * (n - 1) - k;
                }
                acc += w * values[k.clamp(0, n - 1) as usize];
            }
            acc / norm
        })
        .collect()
}
