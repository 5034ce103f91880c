//! Scene rasterization with scanner artifacts.
//!
//! Rendering is a fixed sequence of passes over the voxel grid: tissue,
//! suture tract, metal (needle and instrument box), shadowing, conjugate
//! ghost, saturation lines, then multiplicative speckle. Every pass is
//! deterministic given the scene seed; speckle uses a counter-style hash per
//! voxel so the result is independent of traversal order.
//!
//! Metal renders as the full solid (bright torus segment plus tip cone, not
//! just the top skin). That keeps the thresholded point cloud geometrically
//! symmetric about the true centerline, so downstream registration sees no
//! systematic depth bias. Shadowing therefore darkens only non-metal voxels
//! beneath the first metal crossing of each depth column.

use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::octsim::scene::{
    GroundTruth, SceneSpec, WoundPolyline, WOUND_DEPTH_RANGE_MM, WOUND_WIDTH_RANGE_MM,
};
use crate::octsim::volume::OctVolume;
use crate::rng::{derive_seed, hash2, hash_standard_normal, stage_rng};

use rand::Rng as _;

/// Detector noise floor present everywhere.
pub const AMBIENT: f32 = 0.02;
/// Intensity of metal voxels (needle, instrument box).
pub const METAL_INTENSITY: f32 = 0.98;
/// Intensity of the bright tissue-surface band.
pub const SURFACE_PEAK: f32 = 0.85;
/// Half-thickness of the surface band, mm; symmetric about the analytic
/// surface so the detected layer has no systematic depth offset.
pub const SURFACE_BAND_MM: f64 = 0.06;
/// Sub-surface scattering amplitude at zero depth.
pub const INTERIOR_PEAK: f64 = 0.40;
/// Exponential attenuation of sub-surface signal, per mm of depth.
pub const INTERIOR_DECAY_PER_MM: f64 = 0.30;
/// Intensity of the suture-thread tract.
pub const TRACT_INTENSITY: f32 = 0.90;
/// Attenuation applied to the conjugate ghost of the instrument box.
pub const MIRROR_ATTENUATION: f32 = 0.35;

/// Scene rejection reasons.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RenderError {
    /// The wound (after tilt/shear) does not fit inside the volume.
    SceneOutOfField { detail: String },
    /// A scene parameter is outside its documented range.
    InvalidScene { detail: String },
}

impl fmt::Display for RenderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RenderError::SceneOutOfField { detail } => {
                write!(f, "scene leaves the field of view: {detail}")
            }
            RenderError::InvalidScene { detail } => write!(f, "invalid scene: {detail}"),
        }
    }
}

impl std::error::Error for RenderError {}

fn validate_wound(wound: &WoundPolyline) -> Result<(), RenderError> {
    let n = wound.vertices.len();
    if n < 3 {
        return Err(RenderError::InvalidScene {
            detail: "wound polyline needs at least 3 vertices".into(),
        });
    }
    for w in wound.vertices.windows(2) {
        if w[1][0] <= w[0][0] {
            return Err(RenderError::InvalidScene {
                detail: "wound vertices must strictly increase in x".into(),
            });
        }
    }
    if wound.vertices[0][1] != 0.0 || wound.vertices[n - 1][1] != 0.0 {
        return Err(RenderError::InvalidScene {
            detail: "wound must open onto the surface (rim depth 0)".into(),
        });
    }
    if wound.vertices.iter().any(|v| v[1] < 0.0) {
        return Err(RenderError::InvalidScene {
            detail: "wound depths must be non-negative".into(),
        });
    }
    let (wmin, wmax) = WOUND_WIDTH_RANGE_MM;
    let (dmin, dmax) = WOUND_DEPTH_RANGE_MM;
    let width = wound.width_mm();
    let depth = wound.depth_mm();
    if !(wmin..=wmax).contains(&width) {
        return Err(RenderError::InvalidScene {
            detail: format!("wound width {width:.3} mm outside [{wmin}, {wmax}]"),
        });
    }
    if !(dmin..=dmax).contains(&depth) {
        return Err(RenderError::InvalidScene {
            detail: format!("wound depth {depth:.3} mm outside [{dmin}, {dmax}]"),
        });
    }
    Ok(())
}

fn validate(spec: &SceneSpec) -> Result<(), RenderError> {
    if spec.dims.contains(&0) || spec.fov_mm.iter().any(|&f| f <= 0.0) {
        return Err(RenderError::InvalidScene {
            detail: "dims and field of view must be positive".into(),
        });
    }
    let fov = spec.fov_mm;
    if let Some(tissue) = &spec.tissue {
        if tissue.surface_depth_mm <= 0.0 || tissue.surface_depth_mm >= fov[1] {
            return Err(RenderError::InvalidScene {
                detail: format!(
                    "surface depth {:.3} mm outside the volume depth range",
                    tissue.surface_depth_mm
                ),
            });
        }
        if let Some(wound) = &tissue.wound {
            validate_wound(wound)?;
            // Every tilted vertex must stay inside the volume at both
            // slow-axis extremes (the shear adds ±z_slope·fov_z/2 depth).
            let shear = tissue.z_slope.abs() * fov[2] / 2.0;
            for v in &wound.vertices {
                let p = tissue_tilted_vertex(tissue, v[0], fov);
                if p[0] <= 0.0 || p[0] >= fov[0] || p[1] <= 0.0 || p[1] + shear >= fov[1] {
                    return Err(RenderError::SceneOutOfField {
                        detail: format!(
                            "wound vertex maps to ({:.3}, {:.3}) mm outside {:.2}×{:.2} mm",
                            p[0], p[1], fov[0], fov[1]
                        ),
                    });
                }
            }
        }
    }
    if let Some(tract) = &spec.tract {
        if tract.radius_mm <= 0.0 || tract.tube_radius_mm <= 0.0 {
            return Err(RenderError::InvalidScene {
                detail: "tract radii must be positive".into(),
            });
        }
    }
    let a = &spec.artifacts;
    if !(0.0..=1.0).contains(&a.shadow_opacity) || a.speckle_sigma < 0.0 {
        return Err(RenderError::InvalidScene {
            detail: "artifact parameters out of range".into(),
        });
    }
    Ok(())
}

// Wrapper so validation can reuse the scene's tilt mapping on raw vertices.
fn tissue_tilted_vertex(
    tissue: &crate::octsim::scene::TissueSpec,
    u: f64,
    fov: [f64; 3],
) -> [f64; 2] {
    // Rebuild the rotation used by TissueSpec::surface_depth_at.
    let phi = tissue.tilt_deg.to_radians();
    let (s, c) = phi.sin_cos();
    let pivot = tissue
        .wound
        .as_ref()
        .map_or(fov[0] / 2.0, WoundPolyline::center_x_mm);
    let extra = tissue.wound.as_ref().map_or(0.0, |w| w.extra_depth_at(u));
    let du = u - pivot;
    [
        pivot + du * c - extra * s,
        tissue.surface_depth_mm + du * s + extra * c,
    ]
}

/// Inclusive voxel index range covering a physical interval on one axis.
fn voxel_span(lo_mm: f64, hi_mm: f64, spacing: f64, dim: usize) -> Option<(usize, usize)> {
    // Voxel centers sit at (i + 0.5)·spacing; include every center in
    // [lo, hi] plus one voxel of padding.
    let i0 = ((lo_mm / spacing - 0.5).floor() as i64 - 1).max(0) as usize;
    let i1 = ((hi_mm / spacing - 0.5).ceil() as i64 + 1).min(dim as i64 - 1);
    if i1 < 0 || i0 as i64 > i1 {
        return None;
    }
    Some((i0, i1 as usize))
}

struct MetalRaster {
    mask: Vec<bool>,
    /// First (shallowest) metal voxel per lateral column, `usize::MAX` if none.
    first_y: Vec<usize>,
}

/// Renders a scene to a volume plus exact ground truth.
///
/// Deterministic: the same spec (including seed) always produces the same
/// bytes. Fails with [`RenderError::SceneOutOfField`] when the wound leaves
/// the grid and [`RenderError::InvalidScene`] for out-of-range parameters.
pub fn render(spec: &SceneSpec) -> Result<(OctVolume, GroundTruth), RenderError> {
    validate(spec)?;
    let [nx, ny, nz] = spec.dims;
    let fov = spec.fov_mm;
    let mut vol = OctVolume::zeros(spec.dims, fov, [0.0; 3]);
    vol.set_seed(spec.seed);
    let [sx, sy, sz] = vol.spacing();
    vol.voxels_mut().fill(AMBIENT);

    // Tissue pass: analytic surface depth per lateral column, then paint the
    // band and the attenuated interior.
    let mut top_layer: Option<Vec<f64>> = None;
    if let Some(tissue) = &spec.tissue {
        let mut surf = vec![0.0f64; nx * nz];
        for z in 0..nz {
            let zc = (z as f64 + 0.5) * sz;
            for x in 0..nx {
                let xc = (x as f64 + 0.5) * sx;
                surf[x + nx * z] = tissue.surface_depth_at(xc, zc, fov);
            }
        }
        for z in 0..nz {
            for y in 0..ny {
                let yc = (y as f64 + 0.5) * sy;
                let row_start = vol.linear_index(0, y, z);
                let voxels = vol.voxels_mut();
                for x in 0..nx {
                    let ys = surf[x + nx * z];
                    let v = if (yc - ys).abs() <= SURFACE_BAND_MM {
                        SURFACE_PEAK
                    } else if yc > ys {
                        let fall = INTERIOR_PEAK * (-INTERIOR_DECAY_PER_MM * (yc - ys)).exp();
                        (fall as f32).max(AMBIENT)
                    } else {
                        AMBIENT
                    };
                    voxels[row_start + x] = v;
                }
            }
        }
        top_layer = Some(surf);
    }

    // Suture tract: bright tube around the circle, composited with max so it
    // reads through tissue texture.
    if let Some(tract) = &spec.tract {
        let reach = tract.radius_mm + tract.tube_radius_mm;
        let c = tract.center_mm;
        let span_x = voxel_span(c[0] - reach, c[0] + reach, sx, nx);
        let span_y = voxel_span(c[1] - reach, c[1] + reach, sy, ny);
        let span_z = voxel_span(c[2] - reach, c[2] + reach, sz, nz);
        if let (Some((x0, x1)), Some((y0, y1)), Some((z0, z1))) = (span_x, span_y, span_z) {
            for z in z0..=z1 {
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let p = vol.voxel_center(x, y, z);
                        if tract.distance_to_circle(&p) <= tract.tube_radius_mm {
                            let idx = vol.linear_index(x, y, z);
                            let voxels = vol.voxels_mut();
                            voxels[idx] = voxels[idx].max(TRACT_INTENSITY);
                        }
                    }
                }
            }
        }
    }

    // Metal passes share a mask so shadowing can distinguish metal from the
    // structures behind it.
    let mut metal: Option<MetalRaster> = None;
    let mut needle_voxels: Vec<u32> = Vec::new();
    let mut driver_voxels: Vec<u32> = Vec::new();

    if let Some(needle) = &spec.needle {
        let raster = metal.get_or_insert_with(|| MetalRaster {
            mask: vec![false; nx * ny * nz],
            first_y: vec![usize::MAX; nx * nz],
        });
        let inv = needle.pose.inverse();
        let model = &needle.model;
        // Scanner-frame bounding box from dense centerline samples padded by
        // the tube half-width.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let steps = (model.arc_angle_rad / 0.01).ceil() as usize;
        let mut track = |p: Vector3<f64>| {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        };
        for i in 0..=steps {
            let s = model.arc_angle_rad * i as f64 / steps as f64;
            track(needle.pose.apply_point(&model.centerline_point(s)));
        }
        track(needle.pose.apply_point(&model.tip_apex()));
        let pad = model.width_mm / 2.0 + 0.01;
        let span_x = voxel_span(lo[0] - pad, hi[0] + pad, sx, nx);
        let span_y = voxel_span(lo[1] - pad, hi[1] + pad, sy, ny);
        let span_z = voxel_span(lo[2] - pad, hi[2] + pad, sz, nz);
        if let (Some((x0, x1)), Some((y0, y1)), Some((z0, z1))) = (span_x, span_y, span_z) {
            for z in z0..=z1 {
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let local = inv.apply_point(&vol.voxel_center(x, y, z));
                        if model.contains(&local) {
                            let idx = vol.linear_index(x, y, z);
                            vol.voxels_mut()[idx] = METAL_INTENSITY;
                            raster.mask[idx] = true;
                            needle_voxels.push(idx as u32);
                            let col = x + nx * z;
                            raster.first_y[col] = raster.first_y[col].min(y);
                        }
                    }
                }
            }
        }
    }

    if let Some(driver) = &spec.driver {
        let raster = metal.get_or_insert_with(|| MetalRaster {
            mask: vec![false; nx * ny * nz],
            first_y: vec![usize::MAX; nx * nz],
        });
        let inv = driver.pose.inverse();
        let h = driver.half_extents_mm;
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for corner in 0..8 {
            let p = Vector3::new(
                if corner & 1 == 0 { -h[0] } else { h[0] },
                if corner & 2 == 0 { -h[1] } else { h[1] },
                if corner & 4 == 0 { -h[2] } else { h[2] },
            );
            let w = driver.pose.apply_point(&p);
            for a in 0..3 {
                lo[a] = lo[a].min(w[a]);
                hi[a] = hi[a].max(w[a]);
            }
        }
        let span_x = voxel_span(lo[0], hi[0], sx, nx);
        let span_y = voxel_span(lo[1], hi[1], sy, ny);
        let span_z = voxel_span(lo[2], hi[2], sz, nz);
        if let (Some((x0, x1)), Some((y0, y1)), Some((z0, z1))) = (span_x, span_y, span_z) {
            for z in z0..=z1 {
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let local = inv.apply_point(&vol.voxel_center(x, y, z));
                        if local[0].abs() <= h[0] && local[1].abs() <= h[1] && local[2].abs() <= h[2]
                        {
                            let idx = vol.linear_index(x, y, z);
                            vol.voxels_mut()[idx] = METAL_INTENSITY;
                            raster.mask[idx] = true;
                            driver_voxels.push(idx as u32);
                            let col = x + nx * z;
                            raster.first_y[col] = raster.first_y[col].min(y);
                        }
                    }
                }
            }
        }
    }

    // Shadow pass: below the first metal crossing of a column, non-metal
    // signal is attenuated toward the ambient floor.
    if spec.artifacts.shadow_opacity > 0.0 {
        if let Some(raster) = &metal {
            let keep = (1.0 - spec.artifacts.shadow_opacity) as f32;
            for z in 0..nz {
                for x in 0..nx {
                    let first = raster.first_y[x + nx * z];
                    if first == usize::MAX {
                        continue;
                    }
                    for y in (first + 1)..ny {
                        let idx = x + nx * (y + ny * z);
                        if !raster.mask[idx] {
                            let voxels = vol.voxels_mut();
                            voxels[idx] = (voxels[idx] * keep).max(AMBIENT);
                        }
                    }
                }
            }
        }
    }

    // Conjugate ghost: the instrument box mirrored through the volume's
    // mid-depth plane, attenuated, composited with max.
    if spec.artifacts.conjugate_mirror {
        let ghost = METAL_INTENSITY * MIRROR_ATTENUATION;
        for &idx in &driver_voxels {
            let idx = idx as usize;
            let x = idx % nx;
            let y = (idx / nx) % ny;
            let z = idx / (nx * ny);
            let flipped = vol.linear_index(x, ny - 1 - y, z);
            let voxels = vol.voxels_mut();
            voxels[flipped] = voxels[flipped].max(ghost);
        }
    }

    // Speckle: multiplicative noise from a per-voxel counter hash.
    if spec.artifacts.speckle_sigma > 0.0 {
        let sigma = spec.artifacts.speckle_sigma;
        let seed = derive_seed(spec.seed, "render/speckle");
        for (idx, v) in vol.voxels_mut().iter_mut().enumerate() {
            let n = hash_standard_normal(hash2(seed, idx as u64));
            *v = ((f64::from(*v) * (1.0 + sigma * n)).clamp(0.0, 1.0)) as f32;
        }
    }

    // Saturation lines: detector clipping along entire fast-axis rows, drawn
    // after speckle because saturation clamps whatever the detector saw. Rows
    // pass through the needle's depth/slow-axis neighborhood when a needle is
    // present (specular highlights cause them), anywhere otherwise.
    let mut saturation_voxels: Vec<u32> = Vec::new();
    if spec.artifacts.saturation_lines > 0 {
        let mut rng = stage_rng(spec.seed, "render/saturation");
        let (y_range, z_range) = if needle_voxels.is_empty() {
            (0..ny, 0..nz)
        } else {
            let mut y_lo = usize::MAX;
            let mut y_hi = 0;
            let mut z_lo = usize::MAX;
            let mut z_hi = 0;
            for &idx in &needle_voxels {
                let idx = idx as usize;
                let y = (idx / nx) % ny;
                let z = idx / (nx * ny);
                y_lo = y_lo.min(y);
                y_hi = y_hi.max(y);
                z_lo = z_lo.min(z);
                z_hi = z_hi.max(z);
            }
            (y_lo..y_hi + 1, z_lo..z_hi + 1)
        };
        for _ in 0..spec.artifacts.saturation_lines {
            let y = rng.random_range(y_range.clone());
            let z = rng.random_range(z_range.clone());
            for x in 0..nx {
                let idx = vol.linear_index(x, y, z);
                vol.voxels_mut()[idx] = 1.0;
                let is_metal = metal.as_ref().is_some_and(|r| r.mask[idx]);
                if !is_metal {
                    saturation_voxels.push(idx as u32);
                }
            }
        }
        saturation_voxels.sort_unstable();
        saturation_voxels.dedup();
    }

    let wound = spec
        .tissue
        .as_ref()
        .and_then(|t| t.wound_keypoints(fov));
    let truth = GroundTruth {
        needle_pose: spec.needle.as_ref().map(|n| n.pose),
        needle_model: spec.needle.as_ref().map(|n| n.model),
        top_layer_mm: top_layer,
        wound,
        tract: spec.tract.clone(),
        needle_voxels,
        driver_voxels,
        saturation_voxels,
    };
    Ok((vol, truth))
}
