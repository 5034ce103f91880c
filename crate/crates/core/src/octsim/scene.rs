//! Scene descriptions for the renderer and the exact ground truth it emits.
//!
//! A scene is tissue (a base surface with an optional wound notch extruded
//! along the slow axis), an optional needle, an optional instrument box, an
//! optional suture-thread tract, and artifact settings. Everything is posed
//! in the scanner frame: X fast lateral, Y depth (down is +Y), Z slow
//! lateral, with the volume spanning `[0, fov]` on each axis.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geom::{NeedleModel, RigidTransform};
use crate::octsim::volume::{DEFAULT_DIMS, DEFAULT_FOV_MM};

/// Wound opening widths the generator accepts, mm (superset of the corpus).
pub const WOUND_WIDTH_RANGE_MM: (f64, f64) = (0.5, 8.0);
/// Wound depths the generator accepts, mm.
pub const WOUND_DEPTH_RANGE_MM: (f64, f64) = (0.3, 5.0);

/// Cross-section of the wound notch: piecewise-linear extra depth below the
/// base surface, extruded along Z. Vertices are `(x_mm, extra_depth_mm)` in
/// untilted surface coordinates, strictly increasing in x, with zero extra
/// depth outside the polyline's x-range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WoundPolyline {
    pub vertices: Vec<[f64; 2]>,
}

impl WoundPolyline {
    /// Symmetric V notch: straight walls from the surface edges to the apex.
    pub fn v_notch(center_x_mm: f64, width_mm: f64, depth_mm: f64) -> Self {
        let h = width_mm / 2.0;
        WoundPolyline {
            vertices: vec![
                [center_x_mm - h, 0.0],
                [center_x_mm, depth_mm],
                [center_x_mm + h, 0.0],
            ],
        }
    }

    /// Flat-bottomed notch with steep straight walls; the floor spans 40% of
    /// the opening width.
    pub fn u_notch(center_x_mm: f64, width_mm: f64, depth_mm: f64) -> Self {
        let h = width_mm / 2.0;
        let floor = 0.2 * width_mm;
        WoundPolyline {
            vertices: vec![
                [center_x_mm - h, 0.0],
                [center_x_mm - floor, depth_mm],
                [center_x_mm + floor, depth_mm],
                [center_x_mm + h, 0.0],
            ],
        }
    }

    /// Opening width: x-extent of the polyline.
    pub fn width_mm(&self) -> f64 {
        match (self.vertices.first(), self.vertices.last()) {
            (Some(a), Some(b)) => b[0] - a[0],
            _ => 0.0,
        }
    }

    /// Maximum extra depth over the polyline.
    pub fn depth_mm(&self) -> f64 {
        self.vertices.iter().map(|v| v[1]).fold(0.0, f64::max)
    }

    /// Midpoint of the opening; tilt rotates about this point.
    pub fn center_x_mm(&self) -> f64 {
        match (self.vertices.first(), self.vertices.last()) {
            (Some(a), Some(b)) => 0.5 * (a[0] + b[0]),
            _ => 0.0,
        }
    }

    /// Extra depth at lateral position `x` (0 outside the notch).
    pub fn extra_depth_at(&self, x: f64) -> f64 {
        let n = self.vertices.len();
        if n == 0 || x <= self.vertices[0][0] || x >= self.vertices[n - 1][0] {
            return 0.0;
        }
        for w in self.vertices.windows(2) {
            let (a, b) = (w[0], w[1]);
            if x >= a[0] && x <= b[0] {
                let t = if b[0] > a[0] {
                    (x - a[0]) / (b[0] - a[0])
                } else {
                    0.0
                };
                return a[1] + t * (b[1] - a[1]);
            }
        }
        0.0
    }

    /// Vertex with the greatest depth; plateau ties resolve to the plateau
    /// midpoint so U shapes report their floor center.
    pub fn deepest_vertex(&self) -> [f64; 2] {
        let depth = self.depth_mm();
        let at_depth: Vec<&[f64; 2]> = self
            .vertices
            .iter()
            .filter(|v| (v[1] - depth).abs() < 1e-12)
            .collect();
        match (at_depth.first(), at_depth.last()) {
            (Some(a), Some(b)) => [0.5 * (a[0] + b[0]), depth],
            _ => [self.center_x_mm(), depth],
        }
    }
}

/// Tissue block: a base surface plane at `surface_depth_mm`, an optional
/// wound notch, an in-plane tilt (true rotation of the cross-section about
/// the wound center), and a shear along the slow axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueSpec {
    /// Depth of the untilted surface plane, mm.
    pub surface_depth_mm: f64,
    /// Rotation of the B-scan cross-section, degrees; positive tips the +X
    /// side of the surface deeper.
    pub tilt_deg: f64,
    /// Depth added per mm of slow-axis offset from the volume center.
    pub z_slope: f64,
    pub wound: Option<WoundPolyline>,
}

impl TissueSpec {
    pub fn flat(surface_depth_mm: f64) -> Self {
        TissueSpec {
            surface_depth_mm,
            tilt_deg: 0.0,
            z_slope: 0.0,
            wound: None,
        }
    }

    fn pivot_x(&self, fov_x: f64) -> f64 {
        self.wound
            .as_ref()
            .map_or(fov_x / 2.0, WoundPolyline::center_x_mm)
    }

    /// Untilted surface depth at lateral coordinate `u`.
    fn profile(&self, u: f64) -> f64 {
        let extra = self.wound.as_ref().map_or(0.0, |w| w.extra_depth_at(u));
        self.surface_depth_mm + extra
    }

    /// Tilted cross-section curve: the untilted point `(u, profile(u))`
    /// rotated by `tilt_deg` about `(pivot, surface_depth)`.
    fn tilted_point(&self, u: f64, fov_x: f64) -> [f64; 2] {
        let phi = self.tilt_deg.to_radians();
        let (s, c) = phi.sin_cos();
        let pivot = self.pivot_x(fov_x);
        let du = u - pivot;
        let dd = self.profile(u) - self.surface_depth_mm;
        [
            pivot + du * c - dd * s,
            self.surface_depth_mm + du * s + dd * c,
        ]
    }

    /// Surface depth at volume coordinates `(x, z)`, mm. The tilted curve
    /// stays a graph over x for the supported tilt/steepness ranges; the
    /// pre-image is recovered by bisection on the monotone lateral map.
    pub fn surface_depth_at(&self, x: f64, z: f64, fov: [f64; 3]) -> f64 {
        let phi = self.tilt_deg.to_radians();
        let depth_in_plane = if phi == 0.0 {
            self.profile(x)
        } else {
            // Bracket the pre-image: lateral displacement from rotation is
            // bounded by the wound depth plus tilt of the full FOV width.
            let reach = self.wound.as_ref().map_or(0.0, WoundPolyline::depth_mm)
                + fov[0] * phi.abs().sin()
                + 1.0;
            let (mut lo, mut hi) = (x - reach, x + reach);
            for _ in 0..64 {
                let mid = 0.5 * (lo + hi);
                if self.tilted_point(mid, fov[0])[0] < x {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            self.tilted_point(0.5 * (lo + hi), fov[0])[1]
        };
        depth_in_plane + self.z_slope * (z - fov[2] / 2.0)
    }

    /// Exact wound keypoints in the tilted B-scan plane at the volume's
    /// central slow-axis position: left opening edge, right opening edge,
    /// deepest point, each as `(x_mm, depth_mm)`.
    pub fn wound_keypoints(&self, fov: [f64; 3]) -> Option<WoundTruth> {
        let wound = self.wound.as_ref()?;
        let first = *wound.vertices.first()?;
        let last = *wound.vertices.last()?;
        let deepest = wound.deepest_vertex();
        let tilt = |v: [f64; 2]| self.tilted_point(v[0], fov[0]);
        Some(WoundTruth {
            left_mm: tilt(first),
            right_mm: tilt(last),
            deepest_mm: tilt(deepest),
        })
    }
}

/// Needle posed in the scanner frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedlePlacement {
    pub model: NeedleModel,
    /// Needle frame → scanner frame.
    pub pose: RigidTransform,
}

/// Instrument (needle-driver) box posed in the scanner frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverSpec {
    /// Box frame → scanner frame.
    pub pose: RigidTransform,
    pub half_extents_mm: [f64; 3],
}

impl DriverSpec {
    /// Driver box gripping the needle's tail: jaws at the tail, handle
    /// standing off the needle plane toward the mount. Rides rigidly with
    /// the needle pose.
    pub fn gripping_tail(needle: &NeedlePlacement) -> Self {
        let center = needle.model.tail() + Vector3::new(-1.0, 0.5, 3.0);
        DriverSpec {
            pose: needle.pose.compose(&RigidTransform::from_translation(center)),
            half_extents_mm: [3.0, 2.0, 2.0],
        }
    }
}

/// Suture-thread tract: a thin bright tube along a circle, rendered after a
/// throw so grading can recover the achieved bite/exit points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TractSpec {
    pub center_mm: [f64; 3],
    pub radius_mm: f64,
    /// Unit normal of the circle's plane.
    pub plane_normal: [f64; 3],
    pub tube_radius_mm: f64,
}

impl TractSpec {
    /// Distance from a point to the circle (not the disc).
    pub fn distance_to_circle(&self, p: &Vector3<f64>) -> f64 {
        let c = Vector3::from(self.center_mm);
        let n = Vector3::from(self.plane_normal);
        let v = p - c;
        let along = v.dot(&n);
        let in_plane = (v - n * along).norm();
        ((in_plane - self.radius_mm).powi(2) + along * along).sqrt()
    }
}

/// Artifact model settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactParams {
    /// Multiplicative speckle standard deviation (0 disables).
    pub speckle_sigma: f64,
    /// Number of saturation line artifacts to draw.
    pub saturation_lines: u32,
    /// Fraction of light blocked under metal: 1 leaves only the ambient
    /// floor, 0 disables shadowing.
    pub shadow_opacity: f64,
    /// Render a flipped, attenuated ghost of the instrument box.
    pub conjugate_mirror: bool,
}

impl Default for ArtifactParams {
    fn default() -> Self {
        ArtifactParams {
            speckle_sigma: 0.1,
            saturation_lines: 0,
            shadow_opacity: 1.0,
            conjugate_mirror: false,
        }
    }
}

impl ArtifactParams {
    /// Everything off: clean geometry for oracle tests.
    pub fn none() -> Self {
        ArtifactParams {
            speckle_sigma: 0.0,
            saturation_lines: 0,
            shadow_opacity: 0.0,
            conjugate_mirror: false,
        }
    }
}

/// Complete render input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub dims: [usize; 3],
    pub fov_mm: [f64; 3],
    pub tissue: Option<TissueSpec>,
    pub needle: Option<NeedlePlacement>,
    pub driver: Option<DriverSpec>,
    pub tract: Option<TractSpec>,
    pub artifacts: ArtifactParams,
    pub seed: u64,
}

impl SceneSpec {
    /// Empty scene at desk-scale resolution with default artifacts.
    pub fn new(seed: u64) -> Self {
        SceneSpec {
            dims: DEFAULT_DIMS,
            fov_mm: DEFAULT_FOV_MM,
            tissue: None,
            needle: None,
            driver: None,
            tract: None,
            artifacts: ArtifactParams::default(),
            seed,
        }
    }
}

/// Exact wound keypoints in the B-scan plane, `(x_mm, depth_mm)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WoundTruth {
    pub left_mm: [f64; 2],
    pub right_mm: [f64; 2],
    pub deepest_mm: [f64; 2],
}

/// Everything the renderer knows exactly, for downstream verification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Needle frame → scanner frame, when a needle was rendered.
    pub needle_pose: Option<RigidTransform>,
    pub needle_model: Option<NeedleModel>,
    /// Analytic surface depth (mm) at each lateral voxel center, x-fastest
    /// over an `nx × nz` grid; present when tissue was rendered.
    pub top_layer_mm: Option<Vec<f64>>,
    pub wound: Option<WoundTruth>,
    pub tract: Option<TractSpec>,
    /// Linear voxel indices of the rendered needle.
    pub needle_voxels: Vec<u32>,
    /// Linear voxel indices of the rendered instrument box.
    pub driver_voxels: Vec<u32>,
    /// Linear voxel indices of saturation lines (excluding needle overlap).
    pub saturation_voxels: Vec<u32>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const FOV: [f64; 3] = DEFAULT_FOV_MM;

    #[test]
    fn flat_surface_depth_is_uniform() {
        let t = TissueSpec::flat(4.5);
        for &(x, z) in &[(0.1, 0.1), (5.0, 3.0), (9.9, 7.0)] {
            assert_abs_diff_eq!(t.surface_depth_at(x, z, FOV), 4.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn v_notch_profile_hits_center_depth_and_edges() {
        let mut t = TissueSpec::flat(4.0);
        t.wound = Some(WoundPolyline::v_notch(5.0, 3.0, 1.5));
        assert_abs_diff_eq!(t.surface_depth_at(5.0, 3.0, FOV), 5.5, epsilon = 1e-12);
        assert_abs_diff_eq!(t.surface_depth_at(3.5, 3.0, FOV), 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.surface_depth_at(6.5, 3.0, FOV), 4.0, epsilon = 1e-12);
        // Halfway down the left wall.
        assert_abs_diff_eq!(t.surface_depth_at(4.25, 3.0, FOV), 4.75, epsilon = 1e-12);
    }

    #[test]
    fn tilt_keeps_pivot_fixed_and_matches_forward_rotation() {
        let mut t = TissueSpec::flat(4.0);
        t.wound = Some(WoundPolyline::v_notch(5.0, 3.0, 1.5));
        t.tilt_deg = 7.0;
        // A rim point 3 mm left of the pivot rotates to a hand-computable
        // location: x = 5 − 3·cosφ, depth = 4 − 3·sinφ.
        let phi = 7.0_f64.to_radians();
        assert_abs_diff_eq!(
            t.surface_depth_at(5.0 - 3.0 * phi.cos(), 3.575, FOV),
            4.0 - 3.0 * phi.sin(),
            epsilon = 1e-9
        );
        // Forward-rotate a batch of profile points and check the solver
        // reproduces each (x → depth) pair.
        for i in 0..60 {
            let u = 2.0 + 6.0 * (i as f64) / 59.0;
            let p = t.tilted_point(u, FOV[0]);
            let d = t.surface_depth_at(p[0], 3.575, FOV);
            assert_abs_diff_eq!(d, p[1], epsilon = 1e-9);
        }
    }

    #[test]
    fn z_slope_shears_depth_linearly() {
        let mut t = TissueSpec::flat(4.0);
        t.z_slope = 0.05;
        let center = FOV[2] / 2.0;
        assert_abs_diff_eq!(t.surface_depth_at(5.0, center, FOV), 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            t.surface_depth_at(5.0, center + 2.0, FOV),
            4.1,
            epsilon = 1e-12
        );
    }

    #[test]
    fn keypoints_rotate_with_the_section() {
        let mut t = TissueSpec::flat(4.0);
        t.wound = Some(WoundPolyline::v_notch(5.0, 3.0, 1.5));
        t.tilt_deg = 9.0;
        let kp = t.wound_keypoints(FOV).unwrap();
        let phi = 9.0_f64.to_radians();
        // Hand-rotate the left rim vertex (-1.5, 0) about the pivot.
        assert_abs_diff_eq!(kp.left_mm[0], 5.0 - 1.5 * phi.cos(), epsilon = 1e-12);
        assert_abs_diff_eq!(kp.left_mm[1], 4.0 - 1.5 * phi.sin(), epsilon = 1e-12);
        // Apex (0, 1.5) about the pivot.
        assert_abs_diff_eq!(kp.deepest_mm[0], 5.0 - 1.5 * phi.sin(), epsilon = 1e-12);
        assert_abs_diff_eq!(kp.deepest_mm[1], 4.0 + 1.5 * phi.cos(), epsilon = 1e-12);
    }

    #[test]
    fn u_notch_reports_floor_center_as_deepest() {
        let w = WoundPolyline::u_notch(5.0, 4.0, 2.0);
        assert_eq!(w.deepest_vertex(), [5.0, 2.0]);
        assert_abs_diff_eq!(w.extra_depth_at(5.0), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.width_mm(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn tract_circle_distance_matches_hand_values() {
        let tract = TractSpec {
            center_mm: [1.0, 2.0, 3.0],
            radius_mm: 2.0,
            plane_normal: [0.0, 0.0, 1.0],
            tube_radius_mm: 0.1,
        };
        // On the circle.
        assert_abs_diff_eq!(
            tract.distance_to_circle(&Vector3::new(3.0, 2.0, 3.0)),
            0.0,
            epsilon = 1e-12
        );
        // At the center: distance is the radius.
        assert_abs_diff_eq!(
            tract.distance_to_circle(&Vector3::new(1.0, 2.0, 3.0)),
            2.0,
            epsilon = 1e-12
        );
        // Offset along the normal above a circle point.
        assert_abs_diff_eq!(
            tract.distance_to_circle(&Vector3::new(3.0, 2.0, 4.0)),
            1.0,
            epsilon = 1e-12
        );
    }
}
