//! Circular surgical needle model and deterministic surface sampling.
//!
//! Needle frame convention: origin at the tip/body interface, the body arc in
//! the local XY plane curving toward +Y, and the direction of travel (tip
//! first) along +X. The conical tip extends from the interface to an apex at
//! `(tip_cone_length, 0, 0)`; the body centerline runs
//! `P(s) = (-r sin s, r (1 - cos s), 0)` for `s` in `[0, arc_angle]`, so the
//! tail of a half-circle needle sits at `(0, 2r, 0)`.

use super::cloud::PointCloud;
use super::transform::GeomError;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

/// Default conical tip length in millimetres; vendor drawings do not state
/// one, so it is configurable on the model.
pub const DEFAULT_TIP_CONE_LENGTH_MM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeedleModel {
    /// Radius of the body arc (mm).
    pub radius_mm: f64,
    /// Angular extent of the body arc (rad); pi for a half-circle needle.
    pub arc_angle_rad: f64,
    /// Wire diameter (mm).
    pub width_mm: f64,
    /// Length of the straight conical tip (mm).
    pub tip_cone_length_mm: f64,
}

/// Builds a needle model from catalog-style data: total body arc length, the
/// fraction of a full circle it spans, and the wire width.
///
/// Fractions above 1/2 are rejected: the arc-coordinate and containment
/// queries classify points by which side of the arc-center diameter they
/// fall on, which is only unambiguous while the body stays within a half
/// circle (the common surgical range runs 1/4 to 1/2).
pub fn needle_from_spec(
    arc_length_mm: f64,
    fraction_of_circle: f64,
    width_mm: f64,
) -> Result<NeedleModel, GeomError> {
    for (name, value) in [
        ("arc_length_mm", arc_length_mm),
        ("fraction_of_circle", fraction_of_circle),
        ("width_mm", width_mm),
    ] {
        if value <= 0.0 {
            return Err(GeomError::NonPositive { name, value });
        }
    }
    if fraction_of_circle > 0.5 {
        return Err(GeomError::ArcTooLong { fraction_of_circle });
    }
    Ok(NeedleModel {
        radius_mm: arc_length_mm / (TAU * fraction_of_circle),
        arc_angle_rad: TAU * fraction_of_circle,
        width_mm,
        tip_cone_length_mm: DEFAULT_TIP_CONE_LENGTH_MM,
    })
}

impl NeedleModel {
    pub fn with_tip_cone_length(mut self, length_mm: f64) -> Self {
        self.tip_cone_length_mm = length_mm;
        self
    }

    /// Body centerline point at arc parameter `s` in `[0, arc_angle]`.
    pub fn centerline_point(&self, s: f64) -> Vector3<f64> {
        let r = self.radius_mm;
        Vector3::new(-r * s.sin(), r * (1.0 - s.cos()), 0.0)
    }

    /// Center of the body arc, `(0, r, 0)`.
    pub fn arc_center(&self) -> Vector3<f64> {
        Vector3::new(0.0, self.radius_mm, 0.0)
    }

    /// The sharp point of the conical tip.
    pub fn tip_apex(&self) -> Vector3<f64> {
        Vector3::new(self.tip_cone_length_mm, 0.0, 0.0)
    }

    /// End of the body arc (the swage where the suture attaches).
    pub fn tail(&self) -> Vector3<f64> {
        self.centerline_point(self.arc_angle_rad)
    }

    /// Length of the body arc.
    pub fn arc_length(&self) -> f64 {
        self.radius_mm * self.arc_angle_rad
    }

    /// Total centerline length from apex to tail (cone + body arc).
    pub fn total_path_length(&self) -> f64 {
        self.tip_cone_length_mm + self.arc_length()
    }

    /// Arc-length coordinate of a needle-frame point measured from the tip
    /// apex along the centerline path apex -> interface -> body -> tail.
    ///
    /// Exact for points on the modeled surface; the tube's radial offset is
    /// purely radial about the arc center so it does not bias the angle.
    pub fn arc_coord_from_apex(&self, p: &Vector3<f64>) -> f64 {
        let v = Vector3::new(p[0], p[1] - self.radius_mm, 0.0);
        let s = (-v[0]).atan2(-v[1]);
        if s < 0.0 {
            // Tip-cone side: axial distance from the apex.
            (self.tip_cone_length_mm - p[0]).clamp(0.0, self.tip_cone_length_mm)
        } else {
            self.tip_cone_length_mm + self.radius_mm * s.min(self.arc_angle_rad)
        }
    }

    /// Distance from a point to the needle solid's centerline path (body arc
    /// plus tip cone axis), used by the renderer's occupancy tests.
    pub fn distance_to_body_centerline(&self, p: &Vector3<f64>) -> f64 {
        let v = Vector3::new(p[0], p[1] - self.radius_mm, 0.0);
        let s = (-v[0]).atan2(-v[1]).clamp(0.0, self.arc_angle_rad);
        (p - self.centerline_point(s)).norm()
    }

    /// Radius of the tube/cone cross-section at arc coordinate `d` from the
    /// apex: linear taper over the cone, constant `width/2` over the body.
    pub fn cross_section_radius(&self, d_from_apex: f64) -> f64 {
        let half = self.width_mm / 2.0;
        if d_from_apex >= self.tip_cone_length_mm {
            half
        } else {
            half * (d_from_apex / self.tip_cone_length_mm).clamp(0.0, 1.0)
        }
    }

    /// True if `p` lies inside the needle solid (body tube or tip cone).
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let half = self.width_mm / 2.0;
        // Body tube, cut flat at both arc ends.
        if self.distance_to_body_centerline(p) <= half {
            let v = Vector3::new(p[0], p[1] - self.radius_mm, 0.0);
            let ang = (-v[0]).atan2(-v[1]);
            if ang >= 0.0 && ang <= self.arc_angle_rad {
                return true;
            }
        }
        // Tip cone: axial position u in [0,1] from base (interface) to apex.
        let l = self.tip_cone_length_mm;
        if l > 0.0 && p[0] >= 0.0 && p[0] <= l {
            let radius_here = half * (1.0 - p[0] / l);
            let radial = (p[1] * p[1] + p[2] * p[2]).sqrt();
            if radial <= radius_here {
                return true;
            }
        }
        false
    }
}

/// Surface samples plus their arc-length coordinates from the apex.
#[derive(Debug, Clone)]
pub struct NeedleSurface {
    pub cloud: PointCloud,
    pub arc_from_apex: Vec<f64>,
}

/// Deterministically samples the needle surface at roughly `density` points
/// per square millimetre (unit weights).
pub fn sample_needle_surface(model: &NeedleModel, density: f64) -> PointCloud {
    sample_needle_surface_detailed(model, density).cloud
}

/// As [`sample_needle_surface`], but keeps per-point arc coordinates for
/// tip-band classification.
pub fn sample_needle_surface_detailed(model: &NeedleModel, density: f64) -> NeedleSurface {
    assert!(density > 0.0, "sampling density must be positive");
    // Each ring's azimuth pattern is twisted by an extra golden angle over
    // its neighbour's. On a plain grid, sliding the cloud along the arc by
    // a whole ring step maps samples exactly onto samples, giving nearest-
    // neighbour alignment a lattice of spurious zero-residual poses; the
    // irrational twist removes them (rolling a bent tube about its own core
    // is not a rigid motion, so the twist cannot be undone).
    let golden = PI * (3.0 - 5.0f64.sqrt());
    let h = 1.0 / density.sqrt();
    let half = model.width_mm / 2.0;
    let mut points = Vec::new();
    let mut coords = Vec::new();

    // Body: tube of radius width/2 around the centerline arc.
    let n_s = ((model.arc_length() / h).ceil() as usize).max(2);
    let n_phi = ((PI * model.width_mm / h).ceil() as usize).max(6);
    for i in 0..n_s {
        let s = (i as f64 + 0.5) / n_s as f64 * model.arc_angle_rad;
        let center = model.centerline_point(s);
        // Radial direction away from the arc center.
        let radial = Vector3::new(-s.sin(), -s.cos(), 0.0);
        let binormal = Vector3::new(0.0, 0.0, 1.0);
        for j in 0..n_phi {
            let phi = i as f64 * golden + j as f64 / n_phi as f64 * TAU;
            points.push(center + (radial * phi.cos() + binormal * phi.sin()) * half);
            coords.push(model.tip_cone_length_mm + model.radius_mm * s);
        }
    }

    // Tip cone: rings tapering from the interface down to the apex point.
    let l = model.tip_cone_length_mm;
    if l > 0.0 {
        let n_u = ((l / h).ceil() as usize).max(2);
        for i in 0..n_u {
            let u = (i as f64 + 0.5) / n_u as f64; // 0 at interface, 1 at apex
            let ring_radius = half * (1.0 - u);
            let n_ring = ((TAU * ring_radius / h).ceil() as usize).max(3);
            for j in 0..n_ring {
                let phi = i as f64 * golden + j as f64 / n_ring as f64 * TAU;
                points.push(Vector3::new(
                    u * l,
                    ring_radius * phi.cos(),
                    ring_radius * phi.sin(),
                ));
                coords.push(l * (1.0 - u));
            }
        }
        points.push(model.tip_apex());
        coords.push(0.0);
    }

    NeedleSurface {
        cloud: PointCloud::new(points),
        arc_from_apex: coords,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn paper_needle() -> NeedleModel {
        needle_from_spec(13.0, 0.5, 0.448).unwrap()
    }

    #[test]
    fn half_circle_radius_is_arc_length_over_pi() {
        let n = paper_needle();
        assert_abs_diff_eq!(n.radius_mm, 13.0 / PI, epsilon = 1e-12);
        assert_abs_diff_eq!(n.arc_angle_rad, PI, epsilon = 1e-12);
        // Published rounding of the same needle.
        assert!((n.radius_mm - 4.14).abs() < 5e-3);
    }

    #[test]
    fn half_circle_chord_is_twice_radius() {
        let n = paper_needle();
        let chord = (n.tail() - n.centerline_point(0.0)).norm();
        assert_abs_diff_eq!(chord, 2.0 * n.radius_mm, epsilon = 1e-12);
    }

    #[test]
    fn more_than_a_half_circle_is_rejected() {
        assert!(matches!(
            needle_from_spec(13.0, 0.625, 0.448),
            Err(GeomError::ArcTooLong { .. })
        ));
        assert!(needle_from_spec(13.0, 0.5, 0.448).is_ok());
    }

    #[test]
    fn non_positive_inputs_are_rejected() {
        assert!(matches!(
            needle_from_spec(0.0, 0.5, 0.4),
            Err(GeomError::NonPositive { name: "arc_length_mm", .. })
        ));
        assert!(matches!(
            needle_from_spec(13.0, -0.5, 0.4),
            Err(GeomError::NonPositive { name: "fraction_of_circle", .. })
        ));
        assert!(matches!(
            needle_from_spec(13.0, 0.5, 0.0),
            Err(GeomError::NonPositive { name: "width_mm", .. })
        ));
    }

    #[test]
    fn sampled_surface_reaches_the_frame_origin() {
        let n = paper_needle();
        let cloud = sample_needle_surface(&n, 400.0);
        let min_dist = cloud
            .points()
            .iter()
            .map(|p| p.norm())
            .fold(f64::INFINITY, f64::min);
        assert!(
            min_dist <= n.width_mm / 2.0 + 1e-9,
            "closest sample to origin {min_dist}"
        );
    }

    #[test]
    fn sample_count_tracks_density_and_area() {
        let n = paper_needle();
        // Tube lateral area + cone lateral area.
        let tube = PI * n.width_mm * n.arc_length();
        let slant = (n.tip_cone_length_mm.powi(2) + (n.width_mm / 2.0).powi(2)).sqrt();
        let cone = PI * (n.width_mm / 2.0) * slant;
        let density = 900.0;
        let count = sample_needle_surface(&n, density).len() as f64;
        let expected = (tube + cone) * density;
        assert!(
            count > 0.5 * expected && count < 2.0 * expected,
            "count {count} vs expected {expected}"
        );
    }

    #[test]
    fn stored_arc_coords_match_analytic_recovery() {
        let n = paper_needle();
        let surface = sample_needle_surface_detailed(&n, 400.0);
        for (p, d) in surface.cloud.points().iter().zip(&surface.arc_from_apex) {
            let analytic = n.arc_coord_from_apex(p);
            assert!(
                (analytic - d).abs() < 1e-9,
                "stored {d} analytic {analytic} at {p:?}"
            );
        }
    }

    #[test]
    fn body_samples_sit_on_the_tube_surface() {
        let n = paper_needle();
        let surface = sample_needle_surface_detailed(&n, 400.0);
        for (p, d) in surface.cloud.points().iter().zip(&surface.arc_from_apex) {
            if *d > n.tip_cone_length_mm + 1e-9 {
                let dist = n.distance_to_body_centerline(p);
                assert_abs_diff_eq!(dist, n.width_mm / 2.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn containment_agrees_with_centerline_distance() {
        let n = paper_needle();
        assert!(n.contains(&Vector3::new(0.0, 0.1, 0.0)));
        assert!(n.contains(&Vector3::new(n.tip_cone_length_mm * 0.5, 0.0, 0.0)));
        assert!(!n.contains(&Vector3::new(n.tip_cone_length_mm + 0.2, 0.0, 0.0)));
        assert!(!n.contains(&Vector3::new(0.0, -1.0, 0.0)));
        assert!(n.contains(&n.tail()));
    }
}
