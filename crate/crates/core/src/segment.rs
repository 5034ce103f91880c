//! Needle segmentation from a volume.
//!
//! The stages mirror the acquisition pipeline: project the volume to a
//! maximum-intensity image, threshold it, clip away the instrument side,
//! keep the largest connected component, lift the surviving columns back to
//! a 3D point cloud, then strip saturation-line artifacts and statistical
//! outliers. Every stage is a pure function; [`segment_needle`] chains them.
//!
//! Segmentation assumes the needle is the brightest extended structure in
//! view (instrument-free columns, no tissue), which holds for the
//! calibration scenes that feed registration.

use std::collections::BTreeMap;
use std::fmt;
use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use serde::{Deserialize, Serialize};

use crate::geom::PointCloud;
use crate::octsim::{GrayImage, OctVolume};

/// Which lateral half of the projection the instrument occupies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriverSide {
    Left,
    Right,
}

/// Errors from segmentation stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmentError {
    /// No set pixels when a component was required.
    EmptyImage,
    /// Outlier filtering needs more points than neighbors.
    TooFewPoints { count: usize, k: usize },
}

impl fmt::Display for SegmentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentError::EmptyImage => write!(f, "binary image has no set pixels"),
            SegmentError::TooFewPoints { count, k } => {
                write!(f, "{count} points cannot support k={k} neighbor statistics")
            }
        }
    }
}

impl std::error::Error for SegmentError {}

/// 2D boolean mask with the physical pixel pitch of its source projection.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    spacing: [f64; 2],
    bits: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize, spacing: [f64; 2]) -> Self {
        BinaryImage {
            width,
            height,
            spacing,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> [f64; 2] {
        self.spacing
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Render as a grayscale image (1.0 where set) for debug dumps.
    pub fn to_gray(&self) -> GrayImage {
        let mut img = GrayImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    img.set(x, y, 1.0);
                }
            }
        }
        img
    }
}

/// Sets a bit wherever the projection meets or exceeds `level`.
///
/// `level` must lie strictly inside (0, 1): 0 would keep everything and 1
/// would drop saturated detail the later stages rely on.
pub fn threshold_projection(mip: &GrayImage, level: f64, spacing: [f64; 2]) -> BinaryImage {
    assert!(
        level > 0.0 && level < 1.0,
        "threshold level must lie in (0, 1), got {level}"
    );
    let mut out = BinaryImage::new(mip.width(), mip.height(), spacing);
    for y in 0..mip.height() {
        for x in 0..mip.width() {
            out.set(x, y, f64::from(mip.get(x, y)) >= level);
        }
    }
    out
}

/// Zeroes the leading (left) or trailing (right) fraction of the columns,
/// removing the instrument that always enters from one known side.
///
/// `fraction` 0 is a no-op; values at or above 0.9 would eat into the scene
/// center and are rejected.
pub fn clip_driver_side(img: &BinaryImage, side: DriverSide, fraction: f64) -> BinaryImage {
    assert!(
        (0.0..0.9).contains(&fraction),
        "clip fraction must lie in [0, 0.9), got {fraction}"
    );
    let mut out = img.clone();
    let cols = (img.width() as f64 * fraction).round() as usize;
    let range = match side {
        DriverSide::Left => 0..cols.min(img.width()),
        DriverSide::Right => img.width().saturating_sub(cols)..img.width(),
    };
    for x in range {
        for y in 0..img.height() {
            out.set(x, y, false);
        }
    }
    out
}

/// Keeps only the largest 8-connected component; ties go to the component
/// containing the earliest pixel in row-major scan order.
pub fn largest_component(img: &BinaryImage) -> Result<BinaryImage, SegmentError> {
    let (w, h) = (img.width(), img.height());
    let mut label = vec![usize::MAX; w * h];
    let mut best: Option<(usize, usize)> = None; // (size, component id)
    let mut next_id = 0usize;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !img.bits[start] || label[start] != usize::MAX {
            continue;
        }
        let id = next_id;
        next_id += 1;
        let mut size = 0usize;
        stack.push(start);
        label[start] = id;
        while let Some(idx) = stack.pop() {
            size += 1;
            let (x, y) = (idx % w, idx / w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if img.bits[nidx] && label[nidx] == usize::MAX {
                        label[nidx] = id;
                        stack.push(nidx);
                    }
                }
            }
        }
        // Components are discovered in scan order of their first pixel, so a
        // strict comparison implements the smallest-first-index tie-break.
        if best.map_or(true, |(s, _)| size > s) {
            best = Some((size, id));
        }
    }
    let (_, keep) = best.ok_or(SegmentError::EmptyImage)?;
    let mut out = BinaryImage::new(w, h, img.spacing);
    for (idx, &l) in label.iter().enumerate() {
        if l == keep {
            out.bits[idx] = true;
        }
    }
    Ok(out)
}

/// Collects every voxel at or above `level` whose lateral column is set in
/// the projection mask, as physical points at voxel centers.
pub fn lift_to_cloud(vol: &OctVolume, mask: &BinaryImage, level: f64) -> PointCloud {
    let [nx, ny, nz] = vol.dims();
    assert_eq!(
        (mask.width(), mask.height()),
        (nx, nz),
        "mask must match the volume's lateral projection"
    );
    let mut points = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get(x, z) && f64::from(vol.get(x, y, z)) >= level {
                    points.push(vol.voxel_center(x, y, z));
                }
            }
        }
    }
    PointCloud::new(points)
}

/// Physical bounds and pitch of a volume, enough for artifact geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub origin: [f64; 3],
    pub fov_mm: [f64; 3],
    pub spacing: [f64; 3],
}

impl From<&OctVolume> for VolumeMeta {
    fn from(vol: &OctVolume) -> Self {
        VolumeMeta {
            origin: vol.origin(),
            fov_mm: vol.fov_mm(),
            spacing: vol.spacing(),
        }
    }
}

/// Removes saturation-line artifacts: runs of points sharing a (depth,
/// slow-axis) voxel bin that stretch along the fast axis over at least half
/// the field of view and reach within `eps` = 0.2 mm of a lateral edge.
///
/// Needle cross-sections share bins too, but they are short and interior, so
/// the paired extent/edge test leaves them alone.
pub fn remove_saturation_lines(cloud: &PointCloud, meta: &VolumeMeta) -> PointCloud {
    const EDGE_EPS_MM: f64 = 0.2;
    let mut bins: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points().iter().enumerate() {
        let by = ((p[1] - meta.origin[1]) / meta.spacing[1]).floor() as i64;
        let bz = ((p[2] - meta.origin[2]) / meta.spacing[2]).floor() as i64;
        bins.entry((by, bz)).or_default().push(i);
    }
    let mut remove = vec![false; cloud.len()];
    let x_lo = meta.origin[0];
    let x_hi = meta.origin[0] + meta.fov_mm[0];
    for idxs in bins.values() {
        let min_x = idxs
            .iter()
            .map(|&i| cloud.points()[i][0])
            .fold(f64::INFINITY, f64::min);
        let max_x = idxs
            .iter()
            .map(|&i| cloud.points()[i][0])
            .fold(f64::NEG_INFINITY, f64::max);
        let touches_edge = min_x - x_lo <= EDGE_EPS_MM || x_hi - max_x <= EDGE_EPS_MM;
        let line_like = max_x - min_x >= 0.5 * meta.fov_mm[0];
        if touches_edge && line_like {
            for &i in idxs {
                remove[i] = true;
            }
        }
    }
    filter_cloud(cloud, &remove)
}

/// Removes points whose mean distance to their `k` nearest neighbors
/// exceeds the global mean by more than `std_ratio` standard deviations.
pub fn remove_statistical_outliers(
    cloud: &PointCloud,
    k: usize,
    std_ratio: f64,
) -> Result<PointCloud, SegmentError> {
    assert!(k >= 1, "k must be at least 1");
    let n = cloud.len();
    if n <= k {
        return Err(SegmentError::TooFewPoints { count: n, k });
    }
    let coords: Vec<[f64; 3]> = cloud.points().iter().map(|p| [p[0], p[1], p[2]]).collect();
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::from(coords.as_slice());
    let mut means = Vec::with_capacity(n);
    for (i, p) in coords.iter().enumerate() {
        // k+1 neighbors include the query point itself; drop it by id.
        let neighbors =
            tree.nearest_n::<SquaredEuclidean>(p, NonZero::new(k + 1).expect("k + 1 > 0"));
        let sum: f64 = neighbors
            .iter()
            .filter(|nb| nb.item != i as u64)
            .take(k)
            .map(|nb| nb.distance.sqrt())
            .sum();
        means.push(sum / k as f64);
    }
    let mean = means.iter().sum::<f64>() / n as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n as f64;
    let cutoff = mean + std_ratio * var.sqrt();
    let remove: Vec<bool> = means.iter().map(|&m| m > cutoff).collect();
    Ok(filter_cloud(cloud, &remove))
}

fn filter_cloud(cloud: &PointCloud, remove: &[bool]) -> PointCloud {
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (i, &drop) in remove.iter().enumerate() {
        if !drop {
            points.push(cloud.points()[i]);
            weights.push(cloud.weights()[i]);
        }
    }
    PointCloud::with_weights(points, weights)
}

/// Tuning for the end-to-end pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    /// Brightness threshold as a fraction of the projection's maximum.
    pub threshold_fraction: f64,
    /// Instrument side to clip, if any.
    pub driver_side: Option<DriverSide>,
    /// Fraction of columns removed on the instrument side.
    pub clip_fraction: f64,
    /// Neighbor count for outlier statistics.
    pub outlier_k: usize,
    /// Standard-deviation multiple beyond which a point is an outlier.
    pub outlier_std_ratio: f64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams {
            threshold_fraction: 0.5,
            driver_side: None,
            clip_fraction: 0.25,
            outlier_k: 20,
            outlier_std_ratio: 2.0,
        }
    }
}

/// Output of [`segment_needle`].
#[derive(Clone, Debug)]
pub struct SegmentationResult {
    /// Needle points in the volume frame, mm.
    pub needle_cloud: PointCloud,
    pub removed_artifact_count: usize,
    pub removed_outlier_count: usize,
    /// Size of the retained projection component, pixels.
    pub component_pixel_count: usize,
}

/// Full segmentation: project, threshold, clip, keep the largest component,
/// lift to 3D, strip line artifacts, filter outliers.
pub fn segment_needle(
    vol: &OctVolume,
    params: &SegmentParams,
) -> Result<SegmentationResult, SegmentError> {
    let mip = vol.max_intensity_projection();
    let level = params.threshold_fraction * f64::from(mip.max_value());
    if level <= 0.0 {
        return Err(SegmentError::EmptyImage);
    }
    let spacing = [vol.spacing()[0], vol.spacing()[2]];
    let mask = threshold_projection(&mip, level, spacing);
    let mask = match params.driver_side {
        Some(side) => clip_driver_side(&mask, side, params.clip_fraction),
        None => mask,
    };
    let component = largest_component(&mask)?;
    let lifted = lift_to_cloud(vol, &component, level);
    let meta = VolumeMeta::from(vol);
    let no_lines = remove_saturation_lines(&lifted, &meta);
    let removed_artifact_count = lifted.len() - no_lines.len();
    let cleaned = remove_statistical_outliers(&no_lines, params.outlier_k, params.outlier_std_ratio)?;
    let removed_outlier_count = no_lines.len() - cleaned.len();
    Ok(SegmentationResult {
        needle_cloud: cleaned,
        removed_artifact_count,
        removed_outlier_count,
        component_pixel_count: component.count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{needle_from_spec, se3_exp};
    use crate::octsim::{render, ArtifactParams, NeedlePlacement, SceneSpec};
    use crate::rng::stage_rng;
    use nalgebra::{Vector3, Vector6};
    use rand::Rng as _;
    use std::collections::BTreeSet;

    fn needle_scene(seed: u64) -> SceneSpec {
        let mut spec = SceneSpec::new(seed);
        spec.dims = [120, 110, 90];
        spec.fov_mm = [6.0, 5.5, 3.575];
        let model = needle_from_spec(6.0, 0.5, 0.45).unwrap();
        let pose = se3_exp(&Vector6::new(0.25, 0.15, 0.35, 2.6, 2.4, 1.8));
        spec.needle = Some(NeedlePlacement { model, pose });
        spec.artifacts = ArtifactParams::default();
        spec
    }

    /// Ground-truth needle silhouette: lateral (x, z) pixels under any
    /// needle voxel.
    fn silhouette(dims: [usize; 3], needle_voxels: &[u32]) -> BTreeSet<(usize, usize)> {
        let [nx, ny, _] = dims;
        needle_voxels
            .iter()
            .map(|&idx| {
                let idx = idx as usize;
                (idx % nx, idx / (nx * ny))
            })
            .collect()
    }

    fn uniform_image(w: usize, h: usize, v: f32) -> GrayImage {
        let mut img = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, v);
            }
        }
        img
    }

    #[test]
    fn threshold_on_uniform_images() {
        let all_low = threshold_projection(&uniform_image(8, 5, 0.0), 0.5, [1.0, 1.0]);
        assert_eq!(all_low.count(), 0);
        let all_high = threshold_projection(&uniform_image(8, 5, 1.0), 0.5, [1.0, 1.0]);
        assert_eq!(all_high.count(), 40);
    }

    #[test]
    fn threshold_recovers_needle_silhouette() {
        let spec = needle_scene(21);
        let (vol, truth) = render(&spec).unwrap();
        let mip = vol.max_intensity_projection();
        let mask = threshold_projection(&mip, 0.5, [vol.spacing()[0], vol.spacing()[2]]);
        let truth_sil = silhouette(vol.dims(), &truth.needle_voxels);
        let hit = truth_sil
            .iter()
            .filter(|&&(x, z)| mask.get(x, z))
            .count();
        assert!(
            hit as f64 >= 0.9 * truth_sil.len() as f64,
            "mask covers {hit}/{} silhouette pixels",
            truth_sil.len()
        );
    }

    #[test]
    fn clip_zero_fraction_is_identity() {
        let spec = needle_scene(22);
        let (vol, _) = render(&spec).unwrap();
        let mip = vol.max_intensity_projection();
        let mask = threshold_projection(&mip, 0.5, [1.0, 1.0]);
        assert_eq!(clip_driver_side(&mask, DriverSide::Left, 0.0), mask);
    }

    #[test]
    fn clip_removes_left_quarter() {
        let mut img = BinaryImage::new(8, 4, [1.0, 1.0]);
        for y in 0..4 {
            for x in 0..8 {
                img.set(x, y, true);
            }
        }
        let clipped = clip_driver_side(&img, DriverSide::Left, 0.25);
        for y in 0..4 {
            for x in 0..8 {
                assert_eq!(clipped.get(x, y), x >= 2, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn clip_removes_driver_and_keeps_needle() {
        use crate::geom::RigidTransform;
        use crate::octsim::DriverSpec;
        let mut spec = needle_scene(23);
        // Instrument slab hugging the +x edge: the clip side is Right.
        spec.driver = Some(DriverSpec {
            pose: RigidTransform::from_translation(Vector3::new(5.55, 2.0, 1.8)),
            half_extents_mm: [0.4, 1.2, 1.2],
        });
        let (vol, truth) = render(&spec).unwrap();
        let mip = vol.max_intensity_projection();
        let mask = threshold_projection(&mip, 0.5, [vol.spacing()[0], vol.spacing()[2]]);
        let clipped = clip_driver_side(&mask, DriverSide::Right, 0.25);
        let driver_sil = silhouette(vol.dims(), &truth.driver_voxels);
        assert!(!driver_sil.is_empty());
        for &(x, z) in &driver_sil {
            assert!(!clipped.get(x, z), "driver pixel ({x},{z}) survived the clip");
        }
        let needle_sil = silhouette(vol.dims(), &truth.needle_voxels);
        let kept = needle_sil.iter().filter(|&&(x, z)| clipped.get(x, z)).count();
        assert!(
            kept as f64 >= 0.8 * needle_sil.len() as f64,
            "only {kept}/{} needle pixels kept",
            needle_sil.len()
        );
    }

    #[test]
    fn largest_component_basics() {
        let mut img = BinaryImage::new(10, 6, [1.0, 1.0]);
        // 10-pixel blob (2x5) and 5-pixel blob (1x5), separated.
        for x in 0..5 {
            img.set(x, 0, true);
            img.set(x, 1, true);
        }
        for x in 0..5 {
            img.set(x + 5, 4, true);
        }
        let keep = largest_component(&img).unwrap();
        assert_eq!(keep.count(), 10);
        assert!(keep.get(0, 0) && !keep.get(7, 4));
        // A single blob maps to itself.
        let single = largest_component(&keep).unwrap();
        assert_eq!(single, keep);
        // Diagonal touch merges under 8-connectivity.
        let mut diag = BinaryImage::new(4, 4, [1.0, 1.0]);
        diag.set(0, 0, true);
        diag.set(1, 1, true);
        diag.set(3, 3, true);
        let kept = largest_component(&diag).unwrap();
        assert_eq!(kept.count(), 2, "diagonal neighbors form one component");
        assert!(kept.get(0, 0) && kept.get(1, 1));
    }

    #[test]
    fn largest_component_tie_breaks_by_scan_order() {
        let mut img = BinaryImage::new(9, 3, [1.0, 1.0]);
        // Two 3-pixel blobs; the one whose first pixel scans earlier wins.
        img.set(4, 0, true);
        img.set(5, 0, true);
        img.set(6, 0, true);
        img.set(0, 2, true);
        img.set(1, 2, true);
        img.set(2, 2, true);
        let keep = largest_component(&img).unwrap();
        assert!(keep.get(4, 0) && !keep.get(0, 2));
    }

    #[test]
    fn largest_component_rejects_empty() {
        let img = BinaryImage::new(4, 4, [1.0, 1.0]);
        assert_eq!(largest_component(&img), Err(SegmentError::EmptyImage));
    }

    #[test]
    fn largest_component_keeps_needle_over_speckle_blobs() {
        let spec = needle_scene(24);
        let (vol, truth) = render(&spec).unwrap();
        let mip = vol.max_intensity_projection();
        let mut mask = threshold_projection(&mip, 0.5, [vol.spacing()[0], vol.spacing()[2]]);
        // Disjoint fake speckle blobs in two corners.
        for (bx, bz) in [(1usize, 1usize), (110, 80)] {
            for dz in 0..3 {
                for dx in 0..3 {
                    mask.set(bx + dx, bz + dz, true);
                }
            }
        }
        let keep = largest_component(&mask).unwrap();
        assert!(!keep.get(2, 2) && !keep.get(111, 81), "blobs survived");
        let needle_sil = silhouette(vol.dims(), &truth.needle_voxels);
        let kept = needle_sil.iter().filter(|&&(x, z)| keep.get(x, z)).count();
        assert!(kept as f64 >= 0.9 * needle_sil.len() as f64);
    }

    #[test]
    fn lift_empty_mask_gives_empty_cloud() {
        let spec = needle_scene(25);
        let (vol, _) = render(&spec).unwrap();
        let mask = BinaryImage::new(vol.dims()[0], vol.dims()[2], [1.0, 1.0]);
        assert!(lift_to_cloud(&vol, &mask, 0.5).is_empty());
    }

    #[test]
    fn lift_single_voxel_to_its_center() {
        let mut vol = OctVolume::zeros([6, 7, 8], [3.0, 3.5, 4.0], [0.0; 3]);
        vol.set(2, 3, 4, 0.9);
        let mut mask = BinaryImage::new(6, 8, [0.5, 0.5]);
        for z in 0..8 {
            for x in 0..6 {
                mask.set(x, z, true);
            }
        }
        let cloud = lift_to_cloud(&vol, &mask, 0.5);
        assert_eq!(cloud.len(), 1);
        let expect = vol.voxel_center(2, 3, 4);
        assert!((cloud.points()[0] - expect).norm() < 1e-12);
    }

    #[test]
    fn lift_recovers_most_needle_voxels() {
        let spec = needle_scene(26);
        let (vol, truth) = render(&spec).unwrap();
        let mip = vol.max_intensity_projection();
        let level = 0.5 * f64::from(mip.max_value());
        let mask = threshold_projection(&mip, level, [vol.spacing()[0], vol.spacing()[2]]);
        let component = largest_component(&mask).unwrap();
        let cloud = lift_to_cloud(&vol, &component, level);
        let mut in_cloud = BTreeSet::new();
        for p in cloud.points() {
            if let Some([x, y, z]) = vol.point_to_voxel(p) {
                in_cloud.insert(vol.linear_index(x, y, z) as u32);
            }
        }
        let hit = truth
            .needle_voxels
            .iter()
            .filter(|i| in_cloud.contains(i))
            .count();
        assert!(
            hit as f64 >= 0.85 * truth.needle_voxels.len() as f64,
            "cloud covers {hit}/{} needle voxels",
            truth.needle_voxels.len()
        );
    }

    #[test]
    fn saturation_removal_ignores_clean_clouds() {
        let meta = VolumeMeta {
            origin: [0.0; 3],
            fov_mm: [6.0, 5.5, 3.575],
            spacing: [0.05, 0.05, 0.04],
        };
        let points: Vec<Vector3<f64>> = (0..50)
            .map(|i| Vector3::new(2.0 + 0.02 * i as f64, 2.5, 1.5 + 0.01 * i as f64))
            .collect();
        let cloud = PointCloud::new(points);
        let out = remove_saturation_lines(&cloud, &meta);
        assert_eq!(out.len(), cloud.len());
    }

    #[test]
    fn saturation_removal_strips_full_span_line() {
        let meta = VolumeMeta {
            origin: [0.0; 3],
            fov_mm: [6.0, 5.5, 3.575],
            spacing: [0.05, 0.05, 0.04],
        };
        let mut points = Vec::new();
        // Hand-built artifact: one row of points across the full fast axis
        // at a fixed (depth, slow) bin, touching both edges.
        for i in 0..120 {
            points.push(Vector3::new(0.025 + 0.05 * i as f64, 2.525, 1.52));
        }
        // Plus an interior cluster that must survive.
        for i in 0..10 {
            points.push(Vector3::new(3.0 + 0.01 * i as f64, 1.0, 2.0));
        }
        let cloud = PointCloud::new(points);
        let out = remove_saturation_lines(&cloud, &meta);
        assert_eq!(out.len(), 10);
        assert!(out.points().iter().all(|p| (p[1] - 1.0).abs() < 1e-9));
    }

    #[test]
    fn saturation_removal_hits_rendered_artifacts() {
        let mut spec = needle_scene(27);
        spec.artifacts.saturation_lines = 3;
        let (vol, truth) = render(&spec).unwrap();
        let mip = vol.max_intensity_projection();
        let level = 0.5 * f64::from(mip.max_value());
        let mask = threshold_projection(&mip, level, [vol.spacing()[0], vol.spacing()[2]]);
        let component = largest_component(&mask).unwrap();
        let lifted = lift_to_cloud(&vol, &component, level);
        let cleaned = remove_saturation_lines(&lifted, &VolumeMeta::from(&vol));

        let to_index = |p: &Vector3<f64>| {
            vol.point_to_voxel(p)
                .map(|[x, y, z]| vol.linear_index(x, y, z) as u32)
        };
        let lifted_idx: BTreeSet<u32> = lifted.points().iter().filter_map(&to_index).collect();
        let cleaned_idx: BTreeSet<u32> =
            cleaned.points().iter().filter_map(&to_index).collect();
        let sat: BTreeSet<u32> = truth.saturation_voxels.iter().copied().collect();
        let needle: BTreeSet<u32> = truth.needle_voxels.iter().copied().collect();

        let sat_seen = lifted_idx.intersection(&sat).count();
        let sat_kept = cleaned_idx.intersection(&sat).count();
        assert!(sat_seen > 0, "no artifact points reached the cloud");
        assert!(
            (sat_seen - sat_kept) as f64 >= 0.95 * sat_seen as f64,
            "removed only {} of {sat_seen} artifact points",
            sat_seen - sat_kept
        );
        let needle_seen = lifted_idx.intersection(&needle).count();
        let needle_kept = cleaned_idx.intersection(&needle).count();
        assert!(
            (needle_seen - needle_kept) as f64 <= 0.05 * needle_seen as f64,
            "lost {} of {needle_seen} needle points",
            needle_seen - needle_kept
        );
    }

    #[test]
    fn outlier_filter_keeps_tight_cluster() {
        // Cube corners: each point's three nearest neighbors sit at exactly
        // one edge length, so all mean distances are identical and nothing
        // can sit above the mean by any positive sigma multiple.
        let points: Vec<Vector3<f64>> = (0..8)
            .map(|i| {
                Vector3::new(
                    if i & 1 == 0 { -0.01 } else { 0.01 },
                    if i & 2 == 0 { -0.01 } else { 0.01 },
                    if i & 4 == 0 { -0.01 } else { 0.01 },
                )
            })
            .collect();
        let cloud = PointCloud::new(points);
        let out = remove_statistical_outliers(&cloud, 3, 2.0).unwrap();
        assert_eq!(out.len(), 8);
    }

    #[test]
    fn outlier_filter_drops_isolated_point() {
        let mut points: Vec<Vector3<f64>> = (0..40)
            .map(|i| {
                let t = i as f64 * 0.05;
                Vector3::new(t, 0.0, 0.0)
            })
            .collect();
        // 100x the cluster diameter away.
        points.push(Vector3::new(200.0, 0.0, 0.0));
        let cloud = PointCloud::new(points);
        let out = remove_statistical_outliers(&cloud, 5, 2.0).unwrap();
        assert_eq!(out.len(), 40);
        assert!(out.points().iter().all(|p| p[0] < 100.0));
    }

    #[test]
    fn outlier_filter_rejects_tiny_clouds() {
        let cloud = PointCloud::new(vec![Vector3::zeros(); 5]);
        assert_eq!(
            remove_statistical_outliers(&cloud, 5, 2.0),
            Err(SegmentError::TooFewPoints { count: 5, k: 5 })
        );
    }

    #[test]
    fn outlier_filter_separates_needle_from_scattered_noise() {
        let spec = needle_scene(28);
        let (vol, truth) = render(&spec).unwrap();
        let mut points: Vec<Vector3<f64>> = Vec::new();
        for &idx in &truth.needle_voxels {
            let idx = idx as usize;
            let [nx, ny, _] = vol.dims();
            points.push(vol.voxel_center(idx % nx, (idx / nx) % ny, idx / (nx * ny)));
        }
        let n_needle = points.len();
        // Sparse uniform noise across the volume, ~2% of the cloud.
        let mut rng = stage_rng(99, "test/outlier-noise");
        let n_noise = (n_needle / 50).max(20);
        for _ in 0..n_noise {
            points.push(Vector3::new(
                rng.random_range(0.0..6.0),
                rng.random_range(0.0..5.5),
                rng.random_range(0.0..3.575),
            ));
        }
        let cloud = PointCloud::new(points);
        let out = remove_statistical_outliers(&cloud, 20, 2.0).unwrap();
        // Survivors, classified by original construction order.
        let kept_needle = out
            .points()
            .iter()
            .filter(|p| {
                truth
                    .needle_voxels
                    .binary_search(&{
                        let [x, y, z] = vol.point_to_voxel(p).unwrap();
                        vol.linear_index(x, y, z) as u32
                    })
                    .is_ok()
            })
            .count();
        let kept_noise = out.len() - kept_needle;
        assert!(
            kept_needle as f64 >= 0.95 * n_needle as f64,
            "needle recall {kept_needle}/{n_needle}"
        );
        assert!(
            (n_noise - kept_noise) as f64 >= 0.9 * n_noise as f64,
            "noise removal {}/{n_noise}",
            n_noise - kept_noise
        );
    }

    #[test]
    fn end_to_end_iou_across_seeds() {
        let mut worst = 1.0f64;
        for seed in 0..20 {
            let mut spec = needle_scene(100 + seed);
            spec.artifacts.saturation_lines = 2;
            let (vol, truth) = render(&spec).unwrap();
            let params = SegmentParams::default();
            let result = segment_needle(&vol, &params).unwrap();
            let mut got = BTreeSet::new();
            for p in result.needle_cloud.points() {
                if let Some([x, y, z]) = vol.point_to_voxel(p) {
                    got.insert(vol.linear_index(x, y, z) as u32);
                }
            }
            let want: BTreeSet<u32> = truth.needle_voxels.iter().copied().collect();
            let inter = got.intersection(&want).count() as f64;
            let union = got.union(&want).count() as f64;
            let iou = inter / union;
            worst = worst.min(iou);
            assert!(iou >= 0.80, "seed {seed}: IoU {iou:.3}");
            assert!(
                result
                    .needle_cloud
                    .points()
                    .iter()
                    .all(|p| vol.point_to_voxel(p).is_some()),
                "cloud escaped the volume bounds"
            );
        }
        // Keep a record of margin in the test log.
        eprintln!("worst-case IoU over 20 seeds: {worst:.3}");
    }

    #[test]
    fn segmentation_is_deterministic() {
        let mut spec = needle_scene(29);
        spec.artifacts.saturation_lines = 2;
        let (vol, _) = render(&spec).unwrap();
        let a = segment_needle(&vol, &SegmentParams::default()).unwrap();
        let b = segment_needle(&vol, &SegmentParams::default()).unwrap();
        assert_eq!(a.needle_cloud.points(), b.needle_cloud.points());
        assert_eq!(a.removed_artifact_count, b.removed_artifact_count);
        assert_eq!(a.removed_outlier_count, b.removed_outlier_count);
        assert_eq!(a.component_pixel_count, b.component_pixel_count);
    }
}
