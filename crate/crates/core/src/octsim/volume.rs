//! Volumetric image container, B-scan/MIP extraction, and file IO.
//!
//! A volume is a dense scalar grid with intensities in `[0, 1]`. Axes follow
//! the scanner convention: X is the fast lateral (B-scan) axis, Y is depth
//! (A-scan), Z is the slow lateral (C-scan) axis. Voxels are stored x-fastest
//! (`idx = x + nx·(y + ny·z)`), and the center of voxel `(i, j, k)` sits at
//! `origin + (i + 0.5)·spacing` in millimetres.

use std::fmt;
use std::fs;
use std::io::{self, Write as _};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Default desk-scale grid: 4× coarser than the full scanner sampling so a
/// render fits in tens of megabytes and a batch run stays interactive.
pub const DEFAULT_DIMS: [usize; 3] = [182, 200, 332];
/// Full scanner sampling density (725 × 800 × 1327). Roughly 3 GB per volume
/// as f32; only reachable through an explicit flag.
pub const FULL_RES_DIMS: [usize; 3] = [725, 800, 1327];
/// Physical field of view in mm (X lateral, Y depth, Z slow lateral).
pub const DEFAULT_FOV_MM: [f64; 3] = [10.0, 10.0, 7.15];

/// Errors from volume IO and slicing.
#[derive(Debug)]
pub enum VolumeError {
    /// A slice index was outside the volume.
    OutOfRange { index: usize, len: usize },
    /// Underlying filesystem failure.
    Io(io::Error),
    /// Raw payload or sidecar contents disagree with the declared shape.
    Format(String),
}

impl fmt::Display for VolumeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VolumeError::OutOfRange { index, len } => {
                write!(f, "slice index {index} out of range (volume has {len})")
            }
            VolumeError::Io(e) => write!(f, "volume io: {e}"),
            VolumeError::Format(msg) => write!(f, "volume format: {msg}"),
        }
    }
}

impl std::error::Error for VolumeError {}

impl From<io::Error> for VolumeError {
    fn from(e: io::Error) -> Self {
        VolumeError::Io(e)
    }
}

/// JSON sidecar written next to the raw voxel payload.
#[derive(Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    axis_labels: [String; 3],
    seed: u64,
}

fn default_axis_labels() -> [String; 3] {
    [
        "B-scan X".to_owned(),
        "A-scan Y".to_owned(),
        "C-scan Z".to_owned(),
    ]
}

/// Dense scalar volume with physical metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct OctVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    axis_labels: [String; 3],
    seed: u64,
    voxels: Vec<f32>,
}

impl OctVolume {
    /// All-zero volume whose `dims · spacing` exactly spans `fov_mm`.
    pub fn zeros(dims: [usize; 3], fov_mm: [f64; 3], origin: [f64; 3]) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "volume dims must be positive");
        let spacing = [
            fov_mm[0] / dims[0] as f64,
            fov_mm[1] / dims[1] as f64,
            fov_mm[2] / dims[2] as f64,
        ];
        OctVolume {
            dims,
            spacing,
            origin,
            axis_labels: default_axis_labels(),
            seed: 0,
            voxels: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn axis_labels(&self) -> &[String; 3] {
        &self.axis_labels
    }

    /// Physical extent covered by the grid, `dims · spacing`, in mm.
    pub fn fov_mm(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// Seed recorded by the renderer (0 for hand-built volumes).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    #[inline]
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.linear_index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let idx = self.linear_index(x, y, z);
        self.voxels[idx] = v;
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    /// Physical center of voxel `(x, y, z)` in mm.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + (x as f64 + 0.5) * self.spacing[0],
            self.origin[1] + (y as f64 + 0.5) * self.spacing[1],
            self.origin[2] + (z as f64 + 0.5) * self.spacing[2],
        )
    }

    /// Voxel containing a physical point, or `None` outside the grid.
    pub fn point_to_voxel(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for axis in 0..3 {
            let f = (p[axis] - self.origin[axis]) / self.spacing[axis];
            if f < 0.0 || f >= self.dims[axis] as f64 {
                return None;
            }
            out[axis] = f as usize;
        }
        Some(out)
    }

    /// Cross-sectional slice at C-scan position `index`: an `nx × ny` image
    /// with X across and depth down. Slices `0` and `nz − 1` bound the stack.
    pub fn extract_bscan(&self, index: usize) -> Result<GrayImage, VolumeError> {
        let [nx, ny, nz] = self.dims;
        if index >= nz {
            return Err(VolumeError::OutOfRange { index, len: nz });
        }
        let mut img = GrayImage::new(nx, ny);
        for y in 0..ny {
            for x in 0..nx {
                img.set(x, y, self.get(x, y, index));
            }
        }
        Ok(img)
    }

    /// Maximum-intensity projection along the depth axis: an `nx × nz` image
    /// holding `max_y v(x, y, z)` at pixel `(x, z)`.
    pub fn max_intensity_projection(&self) -> GrayImage {
        let [nx, ny, nz] = self.dims;
        let mut img = GrayImage::new(nx, nz);
        for z in 0..nz {
            for y in 0..ny {
                let row = &self.voxels[self.linear_index(0, y, z)..][..nx];
                for (x, &v) in row.iter().enumerate() {
                    if v > img.get(x, z) {
                        img.set(x, z, v);
                    }
                }
            }
        }
        img
    }

    /// Write `<base>.raw` (little-endian f32, x-fastest) and `<base>.json`
    /// (shape, spacing, origin, axis labels, seed).
    pub fn save(&self, base: &Path) -> Result<(), VolumeError> {
        let sidecar = Sidecar {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            axis_labels: self.axis_labels.clone(),
            seed: self.seed,
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| VolumeError::Format(e.to_string()))?;
        fs::write(base.with_extension("json"), json)?;

        let mut bytes = Vec::with_capacity(self.voxels.len() * 4);
        for v in &self.voxels {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(base.with_extension("raw"), bytes)?;
        Ok(())
    }

    /// Read a volume written by [`OctVolume::save`].
    pub fn load(base: &Path) -> Result<Self, VolumeError> {
        let json = fs::read_to_string(base.with_extension("json"))?;
        let sidecar: Sidecar =
            serde_json::from_str(&json).map_err(|e| VolumeError::Format(e.to_string()))?;
        let raw = fs::read(base.with_extension("raw"))?;
        let count = sidecar.dims[0] * sidecar.dims[1] * sidecar.dims[2];
        if raw.len() != count * 4 {
            return Err(VolumeError::Format(format!(
                "raw payload holds {} bytes, sidecar dims imply {}",
                raw.len(),
                count * 4
            )));
        }
        let mut voxels = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(4) {
            voxels.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        Ok(OctVolume {
            dims: sidecar.dims,
            spacing: sidecar.spacing,
            origin: sidecar.origin,
            axis_labels: sidecar.axis_labels,
            seed: sidecar.seed,
            voxels,
        })
    }
}

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Largest pixel value (0 for an empty image).
    pub fn max_value(&self) -> f32 {
        self.pixels.iter().copied().fold(0.0, f32::max)
    }

    /// Write a binary 16-bit PGM (`P5`, maxval 65535, big-endian samples).
    pub fn save_pgm(&self, path: &Path) -> Result<(), VolumeError> {
        let mut out = Vec::with_capacity(32 + self.pixels.len() * 2);
        write!(out, "P5\n{} {}\n65535\n", self.width, self.height)?;
        for &v in &self.pixels {
            let q = (f64::from(v).clamp(0.0, 1.0) * 65535.0).round() as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Read a binary 16-bit PGM written by [`GrayImage::save_pgm`].
    pub fn load_pgm(path: &Path) -> Result<Self, VolumeError> {
        let data = fs::read(path)?;
        let mut fields = Vec::new();
        let mut pos = 0usize;
        // Header: magic, width, height, maxval as whitespace-separated tokens
        // (comments not supported; we only read files we wrote).
        while fields.len() < 4 {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < data.len() && !data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(VolumeError::Format("truncated pgm header".into()));
            }
            fields.push(
                std::str::from_utf8(&data[start..pos])
                    .map_err(|_| VolumeError::Format("non-ascii pgm header".into()))?
                    .to_owned(),
            );
        }
        pos += 1; // single whitespace byte after maxval
        if fields[0] != "P5" {
            return Err(VolumeError::Format(format!(
                "expected P5 magic, found {}",
                fields[0]
            )));
        }
        let width: usize = fields[1]
            .parse()
            .map_err(|_| VolumeError::Format("bad pgm width".into()))?;
        let height: usize = fields[2]
            .parse()
            .map_err(|_| VolumeError::Format("bad pgm height".into()))?;
        if fields[3] != "65535" {
            return Err(VolumeError::Format("only 16-bit pgm supported".into()));
        }
        let body = &data[pos..];
        if body.len() != width * height * 2 {
            return Err(VolumeError::Format(format!(
                "pgm body holds {} bytes, header implies {}",
                body.len(),
                width * height * 2
            )));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for chunk in body.chunks_exact(2) {
            let q = u16::from_be_bytes([chunk[0], chunk[1]]);
            pixels.push(f32::from(q) / 65535.0);
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }
}

// Lets `write!` into a Vec produce VolumeError directly.
impl From<fmt::Error> for VolumeError {
    fn from(_: fmt::Error) -> Self {
        VolumeError::Format("formatting failure".into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn spacing_spans_fov_exactly() {
        let vol = OctVolume::zeros(DEFAULT_DIMS, DEFAULT_FOV_MM, [0.0; 3]);
        let fov = vol.fov_mm();
        for axis in 0..3 {
            assert_abs_diff_eq!(fov[axis], DEFAULT_FOV_MM[axis], epsilon = 1e-12);
            // within one voxel is the documented contract; exactness is better
            assert!((fov[axis] - DEFAULT_FOV_MM[axis]).abs() < vol.spacing()[axis]);
        }
    }

    #[test]
    fn voxel_center_and_lookup_round_trip() {
        let vol = OctVolume::zeros([10, 12, 14], [5.0, 6.0, 7.0], [1.0, -2.0, 0.5]);
        let c = vol.voxel_center(3, 4, 5);
        assert_eq!(vol.point_to_voxel(&c), Some([3, 4, 5]));
        // Just outside the grid on each face.
        assert_eq!(
            vol.point_to_voxel(&Vector3::new(0.999, 0.0, 3.0)),
            None,
            "below x origin"
        );
        assert_eq!(vol.point_to_voxel(&Vector3::new(6.001, 0.0, 3.0)), None);
    }

    #[test]
    fn bscan_bounds_and_out_of_range() {
        let mut vol = OctVolume::zeros([4, 3, 5], [1.0, 1.0, 1.0], [0.0; 3]);
        vol.set(2, 1, 0, 0.25);
        vol.set(3, 2, 4, 0.75);
        let first = vol.extract_bscan(0).unwrap();
        let last = vol.extract_bscan(4).unwrap();
        assert_eq!(first.get(2, 1), 0.25);
        assert_eq!(last.get(3, 2), 0.75);
        assert!(matches!(
            vol.extract_bscan(5),
            Err(VolumeError::OutOfRange { index: 5, len: 5 })
        ));
    }

    #[test]
    fn mip_of_zero_volume_is_zero() {
        let vol = OctVolume::zeros([6, 7, 8], [1.0, 1.0, 1.0], [0.0; 3]);
        let mip = vol.max_intensity_projection();
        assert!(mip.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mip_places_single_bright_voxel() {
        let mut vol = OctVolume::zeros([6, 7, 8], [1.0, 1.0, 1.0], [0.0; 3]);
        vol.set(4, 3, 6, 0.9);
        let mip = vol.max_intensity_projection();
        for z in 0..8 {
            for x in 0..6 {
                let expect = if (x, z) == (4, 6) { 0.9 } else { 0.0 };
                assert_eq!(mip.get(x, z), expect, "pixel ({x},{z})");
            }
        }
    }

    #[test]
    fn raw_and_sidecar_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut vol = OctVolume::zeros([5, 6, 7], [2.0, 3.0, 4.0], [0.1, 0.2, 0.3]);
        for (i, v) in vol.voxels_mut().iter_mut().enumerate() {
            *v = (i as f32 * 0.37).fract();
        }
        vol.set_seed(42);
        let base = dir.path().join("vol");
        vol.save(&base).unwrap();
        let back = OctVolume::load(&base).unwrap();
        assert_eq!(back, vol);
    }

    #[test]
    fn load_rejects_truncated_raw() {
        let dir = tempfile::tempdir().unwrap();
        let vol = OctVolume::zeros([4, 4, 4], [1.0, 1.0, 1.0], [0.0; 3]);
        let base = dir.path().join("vol");
        vol.save(&base).unwrap();
        let raw = base.with_extension("raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            OctVolume::load(&base),
            Err(VolumeError::Format(_))
        ));
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = GrayImage::new(9, 4);
        for y in 0..4 {
            for x in 0..9 {
                img.set(x, y, (x as f32 + 9.0 * y as f32) / 35.0);
            }
        }
        let path = dir.path().join("img.pgm");
        img.save_pgm(&path).unwrap();
        let back = GrayImage::load_pgm(&path).unwrap();
        assert_eq!(back.width(), 9);
        assert_eq!(back.height(), 4);
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-9);
        }
        // Extremes map to the exact code points.
        let mut ext = GrayImage::new(2, 1);
        ext.set(0, 0, 0.0);
        ext.set(1, 0, 1.0);
        let path2 = dir.path().join("ext.pgm");
        ext.save_pgm(&path2).unwrap();
        let back2 = GrayImage::load_pgm(&path2).unwrap();
        assert_eq!(back2.get(0, 0), 0.0);
        assert_eq!(back2.get(1, 0), 1.0);
    }
}
