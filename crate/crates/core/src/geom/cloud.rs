//! Weighted 3D point clouds with PLY and CSV serialization.

use super::RigidTransform;
use nalgebra::Vector3;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CloudIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// A cloud of points in millimetres, each with a non-negative weight.
///
/// Weights default to 1 and are consumed by the weighted ICP fit; the
/// invariant `points.len() == weights.len()` is maintained by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    weights: Vec<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        let weights = vec![1.0; points.len()];
        Self { points, weights }
    }

    pub fn with_weights(points: Vec<Vector3<f64>>, weights: Vec<f64>) -> Self {
        assert_eq!(
            points.len(),
            weights.len(),
            "every point needs exactly one weight"
        );
        Self { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weight(&mut self, idx: usize, w: f64) {
        self.weights[idx] = w;
    }

    /// Applies `t` to every point; weights are carried over unchanged.
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            points: self.points.iter().map(|p| t.apply_point(p)).collect(),
            weights: self.weights.clone(),
        }
    }

    /// Weighted centroid. Returns `None` for an empty cloud or zero total weight.
    pub fn centroid(&self) -> Option<Vector3<f64>> {
        let total: f64 = self.weights.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut c = Vector3::zeros();
        for (p, w) in self.points.iter().zip(&self.weights) {
            c += p * *w;
        }
        Some(c / total)
    }

    /// Writes binary little-endian PLY with double-precision
    /// x/y/z/weight vertex properties.
    pub fn save_ply(&self, path: &Path) -> Result<(), CloudIoError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write!(
            w,
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
             property double x\nproperty double y\nproperty double z\n\
             property double weight\nend_header\n",
            self.points.len()
        )?;
        for (p, wt) in self.points.iter().zip(&self.weights) {
            for value in [p[0], p[1], p[2], *wt] {
                w.write_all(&value.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_ply(path: &Path) -> Result<Self, CloudIoError> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut count: Option<usize> = None;
        let mut property_count = 0usize;
        loop {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(CloudIoError::Parse("unterminated PLY header".into()));
            }
            let line = line.trim_end();
            if line == "end_header" {
                break;
            }
            if let Some(rest) = line.strip_prefix("element vertex ") {
                count = Some(
                    rest.trim()
                        .parse()
                        .map_err(|e| CloudIoError::Parse(format!("bad vertex count: {e}")))?,
                );
            } else if line.starts_with("property") {
                if !line.starts_with("property double ") {
                    return Err(CloudIoError::Parse(format!(
                        "unsupported property type in '{line}'"
                    )));
                }
                property_count += 1;
            } else if line.starts_with("format") && line != "format binary_little_endian 1.0" {
                return Err(CloudIoError::Parse(format!("unsupported format '{line}'")));
            }
        }
        let count = count.ok_or_else(|| CloudIoError::Parse("missing element vertex".into()))?;
        if property_count != 4 {
            return Err(CloudIoError::Parse(format!(
                "expected 4 vertex properties (x y z weight), found {property_count}"
            )));
        }
        let mut points = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        let mut buf = [0u8; 8 * 4];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            let f = |i: usize| f64::from_le_bytes(buf[i * 8..(i + 1) * 8].try_into().unwrap());
            points.push(Vector3::new(f(0), f(1), f(2)));
            weights.push(f(3));
        }
        Ok(Self { points, weights })
    }

    /// Writes CSV with an `x,y,z,weight` header row; floats use the shortest
    /// representation that round-trips exactly.
    pub fn save_csv(&self, path: &Path) -> Result<(), CloudIoError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "x,y,z,weight")?;
        for (p, wt) in self.points.iter().zip(&self.weights) {
            writeln!(w, "{},{},{},{}", p[0], p[1], p[2], wt)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self, CloudIoError> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| CloudIoError::Parse("empty file".into()))?;
        if header.trim() != "x,y,z,weight" {
            return Err(CloudIoError::Parse("missing x,y,z,weight header".into()));
        }
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| CloudIoError::Parse(format!("line {}: {e}", lineno + 2)))
                })
                .collect::<Result<_, _>>()?;
            if fields.len() != 4 {
                return Err(CloudIoError::Parse(format!(
                    "line {}: expected 4 fields, got {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            points.push(Vector3::new(fields[0], fields[1], fields[2]));
            weights.push(fields[3]);
        }
        Ok(Self { points, weights })
    }
}
