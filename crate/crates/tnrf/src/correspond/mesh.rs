//! Triangle meshes with optional per-vertex normals and colors, plus
//! ASCII PLY reading and writing.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// An indexed triangle mesh.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub normals: Option<Vec<Vector3<f64>>>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Check index ranges, attribute lengths, and that no triangle is
    /// degenerate (area above 1e-12).
    pub fn validate(&self) -> Result<()> {
        if let Some(n) = &self.normals {
            if n.len() != self.vertices.len() {
                return Err(Error::Shape(format!(
                    "{} normals for {} vertices",
                    n.len(),
                    self.vertices.len()
                )));
            }
        }
        if let Some(c) = &self.colors {
            if c.len() != self.vertices.len() {
                return Err(Error::Shape(format!(
                    "{} colors for {} vertices",
                    c.len(),
                    self.vertices.len()
                )));
            }
        }
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= self.vertices.len()) {
                return Err(Error::Validation(format!("triangle {i} indexes out of range")));
            }
            if self.triangle_area(i) <= 1e-12 {
                return Err(Error::Validation(format!("triangle {i} is degenerate")));
            }
        }
        Ok(())
    }

    pub fn triangle_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangles[i];
        let (a, b, c) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Axis-aligned bounds as `(min, max)`; `None` when empty.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        Some((lo, hi))
    }

    /// Occurrence count per undirected edge; a watertight mesh has every
    /// edge shared by exactly two triangles.
    pub fn edge_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Write as ASCII PLY, including normals and colors when present.
    pub fn write_ply(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            writeln!(w, "ply")?;
            writeln!(w, "format ascii 1.0")?;
            writeln!(w, "element vertex {}", self.vertices.len())?;
            writeln!(w, "property float x")?;
            writeln!(w, "property float y")?;
            writeln!(w, "property float z")?;
            if self.normals.is_some() {
                writeln!(w, "property float nx")?;
                writeln!(w, "property float ny")?;
                writeln!(w, "property float nz")?;
            }
            if self.colors.is_some() {
                writeln!(w, "property uchar red")?;
                writeln!(w, "property uchar green")?;
                writeln!(w, "property uchar blue")?;
            }
            writeln!(w, "element face {}", self.triangles.len())?;
            writeln!(w, "property list uchar int vertex_indices")?;
            writeln!(w, "end_header")?;
            for (i, v) in self.vertices.iter().enumerate() {
                write!(w, "{} {} {}", v.x, v.y, v.z)?;
                if let Some(n) = &self.normals {
                    write!(w, " {} {} {}", n[i].x, n[i].y, n[i].z)?;
                }
                if let Some(c) = &self.colors {
                    let q = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
                    write!(w, " {} {} {}", q(c[i][0]), q(c[i][1]), q(c[i][2]))?;
                }
                writeln!(w)?;
            }
            for t in &self.triangles {
                writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
            }
            Ok(())
        };
        emit().map_err(|e| Error::io(path, e))
    }

    /// Read an ASCII PLY written by [`Mesh::write_ply`].
    pub fn read_ply(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut next = || -> Result<String> {
            lines
                .next()
                .transpose()
                .map_err(|e| Error::io(path, e))?
                .ok_or_else(|| parse("unexpected end of file".into()))
        };
        if next()?.trim() != "ply" || !next()?.starts_with("format ascii") {
            return Err(parse("not an ascii ply file".into()));
        }
        let (mut n_vert, mut n_face) = (0usize, 0usize);
        let (mut has_normals, mut has_colors) = (false, false);
        loop {
            let line = next()?;
            let words: Vec<&str> = line.split_whitespace().collect();
            match words.as_slice() {
                ["end_header"] => break,
                ["element", "vertex", n] => n_vert = n.parse().map_err(|_| parse(line.clone()))?,
                ["element", "face", n] => n_face = n.parse().map_err(|_| parse(line.clone()))?,
                ["property", _, "nx"] => has_normals = true,
                ["property", _, "red"] => has_colors = true,
                _ => {}
            }
        }
        let mut mesh = Mesh::default();
        let mut normals = Vec::new();
        let mut colors = Vec::new();
        for _ in 0..n_vert {
            let line = next()?;
            let nums: Vec<f64> = line
                .split_whitespace()
                .map(|w| w.parse().map_err(|_| parse(line.clone())))
                .collect::<Result<_>>()?;
            let expected = 3 + if has_normals { 3 } else { 0 } + if has_colors { 3 } else { 0 };
            if nums.len() != expected {
                return Err(parse(format!("expected {expected} vertex fields: {line}")));
            }
            mesh.vertices.push(Vector3::new(nums[0], nums[1], nums[2]));
            let mut k = 3;
            if has_normals {
                normals.push(Vector3::new(nums[k], nums[k + 1], nums[k + 2]));
                k += 3;
            }
            if has_colors {
                colors.push([nums[k] / 255.0, nums[k + 1] / 255.0, nums[k + 2] / 255.0]);
            }
        }
        for _ in 0..n_face {
            let line = next()?;
            let nums: Vec<usize> = line
                .split_whitespace()
                .map(|w| w.parse().map_err(|_| parse(line.clone())))
                .collect::<Result<_>>()?;
            if nums.len() != 4 || nums[0] != 3 {
                return Err(parse(format!("expected triangle face: {line}")));
            }
            mesh.triangles.push([nums[1], nums[2], nums[3]]);
        }
        if has_normals {
            mesh.normals = Some(normals);
        }
        if has_colors {
            mesh.colors = Some(colors);
        }
        mesh.validate()?;
        Ok(mesh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetrahedron() -> Mesh {
        Mesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(0.0, 0.0, 1.0),
            ],
            triangles: vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
            normals: None,
            colors: Some(vec![[1.0, 0.0, 0.0]; 4]),
        }
    }

    #[test]
    fn tetrahedron_is_watertight() {
        let counts = tetrahedron().edge_counts();
        assert_eq!(counts.len(), 6);
        assert!(counts.values().all(|&c| c == 2));
    }

    #[test]
    fn ply_round_trip_preserves_geometry_and_color() {
        let mesh = tetrahedron();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tet.ply");
        mesh.write_ply(&path).unwrap();
        let back = Mesh::read_ply(&path).unwrap();
        assert_eq!(back.vertices, mesh.vertices);
        assert_eq!(back.triangles, mesh.triangles);
        assert_eq!(back.colors, mesh.colors);
    }

    #[test]
    fn degenerate_triangle_fails_validation() {
        let mut mesh = tetrahedron();
        mesh.triangles.push([0, 1, 1]);
        assert!(mesh.validate().is_err());
    }

    #[test]
    fn out_of_range_index_fails_validation() {
        let mut mesh = tetrahedron();
        mesh.triangles.push([0, 1, 9]);
        assert!(mesh.validate().is_err());
    }
}
