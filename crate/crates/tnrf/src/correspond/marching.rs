//! Isosurface extraction by marching cubes over a regular grid spanning
//! the unit cube `[-1, 1]^3`.
//!
//! Grid values live at `(g + 1)^3` lattice points, `g` cells per axis,
//! voxel width `2 / g`. Surface vertices are linearly interpolated along
//! sign-crossing cell edges and welded by canonical edge key, so shared
//! edges reference the same vertex and closed level sets come out
//! watertight. Vertex normals point outward, along the negative central
//! difference gradient of the sampled field.

use std::collections::HashMap;

use nalgebra::Vector3;

use super::mesh::Mesh;
use super::tables::{CORNER_OFFSET, EDGE_CORNERS, TRI_TABLE};
use crate::error::{Error, Result};

/// A scalar field sampled on the `(g + 1)^3` lattice over `[-1, 1]^3`,
/// index order `x` fastest, then `y`, then `z`.
pub struct GridField {
    pub cells: usize,
    pub values: Vec<f64>,
}

impl GridField {
    /// Sample `field` (batch point evaluation) over the lattice.
    pub fn sample(cells: usize, field: impl Fn(&[Vector3<f64>]) -> Vec<f64>) -> Result<Self> {
        if cells < 8 {
            return Err(Error::Validation(format!(
                "grid resolution must be at least 8, got {cells}"
            )));
        }
        let n = cells + 1;
        let coord = |i: usize| -1.0 + 2.0 * i as f64 / cells as f64;
        let mut points = Vec::with_capacity(n * n * n);
        for iz in 0..n {
            for iy in 0..n {
                for ix in 0..n {
                    points.push(Vector3::new(coord(ix), coord(iy), coord(iz)));
                }
            }
        }
        let values = field(&points);
        if values.len() != points.len() {
            return Err(Error::Shape(format!(
                "field returned {} values for {} points",
                values.len(),
                points.len()
            )));
        }
        Ok(GridField { cells, values })
    }

    fn at(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        let n = self.cells + 1;
        self.values[(iz * n + iy) * n + ix]
    }

    fn point(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        let coord = |i: usize| -1.0 + 2.0 * i as f64 / self.cells as f64;
        Vector3::new(coord(ix), coord(iy), coord(iz))
    }

    /// Central difference gradient at a lattice point, one-sided on the
    /// boundary, in field units per scene unit.
    fn gradient(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        let h = 2.0 / self.cells as f64;
        let diff = |i: usize, max: usize, lo: f64, hi: f64| -> f64 {
            if i == 0 || i == max {
                (hi - lo) / h
            } else {
                (hi - lo) / (2.0 * h)
            }
        };
        let n = self.cells;
        let gx = diff(ix, n, self.at(ix.saturating_sub(1), iy, iz), self.at((ix + 1).min(n), iy, iz));
        let gy = diff(iy, n, self.at(ix, iy.saturating_sub(1), iz), self.at(ix, (iy + 1).min(n), iz));
        let gz = diff(iz, n, self.at(ix, iy, iz.saturating_sub(1)), self.at(ix, iy, (iz + 1).min(n)));
        Vector3::new(gx, gy, gz)
    }
}

/// Canonical key of a lattice edge: base point plus axis.
type EdgeKey = (usize, usize, usize, u8);

fn edge_key(cell: [usize; 3], edge: usize) -> EdgeKey {
    let [a, b] = EDGE_CORNERS[edge];
    let (oa, ob) = (CORNER_OFFSET[a], CORNER_OFFSET[b]);
    let base = [
        cell[0] + oa[0].min(ob[0]),
        cell[1] + oa[1].min(ob[1]),
        cell[2] + oa[2].min(ob[2]),
    ];
    let axis = (0..3).position(|k| oa[k] != ob[k]).unwrap() as u8;
    (base[0], base[1], base[2], axis)
}

/// Polygonize the iso-level surface of a sampled grid. An empty result is
/// a valid outcome (no crossing anywhere).
pub fn marching_cubes(grid: &GridField, level: f64) -> Mesh {
    let g = grid.cells;
    let mut mesh = Mesh::default();
    let mut normals: Vec<Vector3<f64>> = Vec::new();
    let mut edge_vertices: HashMap<EdgeKey, usize> = HashMap::new();

    let mut vertex_on_edge = |mesh: &mut Mesh, cell: [usize; 3], edge: usize| -> usize {
        let key = edge_key(cell, edge);
        if let Some(&idx) = edge_vertices.get(&key) {
            return idx;
        }
        let [a, b] = EDGE_CORNERS[edge];
        let (oa, ob) = (CORNER_OFFSET[a], CORNER_OFFSET[b]);
        let pa = [cell[0] + oa[0], cell[1] + oa[1], cell[2] + oa[2]];
        let pb = [cell[0] + ob[0], cell[1] + ob[1], cell[2] + ob[2]];
        let (va, vb) = (grid.at(pa[0], pa[1], pa[2]), grid.at(pb[0], pb[1], pb[2]));
        let t = ((level - va) / (vb - va)).clamp(0.0, 1.0);
        let position = grid.point(pa[0], pa[1], pa[2]).lerp(&grid.point(pb[0], pb[1], pb[2]), t);
        let gradient = grid
            .gradient(pa[0], pa[1], pa[2])
            .lerp(&grid.gradient(pb[0], pb[1], pb[2]), t);
        let norm = gradient.norm();
        // density decreases outward, so the outward normal is -gradient
        let normal = if norm > 1e-12 {
            -gradient / norm
        } else {
            Vector3::zeros()
        };
        let idx = mesh.vertices.len();
        mesh.vertices.push(position);
        normals.push(normal);
        edge_vertices.insert(key, idx);
        idx
    };

    for iz in 0..g {
        for iy in 0..g {
            for ix in 0..g {
                let cell = [ix, iy, iz];
                let mut case = 0usize;
                for (c, off) in CORNER_OFFSET.iter().enumerate() {
                    if grid.at(ix + off[0], iy + off[1], iz + off[2]) < level {
                        case |= 1 << c;
                    }
                }
                for tri in TRI_TABLE[case].chunks(3) {
                    let ids = [
                        vertex_on_edge(&mut mesh, cell, tri[0] as usize),
                        vertex_on_edge(&mut mesh, cell, tri[1] as usize),
                        vertex_on_edge(&mut mesh, cell, tri[2] as usize),
                    ];
                    mesh.triangles.push(ids);
                }
            }
        }
    }

    // drop triangles collapsed by welded or coincident edge vertices
    mesh.triangles.retain(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2]);
    let areas: Vec<bool> = (0..mesh.triangles.len())
        .map(|i| {
            let [a, b, c] = mesh.triangles[i];
            let (a, b, c) = (mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]);
            0.5 * (b - a).cross(&(c - a)).norm() > 1e-12
        })
        .collect();
    let mut keep = areas.iter();
    mesh.triangles.retain(|_| *keep.next().unwrap());
    mesh.normals = Some(normals);
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_field(points: &[Vector3<f64>]) -> Vec<f64> {
        points
            .iter()
            .map(|p| if p.norm() < 0.5 { 50.0 } else { 0.0 })
            .collect()
    }

    #[test]
    fn zero_field_gives_empty_mesh() {
        let grid = GridField::sample(16, |pts| vec![0.0; pts.len()]).unwrap();
        let mesh = marching_cubes(&grid, 10.0);
        assert!(mesh.is_empty());
        assert!(mesh.triangles.is_empty());
    }

    #[test]
    fn resolution_below_eight_is_rejected() {
        assert!(GridField::sample(4, |pts| vec![0.0; pts.len()]).is_err());
    }

    fn mean_radial_error(mesh: &Mesh, radius: f64) -> f64 {
        let sum: f64 = mesh.vertices.iter().map(|v| (v.norm() - radius).abs()).sum();
        sum / mesh.vertices.len() as f64
    }

    #[test]
    fn sphere_vertices_lie_near_the_analytic_radius() {
        let g = 64;
        let grid = GridField::sample(g, sphere_field).unwrap();
        let mesh = marching_cubes(&grid, 10.0);
        assert!(!mesh.is_empty());
        mesh.validate().unwrap();
        let voxel = 2.0 / g as f64;
        let err = mean_radial_error(&mesh, 0.5);
        assert!(err <= 1.5 * voxel, "mean radial error {err} vs voxel {voxel}");
    }

    #[test]
    fn doubling_resolution_does_not_worsen_radial_error() {
        let coarse = marching_cubes(&GridField::sample(32, sphere_field).unwrap(), 10.0);
        let fine = marching_cubes(&GridField::sample(64, sphere_field).unwrap(), 10.0);
        assert!(mean_radial_error(&fine, 0.5) <= mean_radial_error(&coarse, 0.5));
    }

    #[test]
    fn sphere_mesh_is_watertight() {
        let grid = GridField::sample(64, sphere_field).unwrap();
        let mesh = marching_cubes(&grid, 10.0);
        let counts = mesh.edge_counts();
        assert!(!counts.is_empty());
        for ((a, b), c) in counts {
            assert_eq!(c, 2, "edge ({a}, {b}) used {c} times");
        }
    }

    #[test]
    fn wavy_field_mesh_is_watertight_and_exercises_many_cases() {
        // smooth multi-lobed field whose level set hits a broad mix of
        // cube sign cases, including ambiguous-face ones
        let field = |points: &[Vector3<f64>]| -> Vec<f64> {
            points
                .iter()
                .map(|p| {
                    (3.9 * p.x).sin() + (4.3 * p.y + 1.0).sin() + (3.7 * p.z + 2.0).sin()
                        - 0.8 * p.norm_squared()
                })
                .collect()
        };
        let grid = GridField::sample(24, field).unwrap();
        let mut seen_cases = std::collections::BTreeSet::new();
        let g = grid.cells;
        for iz in 0..g {
            for iy in 0..g {
                for ix in 0..g {
                    let mut case = 0usize;
                    for (c, off) in CORNER_OFFSET.iter().enumerate() {
                        if grid.at(ix + off[0], iy + off[1], iz + off[2]) < 0.2 {
                            case |= 1 << c;
                        }
                    }
                    seen_cases.insert(case);
                }
            }
        }
        assert!(seen_cases.len() > 60, "only {} cases exercised", seen_cases.len());
        let mesh = marching_cubes(&grid, 0.2);
        // interior edges shared twice; level set may exit the domain, so
        // only boundary-touching edges are allowed a single use
        for ((a, b), c) in mesh.edge_counts() {
            if c != 2 {
                let on_boundary = [a, b].iter().all(|&v| {
                    let p = mesh.vertices[v];
                    p.amax() >= 1.0 - 1e-9
                });
                assert!(on_boundary, "interior edge ({a}, {b}) used {c} times");
            }
        }
    }

    #[test]
    fn sphere_normals_point_outward() {
        let grid = GridField::sample(32, sphere_field).unwrap();
        let mesh = marching_cubes(&grid, 10.0);
        let normals = mesh.normals.as_ref().unwrap();
        let mut aligned = 0usize;
        for (v, n) in mesh.vertices.iter().zip(normals) {
            if n.dot(&v.normalize()) > 0.0 {
                aligned += 1;
            }
        }
        assert!(aligned as f64 >= 0.99 * mesh.vertices.len() as f64);
    }
}
