//! Polygonize an analytic density field with marching cubes and write a
//! watertight PLY mesh.

use nalgebra::Vector3;
use tnrf::correspond::marching::{marching_cubes, GridField};

fn main() -> tnrf::Result<()> {
    // a solid torus: density is high inside, zero outside
    let field = |points: &[Vector3<f64>]| -> Vec<f64> {
        points
            .iter()
            .map(|p| {
                let ring = (p.xy().norm() - 0.6).hypot(p.z);
                if ring < 0.25 {
                    50.0
                } else {
                    0.0
                }
            })
            .collect()
    };
    let grid = GridField::sample(48, field)?;
    let mesh = marching_cubes(&grid, 10.0);
    mesh.validate()?;
    let open_edges = mesh.edge_counts().values().filter(|&&c| c != 2).count();
    let out = std::env::temp_dir().join("tnrf_example_torus.ply");
    mesh.write_ply(&out)?;
    println!(
        "torus: {} vertices, {} triangles, {} open edges, written to {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        open_edges,
        out.display()
    );
    Ok(())
}
