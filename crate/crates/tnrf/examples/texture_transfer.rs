//! Recolor one instance's surface with another instance's appearance and
//! write the colored mesh plus a rendered frame.

use tnrf::correspond::{render_texture_transfer, transfer_texture, ExtractionSettings};
use tnrf::camera::Camera;
use tnrf::fields::{FieldModel, ModelConfig};
use tnrf::renderer::{write_color_png, RenderSettings};
use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> tnrf::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = FieldModel::<f64>::new(ModelConfig::tiny(8, 8, 16), &mut rng);
    let zs_src = vec![0.015; 8];
    let za_src = vec![-0.02; 8];
    let zs_tgt = vec![-0.015; 8];

    let grid = tnrf::correspond::marching::GridField::sample(24, |pts| {
        model.instance_density_points(pts, &zs_tgt)
    })?;
    let mut v = grid.values.clone();
    v.sort_by(f64::total_cmp);
    let settings = ExtractionSettings {
        grid_resolution: 24,
        level: v[v.len() / 2],
    };

    let out = std::env::temp_dir().join("tnrf_example_texture");
    std::fs::create_dir_all(&out).unwrap();
    let mesh = transfer_texture(&model, &zs_src, &za_src, &zs_tgt, &settings)?;
    mesh.write_ply(&out.join("recolored.ply"))?;

    let size = 48usize;
    let intrinsic = Matrix3::new(size as f64, 0.0, size as f64 / 2.0,
                                 0.0, size as f64, size as f64 / 2.0,
                                 0.0, 0.0, 1.0);
    let camera = Camera::look_at(
        nalgebra::Vector3::new(0.0, 0.5, 3.0),
        nalgebra::Vector3::zeros(),
        nalgebra::Vector3::y(),
        intrinsic,
        1.0,
        5.0,
    );
    let render_settings = RenderSettings {
        width: size,
        height: size,
        samples_per_ray: 32,
        background: [1.0, 1.0, 1.0],
    };
    let frame = render_texture_transfer(&model, &zs_src, &za_src, &zs_tgt, &camera, &settings, &render_settings)?;
    write_color_png(&out.join("recolored.png"), frame.width, frame.height, &frame.color)?;
    println!(
        "recolored mesh ({} vertices) and render written to {}",
        mesh.vertices.len(),
        out.display()
    );
    Ok(())
}
