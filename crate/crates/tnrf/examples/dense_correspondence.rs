//! Map every surface vertex of one instance onto another through the
//! shared template space and write the match table as CSV.

use tnrf::correspond::{correspond, extract_mesh, ExtractionSettings};
use tnrf::fields::{FieldModel, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> tnrf::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = FieldModel::<f64>::new(ModelConfig::tiny(8, 8, 16), &mut rng);
    let zs_a = vec![0.02; 8];
    let zs_b = vec![-0.02; 8];

    // an untrained field has no fixed iso level, so place it at the median
    // sampled density to get a nonempty demonstration surface
    let grid = tnrf::correspond::marching::GridField::sample(24, |pts| {
        model.instance_density_points(pts, &zs_a)
    })?;
    let mut v = grid.values.clone();
    v.sort_by(f64::total_cmp);
    let settings = ExtractionSettings {
        grid_resolution: 24,
        level: v[v.len() / 2],
    };

    let source = extract_mesh(&model, &zs_a, &settings)?;
    let map = correspond(&model, &zs_a, &zs_b, &source.vertices, &settings, 0, 1)?;
    let mean: f64 =
        map.distances_in_template.iter().sum::<f64>() / map.distances_in_template.len() as f64;
    let out = std::env::temp_dir().join("tnrf_example_correspondence.csv");
    map.write_csv(&out)?;
    println!(
        "matched {} surface points (mean template distance {:.4}), CSV in {}",
        map.source_points.len(),
        mean,
        out.display()
    );
    Ok(())
}
