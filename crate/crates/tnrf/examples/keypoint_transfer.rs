//! Carry named 3D keypoints from one instance onto two others via the
//! template, then report how far each point moved.

use nalgebra::Vector3;
use tnrf::correspond::{transfer_keypoints, ExtractionSettings};
use tnrf::fields::{FieldModel, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> tnrf::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = FieldModel::<f64>::new(ModelConfig::tiny(8, 8, 16), &mut rng);
    let zs: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..8).map(|j| 0.01 * ((i * 8 + j) as f64).sin()).collect())
        .collect();

    let grid = tnrf::correspond::marching::GridField::sample(24, |pts| {
        model.instance_density_points(pts, &zs[0])
    })?;
    let mut v = grid.values.clone();
    v.sort_by(f64::total_cmp);
    let settings = ExtractionSettings {
        grid_resolution: 24,
        level: v[v.len() / 2],
    };

    let keypoints = vec![
        ("nose".to_string(), Vector3::new(0.1, 0.0, 0.4)),
        ("tail".to_string(), Vector3::new(-0.2, 0.1, -0.5)),
    ];
    let targets: Vec<(usize, &[f64])> = vec![(1, &zs[1]), (2, &zs[2])];
    let results = transfer_keypoints(&model, &zs[0], 0, &keypoints, &targets, &settings)?;
    for r in &results {
        for (name, p, _) in &r.keypoints {
            let moved = (p - keypoints.iter().find(|(n, _)| n == name).unwrap().1).norm();
            println!(
                "{name} on instance {}: ({:+.3}, {:+.3}, {:+.3}), moved {moved:.4}",
                r.target_instance, p.x, p.y, p.z
            );
        }
    }
    Ok(())
}
