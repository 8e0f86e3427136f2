use std::time::Instant;
use tnrf::dataset::{generate_synthetic_family, SyntheticFamilySpec};
use tnrf::fields::ModelConfig;
use tnrf::trainer::{evaluate_objective, init_training, plan_batch, TrainConfig};

fn main() {
    tnrf::trainer::tune_allocator();
    let spec = SyntheticFamilySpec::toy_chair(1, 21, 64, 5);
    let dataset = generate_synthetic_family(&spec).unwrap().0;
    let config = TrainConfig {
        rays_per_view: 256,
        batch_objects: 1,
        model: ModelConfig {
            shape_dim: 64,
            appearance_dim: 64,
            trunk_width: 64,
            trunk_depth: 5,
            radiance_width: 64,
            radiance_depth: 2,
            shape_head_width: 64,
            shape_head_depth: 4,
            mapping_hidden: 128,
            mapping_depth: 3,
        },
        ..TrainConfig::default()
    };
    let mut state = init_training::<f32>(&config, &dataset).unwrap();
    let plan = plan_batch(&mut state.rng, &dataset, &config).unwrap();
    for _ in 0..3 {
        let t0 = Instant::now();
        let (b, _g) = evaluate_objective(&state.model, &state.latents, &plan, &config).unwrap();
        eprintln!("objective {:.3}s total {:.5}", t0.elapsed().as_secs_f64(), b.total);
    }
}
