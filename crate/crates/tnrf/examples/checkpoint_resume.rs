//! Demonstrate bit-exact checkpointing: training k steps, saving, loading,
//! and continuing matches an uninterrupted run exactly.

use tnrf::dataset::{generate_synthetic_family, SyntheticFamilySpec};
use tnrf::fields::ModelConfig;
use tnrf::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use tnrf::trainer::{init_training, train_step, TrainConfig};

fn main() -> tnrf::Result<()> {
    let spec = SyntheticFamilySpec::toy_chair(2, 4, 16, 8);
    let dataset = generate_synthetic_family(&spec)?.0;
    let config = TrainConfig {
        batch_objects: 2,
        rays_per_view: 16,
        samples_per_ray: 8,
        max_steps: 10,
        model: ModelConfig::tiny(4, 4, 8),
        ..TrainConfig::default()
    };

    // uninterrupted run
    let mut straight = init_training::<f64>(&config, &dataset)?;
    let mut straight_losses = Vec::new();
    for _ in 0..10 {
        straight_losses.push(train_step(&mut straight, &dataset)?.breakdown.total);
    }

    // interrupted at step 5
    let path = std::env::temp_dir().join("tnrf_example_ckpt.tnrf");
    let mut first = init_training::<f64>(&config, &dataset)?;
    for _ in 0..5 {
        train_step(&mut first, &dataset)?;
    }
    save_checkpoint(&first, &path)?;
    let mut resumed = load_checkpoint::<f64>(&path)?;
    let mut resumed_losses = Vec::new();
    for _ in 0..5 {
        resumed_losses.push(train_step(&mut resumed, &dataset)?.breakdown.total);
    }

    let exact = straight_losses[5..]
        .iter()
        .zip(&resumed_losses)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("straight run tail:  {:?}", &straight_losses[5..]);
    println!("resumed run losses: {resumed_losses:?}");
    println!("bitwise identical: {exact}");
    Ok(())
}
