//! Run a short training loop on one synthetic object with a scaled-down
//! model and print the loss breakdown as it falls.

use tnrf::dataset::{generate_synthetic_family, SyntheticFamilySpec};
use tnrf::fields::ModelConfig;
use tnrf::trainer::{init_training, train_step, TrainConfig};

fn main() -> tnrf::Result<()> {
    let spec = SyntheticFamilySpec::toy_chair(1, 8, 32, 3);
    let dataset = generate_synthetic_family(&spec)?.0;
    let config = TrainConfig {
        batch_objects: 1,
        rays_per_view: 64,
        samples_per_ray: 32,
        max_steps: 100,
        model: ModelConfig::tiny(16, 16, 32),
        ..TrainConfig::default()
    };
    let mut state = init_training::<f32>(&config, &dataset)?;
    while state.step < config.max_steps {
        let m = train_step(&mut state, &dataset)?;
        if (m.step + 1) % 20 == 0 {
            println!(
                "step {:>3}  total {:.5}  rec {:.5}  reg {:.6}  cor {:.6}  nor {:.6}  smo {:.6}",
                m.step + 1, m.breakdown.total, m.breakdown.rec, m.breakdown.reg,
                m.breakdown.cor, m.breakdown.nor, m.breakdown.smo
            );
        }
    }
    Ok(())
}
