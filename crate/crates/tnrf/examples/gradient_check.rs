//! Verify the reverse-mode gradients of the full training objective
//! against central finite differences on a micro configuration.

use tnrf::dataset::{generate_synthetic_family, SyntheticFamilySpec};
use tnrf::fields::ModelConfig;
use tnrf::trainer::{evaluate_objective, init_training, plan_batch, TrainConfig};

fn main() -> tnrf::Result<()> {
    let spec = SyntheticFamilySpec::toy_chair(2, 3, 12, 21);
    let dataset = generate_synthetic_family(&spec)?.0;
    let config = TrainConfig {
        batch_objects: 2,
        rays_per_view: 4,
        samples_per_ray: 4,
        stratified: false,
        precision: tnrf::trainer::Precision::F64,
        model: ModelConfig::tiny(3, 3, 6),
        ..TrainConfig::default()
    };
    let mut state = init_training::<f64>(&config, &dataset)?;
    let plan = plan_batch(&mut state.rng, &dataset, &config)?;
    let (_, grads) = evaluate_objective(&state.model, &state.latents, &plan, &config)?;

    // probe a handful of parameters per group against a five-point
    // finite-difference stencil
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut probes = 0usize;
    let names: Vec<String> = grads.names().map(str::to_string).collect();
    for name in names {
        let g_all = grads.get(&name).unwrap();
        let len = g_all.len();
        for k in 0..3.min(len) {
            let idx = (k * 17) % len;
            let g = g_all[idx];
            let eval = |delta: f64| -> f64 {
                let mut model = state.model.clone();
                let mut latents = state.latents.clone();
                model.visit_params_mut(&mut |p| {
                    if p.name == name {
                        p.values[idx] += delta;
                    }
                });
                for latent in &mut latents {
                    for p in [&mut latent.shape_code, &mut latent.appearance_code] {
                        if p.name == name {
                            p.values[idx] += delta;
                        }
                    }
                }
                evaluate_objective(&model, &latents, &plan, &config).unwrap().0.total
            };
            let fd = (8.0 * (eval(h) - eval(-h)) - (eval(2.0 * h) - eval(-2.0 * h))) / (12.0 * h);
            if (g - fd).abs() > 1e-10 {
                worst = worst.max((g - fd).abs() / fd.abs().max(1e-8));
            }
            probes += 1;
        }
    }
    println!("checked {probes} parameters, worst relative error {worst:.2e}");
    Ok(())
}
