use std::time::Instant;
use tnrf::correspond::{ExtractionSettings, DEFAULT_ISO_LEVEL};
use tnrf::dataset::{generate_synthetic_family, SyntheticFamilySpec};
use tnrf::fields::ModelConfig;
use tnrf::trainer::{init_training, train_step, TrainConfig};

fn main() {
    tnrf::trainer::tune_allocator();
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let rays: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let steps: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let every: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(500);
    let spec = SyntheticFamilySpec::toy_chair(8, 20, 64, 23);
    let (dataset, oracle) = generate_synthetic_family(&spec).unwrap();
    let config = TrainConfig {
        lr,
        batch_objects: 5,
        rays_per_view: rays,
        max_steps: steps,
        seed: 3,
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
    let settings = ExtractionSettings { grid_resolution: 48, level: DEFAULT_ISO_LEVEL };
    let pairs: Vec<(usize, usize)> = (0..8).map(|i| (i, (i + 1) % 8)).collect();
    let t0 = Instant::now();
    for _ in 0..steps {
        let m = train_step(&mut state, &dataset).unwrap();
        if (m.step + 1) % every == 0 {
            match tnrf::cli::score_pairs(&state, &oracle, &pairs, &settings, 3) {
                Ok(scores) => {
                    let ratio = scores.iter().map(|s| s.mean_error / s.bbox_diagonal).sum::<f64>()
                        / scores.len() as f64;
                    let baseline = scores
                        .iter()
                        .map(|s| s.baseline_mean_error / s.bbox_diagonal)
                        .sum::<f64>()
                        / scores.len() as f64;
                    eprintln!(
                        "step {:>5} total {:.5} mean/diag {:.2}% baseline {:.2}% improvement {:.0}% elapsed {:.0}s",
                        m.step + 1,
                        m.breakdown.total,
                        100.0 * ratio,
                        100.0 * baseline,
                        100.0 * (1.0 - ratio / baseline),
                        t0.elapsed().as_secs_f64()
                    );
                }
                Err(e) => eprintln!(
                    "step {:>5} total {:.5} scoring failed: {e} elapsed {:.0}s",
                    m.step + 1,
                    m.breakdown.total,
                    t0.elapsed().as_secs_f64()
                ),
            }
        }
    }
}
