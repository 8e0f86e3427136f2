use std::time::Instant;
use tnrf::dataset::{generate_synthetic_family, SyntheticFamilySpec};
use tnrf::fields::ModelConfig;
use tnrf::renderer::{psnr, render_view, RenderSettings};
use tnrf::trainer::{init_training, train_step, TrainConfig};

fn main() {
    tnrf::trainer::tune_allocator();
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let rays: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(256);
    let width: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);
    let steps: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let stratified: bool = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(true);
    let spec = SyntheticFamilySpec::toy_chair(1, 21, 64, 5);
    let all = generate_synthetic_family(&spec).unwrap().0;
    // hold out the last view
    let mut train_set = all.clone();
    let held = train_set[0].views.pop().unwrap();
    let config = TrainConfig {
        lr,
        rays_per_view: rays,
        batch_objects: 1,
        stratified,
        max_steps: steps,
        model: ModelConfig {
            shape_dim: 64,
            appearance_dim: 64,
            trunk_width: width,
            trunk_depth: 5,
            radiance_width: width,
            radiance_depth: 2,
            shape_head_width: width,
            shape_head_depth: 4,
            mapping_hidden: 2 * width,
            mapping_depth: 3,
        },
        ..TrainConfig::default()
    };
    let mut state = init_training::<f32>(&config, &train_set).unwrap();
    let settings = RenderSettings { width: 64, height: 64, samples_per_ray: 64, background: config.background };
    let t0 = Instant::now();
    for _ in 0..steps {
        let m = train_step(&mut state, &train_set).unwrap();
        if (m.step + 1) % 200 == 0 {
            let r = render_view(&state.model, &state.latents[0].shape_code.values,
                &state.latents[0].appearance_code.values, &held.camera, &settings).unwrap();
            let (_, db) = psnr(&r.color, &held.image).unwrap();
            eprintln!("step {:>5} total {:.5} heldout psnr {:.2} dB elapsed {:.0}s",
                m.step + 1, m.breakdown.total, db, t0.elapsed().as_secs_f64());
            if db >= 28.0 { eprintln!("reached 28 dB"); break; }
        }
    }
    // dump the final held-out prediction, ground truth, and error map
    let r = render_view(&state.model, &state.latents[0].shape_code.values,
        &state.latents[0].appearance_code.values, &held.camera, &settings).unwrap();
    let dir = std::path::Path::new("/root/notes");
    tnrf::renderer::write_color_png(&dir.join("bench_pred.png"), 64, 64, &r.color).unwrap();
    tnrf::renderer::write_color_png(&dir.join("bench_gt.png"), 64, 64, &held.image).unwrap();
    let err: Vec<[f64; 3]> = r.color.iter().zip(&held.image)
        .map(|(a, b)| {
            let e = (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0_f64, f64::max).min(1.0);
            [e, e, e]
        })
        .collect();
    tnrf::renderer::write_color_png(&dir.join("bench_err.png"), 64, 64, &err).unwrap();
    let mse: f64 = r.color.iter().zip(&held.image)
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>() / 3.0)
        .sum::<f64>() / r.color.len() as f64;
    let mut sorted: Vec<f64> = r.color.iter().zip(&held.image)
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>() / 3.0)
        .collect();
    sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let top: f64 = sorted.iter().take(64).sum();
    eprintln!("final mse {mse:.6}; top-64-pixel share {:.1}%", 100.0 * top / (mse * 4096.0));
}
