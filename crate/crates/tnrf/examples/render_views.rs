//! Briefly fit one object, then render a view as a color / depth /
//! opacity PNG triplet and report PSNR against the dataset image.

use tnrf::dataset::{generate_synthetic_family, SyntheticFamilySpec};
use tnrf::fields::ModelConfig;
use tnrf::renderer::{psnr, render_view, write_color_png, write_depth_png, write_opacity_png, RenderSettings};
use tnrf::trainer::{init_training, train_step, TrainConfig};

fn main() -> tnrf::Result<()> {
    let spec = SyntheticFamilySpec::toy_chair(1, 8, 32, 4);
    let dataset = generate_synthetic_family(&spec)?.0;
    let config = TrainConfig {
        batch_objects: 1,
        rays_per_view: 64,
        samples_per_ray: 32,
        max_steps: 150,
        model: ModelConfig::tiny(16, 16, 32),
        ..TrainConfig::default()
    };
    let mut state = init_training::<f32>(&config, &dataset)?;
    while state.step < config.max_steps {
        train_step(&mut state, &dataset)?;
    }

    let view = &dataset[0].views[0];
    let settings = RenderSettings {
        width: view.width,
        height: view.height,
        samples_per_ray: 32,
        background: config.background,
    };
    let rendered = render_view(
        &state.model,
        &state.latents[0].shape_code.values,
        &state.latents[0].appearance_code.values,
        &view.camera,
        &settings,
    )?;
    let out = std::env::temp_dir().join("tnrf_example_render");
    std::fs::create_dir_all(&out).unwrap();
    write_color_png(&out.join("color.png"), rendered.width, rendered.height, &rendered.color)?;
    write_depth_png(&out.join("depth.png"), rendered.width, rendered.height, &rendered.depth)?;
    write_opacity_png(&out.join("opacity.png"), rendered.width, rendered.height, &rendered.opacity)?;
    let (_, db) = psnr(&rendered.color, &view.image)?;
    println!("rendered view 0 after {} steps: {:.2} dB, PNGs in {}", state.step, db, out.display());
    Ok(())
}
