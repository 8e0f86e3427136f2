//! Command line entry point wiring the full pipeline: dataset synthesis,
//! training, rendering, surface extraction, correspondence, keypoint and
//! texture transfer, and correspondence scoring.
//!
//! Exit codes: 0 on success, 1 on validation or usage errors, 2 on
//! runtime failures. `--threads` (or the `TNRF_THREADS` environment
//! variable) caps the worker pool; 1 forces the deterministic path.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::autodiff::Real;
use crate::correspond::{
    correspond_to_mesh, extract_mesh, render_texture_transfer, resolve_keypoints,
    transfer_keypoints, transfer_texture, ExtractionSettings, KeypointEntry, KeypointSet,
    SpatialIndex, DEFAULT_ISO_LEVEL,
};
use crate::dataset::{
    generate_synthetic_family, load_dataset, write_dataset, CorrespondenceOracle, ObjectRecord,
    SyntheticFamilySpec,
};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::renderer::{
    render_view, write_color_png, write_depth_png, write_opacity_png, RenderSettings,
};
use crate::trainer::checkpoint::{load_checkpoint, peek_config, save_checkpoint};
use crate::trainer::{init_training, train_step, Precision, TrainConfig, TrainState};

#[derive(Parser)]
#[command(name = "tnrf", version, about = "Template-conditioned radiance fields with dense shape correspondences")]
struct Cli {
    /// Worker thread cap; 1 selects the deterministic reference path.
    /// Falls back to the TNRF_THREADS environment variable.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the seed from specs and configs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset with exact correspondences.
    Synth {
        /// Family spec JSON; defaults to a small toy chair family.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or resume training) on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training config TOML; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured number of steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Steps between periodic checkpoints.
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
    },
    /// Render one object view from a checkpoint as PNG triplet.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory providing the camera poses.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        object: usize,
        #[arg(long)]
        view: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Extract an instance's surface mesh to PLY.
    Extract {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        object: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = DEFAULT_ISO_LEVEL)]
        level: f64,
    },
    /// Dense correspondence from the source surface onto a target instance.
    Correspond {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: usize,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = DEFAULT_ISO_LEVEL)]
        level: f64,
    },
    /// Carry keypoint annotations from one instance onto others.
    TransferKeypoints {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory providing cameras for lifting and projection.
        #[arg(long)]
        data: PathBuf,
        /// Annotation JSON for the source instance.
        #[arg(long)]
        keypoints: PathBuf,
        /// `all` or a comma separated list of instance indices.
        #[arg(long, default_value = "all")]
        targets: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = DEFAULT_ISO_LEVEL)]
        level: f64,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Recolor a target instance with a source instance's appearance.
    TransferTexture {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: usize,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = DEFAULT_ISO_LEVEL)]
        level: f64,
        /// Render the transfer from this view of the target (needs --data).
        #[arg(long)]
        view: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Score dense correspondences against the synthetic ground truth.
    EvalCorr {
        #[arg(long)]
        ckpt: PathBuf,
        /// Synthetic dataset directory containing gt_family.json.
        #[arg(long)]
        data: PathBuf,
        /// `all` or a comma separated list of `source:target` pairs.
        #[arg(long, default_value = "all")]
        pairs: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = DEFAULT_ISO_LEVEL)]
        level: f64,
        /// Query lattice density per part face.
        #[arg(long, default_value_t = 4)]
        per_face: usize,
    },
}

/// Parse arguments from the process environment and run; returns the
/// process exit code.
pub fn run() -> i32 {
    crate::trainer::tune_allocator();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    configure_threads(cli.threads);
    match dispatch(cli.command, cli.seed) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Validation(_) | Error::Parse { .. } | Error::Domain(_) | Error::Shape(_) => 1,
                _ => 2,
            }
        }
    }
}

fn configure_threads(flag: Option<usize>) {
    let threads = flag.or_else(|| {
        std::env::var("TNRF_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        // the global pool can only be installed once per process; later
        // calls with the same intent are harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Load a checkpoint at its recorded precision and run a generic body.
macro_rules! with_checkpoint {
    ($ckpt:expr, |$state:ident| $body:expr) => {{
        match peek_config($ckpt)?.precision {
            Precision::F32 => {
                let $state = load_checkpoint::<f32>($ckpt)?;
                $body
            }
            Precision::F64 => {
                let $state = load_checkpoint::<f64>($ckpt)?;
                $body
            }
        }
    }};
}

fn dispatch(command: Command, seed: Option<u64>) -> Result<()> {
    match command {
        Command::Synth { spec, out } => run_synth(spec.as_deref(), &out, seed),
        Command::Train {
            data,
            config,
            out,
            steps,
            checkpoint_every,
        } => run_train(&data, config.as_deref(), &out, steps, checkpoint_every, seed),
        Command::Render {
            ckpt,
            data,
            object,
            view,
            out,
            samples,
        } => with_checkpoint!(&ckpt, |state| run_render(&state, &data, object, view, &out, samples)),
        Command::Extract {
            ckpt,
            object,
            out,
            grid,
            level,
        } => with_checkpoint!(&ckpt, |state| run_extract(&state, object, &out, grid, level)),
        Command::Correspond {
            ckpt,
            source,
            target,
            out,
            grid,
            level,
        } => with_checkpoint!(&ckpt, |state| run_correspond(&state, source, target, &out, grid, level)),
        Command::TransferKeypoints {
            ckpt,
            data,
            keypoints,
            targets,
            out,
            grid,
            level,
            samples,
        } => with_checkpoint!(&ckpt, |state| run_transfer_keypoints(
            &state, &data, &keypoints, &targets, &out, grid, level, samples
        )),
        Command::TransferTexture {
            ckpt,
            source,
            target,
            out,
            grid,
            level,
            view,
            data,
            samples,
        } => with_checkpoint!(&ckpt, |state| run_transfer_texture(
            &state,
            source,
            target,
            &out,
            grid,
            level,
            view,
            data.as_deref(),
            samples
        )),
        Command::EvalCorr {
            ckpt,
            data,
            pairs,
            out,
            grid,
            level,
            per_face,
        } => with_checkpoint!(&ckpt, |state| run_eval_corr(
            &state, &data, &pairs, &out, grid, level, per_face
        )),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn run_synth(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = match spec_path {
        Some(path) => {
            let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<SyntheticFamilySpec>(&body).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
        }
        None => SyntheticFamilySpec::toy_chair(4, 10, 64, 0),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let (records, oracle) = generate_synthetic_family(&spec)?;
    ensure_dir(out)?;
    write_dataset(out, &records)?;
    oracle.save(&out.join("gt_family.json"))?;
    let spec_copy = serde_json::to_string_pretty(&spec).map_err(|e| Error::Parse {
        path: out.join("family.json"),
        message: e.to_string(),
    })?;
    std::fs::write(out.join("family.json"), spec_copy).map_err(|e| Error::io(out, e))?;
    println!(
        "wrote {} instances x {} views at {}px to {}",
        records.len(),
        spec.views_per_instance,
        spec.image_size,
        out.display()
    );
    Ok(())
}

fn run_train(
    data: &Path,
    config_path: Option<&Path>,
    out: &Path,
    steps: Option<u64>,
    checkpoint_every: u64,
    seed: Option<u64>,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let mut config = match config_path {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(steps) = steps {
        config.max_steps = steps;
    }
    ensure_dir(out)?;
    let ckpt = out.join("ckpt.tnrf");
    if ckpt.exists() {
        let mut resume_config = peek_config(&ckpt)?;
        resume_config.max_steps = config.max_steps;
        match resume_config.precision {
            Precision::F32 => {
                let mut state = load_checkpoint::<f32>(&ckpt)?;
                state.config.max_steps = config.max_steps;
                train_loop(state, &dataset, out, checkpoint_every)
            }
            Precision::F64 => {
                let mut state = load_checkpoint::<f64>(&ckpt)?;
                state.config.max_steps = config.max_steps;
                train_loop(state, &dataset, out, checkpoint_every)
            }
        }
    } else {
        config.save(&out.join("config.toml"))?;
        match config.precision {
            Precision::F32 => train_loop(init_training::<f32>(&config, &dataset)?, &dataset, out, checkpoint_every),
            Precision::F64 => train_loop(init_training::<f64>(&config, &dataset)?, &dataset, out, checkpoint_every),
        }
    }
}

fn train_loop<T: Real>(
    mut state: TrainState<T>,
    dataset: &[ObjectRecord],
    out: &Path,
    checkpoint_every: u64,
) -> Result<()> {
    use std::io::Write;
    let metrics_path = out.join("metrics.csv");
    let fresh = !metrics_path.exists() || state.step == 0;
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    if fresh {
        writeln!(metrics, "{}", LossBreakdown::CSV_HEADER).map_err(|e| Error::io(&metrics_path, e))?;
    }
    let ckpt = out.join("ckpt.tnrf");
    let max_steps = state.config.max_steps;
    while state.step < max_steps {
        let m = train_step(&mut state, dataset)?;
        writeln!(metrics, "{}", m.breakdown.csv_row(m.step)).map_err(|e| Error::io(&metrics_path, e))?;
        if (m.step + 1) % 100 == 0 || m.step + 1 == max_steps {
            println!(
                "step {:>6}/{max_steps}  total {:.6}  rec {:.6}  lr {:.2e}  ({:.2}s/step)",
                m.step + 1,
                m.breakdown.total,
                m.breakdown.rec,
                m.lr,
                m.seconds
            );
        }
        if checkpoint_every > 0 && (m.step + 1) % checkpoint_every == 0 {
            save_checkpoint(&state, &ckpt)?;
        }
    }
    save_checkpoint(&state, &ckpt)?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn shape_code<T: Real>(state: &TrainState<T>, object: usize) -> Result<&[T]> {
    state
        .latents
        .get(object)
        .map(|l| l.shape_code.values.as_slice())
        .ok_or_else(|| Error::Validation(format!("object {object} not in checkpoint ({} objects)", state.latents.len())))
}

fn appearance_code<T: Real>(state: &TrainState<T>, object: usize) -> Result<&[T]> {
    state
        .latents
        .get(object)
        .map(|l| l.appearance_code.values.as_slice())
        .ok_or_else(|| Error::Validation(format!("object {object} not in checkpoint ({} objects)", state.latents.len())))
}

fn run_render<T: Real>(
    state: &TrainState<T>,
    data: &Path,
    object: usize,
    view: usize,
    out: &Path,
    samples: usize,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let record = dataset
        .get(object)
        .ok_or_else(|| Error::Validation(format!("object {object} not in dataset ({} objects)", dataset.len())))?;
    let target = record
        .views
        .get(view)
        .ok_or_else(|| Error::Validation(format!("view {view} not in object ({} views)", record.views.len())))?;
    let settings = RenderSettings {
        width: target.width,
        height: target.height,
        samples_per_ray: samples,
        background: state.config.background,
    };
    let rendered = render_view(
        &state.model,
        shape_code(state, object)?,
        appearance_code(state, object)?,
        &target.camera,
        &settings,
    )?;
    ensure_dir(out)?;
    let stem = format!("obj{object}_view{view}");
    write_color_png(&out.join(format!("{stem}_color.png")), rendered.width, rendered.height, &rendered.color)?;
    write_depth_png(&out.join(format!("{stem}_depth.png")), rendered.width, rendered.height, &rendered.depth)?;
    write_opacity_png(&out.join(format!("{stem}_opacity.png")), rendered.width, rendered.height, &rendered.opacity)?;
    let (_, psnr) = crate::renderer::psnr(&rendered.color, &target.image)?;
    println!("rendered {stem}: psnr vs dataset view {psnr:.2} dB");
    Ok(())
}

fn run_extract<T: Real>(state: &TrainState<T>, object: usize, out: &Path, grid: usize, level: f64) -> Result<()> {
    let settings = ExtractionSettings {
        grid_resolution: grid,
        level,
    };
    let mesh = extract_mesh(&state.model, shape_code(state, object)?, &settings)?;
    if mesh.is_empty() {
        eprintln!("warning: empty isosurface at level {level}");
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    mesh.write_ply(out)?;
    println!(
        "wrote {} vertices, {} triangles to {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        out.display()
    );
    Ok(())
}

fn run_correspond<T: Real>(
    state: &TrainState<T>,
    source: usize,
    target: usize,
    out: &Path,
    grid: usize,
    level: f64,
) -> Result<()> {
    let settings = ExtractionSettings {
        grid_resolution: grid,
        level,
    };
    let source_mesh = extract_mesh(&state.model, shape_code(state, source)?, &settings)?;
    if source_mesh.is_empty() {
        return Err(Error::Domain("source mesh is empty".into()));
    }
    let target_mesh = extract_mesh(&state.model, shape_code(state, target)?, &settings)?;
    let map = correspond_to_mesh(
        &state.model,
        shape_code(state, source)?,
        shape_code(state, target)?,
        &source_mesh.vertices,
        &target_mesh,
        &settings,
        source,
        target,
    )?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    map.write_csv(out)?;
    let mean: f64 = map.distances_in_template.iter().sum::<f64>() / map.distances_in_template.len() as f64;
    println!(
        "corresponded {} points from {source} to {target} (mean template distance {mean:.4}) into {}",
        map.source_points.len(),
        out.display()
    );
    Ok(())
}

fn parse_targets(spec: &str, count: usize, exclude: usize) -> Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..count).filter(|&i| i != exclude).collect());
    }
    spec.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .map_err(|_| Error::Validation(format!("bad target index `{w}`")))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_transfer_keypoints<T: Real>(
    state: &TrainState<T>,
    data: &Path,
    keypoints: &Path,
    targets: &str,
    out: &Path,
    grid: usize,
    level: f64,
    samples: usize,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let set = KeypointSet::load(keypoints)?;
    let source = set.instance;
    let record = dataset
        .get(source)
        .ok_or_else(|| Error::Validation(format!("annotation instance {source} not in dataset")))?;
    let cameras: Vec<_> = record.views.iter().map(|v| v.camera.clone()).collect();
    let resolved = resolve_keypoints(&state.model, shape_code(state, source)?, &cameras, &set, samples)?;
    let settings = ExtractionSettings {
        grid_resolution: grid,
        level,
    };
    let target_ids = parse_targets(targets, dataset.len().min(state.latents.len()), source)?;
    let target_codes: Vec<(usize, &[T])> = target_ids
        .iter()
        .map(|&i| Ok((i, shape_code(state, i)?)))
        .collect::<Result<_>>()?;
    let transferred = transfer_keypoints(&state.model, shape_code(state, source)?, source, &resolved, &target_codes, &settings)?;
    ensure_dir(out)?;
    for result in &transferred {
        let t = result.target_instance;
        let set_out = KeypointSet {
            instance: t,
            keypoints: result
                .keypoints
                .iter()
                .map(|(name, p, _)| KeypointEntry {
                    name: name.clone(),
                    xyz: Some([p.x, p.y, p.z]),
                    pixel: None,
                })
                .collect(),
        };
        set_out.save(&out.join(format!("keypoints_{t}.json")))?;
        // projections into every view of the target instance
        use std::io::Write;
        let csv_path = out.join(format!("keypoints_{t}_pixels.csv"));
        let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            writeln!(w, "name,view,x,y")?;
            if let Some(target_record) = dataset.get(t) {
                for (vi, view) in target_record.views.iter().enumerate() {
                    for (name, p, _) in &result.keypoints {
                        if let Some((x, y)) = view.camera.project(p) {
                            writeln!(w, "{name},{vi},{x},{y}")?;
                        }
                    }
                }
            }
            Ok(())
        };
        emit().map_err(|e| Error::io(&csv_path, e))?;
    }
    println!(
        "transferred {} keypoints from {source} onto {} targets into {}",
        resolved.len(),
        transferred.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_transfer_texture<T: Real>(
    state: &TrainState<T>,
    source: usize,
    target: usize,
    out: &Path,
    grid: usize,
    level: f64,
    view: Option<usize>,
    data: Option<&Path>,
    samples: usize,
) -> Result<()> {
    let settings = ExtractionSettings {
        grid_resolution: grid,
        level,
    };
    let mesh = transfer_texture(
        &state.model,
        shape_code(state, source)?,
        appearance_code(state, source)?,
        shape_code(state, target)?,
        &settings,
    )?;
    ensure_dir(out)?;
    let ply = out.join(format!("texture_{source}_to_{target}.ply"));
    mesh.write_ply(&ply)?;
    println!("wrote colored mesh to {}", ply.display());
    if let Some(view) = view {
        let data = data.ok_or_else(|| Error::Validation("--view requires --data for the camera pose".into()))?;
        let dataset = load_dataset(data)?;
        let target_view = dataset
            .get(target)
            .and_then(|r| r.views.get(view))
            .ok_or_else(|| Error::Validation(format!("view {view} of object {target} not in dataset")))?;
        let render_settings = RenderSettings {
            width: target_view.width,
            height: target_view.height,
            samples_per_ray: samples,
            background: state.config.background,
        };
        let rendered = render_texture_transfer(
            &state.model,
            shape_code(state, source)?,
            appearance_code(state, source)?,
            shape_code(state, target)?,
            &target_view.camera,
            &settings,
            &render_settings,
        )?;
        let png = out.join(format!("texture_{source}_to_{target}_view{view}.png"));
        write_color_png(&png, rendered.width, rendered.height, &rendered.color)?;
        println!("wrote transfer render to {}", png.display());
    }
    Ok(())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn parse_pairs(spec: &str, count: usize) -> Result<Vec<(usize, usize)>> {
    if spec == "all" {
        let mut pairs = Vec::new();
        for i in 0..count {
            for j in 0..count {
                if i != j {
                    pairs.push((i, j));
                }
            }
        }
        return Ok(pairs);
    }
    spec.split(',')
        .map(|w| {
            let (a, b) = w
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Validation(format!("bad pair `{w}`, expected `source:target`")))?;
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Validation(format!("bad instance index `{s}`")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

/// Correspondence scores for one ordered instance pair.
pub struct PairScore {
    pub source: usize,
    pub target: usize,
    pub queries: usize,
    pub mean_error: f64,
    pub median_error: f64,
    pub baseline_mean_error: f64,
    pub bbox_diagonal: f64,
}

/// Score predicted correspondences for `pairs` against the oracle:
/// model predictions and the identity-coordinates baseline (nearest
/// target surface point at the same raw coordinates).
pub fn score_pairs<T: Real>(
    state: &TrainState<T>,
    oracle: &CorrespondenceOracle,
    pairs: &[(usize, usize)],
    settings: &ExtractionSettings,
    per_face: usize,
) -> Result<Vec<PairScore>> {
    let mut meshes = BTreeMap::new();
    for &(_, target) in pairs {
        if !meshes.contains_key(&target) {
            let mesh = extract_mesh(&state.model, shape_code(state, target)?, settings)?;
            if mesh.is_empty() {
                return Err(Error::Domain(format!("instance {target} has an empty surface at level {}", settings.level)));
            }
            meshes.insert(target, mesh);
        }
    }
    let mut scores = Vec::with_capacity(pairs.len());
    for &(source, target) in pairs {
        let queries = oracle.sample_surface_points(source, per_face)?;
        let mesh = &meshes[&target];
        let map = correspond_to_mesh(
            &state.model,
            shape_code(state, source)?,
            shape_code(state, target)?,
            &queries,
            mesh,
            settings,
            source,
            target,
        )?;
        let cell = 2.0 * (2.0 / settings.grid_resolution as f64);
        let raw_index = SpatialIndex::build(mesh.vertices.clone(), cell)?;
        let mut errors = Vec::with_capacity(queries.len());
        let mut baseline = Vec::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            let gt = oracle.gt_correspond(source, target, *q)?;
            errors.push((map.target_points[i] - gt).norm());
            let (bi, _) = raw_index.nearest(q);
            baseline.push((mesh.vertices[bi] - gt).norm());
        }
        let (lo, hi) = oracle.instance_bounds(target)?;
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        scores.push(PairScore {
            source,
            target,
            queries: queries.len(),
            mean_error: mean,
            median_error: median(&mut errors),
            baseline_mean_error: baseline.iter().sum::<f64>() / baseline.len() as f64,
            bbox_diagonal: (hi - lo).norm(),
        });
    }
    Ok(scores)
}

fn run_eval_corr<T: Real>(
    state: &TrainState<T>,
    data: &Path,
    pairs: &str,
    out: &Path,
    grid: usize,
    level: f64,
    per_face: usize,
) -> Result<()> {
    let gt_path = data.join("gt_family.json");
    if !gt_path.exists() {
        return Err(Error::Validation(format!(
            "{} not found: eval-corr needs a synthetic dataset with exact ground truth",
            gt_path.display()
        )));
    }
    let oracle = CorrespondenceOracle::load(&gt_path)?;
    let count = oracle.instances.len().min(state.latents.len());
    let pair_list = parse_pairs(pairs, count)?;
    if pair_list.is_empty() {
        return Err(Error::Validation("no instance pairs to evaluate".into()));
    }
    let settings = ExtractionSettings {
        grid_resolution: grid,
        level,
    };
    let scores = score_pairs(state, &oracle, &pair_list, &settings, per_face)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    use std::io::Write;
    let file = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(
            w,
            "source,target,queries,mean_error,median_error,baseline_mean_error,bbox_diagonal,mean_over_diagonal"
        )?;
        for s in &scores {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                s.source,
                s.target,
                s.queries,
                s.mean_error,
                s.median_error,
                s.baseline_mean_error,
                s.bbox_diagonal,
                s.mean_error / s.bbox_diagonal
            )?;
        }
        Ok(())
    };
    emit().map_err(|e| Error::io(out, e))?;
    let overall = scores.iter().map(|s| s.mean_error / s.bbox_diagonal).sum::<f64>() / scores.len() as f64;
    println!(
        "evaluated {} pairs; mean error / bbox diagonal {overall:.4}; wrote {}",
        scores.len(),
        out.display()
    );
    Ok(())
}
