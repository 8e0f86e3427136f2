//! Auto-decoder training: joint optimization of network parameters and
//! per-object latent codes over random ray minibatches, with an exact
//! learning-rate halving schedule, deterministic replay under a seed, and
//! checkpointing.

pub mod adam;
pub mod checkpoint;

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Real, Tape, Tensor};
use crate::camera::{sample_along_ray, RaySamples};
use crate::dataset::ObjectRecord;
use crate::error::{Error, Result};
use crate::fields::{points_tensor, FieldModel, LatentPair, ModelConfig};
use crate::losses::{
    code_regularization, correction_regularization, normal_consistency_loss,
    normalize_ray_weights, reconstruction_loss, smoothness_loss, total_objective, LossBreakdown,
    LossWeights,
};
use crate::renderer::composite_batch;
use adam::{adam_update, AdamConfig, AdamMoments};

/// Raise glibc's mmap and trim thresholds so the tape's large transient
/// buffers are recycled by the allocator instead of being returned to the
/// kernel after every step (which costs a page-fault storm on the next
/// one). Call once at process start; no-op on non-glibc platforms.
pub fn tune_allocator() {
    #[cfg(target_os = "linux")]
    unsafe {
        let threshold = 1 << 30;
        libc::mallopt(libc::M_MMAP_THRESHOLD, threshold);
        libc::mallopt(libc::M_TRIM_THRESHOLD, threshold);
    }
}

/// Numeric precision of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

/// All knobs of a training run; loadable from a TOML file with the same
/// field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Objects per step, each contributing one view.
    pub batch_objects: usize,
    pub rays_per_view: usize,
    pub samples_per_ray: usize,
    /// The learning rate is exactly halved every this many steps.
    pub lr_halving_interval: u64,
    pub weights: LossWeights,
    pub max_steps: u64,
    pub seed: u64,
    pub precision: Precision,
    /// Stratified ray sampling when true, bin midpoints when false.
    pub stratified: bool,
    pub background: [f64; 3],
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            adam_epsilon: 1e-8,
            batch_objects: 5,
            rays_per_view: 1024,
            samples_per_ray: 64,
            lr_halving_interval: 100_000,
            weights: LossWeights::default(),
            max_steps: 20_000,
            seed: 0,
            precision: Precision::F32,
            stratified: true,
            background: [1.0, 1.0, 1.0],
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, object_count: usize) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Validation(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_objects == 0 || self.batch_objects > object_count {
            return Err(Error::Validation(format!(
                "batch of {} objects is invalid for a dataset of {object_count}",
                self.batch_objects
            )));
        }
        if self.rays_per_view == 0 {
            return Err(Error::Validation("rays_per_view must be positive".into()));
        }
        if self.samples_per_ray < 2 {
            return Err(Error::Validation("samples_per_ray must be at least 2".into()));
        }
        if self.lr_halving_interval == 0 {
            return Err(Error::Validation("lr_halving_interval must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&body).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let body = toml::to_string_pretty(self).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

/// The learning rate used for step `step` (zero-based): `lr * 2^-m` after
/// `m` full halving intervals, computed exactly in powers of two.
pub fn lr_at(config: &TrainConfig, step: u64) -> f64 {
    let m = (step / config.lr_halving_interval) as i32;
    config.lr / 2f64.powi(m)
}

/// Complete training state; checkpointable and deterministic under seed.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub model: FieldModel<T>,
    pub latents: Vec<LatentPair<T>>,
    /// Optimizer moments keyed by parameter group name; ordered map so
    /// iteration order is deterministic.
    pub moments: BTreeMap<String, AdamMoments<T>>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

/// Standard normal draw via the Box-Muller transform.
fn sample_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub const LATENT_INIT_STDDEV: f64 = 0.01;

/// Build a fresh training state: network per its initializers, latents
/// drawn i.i.d. normal with standard deviation 0.01, moments zeroed.
pub fn init_training<T: Real>(config: &TrainConfig, dataset: &[ObjectRecord]) -> Result<TrainState<T>> {
    if dataset.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    config.validate(dataset.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = FieldModel::new(config.model.clone(), &mut rng);
    let mut latents = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let shape: Vec<T> = (0..config.model.shape_dim)
            .map(|_| T::from_f64(sample_normal(&mut rng) * LATENT_INIT_STDDEV))
            .collect();
        let appearance: Vec<T> = (0..config.model.appearance_dim)
            .map(|_| T::from_f64(sample_normal(&mut rng) * LATENT_INIT_STDDEV))
            .collect();
        latents.push(LatentPair::new(i, shape, appearance));
    }
    let mut moments = BTreeMap::new();
    model.visit_params(&mut |p| {
        moments.insert(p.name.clone(), AdamMoments::zeros(p.values.len()));
    });
    for pair in &latents {
        moments.insert(
            pair.shape_code.name.clone(),
            AdamMoments::zeros(pair.shape_code.values.len()),
        );
        moments.insert(
            pair.appearance_code.name.clone(),
            AdamMoments::zeros(pair.appearance_code.values.len()),
        );
    }
    Ok(TrainState {
        config: config.clone(),
        model,
        latents,
        moments,
        step: 0,
        rng,
    })
}

/// One object's rays for a step, fixed before evaluation so the objective
/// is a pure function of the parameters.
pub struct BatchEntry {
    pub object: usize,
    pub view: usize,
    pub samples: Vec<RaySamples>,
    pub directions: Vec<Vector3<f64>>,
    pub targets: Vec<[f64; 3]>,
}

pub struct BatchPlan {
    pub entries: Vec<BatchEntry>,
}

/// Draw the step's objects (uniform, without replacement), one view each,
/// and `rays_per_view` random pixels with their ray samples.
pub fn plan_batch(
    rng: &mut ChaCha8Rng,
    dataset: &[ObjectRecord],
    config: &TrainConfig,
) -> Result<BatchPlan> {
    let n = dataset.len();
    let mut indices: Vec<usize> = (0..n).collect();
    for k in 0..config.batch_objects {
        let j = rng.gen_range(k..n);
        indices.swap(k, j);
    }
    let mut entries = Vec::with_capacity(config.batch_objects);
    for &object in &indices[..config.batch_objects] {
        let record = &dataset[object];
        let view_index = rng.gen_range(0..record.views.len());
        let view = &record.views[view_index];
        let mut samples = Vec::with_capacity(config.rays_per_view);
        let mut directions = Vec::with_capacity(config.rays_per_view);
        let mut targets = Vec::with_capacity(config.rays_per_view);
        for _ in 0..config.rays_per_view {
            let pixel = rng.gen_range(0..view.width * view.height);
            let (px, py) = (
                (pixel % view.width) as f64 + 0.5,
                (pixel / view.width) as f64 + 0.5,
            );
            let ray = view.camera.pixel_to_ray(px, py)?;
            let ray_samples = sample_along_ray(&ray, config.samples_per_ray, config.stratified, rng)?;
            samples.push(ray_samples);
            directions.push(ray.direction);
            targets.push(view.image[pixel]);
        }
        entries.push(BatchEntry {
            object,
            view: view_index,
            samples,
            directions,
            targets,
        });
    }
    Ok(BatchPlan { entries })
}

/// Evaluate the full objective on a fixed batch plan and return the loss
/// breakdown together with gradients for the model and sampled latents.
pub fn evaluate_objective<T: Real>(
    model: &FieldModel<T>,
    latents: &[LatentPair<T>],
    plan: &BatchPlan,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Gradients<T>)> {
    let p = config.samples_per_ray;
    let inv_b = T::one() / T::from_f64(plan.entries.len() as f64);
    let mut tape: Tape<T> = Tape::new();
    let vars = model.register(&mut tape);
    let mut codes = Vec::with_capacity(plan.entries.len());
    let mut terms: Option<[crate::autodiff::Var; 4]> = None;
    for entry in &plan.entries {
        let pair = &latents[entry.object];
        let zs = tape.param(&pair.shape_code, pair.shape_code.values.len(), 1);
        let za = tape.param(&pair.appearance_code, pair.appearance_code.values.len(), 1);
        codes.push((zs, za));
        let cond = model.condition(&mut tape, &vars, zs, za);

        let rays = entry.samples.len();
        let mut positions = Vec::with_capacity(rays * p);
        let mut dirs = Vec::with_capacity(rays * p);
        let mut t_values = Vec::with_capacity(rays * p);
        let mut deltas = Vec::with_capacity(rays * p);
        for (samples, dir) in entry.samples.iter().zip(&entry.directions) {
            positions.extend_from_slice(&samples.positions);
            dirs.extend(std::iter::repeat(*dir).take(p));
            t_values.extend(samples.t_values.iter().map(|&t| T::from_f64(t)));
            deltas.extend(samples.deltas.iter().map(|&d| T::from_f64(d)));
        }
        let x = tape.constant(points_tensor(&positions));
        let d = tape.constant(points_tensor(&dirs));
        let tv = tape.constant(Tensor::from_vec(1, rays * p, t_values));
        let dv = tape.constant(Tensor::from_vec(1, rays * p, deltas));

        let batch = model.instance_eval_jet(&mut tape, &vars, &cond, x, d);
        let comp = composite_batch(&mut tape, batch.sigma, batch.color, tv, dv, p, config.background);

        let target = {
            let mut data = vec![T::zero(); 3 * rays];
            for (i, t) in entry.targets.iter().enumerate() {
                for c in 0..3 {
                    data[c * rays + i] = T::from_f64(t[c]);
                }
            }
            tape.constant(Tensor::from_vec(3, rays, data))
        };
        let rec = reconstruction_loss(&mut tape, comp.color, target)?;
        let cor = correction_regularization(&mut tape, batch.delta_sigma)?;
        let wn = normalize_ray_weights(&mut tape, comp.weights, p);
        let nor = normal_consistency_loss(&mut tape, batch.grad_sigma, batch.grad_sigma_template, wn, p);
        let smo = smoothness_loss(&mut tape, batch.jacobian, wn, p);
        terms = Some(match terms {
            None => [rec, cor, nor, smo],
            Some([r, c, n, s]) => [
                tape.add(r, rec),
                tape.add(c, cor),
                tape.add(n, nor),
                tape.add(s, smo),
            ],
        });
    }
    let [rec_sum, cor_sum, nor_sum, smo_sum] = terms.expect("nonempty batch");
    let rec = tape.scale_add(rec_sum, inv_b, T::zero());
    let cor = tape.scale_add(cor_sum, inv_b, T::zero());
    let nor = tape.scale_add(nor_sum, inv_b, T::zero());
    let smo = tape.scale_add(smo_sum, inv_b, T::zero());
    let reg = code_regularization(&mut tape, &codes)?;
    let objective = total_objective(&mut tape, rec, reg, cor, nor, smo, config.weights);
    let breakdown = objective.breakdown(&tape, config.weights);
    for (name, value) in [
        ("rec", breakdown.rec),
        ("reg", breakdown.reg),
        ("cor", breakdown.cor),
        ("nor", breakdown.nor),
        ("smo", breakdown.smo),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: format!("loss term {name}"),
            });
        }
    }
    let grads = tape.backward(objective.total)?;
    Ok((breakdown, grads))
}

/// Outcome of one optimization step.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    /// Zero-based index of the step that was just executed.
    pub step: u64,
    pub lr: f64,
    pub objects: Vec<usize>,
    pub breakdown: LossBreakdown,
    pub seconds: f64,
}

/// Run one step: sample a batch, evaluate the objective, and apply Adam
/// updates to the model and the sampled objects' latent codes.
pub fn train_step<T: Real>(state: &mut TrainState<T>, dataset: &[ObjectRecord]) -> Result<StepMetrics> {
    let start = Instant::now();
    let lr = lr_at(&state.config, state.step);
    let plan = plan_batch(&mut state.rng, dataset, &state.config)?;
    let (breakdown, grads) = evaluate_objective(&state.model, &state.latents, &plan, &state.config)?;

    let adam_config = state.config.adam();
    let moments = &mut state.moments;
    state.model.visit_params_mut(&mut |group| {
        let g = grads.get(&group.name).expect("model gradients present");
        let m = moments.get_mut(&group.name).expect("model moments present");
        adam_update(&mut group.values, g, m, lr, adam_config);
    });
    for entry in &plan.entries {
        let pair = &mut state.latents[entry.object];
        for group in [&mut pair.shape_code, &mut pair.appearance_code] {
            let g = grads.get(&group.name).expect("latent gradients present");
            let m = moments.get_mut(&group.name).expect("latent moments present");
            adam_update(&mut group.values, g, m, lr, adam_config);
        }
    }
    let executed = state.step;
    state.step += 1;
    Ok(StepMetrics {
        step: executed,
        lr,
        objects: plan.entries.iter().map(|e| e.object).collect(),
        breakdown,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_family, SyntheticFamilySpec};

    fn tiny_config(objects: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_objects: objects.min(2),
            rays_per_view: 8,
            samples_per_ray: 4,
            max_steps: 10,
            seed,
            precision: Precision::F64,
            model: ModelConfig::tiny(4, 4, 8),
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(instances: usize, seed: u64) -> Vec<ObjectRecord> {
        let spec = SyntheticFamilySpec::toy_chair(instances, 2, 8, seed);
        generate_synthetic_family(&spec).unwrap().0
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let dataset = tiny_dataset(2, 1);
        let config = tiny_config(2, 7);
        let a: TrainState<f64> = init_training(&config, &dataset).unwrap();
        let b: TrainState<f64> = init_training(&config, &dataset).unwrap();
        for (la, lb) in a.latents.iter().zip(&b.latents) {
            assert_eq!(la.shape_code.values, lb.shape_code.values);
            assert_eq!(la.appearance_code.values, lb.appearance_code.values);
        }
        let mut pa = Vec::new();
        a.model.visit_params(&mut |p| pa.push(p.values.clone()));
        let mut pb = Vec::new();
        b.model.visit_params(&mut |p| pb.push(p.values.clone()));
        assert_eq!(pa, pb);
        assert_eq!(a.rng, b.rng);
    }

    #[test]
    fn latent_init_standard_deviation_near_hundredth() {
        let dataset = tiny_dataset(10, 2);
        let mut config = tiny_config(10, 3);
        config.model.shape_dim = 500;
        config.model.appearance_dim = 500;
        let state: TrainState<f64> = init_training(&config, &dataset).unwrap();
        let mut draws = Vec::new();
        for pair in &state.latents {
            draws.extend_from_slice(&pair.shape_code.values);
            draws.extend_from_slice(&pair.appearance_code.values);
        }
        assert_eq!(draws.len(), 10_000);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        let stddev = var.sqrt();
        assert!((stddev - 0.01).abs() / 0.01 < 0.1, "stddev {stddev}");
    }

    #[test]
    fn single_object_dataset_gets_one_latent_pair() {
        let dataset = tiny_dataset(1, 3);
        let mut config = tiny_config(1, 4);
        config.batch_objects = 1;
        let state: TrainState<f64> = init_training(&config, &dataset).unwrap();
        assert_eq!(state.latents.len(), 1);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let config = tiny_config(1, 4);
        assert!(init_training::<f64>(&config, &[]).is_err());
    }

    #[test]
    fn lr_halves_exactly_at_interval_multiples() {
        let config = TrainConfig::default();
        assert_eq!(lr_at(&config, 0), 1e-4);
        assert_eq!(lr_at(&config, 99_999), 1e-4);
        assert_eq!(lr_at(&config, 100_000), 1e-4 / 2.0);
        assert_eq!(lr_at(&config, 200_000), 1e-4 / 4.0);
        assert_eq!(lr_at(&config, 300_000), 1e-4 / 8.0);
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let dataset = tiny_dataset(3, 5);
        let config = tiny_config(3, 11);
        let mut a: TrainState<f64> = init_training(&config, &dataset).unwrap();
        let mut b: TrainState<f64> = init_training(&config, &dataset).unwrap();
        for _ in 0..3 {
            let ma = train_step(&mut a, &dataset).unwrap();
            let mb = train_step(&mut b, &dataset).unwrap();
            assert_eq!(ma.breakdown, mb.breakdown);
            assert_eq!(ma.objects, mb.objects);
            assert_eq!(ma.lr, mb.lr);
        }
    }

    #[test]
    fn unsampled_latents_are_never_touched() {
        let dataset = tiny_dataset(4, 6);
        let mut config = tiny_config(4, 13);
        config.batch_objects = 2;
        let mut state: TrainState<f64> = init_training(&config, &dataset).unwrap();
        let before: Vec<Vec<f64>> = state
            .latents
            .iter()
            .map(|l| l.shape_code.values.clone())
            .collect();
        let metrics = train_step(&mut state, &dataset).unwrap();
        for (i, latent) in state.latents.iter().enumerate() {
            if metrics.objects.contains(&i) {
                assert_ne!(latent.shape_code.values, before[i], "sampled latent {i} must move");
            } else {
                assert_eq!(latent.shape_code.values, before[i], "unsampled latent {i} moved");
            }
        }
    }

    #[test]
    fn reconstruction_improves_during_short_overfit() {
        let dataset = tiny_dataset(1, 7);
        let mut config = tiny_config(1, 17);
        config.batch_objects = 1;
        config.rays_per_view = 16;
        config.lr = 1e-3;
        config.stratified = false;
        let mut state: TrainState<f64> = init_training(&config, &dataset).unwrap();
        let mut first = 0.0;
        let mut sum_early = 0.0;
        let mut sum_late = 0.0;
        for i in 0..40 {
            let m = train_step(&mut state, &dataset).unwrap();
            if i == 0 {
                first = m.breakdown.rec;
            }
            if i < 10 {
                sum_early += m.breakdown.rec;
            }
            if i >= 30 {
                sum_late += m.breakdown.rec;
            }
        }
        assert!(sum_late < sum_early, "rec should trend down from {first}");
    }

    #[test]
    fn objective_gradients_match_finite_differences_on_micro_instance() {
        let spec = SyntheticFamilySpec::toy_chair(2, 1, 4, 19);
        let dataset = generate_synthetic_family(&spec).unwrap().0;
        let mut config = tiny_config(2, 23);
        config.batch_objects = 2;
        config.rays_per_view = 4;
        config.samples_per_ray = 4;
        config.stratified = false;
        let mut state: TrainState<f64> = init_training(&config, &dataset).unwrap();
        let plan = plan_batch(&mut state.rng, &dataset, &config).unwrap();
        let (_, grads) = evaluate_objective(&state.model, &state.latents, &plan, &config).unwrap();

        let names: Vec<String> = {
            let mut v = Vec::new();
            state.model.visit_params(&mut |p| v.push(p.name.clone()));
            v.push(state.latents[0].shape_code.name.clone());
            v.push(state.latents[1].appearance_code.name.clone());
            v
        };
        let h = 1e-6;
        for name in names {
            let len = grads.get(&name).unwrap().len();
            // probe a few entries of each group to bound test time
            for i in [0, len / 2, len - 1] {
                let eval = |delta: f64| -> f64 {
                    let mut model = state.model.clone();
                    let mut latents = state.latents.clone();
                    let mut apply = |group: &mut crate::autodiff::ParamGroup<f64>| {
                        if group.name == name {
                            group.values[i] += delta;
                        }
                    };
                    model.visit_params_mut(&mut apply);
                    for pair in &mut latents {
                        apply(&mut pair.shape_code);
                        apply(&mut pair.appearance_code);
                    }
                    evaluate_objective(&model, &latents, &plan, &config)
                        .unwrap()
                        .0
                        .total
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let g = grads.get(&name).unwrap()[i];
                let abs = (g - fd).abs();
                assert!(
                    abs < 1e-10 || abs / fd.abs().max(1e-8) < 1e-5,
                    "{name}[{i}]: analytic {g} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn config_toml_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(2, 5);
        config.lr = 3e-4;
        config.weights.w3 = 0.25;
        let path = dir.path().join("train.toml");
        config.save(&path).unwrap();
        let loaded = TrainConfig::load(&path).unwrap();
        assert_eq!(loaded, config);
    }

    #[test]
    fn config_defaults_match_training_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.adam_beta1, 0.0);
        assert_eq!(c.adam_beta2, 0.9);
        assert_eq!(c.batch_objects, 5);
        assert_eq!(c.lr_halving_interval, 100_000);
        assert_eq!(
            (c.weights.w1, c.weights.w2, c.weights.w3, c.weights.w4),
            (5e-5, 1e-3, 5e-1, 1e-3)
        );
    }
}
