//! Composition of the template field, appearance conditioning, deformation
//! field, and density-correction field into per-instance density/radiance
//! functions.
//!
//! The template trunk is a plain sinusoidal stack on 3D position with an
//! affine density head under a softplus. A FiLM-conditioned radiance branch
//! consumes trunk features with the view direction appended at its first
//! layer. The shape branch is a FiLM-conditioned sinusoidal stack on the
//! raw position whose two affine heads emit the warp offset and the signed
//! density correction; both heads start at zero so every instance begins
//! as the template.

use nalgebra::Vector3;
use rand::Rng;

use crate::autodiff::{Jet3, ParamGroup, Real, Tape, Tensor, Var};
use crate::film_siren::{
    film_siren_forward, film_siren_forward_jet, init_siren, siren_forward, siren_forward_jet,
    Affine, AffineVars, FilmParams, MappingNetwork, MappingVars, SirenLayer,
};

/// Network and latent sizes. The defaults fit desk-scale training; tests
/// shrink them freely.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub shape_dim: usize,
    pub appearance_dim: usize,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    pub radiance_width: usize,
    pub radiance_depth: usize,
    pub shape_head_width: usize,
    pub shape_head_depth: usize,
    pub mapping_hidden: usize,
    pub mapping_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            shape_dim: 128,
            appearance_dim: 128,
            trunk_width: 128,
            trunk_depth: 5,
            radiance_width: 128,
            radiance_depth: 2,
            shape_head_width: 128,
            shape_head_depth: 4,
            mapping_hidden: 256,
            mapping_depth: 3,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and micro gradient checks.
    pub fn tiny(shape_dim: usize, appearance_dim: usize, width: usize) -> Self {
        ModelConfig {
            shape_dim,
            appearance_dim,
            trunk_width: width,
            trunk_depth: 2,
            radiance_width: width,
            radiance_depth: 2,
            shape_head_width: width,
            shape_head_depth: 2,
            mapping_hidden: width,
            mapping_depth: 2,
        }
    }
}

/// Per-object shape and appearance codes, stored as parameter groups so the
/// trainer can optimize them directly.
#[derive(Debug, Clone)]
pub struct LatentPair<T> {
    pub shape_code: ParamGroup<T>,
    pub appearance_code: ParamGroup<T>,
}

impl<T: Real> LatentPair<T> {
    pub fn new(object_index: usize, shape: Vec<T>, appearance: Vec<T>) -> Self {
        LatentPair {
            shape_code: ParamGroup::new(format!("latent.{object_index}.shape"), shape),
            appearance_code: ParamGroup::new(format!("latent.{object_index}.appearance"), appearance),
        }
    }
}

/// All trainable parameters of the field networks.
#[derive(Debug, Clone)]
pub struct FieldModel<T> {
    pub config: ModelConfig,
    pub trunk: Vec<SirenLayer<T>>,
    pub density_head: Affine<T>,
    pub radiance_layers: Vec<SirenLayer<T>>,
    pub radiance_head: Affine<T>,
    pub appearance_map: MappingNetwork<T>,
    pub shape_layers: Vec<SirenLayer<T>>,
    pub shape_map: MappingNetwork<T>,
    pub deform_head: Affine<T>,
    pub correction_head: Affine<T>,
}

/// Tape handles for every parameter group of a [`FieldModel`].
pub struct FieldVars {
    pub trunk: Vec<AffineVars>,
    pub density_head: AffineVars,
    pub radiance_layers: Vec<AffineVars>,
    pub radiance_head: AffineVars,
    pub appearance_map: MappingVars,
    pub shape_layers: Vec<AffineVars>,
    pub shape_map: MappingVars,
    pub deform_head: AffineVars,
    pub correction_head: AffineVars,
}

/// FiLM parameters for one object's pair of latent codes.
pub struct Conditioning {
    pub shape_film: FilmParams,
    pub appearance_film: FilmParams,
}

impl<T: Real> FieldModel<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Self {
        let c = &config;
        let mut trunk = Vec::with_capacity(c.trunk_depth);
        for i in 0..c.trunk_depth {
            let in_dim = if i == 0 { 3 } else { c.trunk_width };
            trunk.push(init_siren(
                &format!("trunk.{i}"),
                in_dim,
                c.trunk_width,
                i == 0,
                rng,
            ));
        }
        let density_head = Affine::uniform(
            "density_head",
            c.trunk_width,
            1,
            (6.0 / c.trunk_width as f64).sqrt() / 30.0,
            rng,
        );
        let mut radiance_layers = Vec::with_capacity(c.radiance_depth);
        for i in 0..c.radiance_depth {
            let in_dim = if i == 0 {
                c.trunk_width + 3
            } else {
                c.radiance_width
            };
            radiance_layers.push(init_siren(
                &format!("radiance.{i}"),
                in_dim,
                c.radiance_width,
                false,
                rng,
            ));
        }
        let radiance_head = Affine::uniform(
            "radiance_head",
            c.radiance_width,
            3,
            (6.0 / c.radiance_width as f64).sqrt() / 30.0,
            rng,
        );
        let appearance_map = MappingNetwork::new(
            "appearance_map",
            c.appearance_dim,
            c.mapping_hidden,
            c.mapping_depth,
            &vec![c.radiance_width; c.radiance_depth],
            rng,
        );
        let mut shape_layers = Vec::with_capacity(c.shape_head_depth);
        for i in 0..c.shape_head_depth {
            let in_dim = if i == 0 { 3 } else { c.shape_head_width };
            shape_layers.push(init_siren(
                &format!("shape.{i}"),
                in_dim,
                c.shape_head_width,
                i == 0,
                rng,
            ));
        }
        let shape_map = MappingNetwork::new(
            "shape_map",
            c.shape_dim,
            c.mapping_hidden,
            c.mapping_depth,
            &vec![c.shape_head_width; c.shape_head_depth],
            rng,
        );
        // zero heads: identity warp and zero correction at initialization
        let deform_head = Affine::zeros("deform_head", c.shape_head_width, 3);
        let correction_head = Affine::zeros("correction_head", c.shape_head_width, 1);
        FieldModel {
            config,
            trunk,
            density_head,
            radiance_layers,
            radiance_head,
            appearance_map,
            shape_layers,
            shape_map,
            deform_head,
            correction_head,
        }
    }

    pub fn visit_params(&self, f: &mut impl FnMut(&ParamGroup<T>)) {
        for l in &self.trunk {
            l.affine.visit_params(f);
        }
        self.density_head.visit_params(f);
        for l in &self.radiance_layers {
            l.affine.visit_params(f);
        }
        self.radiance_head.visit_params(f);
        self.appearance_map.visit_params(f);
        for l in &self.shape_layers {
            l.affine.visit_params(f);
        }
        self.shape_map.visit_params(f);
        self.deform_head.visit_params(f);
        self.correction_head.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut ParamGroup<T>)) {
        for l in &mut self.trunk {
            l.affine.visit_params_mut(f);
        }
        self.density_head.visit_params_mut(f);
        for l in &mut self.radiance_layers {
            l.affine.visit_params_mut(f);
        }
        self.radiance_head.visit_params_mut(f);
        self.appearance_map.visit_params_mut(f);
        for l in &mut self.shape_layers {
            l.affine.visit_params_mut(f);
        }
        self.shape_map.visit_params_mut(f);
        self.deform_head.visit_params_mut(f);
        self.correction_head.visit_params_mut(f);
    }

    pub fn register(&self, tape: &mut Tape<T>) -> FieldVars {
        FieldVars {
            trunk: self.trunk.iter().map(|l| l.affine.register(tape)).collect(),
            density_head: self.density_head.register(tape),
            radiance_layers: self
                .radiance_layers
                .iter()
                .map(|l| l.affine.register(tape))
                .collect(),
            radiance_head: self.radiance_head.register(tape),
            appearance_map: self.appearance_map.register(tape),
            shape_layers: self
                .shape_layers
                .iter()
                .map(|l| l.affine.register(tape))
                .collect(),
            shape_map: self.shape_map.register(tape),
            deform_head: self.deform_head.register(tape),
            correction_head: self.correction_head.register(tape),
        }
    }

    /// FiLM parameters for one object given `[dim x 1]` latent code vars.
    pub fn condition(
        &self,
        tape: &mut Tape<T>,
        vars: &FieldVars,
        z_shape: Var,
        z_appearance: Var,
    ) -> Conditioning {
        Conditioning {
            shape_film: self.shape_map.forward(tape, &vars.shape_map, z_shape),
            appearance_film: self
                .appearance_map
                .forward(tape, &vars.appearance_map, z_appearance),
        }
    }

    /// Shape branch features for a jet-lifted batch of positions.
    fn shape_features_jet(
        &self,
        tape: &mut Tape<T>,
        vars: &FieldVars,
        cond: &Conditioning,
        x: Jet3,
    ) -> Jet3 {
        let mut h = x;
        for (i, (layer, lv)) in self.shape_layers.iter().zip(&vars.shape_layers).enumerate() {
            h = film_siren_forward_jet(
                tape,
                *lv,
                layer.w0,
                h,
                cond.shape_film.gamma[i],
                cond.shape_film.beta[i],
            );
        }
        h
    }

    fn shape_features(
        &self,
        tape: &mut Tape<T>,
        vars: &FieldVars,
        cond: &Conditioning,
        x: Var,
    ) -> Var {
        let mut h = x;
        for (i, (layer, lv)) in self.shape_layers.iter().zip(&vars.shape_layers).enumerate() {
            h = film_siren_forward(
                tape,
                *lv,
                layer.w0,
                h,
                cond.shape_film.gamma[i],
                cond.shape_film.beta[i],
            );
        }
        h
    }

    /// Warp a jet batch: returns `(warped, offset)` where
    /// `warped = x + offset` and the jet tangents carry the warp Jacobian.
    pub fn warp_jet(
        &self,
        tape: &mut Tape<T>,
        vars: &FieldVars,
        cond: &Conditioning,
        x: Jet3,
    ) -> (Jet3, Jet3) {
        let feats = self.shape_features_jet(tape, vars, cond, x);
        let offset = Jet3 {
            v: Affine::forward(tape, vars.deform_head, feats.v),
            d: feats.d.map(|t| tape.matmul(vars.deform_head.w, t)),
        };
        let warped = Jet3::add(tape, x, offset);
        (warped, offset)
    }

    /// Warp a `[3 x n]` batch without tangents.
    pub fn warp_batch(
        &self,
        tape: &mut Tape<T>,
        vars: &FieldVars,
        cond: &Conditioning,
        x: Var,
    ) -> (Var, Var) {
        let feats = self.shape_features(tape, vars, cond, x);
        let offset = Affine::forward(tape, vars.deform_head, feats);
        let warped = tape.add(x, offset);
        (warped, offset)
    }

    /// Trunk features for template-space positions.
    fn trunk_features(&self, tape: &mut Tape<T>, vars: &FieldVars, x_tau: Var) -> Var {
        let mut h = x_tau;
        for (layer, lv) in self.trunk.iter().zip(&vars.trunk) {
            h = siren_forward(tape, *lv, layer.w0, h);
        }
        h
    }

    fn trunk_features_jet(&self, tape: &mut Tape<T>, vars: &FieldVars, x_tau: Jet3) -> Jet3 {
        let mut h = x_tau;
        for (layer, lv) in self.trunk.iter().zip(&vars.trunk) {
            h = siren_forward_jet(tape, *lv, layer.w0, h);
        }
        h
    }

    /// Template density `softplus(density_head(trunk(x_tau)))` at
    /// template-space positions, `[1 x n]`.
    pub fn template_density_batch(&self, tape: &mut Tape<T>, vars: &FieldVars, x_tau: Var) -> Var {
        let feats = self.trunk_features(tape, vars, x_tau);
        let pre = Affine::forward(tape, vars.density_head, feats);
        tape.softplus(pre)
    }

    /// Radiance in `[0,1]` given trunk features and view directions.
    fn radiance_from_features(
        &self,
        tape: &mut Tape<T>,
        vars: &FieldVars,
        cond: &Conditioning,
        trunk_feats: Var,
        dirs: Var,
    ) -> Var {
        let mut h = tape.concat_rows(trunk_feats, dirs);
        for (i, (layer, lv)) in self
            .radiance_layers
            .iter()
            .zip(&vars.radiance_layers)
            .enumerate()
        {
            h = film_siren_forward(
                tape,
                *lv,
                layer.w0,
                h,
                cond.appearance_film.gamma[i],
                cond.appearance_film.beta[i],
            );
        }
        let pre = Affine::forward(tape, vars.radiance_head, h);
        tape.sigmoid(pre)
    }

    /// Density-only instance evaluation (no spatial tangents): returns
    /// `(sigma, sigma_template, delta_sigma, warped)`.
    pub fn instance_density_batch(
        &self,
        tape: &mut Tape<T>,
        vars: &FieldVars,
        cond: &Conditioning,
        x: Var,
    ) -> (Var, Var, Var, Var) {
        let feats = self.shape_features(tape, vars, cond, x);
        let offset = Affine::forward(tape, vars.deform_head, feats);
        let warped = tape.add(x, offset);
        let delta_sigma = Affine::forward(tape, vars.correction_head, feats);
        let sigma_tau = self.template_density_batch(tape, vars, warped);
        let pre = tape.add(sigma_tau, delta_sigma);
        let sigma = tape.relu(pre);
        (sigma, sigma_tau, delta_sigma, warped)
    }

    /// Full instance evaluation (no spatial tangents): returns
    /// `(sigma, color)` for positions `x` and unit directions `dirs`.
    pub fn instance_eval_batch(
        &self,
        tape: &mut Tape<T>,
        vars: &FieldVars,
        cond: &Conditioning,
        x: Var,
        dirs: Var,
    ) -> (Var, Var) {
        let feats = self.shape_features(tape, vars, cond, x);
        let offset = Affine::forward(tape, vars.deform_head, feats);
        let warped = tape.add(x, offset);
        let delta_sigma = Affine::forward(tape, vars.correction_head, feats);
        let trunk_feats = self.trunk_features(tape, vars, warped);
        let pre_density = Affine::forward(tape, vars.density_head, trunk_feats);
        let sigma_tau = tape.softplus(pre_density);
        let pre = tape.add(sigma_tau, delta_sigma);
        let sigma = tape.relu(pre);
        let color = self.radiance_from_features(tape, vars, cond, trunk_feats, dirs);
        (sigma, color)
    }

    /// Full training-time evaluation with spatial derivatives.
    pub fn instance_eval_jet(
        &self,
        tape: &mut Tape<T>,
        vars: &FieldVars,
        cond: &Conditioning,
        x: Var,
        dirs: Var,
    ) -> InstanceSampleBatch {
        let xj = Jet3::input(tape, x);
        let feats = self.shape_features_jet(tape, vars, cond, xj);
        let offset = Jet3 {
            v: Affine::forward(tape, vars.deform_head, feats.v),
            d: feats.d.map(|t| tape.matmul(vars.deform_head.w, t)),
        };
        let warped = Jet3::add(tape, xj, offset);
        let delta_sigma = Jet3 {
            v: Affine::forward(tape, vars.correction_head, feats.v),
            d: feats.d.map(|t| tape.matmul(vars.correction_head.w, t)),
        };

        // template trunk with fresh identity tangents in template space
        let xt = Jet3::input(tape, warped.v);
        let trunk_feats = self.trunk_features_jet(tape, vars, xt);
        let pre_density = Affine::forward_jet(tape, vars.density_head, trunk_feats);
        let sigma_tau = Jet3::softplus(tape, pre_density);
        let grad_sigma_tau = stack_rows(tape, &sigma_tau.d);

        // chain rule: grad sigma = gate (J^T grad sigma_tau + grad delta)
        let mut jt_rows = Vec::with_capacity(3);
        for k in 0..3 {
            let prod = tape.mul(warped.d[k], grad_sigma_tau);
            jt_rows.push(tape.col_sum(prod));
        }
        let jt_grad = stack_rows(tape, &jt_rows);
        let grad_delta = stack_rows(tape, &delta_sigma.d);
        let grad_pre = tape.add(jt_grad, grad_delta);

        let pre = tape.add(sigma_tau.v, delta_sigma.v);
        let sigma = tape.relu(pre);
        let gate = tape.step(pre);
        let grad_sigma = tape.mul_row_broadcast(grad_pre, gate);

        // jacobian of the warp, row-major per column: J[r][c] at row 3r + c
        let mut j_rows = Vec::with_capacity(9);
        for r in 0..3 {
            for c in 0..3 {
                j_rows.push(tape.slice_rows(warped.d[c], r, 1));
            }
        }
        let jacobian = stack_rows(tape, &j_rows);

        let color = self.radiance_from_features(tape, vars, cond, trunk_feats.v, dirs);

        InstanceSampleBatch {
            sigma,
            sigma_template: sigma_tau.v,
            delta_sigma: delta_sigma.v,
            warped: warped.v,
            offset: offset.v,
            color,
            jacobian,
            grad_sigma,
            grad_sigma_template: grad_sigma_tau,
        }
    }
}

/// Tape handles for a fully evaluated batch of instance samples.
pub struct InstanceSampleBatch {
    /// Composite density `max(0, sigma_tau + delta_sigma)`, `[1 x n]`.
    pub sigma: Var,
    pub sigma_template: Var,
    pub delta_sigma: Var,
    pub warped: Var,
    pub offset: Var,
    /// RGB in `[0,1]`, `[3 x n]`.
    pub color: Var,
    /// Warp Jacobian, `[9 x n]` row-major per column.
    pub jacobian: Var,
    /// Spatial gradient of the composite density, `[3 x n]`.
    pub grad_sigma: Var,
    /// Spatial gradient of the template density at the warped point, `[3 x n]`.
    pub grad_sigma_template: Var,
}

fn stack_rows<T: Real>(tape: &mut Tape<T>, rows: &[Var]) -> Var {
    let mut acc = rows[0];
    for &r in &rows[1..] {
        acc = tape.concat_rows(acc, r);
    }
    acc
}

/// Pack a point list into a `[3 x n]` tensor.
pub fn points_tensor<T: Real>(points: &[Vector3<f64>]) -> Tensor<T> {
    let n = points.len();
    let mut t = Tensor::zeros(3, n);
    for (i, p) in points.iter().enumerate() {
        for r in 0..3 {
            *t.at_mut(r, i) = T::from_f64(p[r]);
        }
    }
    t
}

/// Unpack a `[3 x n]` tensor into a point list.
pub fn tensor_points<T: Real>(t: &Tensor<T>) -> Vec<Vector3<f64>> {
    (0..t.cols)
        .map(|i| Vector3::new(t.at(0, i).to_f64(), t.at(1, i).to_f64(), t.at(2, i).to_f64()))
        .collect()
}

const EVAL_CHUNK: usize = 4096;

impl<T: Real> FieldModel<T> {
    /// Warp points through the deformation field: `(warped, offset)` pairs.
    pub fn warp_points(
        &self,
        points: &[Vector3<f64>],
        z_shape: &[T],
    ) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let vars = self.register(&mut tape);
            let zs = tape.constant(Tensor::from_vec(z_shape.len(), 1, z_shape.to_vec()));
            let za = tape.constant(Tensor::zeros(self.config.appearance_dim, 1));
            let cond = self.condition(&mut tape, &vars, zs, za);
            let x = tape.constant(points_tensor(chunk));
            let (warped, offset) = self.warp_batch(&mut tape, &vars, &cond, x);
            let w = tensor_points(tape.value(warped));
            let o = tensor_points(tape.value(offset));
            out.extend(w.into_iter().zip(o));
        }
        out
    }

    /// Template density at template-space points.
    pub fn template_density_points(&self, points: &[Vector3<f64>]) -> Vec<f64> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let vars = self.register(&mut tape);
            let x = tape.constant(points_tensor(chunk));
            let sigma = self.template_density_batch(&mut tape, &vars, x);
            out.extend(tape.value(sigma).data.iter().map(|&v| Real::to_f64(v)));
        }
        out
    }

    /// Composite instance density at object-space points.
    pub fn instance_density_points(&self, points: &[Vector3<f64>], z_shape: &[T]) -> Vec<f64> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let vars = self.register(&mut tape);
            let zs = tape.constant(Tensor::from_vec(z_shape.len(), 1, z_shape.to_vec()));
            let za = tape.constant(Tensor::zeros(self.config.appearance_dim, 1));
            let cond = self.condition(&mut tape, &vars, zs, za);
            let x = tape.constant(points_tensor(chunk));
            let (sigma, ..) = self.instance_density_batch(&mut tape, &vars, &cond, x);
            out.extend(tape.value(sigma).data.iter().map(|&v| Real::to_f64(v)));
        }
        out
    }

    /// Composite density and radiance at object-space points with unit view
    /// directions, in one pass.
    pub fn instance_points(
        &self,
        points: &[Vector3<f64>],
        dirs: &[Vector3<f64>],
        z_shape: &[T],
        z_appearance: &[T],
    ) -> (Vec<f64>, Vec<[f64; 3]>) {
        assert_eq!(points.len(), dirs.len());
        let mut sigmas = Vec::with_capacity(points.len());
        let mut colors = Vec::with_capacity(points.len());
        for (pc, dc) in points.chunks(EVAL_CHUNK).zip(dirs.chunks(EVAL_CHUNK)) {
            let mut tape = Tape::new();
            let vars = self.register(&mut tape);
            let zs = tape.constant(Tensor::from_vec(z_shape.len(), 1, z_shape.to_vec()));
            let za = tape.constant(Tensor::from_vec(
                z_appearance.len(),
                1,
                z_appearance.to_vec(),
            ));
            let cond = self.condition(&mut tape, &vars, zs, za);
            let x = tape.constant(points_tensor(pc));
            let d = tape.constant(points_tensor(dc));
            let (sigma, color) = self.instance_eval_batch(&mut tape, &vars, &cond, x, d);
            sigmas.extend(tape.value(sigma).data.iter().map(|&v| Real::to_f64(v)));
            let cv = tape.value(color);
            for i in 0..cv.cols {
                colors.push([
                    cv.at(0, i).to_f64(),
                    cv.at(1, i).to_f64(),
                    cv.at(2, i).to_f64(),
                ]);
            }
        }
        (sigmas, colors)
    }

    /// Instance radiance at object-space points with unit view directions.
    pub fn instance_radiance_points(
        &self,
        points: &[Vector3<f64>],
        dirs: &[Vector3<f64>],
        z_shape: &[T],
        z_appearance: &[T],
    ) -> Vec<[f64; 3]> {
        assert_eq!(points.len(), dirs.len());
        let mut out = Vec::with_capacity(points.len());
        for (pc, dc) in points.chunks(EVAL_CHUNK).zip(dirs.chunks(EVAL_CHUNK)) {
            let mut tape = Tape::new();
            let vars = self.register(&mut tape);
            let zs = tape.constant(Tensor::from_vec(z_shape.len(), 1, z_shape.to_vec()));
            let za = tape.constant(Tensor::from_vec(
                z_appearance.len(),
                1,
                z_appearance.to_vec(),
            ));
            let cond = self.condition(&mut tape, &vars, zs, za);
            let x = tape.constant(points_tensor(pc));
            let d = tape.constant(points_tensor(dc));
            let (_sigma, color) = self.instance_eval_batch(&mut tape, &vars, &cond, x, d);
            let cv = tape.value(color);
            for i in 0..cv.cols {
                out.push([
                    cv.at(0, i).to_f64(),
                    cv.at(1, i).to_f64(),
                    cv.at(2, i).to_f64(),
                ]);
            }
        }
        out
    }
}
