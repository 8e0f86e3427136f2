//! Sinusoidal layers, FiLM-modulated sinusoidal layers, and the mapping
//! networks that turn latent codes into per-layer frequencies and phases.
//!
//! A FiLM-modulated layer computes `sin(e^gamma (.) w0 (W h + b) + beta)`,
//! with the frequency vector passed through an elementwise exponential so
//! that `gamma = 0` leaves the layer unconditioned and the modulation keeps
//! a usable gradient. Mapping-network output heads start at zero, so
//! training begins at the bare template.

use rand::Rng;

use crate::autodiff::{Jet3, ParamGroup, Real, Tape, Var};

pub const FIRST_LAYER_W0: f64 = 30.0;

/// An affine map `W h + b` with named parameter groups.
#[derive(Debug, Clone)]
pub struct Affine<T> {
    pub weight: ParamGroup<T>,
    pub bias: ParamGroup<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Tape handles for one affine map, valid for a single tape.
#[derive(Debug, Clone, Copy)]
pub struct AffineVars {
    pub w: Var,
    pub b: Var,
}

impl<T: Real> Affine<T> {
    pub fn zeros(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Affine {
            weight: ParamGroup::new(format!("{name}.w"), vec![T::zero(); out_dim * in_dim]),
            bias: ParamGroup::new(format!("{name}.b"), vec![T::zero(); out_dim]),
            in_dim,
            out_dim,
        }
    }

    /// Weights and biases uniform in `[-bound, bound]`.
    pub fn uniform(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
                .collect()
        };
        Affine {
            weight: ParamGroup::new(format!("{name}.w"), draw(out_dim * in_dim)),
            bias: ParamGroup::new(format!("{name}.b"), draw(out_dim)),
            in_dim,
            out_dim,
        }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> AffineVars {
        AffineVars {
            w: tape.param(&self.weight, self.out_dim, self.in_dim),
            b: tape.param(&self.bias, self.out_dim, 1),
        }
    }

    pub fn forward(tape: &mut Tape<T>, vars: AffineVars, h: Var) -> Var {
        let pre = tape.matmul(vars.w, h);
        tape.add_col_vec(pre, vars.b)
    }

    pub fn forward_jet(tape: &mut Tape<T>, vars: AffineVars, h: Jet3) -> Jet3 {
        let pre = Jet3::matmul(tape, vars.w, h);
        Jet3::add_col_vec(tape, pre, vars.b)
    }

    pub fn visit_params(&self, f: &mut impl FnMut(&ParamGroup<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut ParamGroup<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// A sinusoidal layer `sin(w0 (W h + b))`.
#[derive(Debug, Clone)]
pub struct SirenLayer<T> {
    pub affine: Affine<T>,
    pub w0: T,
}

/// Initialize a sinusoidal layer. First layers draw weights uniform in
/// `[-1/in, 1/in]` and apply `w0 = 30`; hidden layers draw uniform in
/// `[-sqrt(6/in)/30, sqrt(6/in)/30]` and apply `w0 = 1`.
pub fn init_siren<T: Real>(
    name: &str,
    in_dim: usize,
    out_dim: usize,
    is_first: bool,
    rng: &mut impl Rng,
) -> SirenLayer<T> {
    let (bound, w0) = if is_first {
        (1.0 / in_dim as f64, FIRST_LAYER_W0)
    } else {
        ((6.0 / in_dim as f64).sqrt() / FIRST_LAYER_W0, 1.0)
    };
    SirenLayer {
        affine: Affine::uniform(name, in_dim, out_dim, bound, rng),
        w0: T::from_f64(w0),
    }
}

/// `sin(w0 (W h + b))`.
pub fn siren_forward<T: Real>(tape: &mut Tape<T>, vars: AffineVars, w0: T, h: Var) -> Var {
    let pre = Affine::forward(tape, vars, h);
    let scaled = tape.scale_add(pre, w0, T::zero());
    tape.sin(scaled)
}

pub fn siren_forward_jet<T: Real>(tape: &mut Tape<T>, vars: AffineVars, w0: T, h: Jet3) -> Jet3 {
    let pre = Affine::forward_jet(tape, vars, h);
    let scaled = Jet3::scale(tape, pre, w0);
    Jet3::sin(tape, scaled)
}

/// `sin(e^gamma (.) w0 (W h + b) + beta)` with `gamma`, `beta` as
/// `[out x 1]` column vectors broadcast over the batch.
pub fn film_siren_forward<T: Real>(
    tape: &mut Tape<T>,
    vars: AffineVars,
    w0: T,
    h: Var,
    gamma: Var,
    beta: Var,
) -> Var {
    let pre = Affine::forward(tape, vars, h);
    let scaled = tape.scale_add(pre, w0, T::zero());
    let freq = tape.exp(gamma);
    let modulated = tape.mul_col_vec(scaled, freq);
    let shifted = tape.add_col_vec(modulated, beta);
    tape.sin(shifted)
}

pub fn film_siren_forward_jet<T: Real>(
    tape: &mut Tape<T>,
    vars: AffineVars,
    w0: T,
    h: Jet3,
    gamma: Var,
    beta: Var,
) -> Jet3 {
    let pre = Affine::forward_jet(tape, vars, h);
    let scaled = Jet3::scale(tape, pre, w0);
    let freq = tape.exp(gamma);
    let modulated = Jet3::mul_col_factor(tape, scaled, freq);
    let shifted = Jet3::add_col_vec(tape, modulated, beta);
    Jet3::sin(tape, shifted)
}

/// Per-conditioned-layer frequency and phase vectors, each `[width x 1]`.
#[derive(Debug, Clone)]
pub struct FilmParams {
    pub gamma: Vec<Var>,
    pub beta: Vec<Var>,
}

pub const MAPPING_LEAKY_SLOPE: f64 = 0.2;

/// Latent code to FiLM parameters: a small rectifier MLP with one zero-
/// initialized `(gamma, beta)` head per conditioned layer.
#[derive(Debug, Clone)]
pub struct MappingNetwork<T> {
    pub layers: Vec<Affine<T>>,
    pub heads: Vec<Affine<T>>,
    pub latent_dim: usize,
    pub conditioned_widths: Vec<usize>,
}

/// Tape handles for a mapping network.
pub struct MappingVars {
    layers: Vec<AffineVars>,
    heads: Vec<AffineVars>,
}

impl<T: Real> MappingNetwork<T> {
    pub fn new(
        name: &str,
        latent_dim: usize,
        hidden: usize,
        depth: usize,
        conditioned_widths: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut in_dim = latent_dim;
        for i in 0..depth {
            let bound = (1.0 / in_dim as f64).sqrt();
            layers.push(Affine::uniform(
                &format!("{name}.layer{i}"),
                in_dim,
                hidden,
                bound,
                rng,
            ));
            in_dim = hidden;
        }
        let heads = conditioned_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| Affine::zeros(&format!("{name}.head{i}"), hidden, 2 * w))
            .collect();
        MappingNetwork {
            layers,
            heads,
            latent_dim,
            conditioned_widths: conditioned_widths.to_vec(),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> MappingVars {
        MappingVars {
            layers: self.layers.iter().map(|l| l.register(tape)).collect(),
            heads: self.heads.iter().map(|h| h.register(tape)).collect(),
        }
    }

    pub fn visit_params(&self, f: &mut impl FnMut(&ParamGroup<T>)) {
        for l in &self.layers {
            l.visit_params(f);
        }
        for h in &self.heads {
            h.visit_params(f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut ParamGroup<T>)) {
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
        for h in &mut self.heads {
            h.visit_params_mut(f);
        }
    }

    /// Evaluate the mapping network on a `[latent_dim x 1]` code.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &MappingVars, z: Var) -> FilmParams {
        let slope = T::from_f64(MAPPING_LEAKY_SLOPE);
        let mut h = z;
        for lv in &vars.layers {
            let pre = Affine::forward(tape, *lv, h);
            h = tape.leaky_relu(pre, slope);
        }
        let mut gamma = Vec::with_capacity(self.heads.len());
        let mut beta = Vec::with_capacity(self.heads.len());
        for (hv, &w) in vars.heads.iter().zip(&self.conditioned_widths) {
            let out = Affine::forward(tape, *hv, h);
            gamma.push(tape.slice_rows(out, 0, w));
            beta.push(tape.slice_rows(out, w, w));
        }
        FilmParams { gamma, beta }
    }
}
