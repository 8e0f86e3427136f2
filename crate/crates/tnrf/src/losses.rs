//! The five training terms and their weighted total objective.
//!
//! Reconstruction is pixel MSE; code regularization is the mean squared
//! latent norm over the batch; the correction term is the mean absolute
//! density correction over all samples; normal consistency and warp
//! smoothness are weighted means over ray samples using rendering weights
//! normalized per ray. All terms are built on the tape so one backward
//! pass differentiates the full objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to gradient norms before normalization and to per-ray
/// weight sums before division.
pub const NORM_EPSILON: f64 = 1e-8;

/// Multipliers for the four regularization terms; the reconstruction term
/// always has unit weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Code regularization.
    pub w1: f64,
    /// Density correction magnitude.
    pub w2: f64,
    /// Normal consistency.
    pub w3: f64,
    /// Warp smoothness.
    pub w4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w1: 5e-5,
            w2: 1e-3,
            w3: 5e-1,
            w4: 1e-3,
        }
    }
}

/// Scalar values of every term for one step, for logging and assertions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub reg: f64,
    pub cor: f64,
    pub nor: f64,
    pub smo: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Header of the per-step CSV log.
    pub const CSV_HEADER: &'static str = "step,rec,reg,cor,nor,smo,total";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.rec, self.reg, self.cor, self.nor, self.smo, self.total
        )
    }

    /// The defining identity of the breakdown.
    pub fn check(&self) -> Result<()> {
        let expected = self.rec
            + self.weights.w1 * self.reg
            + self.weights.w2 * self.cor
            + self.weights.w3 * self.nor
            + self.weights.w4 * self.smo;
        if (self.total - expected).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "loss breakdown total {} does not match weighted sum {expected}",
                self.total
            )));
        }
        for (name, v) in [
            ("rec", self.rec),
            ("reg", self.reg),
            ("cor", self.cor),
            ("nor", self.nor),
            ("smo", self.smo),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Validation(format!("loss term {name} is negative: {v}")));
            }
        }
        Ok(())
    }
}

/// Mean squared error over pixels and channels; both inputs `[3 x n]`.
pub fn reconstruction_loss<T: Real>(tape: &mut Tape<T>, rendered: Var, target: Var) -> Result<Var> {
    let (a, b) = (tape.value(rendered), tape.value(target));
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::Shape(format!(
            "reconstruction loss expects matching shapes, got {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let diff = tape.sub(rendered, target);
    let sq = tape.mul(diff, diff);
    Ok(tape.mean_all(sq))
}

/// Mean over batch objects of the summed squared latent norms; each entry
/// is one object's `(shape code, appearance code)` pair of column vectors.
pub fn code_regularization<T: Real>(tape: &mut Tape<T>, codes: &[(Var, Var)]) -> Result<Var> {
    if codes.is_empty() {
        return Err(Error::Validation("code regularization needs a nonempty batch".into()));
    }
    let mut acc: Option<Var> = None;
    for &(zs, za) in codes {
        let s2 = tape.mul(zs, zs);
        let a2 = tape.mul(za, za);
        let ssum = tape.sum_all(s2);
        let asum = tape.sum_all(a2);
        let both = tape.add(ssum, asum);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, both),
            None => both,
        });
    }
    let total = acc.expect("nonempty batch");
    Ok(tape.scale_add(total, T::one() / T::from_f64(codes.len() as f64), T::zero()))
}

/// Mean absolute density correction over all sampled points, `[1 x n]`.
pub fn correction_regularization<T: Real>(tape: &mut Tape<T>, delta_sigma: Var) -> Result<Var> {
    if tape.value(delta_sigma).len() == 0 {
        return Err(Error::Validation("correction regularization needs samples".into()));
    }
    let a = tape.abs(delta_sigma);
    Ok(tape.mean_all(a))
}

/// Rendering weights normalized within each ray segment of `samples_per_ray`
/// columns, so every ray's weights sum to at most one regardless of opacity.
pub fn normalize_ray_weights<T: Real>(tape: &mut Tape<T>, weights: Var, samples_per_ray: usize) -> Var {
    let sums = tape.sum_seg(weights, samples_per_ray);
    let denom = tape.max_const(sums, T::from_f64(NORM_EPSILON));
    let inv = tape.recip(denom);
    let spread = tape.repeat_seg(inv, samples_per_ray);
    tape.mul(weights, spread)
}

/// Squared Euclidean column norms of a `[3 x n]` tensor, `[1 x n]`.
fn squared_column_norms<T: Real>(tape: &mut Tape<T>, g: Var) -> Var {
    let sq = tape.mul(g, g);
    tape.col_sum(sq)
}

/// Column norms floored at [`NORM_EPSILON`]. The floor is applied to the
/// squared sums before the root, which leaves the value unchanged but keeps
/// the derivative finite for exactly zero columns.
fn floored_column_norms<T: Real>(tape: &mut Tape<T>, squared: Var) -> Var {
    let eps = T::from_f64(NORM_EPSILON);
    let clamped = tape.max_const(squared, eps * eps);
    tape.sqrt(clamped)
}

fn unit_columns<T: Real>(tape: &mut Tape<T>, g: Var, floored_norms: Var) -> Var {
    let inv = tape.recip(floored_norms);
    tape.mul_row_broadcast(g, inv)
}

/// Weighted mean of per-sample values using per-ray normalized weights:
/// the sum of `value * weight` divided by the number of rays.
fn weighted_sample_mean<T: Real>(
    tape: &mut Tape<T>,
    values: Var,
    normalized_weights: Var,
    samples_per_ray: usize,
) -> Var {
    let rays = tape.value(values).cols / samples_per_ray;
    let prod = tape.mul(values, normalized_weights);
    let total = tape.sum_all(prod);
    tape.scale_add(total, T::one() / T::from_f64(rays as f64), T::zero())
}

/// Weighted mean of `1 - cos(angle)` between instance and template density
/// gradients, `[3 x n]` each; samples where both gradients vanish below the
/// epsilon floor contribute zero.
pub fn normal_consistency_loss<T: Real>(
    tape: &mut Tape<T>,
    grad_sigma: Var,
    grad_sigma_template: Var,
    normalized_weights: Var,
    samples_per_ray: usize,
) -> Var {
    let eps = T::from_f64(NORM_EPSILON);
    let sa = squared_column_norms(tape, grad_sigma);
    let sb = squared_column_norms(tape, grad_sigma_template);
    let na = floored_column_norms(tape, sa);
    let nb = floored_column_norms(tape, sb);
    let ua = unit_columns(tape, grad_sigma, na);
    let ub = unit_columns(tape, grad_sigma_template, nb);
    let prod = tape.mul(ua, ub);
    let dot = tape.col_sum(prod);
    let one_minus = tape.scale_add(dot, -T::one(), T::one());
    // mask out samples where both squared norms are below the floor
    let a_small = {
        let flipped = tape.scale_add(sa, -T::one(), eps * eps);
        tape.step(flipped)
    };
    let b_small = {
        let flipped = tape.scale_add(sb, -T::one(), eps * eps);
        tape.step(flipped)
    };
    let both_small = tape.mul(a_small, b_small);
    let mask = tape.scale_add(both_small, -T::one(), T::one());
    let masked = tape.mul(one_minus, mask);
    weighted_sample_mean(tape, masked, normalized_weights, samples_per_ray)
}

/// Weighted mean of the Frobenius distance between the warp Jacobian and
/// the identity; `jacobians` is `[9 x n]` row-major per column.
pub fn smoothness_loss<T: Real>(
    tape: &mut Tape<T>,
    jacobians: Var,
    normalized_weights: Var,
    samples_per_ray: usize,
) -> Var {
    let n = tape.value(jacobians).cols;
    let identity = {
        let mut t = Tensor::zeros(9, n);
        for r in [0, 4, 8] {
            for v in t.row_mut(r) {
                *v = T::one();
            }
        }
        tape.constant(t)
    };
    let diff = tape.sub(jacobians, identity);
    let sq = tape.mul(diff, diff);
    let sums = tape.col_sum(sq);
    // floor before the root so the derivative stays finite at an exact
    // identity Jacobian, where sqrt has an unbounded slope
    let floored = tape.max_const(sums, T::from_f64(NORM_EPSILON * NORM_EPSILON));
    let fro = tape.sqrt(floored);
    weighted_sample_mean(tape, fro, normalized_weights, samples_per_ray)
}

/// Tape handles for the five terms and the weighted total.
pub struct ObjectiveVars {
    pub rec: Var,
    pub reg: Var,
    pub cor: Var,
    pub nor: Var,
    pub smo: Var,
    pub total: Var,
}

/// Combine the five term scalars into the weighted total objective.
pub fn total_objective<T: Real>(
    tape: &mut Tape<T>,
    rec: Var,
    reg: Var,
    cor: Var,
    nor: Var,
    smo: Var,
    weights: LossWeights,
) -> ObjectiveVars {
    let wreg = tape.scale_add(reg, T::from_f64(weights.w1), T::zero());
    let wcor = tape.scale_add(cor, T::from_f64(weights.w2), T::zero());
    let wnor = tape.scale_add(nor, T::from_f64(weights.w3), T::zero());
    let wsmo = tape.scale_add(smo, T::from_f64(weights.w4), T::zero());
    let s1 = tape.add(rec, wreg);
    let s2 = tape.add(s1, wcor);
    let s3 = tape.add(s2, wnor);
    let total = tape.add(s3, wsmo);
    ObjectiveVars {
        rec,
        reg,
        cor,
        nor,
        smo,
        total,
    }
}

impl ObjectiveVars {
    /// Read the scalar values of every term out of the tape.
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>, weights: LossWeights) -> LossBreakdown {
        let read = |v: Var| tape.value(v).data[0].to_f64();
        LossBreakdown {
            rec: read(self.rec),
            reg: read(self.reg),
            cor: read(self.cor),
            nor: read(self.nor),
            smo: read(self.smo),
            total: read(self.total),
            weights,
        }
    }
}
