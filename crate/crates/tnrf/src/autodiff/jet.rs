//! Forward-mode bundles carrying a value and three spatial tangents.
//!
//! A `Jet3` represents a batched quantity together with its derivatives
//! along the three input coordinates. Every tangent is itself a tape node,
//! so reverse-mode differentiation through spatial derivatives works with a
//! single backward pass.

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};

/// Value plus three directional derivatives, all `[m x n]` tape tensors.
#[derive(Debug, Clone, Copy)]
pub struct Jet3 {
    pub v: Var,
    pub d: [Var; 3],
}

impl Jet3 {
    /// Lift a `[3 x n]` batch of points to a jet with identity tangents:
    /// derivative of coordinate row `r` along axis `k` is `1[r == k]`.
    pub fn input<T: Real>(tape: &mut Tape<T>, points: Var) -> Jet3 {
        let n = tape.value(points).cols;
        let d = std::array::from_fn(|k| {
            let mut t = Tensor::zeros(3, n);
            for v in t.row_mut(k) {
                *v = T::one();
            }
            tape.constant(t)
        });
        Jet3 { v: points, d }
    }

    /// Lift a tensor that does not depend on the spatial input.
    pub fn constant<T: Real>(tape: &mut Tape<T>, v: Var) -> Jet3 {
        let (rows, cols) = {
            let t = tape.value(v);
            (t.rows, t.cols)
        };
        let zero = tape.constant(Tensor::zeros(rows, cols));
        Jet3 {
            v,
            d: [zero, zero, zero],
        }
    }

    pub fn matmul<T: Real>(tape: &mut Tape<T>, w: Var, x: Jet3) -> Jet3 {
        Jet3 {
            v: tape.matmul(w, x.v),
            d: x.d.map(|t| tape.matmul(w, t)),
        }
    }

    pub fn add_col_vec<T: Real>(tape: &mut Tape<T>, x: Jet3, b: Var) -> Jet3 {
        Jet3 {
            v: tape.add_col_vec(x.v, b),
            d: x.d,
        }
    }

    pub fn add<T: Real>(tape: &mut Tape<T>, a: Jet3, b: Jet3) -> Jet3 {
        Jet3 {
            v: tape.add(a.v, b.v),
            d: std::array::from_fn(|k| tape.add(a.d[k], b.d[k])),
        }
    }

    pub fn scale<T: Real>(tape: &mut Tape<T>, x: Jet3, a: T) -> Jet3 {
        Jet3 {
            v: tape.scale_add(x.v, a, T::zero()),
            d: x.d.map(|t| tape.scale_add(t, a, T::zero())),
        }
    }

    /// Column-vector broadcast product with a spatially constant factor.
    pub fn mul_col_factor<T: Real>(tape: &mut Tape<T>, x: Jet3, c: Var) -> Jet3 {
        Jet3 {
            v: tape.mul_col_vec(x.v, c),
            d: x.d.map(|t| tape.mul_col_vec(t, c)),
        }
    }

    /// Elementwise product with a spatially constant factor.
    pub fn mul_const_factor<T: Real>(tape: &mut Tape<T>, x: Jet3, f: Var) -> Jet3 {
        Jet3 {
            v: tape.mul(x.v, f),
            d: x.d.map(|t| tape.mul(t, f)),
        }
    }

    pub fn sin<T: Real>(tape: &mut Tape<T>, x: Jet3) -> Jet3 {
        let c = tape.cos(x.v);
        Jet3 {
            v: tape.sin(x.v),
            d: x.d.map(|t| tape.mul(t, c)),
        }
    }

    pub fn softplus<T: Real>(tape: &mut Tape<T>, x: Jet3) -> Jet3 {
        let s = tape.sigmoid(x.v);
        Jet3 {
            v: tape.softplus(x.v),
            d: x.d.map(|t| tape.mul(t, s)),
        }
    }

    /// `max(x, 0)` with the tangent gated by the active set.
    pub fn relu<T: Real>(tape: &mut Tape<T>, x: Jet3) -> Jet3 {
        let gate = tape.step(x.v);
        Jet3 {
            v: tape.relu(x.v),
            d: x.d.map(|t| tape.mul(t, gate)),
        }
    }

    pub fn slice_rows<T: Real>(tape: &mut Tape<T>, x: Jet3, start: usize, len: usize) -> Jet3 {
        Jet3 {
            v: tape.slice_rows(x.v, start, len),
            d: x.d.map(|t| tape.slice_rows(t, start, len)),
        }
    }
}

/// Spatial gradient of a scalar field: evaluates `field` on a jet-lifted
/// batch of points and returns `(value [1 x n], gradient rows [3 x n])`.
pub fn spatial_gradient<T: Real>(
    tape: &mut Tape<T>,
    points: Var,
    field: impl FnOnce(&mut Tape<T>, Jet3) -> Jet3,
) -> (Var, Var) {
    let jet = Jet3::input(tape, points);
    let out = field(tape, jet);
    let grad = {
        let dxy = tape.concat_rows(out.d[0], out.d[1]);
        tape.concat_rows(dxy, out.d[2])
    };
    (out.v, grad)
}

/// Jacobian of a 3-vector-valued map: returns `(value [3 x n], jacobian [9 x n])`
/// with the jacobian stored row-major per column (J[r][c] at row 3r + c).
pub fn warp_jacobian<T: Real>(
    tape: &mut Tape<T>,
    points: Var,
    warp: impl FnOnce(&mut Tape<T>, Jet3) -> Jet3,
) -> (Var, Var) {
    let jet = Jet3::input(tape, points);
    let out = warp(tape, jet);
    // out.d[c] holds column c of J as a [3 x n] tensor; interleave into rows.
    let mut rows = Vec::with_capacity(9);
    for r in 0..3 {
        for c in 0..3 {
            rows.push(tape.slice_rows(out.d[c], r, 1));
        }
    }
    let mut j = rows[0];
    for &row in &rows[1..] {
        j = tape.concat_rows(j, row);
    }
    (out.v, j)
}
