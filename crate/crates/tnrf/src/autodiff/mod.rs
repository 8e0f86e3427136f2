//! Differentiation engine: reverse-mode tape over dense tensors and
//! forward-mode spatial jets built on top of it.

mod jet;
mod tape;
mod tensor;

pub use jet::{spatial_gradient, warp_jacobian, Jet3};
pub use tape::{Gradients, ParamGroup, Tape, Var};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn finite_diff_loss(
        build: &dyn Fn(&mut Tape<f64>, &[ParamGroup<f64>]) -> Var,
        groups: &[ParamGroup<f64>],
    ) -> Vec<Vec<f64>> {
        let step = 1e-5;
        let mut out = Vec::new();
        for gi in 0..groups.len() {
            let mut grads = vec![0.0; groups[gi].values.len()];
            for pi in 0..groups[gi].values.len() {
                let eval = |delta: f64| {
                    let mut gs: Vec<ParamGroup<f64>> = groups.to_vec();
                    gs[gi].values[pi] += delta;
                    let mut tape = Tape::new();
                    let loss = build(&mut tape, &gs);
                    tape.value(loss).data[0]
                };
                grads[pi] = (eval(step) - eval(-step)) / (2.0 * step);
            }
            out.push(grads);
        }
        out
    }

    fn check_grads(
        build: impl Fn(&mut Tape<f64>, &[ParamGroup<f64>]) -> Var,
        groups: &[ParamGroup<f64>],
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, groups);
        let grads = tape.backward(loss).expect("backward");
        let fd = finite_diff_loss(&build, groups);
        for (gi, group) in groups.iter().enumerate() {
            let analytic = grads.get(&group.name).expect("grad present");
            for (pi, (&a, &f)) in analytic.iter().zip(&fd[gi]).enumerate() {
                let denom = f.abs().max(1e-8);
                assert!(
                    ((a - f) / denom).abs() < tol,
                    "group {} param {}: analytic {} vs fd {}",
                    group.name,
                    pi,
                    a,
                    f
                );
            }
        }
    }

    #[test]
    fn squared_norm_gradient() {
        // loss = ||v||^2 for v = (1, 2) -> grad (2, 4)
        let v = ParamGroup::new("v", vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let var = tape.param(&v, 2, 1);
        let sq = tape.mul(var, var);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("v").unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn film_frequency_atom_gradient() {
        // loss = sin(e^gamma * h) at gamma = 0, h = pi -> d/dgamma = -pi
        let gamma = ParamGroup::new("gamma", vec![0.0]);
        let mut tape = Tape::new();
        let g = tape.param(&gamma, 1, 1);
        let eg = tape.exp(g);
        let h = tape.constant_scalar(std::f64::consts::PI);
        let prod = tape.mul(eg, h);
        let loss = tape.sin(prod);
        let grads = tape.backward(loss).unwrap();
        assert_relative_eq!(
            grads.get("gamma").unwrap()[0],
            -std::f64::consts::PI,
            max_relative = 1e-12
        );
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng_state = 0x1234_5678_u64;
        let mut next = || {
            // xorshift, deterministic test fixture
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state as f64 / u64::MAX as f64) - 0.5
        };
        let w1 = ParamGroup::new("w1", (0..12).map(|_| next()).collect());
        let b1 = ParamGroup::new("b1", (0..4).map(|_| next()).collect());
        let w2 = ParamGroup::new("w2", (0..4).map(|_| next()).collect());
        let groups = vec![w1, b1, w2];
        let input: Vec<f64> = (0..6).map(|_| next()).collect();

        let build = move |tape: &mut Tape<f64>, gs: &[ParamGroup<f64>]| {
            let w1 = tape.param(&gs[0], 4, 3);
            let b1 = tape.param(&gs[1], 4, 1);
            let w2 = tape.param(&gs[2], 1, 4);
            let x = tape.constant(Tensor::from_vec(3, 2, input.clone()));
            let pre = tape.matmul(w1, x);
            let pre = tape.add_col_vec(pre, b1);
            let h = tape.sin(pre);
            let out = tape.matmul(w2, h);
            let sq = tape.mul(out, out);
            tape.mean_all(sq)
        };
        check_grads(build, &groups, 1e-5);
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        // exercise softplus, sigmoid, exp, abs, sqrt/max guards, broadcasts,
        // segmented cumulative product, and reductions in one graph
        let p = ParamGroup::new("p", vec![0.3, -0.7, 1.2, 0.05, -1.4, 0.9]);
        let groups = vec![p];
        let build = |tape: &mut Tape<f64>, gs: &[ParamGroup<f64>]| {
            let p = tape.param(&gs[0], 1, 6);
            let sp = tape.softplus(p);
            let sg = tape.sigmoid(p);
            let mixed = tape.mul(sp, sg);
            let e = tape.scale_add(mixed, -0.5, 0.0);
            let f = tape.exp(e);
            let trans = tape.exclusive_cumprod_seg(f, 3);
            let a = tape.abs(p);
            let prod = tape.mul_row_broadcast(trans, a);
            let sums = tape.sum_seg(prod, 3);
            let sq = tape.mul(sums, sums);
            let total = tape.sum_all(sq);
            let safe = tape.max_const(total, 1e-12);
            tape.sqrt(safe)
        };
        check_grads(build, &groups, 1e-5);
    }

    #[test]
    fn spatial_gradient_of_dot_product() {
        // field(x) = x . x -> grad 2x
        let mut tape: Tape<f64> = Tape::new();
        let pts = tape.constant(Tensor::from_vec(3, 2, vec![1.0, 0.5, -2.0, 0.0, 3.0, 1.5]));
        let (_v, grad) = spatial_gradient(&mut tape, pts, |tape, jet| {
            let sq = Jet3 {
                v: tape.mul(jet.v, jet.v),
                d: std::array::from_fn(|k| {
                    let two_x = tape.scale_add(jet.v, 2.0, 0.0);
                    tape.mul(jet.d[k], two_x)
                }),
            };
            Jet3 {
                v: tape.col_sum(sq.v),
                d: sq.d.map(|t| tape.col_sum(t)),
            }
        });
        let g = tape.value(grad);
        for (i, expected) in [2.0, 1.0, -4.0, 0.0, 6.0, 3.0].iter().enumerate() {
            assert_relative_eq!(g.data[i], expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn spatial_gradient_of_siren_unit() {
        // sin(w . x + b) -> grad cos(w . x + b) * w
        let w = [0.7, -1.3, 2.1];
        let b = 0.4;
        let x = [0.2, -0.9, 0.5];
        let mut tape: Tape<f64> = Tape::new();
        let pts = tape.constant(Tensor::from_vec(3, 1, x.to_vec()));
        let wmat = tape.constant(Tensor::from_vec(1, 3, w.to_vec()));
        let bvec = tape.constant(Tensor::from_vec(1, 1, vec![b]));
        let (_v, grad) = spatial_gradient(&mut tape, pts, |tape, jet| {
            let pre = Jet3::matmul(tape, wmat, jet);
            let pre = Jet3::add_col_vec(tape, pre, bvec);
            Jet3::sin(tape, pre)
        });
        let dot: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + b;
        let g = tape.value(grad);
        for k in 0..3 {
            assert_relative_eq!(g.data[k], dot.cos() * w[k], max_relative = 1e-10);
        }
    }

    #[test]
    fn spatial_gradient_is_linear_in_fields() {
        let mut tape: Tape<f64> = Tape::new();
        let pts = tape.constant(Tensor::from_vec(3, 1, vec![0.3, -0.2, 0.8]));
        let w1 = tape.constant(Tensor::from_vec(1, 3, vec![1.0, 2.0, -1.0]));
        let w2 = tape.constant(Tensor::from_vec(1, 3, vec![-0.5, 0.3, 0.9]));
        let eval = |tape: &mut Tape<f64>, pts, w| {
            spatial_gradient(tape, pts, |tape, jet| {
                let pre = Jet3::matmul(tape, w, jet);
                Jet3::sin(tape, pre)
            })
        };
        let (_va, ga) = eval(&mut tape, pts, w1);
        let (_vb, gb) = eval(&mut tape, pts, w2);
        let (_vs, gs) = spatial_gradient(&mut tape, pts, |tape, jet| {
            let p1 = Jet3::matmul(tape, w1, jet);
            let s1 = Jet3::sin(tape, p1);
            let p2 = Jet3::matmul(tape, w2, jet);
            let s2 = Jet3::sin(tape, p2);
            Jet3::add(tape, s1, s2)
        });
        for k in 0..3 {
            let expect = tape.value(ga).data[k] + tape.value(gb).data[k];
            assert_relative_eq!(tape.value(gs).data[k], expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn warp_jacobian_identity_and_linear() {
        let mut tape: Tape<f64> = Tape::new();
        let pts = tape.constant(Tensor::from_vec(3, 1, vec![0.1, 0.2, 0.3]));
        let (_v, j) = warp_jacobian(&mut tape, pts, |_tape, jet| jet);
        let jv = tape.value(j);
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert_relative_eq!(jv.data[3 * r + c], expect);
            }
        }

        let a = vec![1.0, 2.0, 3.0, 0.0, -1.0, 0.5, 2.0, 0.0, 4.0];
        let amat = tape.constant(Tensor::from_vec(3, 3, a.clone()));
        let (_v, j) = warp_jacobian(&mut tape, pts, |tape, jet| Jet3::matmul(tape, amat, jet));
        let jv = tape.value(j);
        for i in 0..9 {
            assert_relative_eq!(jv.data[i], a[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn second_order_path_matches_finite_differences() {
        // loss contains the spatial gradient of a small sinusoidal net;
        // backward must differentiate through the tangent computation
        let w1 = ParamGroup::new("w1", vec![0.4, -0.8, 1.1, 0.3, 0.9, -0.2]);
        let b1 = ParamGroup::new("b1", vec![0.1, -0.3]);
        let w2 = ParamGroup::new("w2", vec![0.7, -1.2]);
        let groups = vec![w1, b1, w2];
        let build = |tape: &mut Tape<f64>, gs: &[ParamGroup<f64>]| {
            let w1 = tape.param(&gs[0], 2, 3);
            let b1 = tape.param(&gs[1], 2, 1);
            let w2 = tape.param(&gs[2], 1, 2);
            let pts = tape.constant(Tensor::from_vec(3, 2, vec![0.3, -0.1, 0.5, 0.7, -0.6, 0.2]));
            let (_v, grad) = spatial_gradient(tape, pts, |tape, jet| {
                let pre = Jet3::matmul(tape, w1, jet);
                let pre = Jet3::add_col_vec(tape, pre, b1);
                let h = Jet3::sin(tape, pre);
                Jet3::matmul(tape, w2, h)
            });
            let sq = tape.mul(grad, grad);
            tape.mean_all(sq)
        };
        check_grads(build, &groups, 1e-5);
    }

    #[test]
    fn untouched_params_get_zero_gradient() {
        let used = ParamGroup::new("used", vec![2.0]);
        let unused = ParamGroup::new("unused", vec![5.0, 6.0]);
        let mut tape = Tape::new();
        let u = tape.param(&used, 1, 1);
        let _n = tape.param(&unused, 2, 1);
        let loss = tape.mul(u, u);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("unused").unwrap(), &[0.0, 0.0]);
        assert_eq!(grads.get("used").unwrap(), &[4.0]);
    }

    #[test]
    fn nonfinite_intermediate_is_reported() {
        let p = ParamGroup::new("p", vec![1000.0]);
        let mut tape = Tape::new();
        let v = tape.param(&p, 1, 1);
        let big = tape.scale_add(v, 1000.0, 0.0);
        let e = tape.exp(big); // overflows to +inf
        let loss = tape.sum_all(e);
        let err = tape.backward(loss).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("exp"), "unexpected error: {msg}");
    }
}
