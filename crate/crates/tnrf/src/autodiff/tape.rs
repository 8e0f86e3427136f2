//! Reverse-mode differentiation tape over dense tensors.
//!
//! Forward evaluation records every operation on the tape; `backward` walks
//! the tape in reverse and accumulates gradients for every registered
//! parameter group. The operation set is closed and small: affine maps,
//! pointwise nonlinearities, broadcasts, reductions, and the segmented
//! cumulative product used by ray compositing. Spatial derivatives are built
//! on top of these same operations (see `jet`), so differentiating a loss
//! that itself contains gradients is just one more reverse pass.

use std::collections::HashMap;

use super::tensor::{col_blocks, lane_dot, lane_sum, Real, Tensor, REG_CHUNK};
use crate::error::{Error, Result};

/// Handle to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// A named, flat block of trainable scalars together with its gradient.
#[derive(Debug, Clone)]
pub struct ParamGroup<T> {
    pub name: String,
    pub values: Vec<T>,
    pub gradient: Vec<T>,
}

impl<T: Real> ParamGroup<T> {
    pub fn new(name: impl Into<String>, values: Vec<T>) -> Self {
        let n = values.len();
        ParamGroup {
            name: name.into(),
            values,
            gradient: vec![T::zero(); n],
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.gradient {
            *g = T::zero();
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    /// Constant leaf (inputs, targets, one-hot tangents, ...).
    Input,
    /// Parameter leaf; index into `Tape::param_names`.
    Param(usize),
    /// `[m x k] * [k x n]`.
    Matmul(Var, Var),
    /// `x [m x n] + b [m x 1]` broadcast over columns.
    AddColVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a * x + b` elementwise with constants.
    ScaleAdd(Var, T, T),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Softplus(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    /// Heaviside step; derivative defined as zero everywhere, so the
    /// backward pass never reads the operand.
    Step(#[allow(dead_code)] Var),
    Abs(Var),
    Sqrt(Var),
    Recip(Var),
    /// `max(x, c)` with constant `c`.
    MaxConst(Var, T),
    /// `x [m x n] * r [1 x n]` broadcast over rows.
    MulRowBroadcast(Var, Var),
    /// `x [m x n] * c [m x 1]` broadcast over columns.
    MulColVec(Var, Var),
    /// Sum each column: `[m x n] -> [1 x n]`.
    ColSum(Var),
    /// Sum of all entries: `-> [1 x 1]`.
    SumAll(Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize, usize),
    /// Per segment of `seg` consecutive columns of a `[1 x n]` tensor,
    /// `out_k = prod_{j < k} in_j` (exclusive prefix product).
    ExclusiveCumprodSeg(Var, usize),
    /// Sum columns within consecutive segments: `[m x n] -> [m x n/seg]`.
    SumSeg(Var, usize),
    /// Repeat each column `seg` times: `[m x n] -> [m x n*seg]`.
    RepeatSeg(Var, usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Matmul(..) => "matmul",
            Op::AddColVec(..) => "add_col_vec",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScaleAdd(..) => "scale_add",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Exp(_) => "exp",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Step(_) => "step",
            Op::Abs(_) => "abs",
            Op::Sqrt(_) => "sqrt",
            Op::Recip(_) => "recip",
            Op::MaxConst(..) => "max_const",
            Op::MulRowBroadcast(..) => "mul_row_broadcast",
            Op::MulColVec(..) => "mul_col_vec",
            Op::ColSum(_) => "col_sum",
            Op::SumAll(_) => "sum_all",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::ExclusiveCumprodSeg(..) => "exclusive_cumprod_seg",
            Op::SumSeg(..) => "sum_seg",
            Op::RepeatSeg(..) => "repeat_seg",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Gradients produced by a reverse pass, keyed by parameter group name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    by_name: HashMap<String, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.by_name.get(name).map(|v| v.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(|s| s.as_str())
    }

    /// Copy this pass's gradient into the group's `gradient` buffer.
    /// Groups that did not participate keep a zero gradient.
    pub fn write_to(&self, group: &mut ParamGroup<T>) {
        match self.by_name.get(&group.name) {
            Some(g) => group.gradient.copy_from_slice(g),
            None => group.zero_grad(),
        }
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_names: Vec<String>,
    /// First operation that produced a non-finite value, if any.
    bad_op: Option<String>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_names: Vec::new(),
            bad_op: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        if self.bad_op.is_none() && !value.all_finite() {
            self.bad_op = Some(op.name().to_string());
        }
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Input, value)
    }

    pub fn constant_scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Register a parameter group as a leaf with the given shape.
    pub fn param(&mut self, group: &ParamGroup<T>, rows: usize, cols: usize) -> Var {
        assert_eq!(
            group.values.len(),
            rows * cols,
            "param `{}` shape mismatch",
            group.name
        );
        self.param_names.push(group.name.clone());
        let idx = self.param_names.len() - 1;
        self.push(
            Op::Param(idx),
            Tensor::from_vec(rows, cols, group.values.clone()),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::Matmul(a, b), v)
    }

    pub fn add_col_vec(&mut self, x: Var, b: Var) -> Var {
        let (xs, bs) = (self.value(x), self.value(b));
        assert_eq!(bs.cols, 1, "bias must be a column vector");
        assert_eq!(xs.rows, bs.rows, "bias rows mismatch");
        let mut out = xs.clone();
        for r in 0..out.rows {
            let bv = bs.data[r];
            for v in out.row_mut(r) {
                *v += bv;
            }
        }
        self.push(Op::AddColVec(x, b), out)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            (av.rows, av.cols),
            (bv.rows, bv.cols),
            "elementwise shape mismatch in {}",
            op.name()
        );
        let data = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_vec(av.rows, av.cols, data);
        self.push(op, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| f(v)).collect();
        let t = Tensor::from_vec(xv.rows, xv.cols, data);
        self.push(op, t)
    }

    pub fn scale_add(&mut self, x: Var, a: T, b: T) -> Var {
        self.map(x, Op::ScaleAdd(x, a, b), |v| a * v + b)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale_add(x, -T::one(), T::zero())
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.map(x, Op::Sin(x), |v| v.sin())
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.map(x, Op::Cos(x), |v| v.cos())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), |v| v.exp())
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, Op::Softplus(x), softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.map(
            x,
            Op::LeakyRelu(x, slope),
            |v| if v > T::zero() { v } else { slope * v },
        )
    }

    pub fn step(&mut self, x: Var) -> Var {
        self.map(
            x,
            Op::Step(x),
            |v| if v > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, Op::Abs(x), |v| v.abs())
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.map(x, Op::Recip(x), |v| T::one() / v)
    }

    pub fn max_const(&mut self, x: Var, c: T) -> Var {
        self.map(x, Op::MaxConst(x, c), |v| v.max(c))
    }

    pub fn mul_row_broadcast(&mut self, x: Var, r: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(r));
        assert_eq!(rv.rows, 1, "row factor must be 1 x n");
        assert_eq!(xv.cols, rv.cols, "row broadcast width mismatch");
        let mut out = xv.clone();
        for row in 0..out.rows {
            for (v, &f) in out.row_mut(row).iter_mut().zip(&rv.data) {
                *v *= f;
            }
        }
        self.push(Op::MulRowBroadcast(x, r), out)
    }

    pub fn mul_col_vec(&mut self, x: Var, c: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(c));
        assert_eq!(cv.cols, 1, "column factor must be m x 1");
        assert_eq!(xv.rows, cv.rows, "column broadcast height mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows {
            let f = cv.data[r];
            for v in out.row_mut(r) {
                *v *= f;
            }
        }
        self.push(Op::MulColVec(x, c), out)
    }

    pub fn col_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(1, xv.cols);
        for r in 0..xv.rows {
            for (o, &v) in out.data.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        self.push(Op::ColSum(x), out)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data.iter().copied().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale_add(s, T::one() / T::from_f64(n as f64), T::zero())
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "concat_rows width mismatch");
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(&av.data);
        data.extend_from_slice(&bv.data);
        let t = Tensor::from_vec(av.rows + bv.rows, av.cols, data);
        self.push(Op::ConcatRows(a, b), t)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows, "slice_rows out of range");
        let data = xv.data[start * xv.cols..(start + len) * xv.cols].to_vec();
        let t = Tensor::from_vec(len, xv.cols, data);
        self.push(Op::SliceRows(x, start, len), t)
    }

    /// Exclusive prefix product within consecutive segments of `seg` columns.
    pub fn exclusive_cumprod_seg(&mut self, x: Var, seg: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, 1, "cumprod input must be 1 x n");
        assert_eq!(xv.cols % seg, 0, "cumprod segment mismatch");
        let mut out = Tensor::zeros(1, xv.cols);
        for s in 0..xv.cols / seg {
            let mut acc = T::one();
            for k in 0..seg {
                out.data[s * seg + k] = acc;
                acc = acc * xv.data[s * seg + k];
            }
        }
        self.push(Op::ExclusiveCumprodSeg(x, seg), out)
    }

    /// Sum over consecutive segments of `seg` columns, per row.
    pub fn sum_seg(&mut self, x: Var, seg: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols % seg, 0, "sum_seg segment mismatch");
        let nseg = xv.cols / seg;
        let mut out = Tensor::zeros(xv.rows, nseg);
        for r in 0..xv.rows {
            for s in 0..nseg {
                let mut acc = T::zero();
                for k in 0..seg {
                    acc += xv.at(r, s * seg + k);
                }
                *out.at_mut(r, s) = acc;
            }
        }
        self.push(Op::SumSeg(x, seg), out)
    }

    pub fn repeat_seg(&mut self, x: Var, seg: usize) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows, xv.cols * seg);
        for r in 0..xv.rows {
            for c in 0..xv.cols * seg {
                *out.at_mut(r, c) = xv.at(r, c / seg);
            }
        }
        self.push(Op::RepeatSeg(x, seg), out)
    }

    /// Reverse pass from a scalar loss. Returns per-parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if let Some(op) = &self.bad_op {
            return Err(Error::NonFinite { op: op.clone() });
        }
        let lv = self.value(loss);
        assert_eq!((lv.rows, lv.cols), (1, 1), "loss must be scalar");

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    // dA = dY * B^T ; dB = A^T * dY, both walked in
                    // cache-sized column blocks of dY
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let n = g.cols;
                    {
                        let da = ensure(&mut grads, *a, av.rows, av.cols);
                        for (c0, c1) in col_blocks(n) {
                            for i in 0..av.rows {
                                let gy = &g.data[i * n + c0..i * n + c1];
                                let da_row = da.row_mut(i);
                                for (l, dv) in da_row.iter_mut().enumerate() {
                                    let brow = &bv.data[l * n + c0..l * n + c1];
                                    *dv += lane_dot(gy, brow);
                                }
                            }
                        }
                    }
                    {
                        let db = ensure(&mut grads, *b, bv.rows, bv.cols);
                        for (c0, c1) in col_blocks(n) {
                            let width = c1 - c0;
                            for l in 0..av.cols {
                                let db_row = &mut db.data[l * n + c0..l * n + c1];
                                let mut c = 0;
                                while c + REG_CHUNK <= width {
                                    let mut acc = [T::zero(); REG_CHUNK];
                                    acc.copy_from_slice(&db_row[c..c + REG_CHUNK]);
                                    for i in 0..av.rows {
                                        let a_il = av.at(i, l);
                                        if a_il == T::zero() {
                                            continue;
                                        }
                                        let gy =
                                            &g.data[i * n + c0 + c..i * n + c0 + c + REG_CHUNK];
                                        for j in 0..REG_CHUNK {
                                            acc[j] += a_il * gy[j];
                                        }
                                    }
                                    db_row[c..c + REG_CHUNK].copy_from_slice(&acc);
                                    c += REG_CHUNK;
                                }
                                if c < width {
                                    let tail = &mut db_row[c..];
                                    for i in 0..av.rows {
                                        let a_il = av.at(i, l);
                                        if a_il == T::zero() {
                                            continue;
                                        }
                                        let gy = &g.data[i * n + c0 + c..i * n + c1];
                                        for (dv, &gv) in tail.iter_mut().zip(gy) {
                                            *dv += a_il * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::AddColVec(x, b) => {
                    accumulate(&mut grads, *x, &g);
                    let bv_shape = {
                        let t = &self.nodes[b.0].value;
                        (t.rows, t.cols)
                    };
                    let db = ensure(&mut grads, *b, bv_shape.0, bv_shape.1);
                    for r in 0..g.rows {
                        db.data[r] += lane_sum(g.row(r));
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate_scaled(&mut grads, *b, &g, -T::one());
                }
                Op::Mul(a, b) => {
                    let scaled_by_b = {
                        let bv = &self.nodes[b.0].value;
                        elementwise(&g, bv, |gv, v| gv * v)
                    };
                    accumulate(&mut grads, *a, &scaled_by_b);
                    let scaled_by_a = {
                        let av = &self.nodes[a.0].value;
                        elementwise(&g, av, |gv, v| gv * v)
                    };
                    accumulate(&mut grads, *b, &scaled_by_a);
                }
                Op::ScaleAdd(x, a, _) => {
                    accumulate_scaled(&mut grads, *x, &g, *a);
                }
                Op::Sin(x) => {
                    let d = {
                        let xv = &self.nodes[x.0].value;
                        elementwise(&g, xv, |gv, v| gv * v.cos())
                    };
                    accumulate(&mut grads, *x, &d);
                }
                Op::Cos(x) => {
                    let d = {
                        let xv = &self.nodes[x.0].value;
                        elementwise(&g, xv, |gv, v| -gv * v.sin())
                    };
                    accumulate(&mut grads, *x, &d);
                }
                Op::Exp(x) => {
                    let d = elementwise(&g, &node.value, |gv, y| gv * y);
                    accumulate(&mut grads, *x, &d);
                }
                Op::Softplus(x) => {
                    let d = {
                        let xv = &self.nodes[x.0].value;
                        elementwise(&g, xv, |gv, v| gv * sigmoid(v))
                    };
                    accumulate(&mut grads, *x, &d);
                }
                Op::Sigmoid(x) => {
                    let d = elementwise(&g, &node.value, |gv, y| gv * y * (T::one() - y));
                    accumulate(&mut grads, *x, &d);
                }
                Op::Relu(x) => {
                    let d = {
                        let xv = &self.nodes[x.0].value;
                        elementwise(&g, xv, |gv, v| if v > T::zero() { gv } else { T::zero() })
                    };
                    accumulate(&mut grads, *x, &d);
                }
                Op::LeakyRelu(x, slope) => {
                    let s = *slope;
                    let d = {
                        let xv = &self.nodes[x.0].value;
                        elementwise(&g, xv, |gv, v| if v > T::zero() { gv } else { s * gv })
                    };
                    accumulate(&mut grads, *x, &d);
                }
                Op::Step(_) => {}
                Op::Abs(x) => {
                    let d = {
                        let xv = &self.nodes[x.0].value;
                        elementwise(&g, xv, |gv, v| {
                            if v > T::zero() {
                                gv
                            } else if v < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        })
                    };
                    accumulate(&mut grads, *x, &d);
                }
                Op::Sqrt(x) => {
                    let half = T::from_f64(0.5);
                    let d = elementwise(&g, &node.value, |gv, y| gv * half / y);
                    accumulate(&mut grads, *x, &d);
                }
                Op::Recip(x) => {
                    let d = elementwise(&g, &node.value, |gv, y| -gv * y * y);
                    accumulate(&mut grads, *x, &d);
                }
                Op::MaxConst(x, c) => {
                    let c = *c;
                    let d = {
                        let xv = &self.nodes[x.0].value;
                        elementwise(&g, xv, |gv, v| if v > c { gv } else { T::zero() })
                    };
                    accumulate(&mut grads, *x, &d);
                }
                Op::MulRowBroadcast(x, r) => {
                    let dx = {
                        let rv = &self.nodes[r.0].value;
                        let mut dx = g.clone();
                        for row in 0..dx.rows {
                            for (v, &f) in dx.row_mut(row).iter_mut().zip(&rv.data) {
                                *v *= f;
                            }
                        }
                        dx
                    };
                    accumulate(&mut grads, *x, &dx);
                    let dr = {
                        let xv = &self.nodes[x.0].value;
                        let mut dr = Tensor::zeros(1, xv.cols);
                        for row in 0..xv.rows {
                            for ((o, &gv), &v) in
                                dr.data.iter_mut().zip(g.row(row)).zip(xv.row(row))
                            {
                                *o += gv * v;
                            }
                        }
                        dr
                    };
                    accumulate(&mut grads, *r, &dr);
                }
                Op::MulColVec(x, c) => {
                    let dx = {
                        let cv = &self.nodes[c.0].value;
                        let mut dx = g.clone();
                        for r in 0..dx.rows {
                            let f = cv.data[r];
                            for v in dx.row_mut(r) {
                                *v *= f;
                            }
                        }
                        dx
                    };
                    accumulate(&mut grads, *x, &dx);
                    let dc = {
                        let xv = &self.nodes[x.0].value;
                        let mut dc = Tensor::zeros(xv.rows, 1);
                        for r in 0..xv.rows {
                            dc.data[r] += lane_dot(g.row(r), xv.row(r));
                        }
                        dc
                    };
                    accumulate(&mut grads, *c, &dc);
                }
                Op::ColSum(x) => {
                    let xv_rows = self.nodes[x.0].value.rows;
                    let dx = ensure(&mut grads, *x, xv_rows, g.cols);
                    for r in 0..xv_rows {
                        for (v, &gv) in dx.row_mut(r).iter_mut().zip(&g.data) {
                            *v += gv;
                        }
                    }
                }
                Op::SumAll(x) => {
                    let gv = g.data[0];
                    let (rows, cols) = {
                        let t = &self.nodes[x.0].value;
                        (t.rows, t.cols)
                    };
                    let dx = ensure(&mut grads, *x, rows, cols);
                    for v in &mut dx.data {
                        *v += gv;
                    }
                }
                Op::ConcatRows(a, b) => {
                    let a_rows = self.nodes[a.0].value.rows;
                    let ga = Tensor::from_vec(a_rows, g.cols, g.data[..a_rows * g.cols].to_vec());
                    let gb = Tensor::from_vec(
                        g.rows - a_rows,
                        g.cols,
                        g.data[a_rows * g.cols..].to_vec(),
                    );
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::SliceRows(x, start, len) => {
                    let (rows, cols) = {
                        let t = &self.nodes[x.0].value;
                        (t.rows, t.cols)
                    };
                    let dx = ensure(&mut grads, *x, rows, cols);
                    for r in 0..*len {
                        for (v, &gv) in dx.row_mut(start + r).iter_mut().zip(g.row(r)) {
                            *v += gv;
                        }
                    }
                }
                Op::ExclusiveCumprodSeg(x, seg) => {
                    // grad_f[j] = P_j * R_j with R_j = g_{j+1} + f_{j+1} R_{j+1}.
                    let seg = *seg;
                    let dx = {
                        let fv = &self.nodes[x.0].value;
                        let pv = &node.value;
                        let mut dx = Tensor::zeros(1, fv.cols);
                        for s in 0..fv.cols / seg {
                            let base = s * seg;
                            let mut r_acc = T::zero();
                            for j in (0..seg).rev() {
                                if j + 1 < seg {
                                    r_acc = g.data[base + j + 1] + fv.data[base + j + 1] * r_acc;
                                }
                                dx.data[base + j] = pv.data[base + j] * r_acc;
                            }
                        }
                        dx
                    };
                    accumulate(&mut grads, *x, &dx);
                }
                Op::SumSeg(x, seg) => {
                    let seg = *seg;
                    let (rows, cols) = {
                        let t = &self.nodes[x.0].value;
                        (t.rows, t.cols)
                    };
                    let dx = ensure(&mut grads, *x, rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            *dx.at_mut(r, c) += g.at(r, c / seg);
                        }
                    }
                }
                Op::RepeatSeg(x, seg) => {
                    let seg = *seg;
                    let (rows, cols) = {
                        let t = &self.nodes[x.0].value;
                        (t.rows, t.cols)
                    };
                    let dx = ensure(&mut grads, *x, rows, cols);
                    for r in 0..rows {
                        for c in 0..cols * seg {
                            *dx.at_mut(r, c / seg) += g.at(r, c);
                        }
                    }
                }
            }
        }

        let mut out = Gradients {
            by_name: HashMap::new(),
        };
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(p) = node.op {
                let name = self.param_names[p].clone();
                let grad = match grads[idx].take() {
                    Some(t) => {
                        if !t.all_finite() {
                            return Err(Error::NonFinite {
                                op: format!("backward({name})"),
                            });
                        }
                        t.data
                    }
                    None => vec![T::zero(); node.value.len()],
                };
                out.by_name
                    .entry(name)
                    .and_modify(|existing: &mut Vec<T>| {
                        for (e, v) in existing.iter_mut().zip(&grad) {
                            *e += *v;
                        }
                    })
                    .or_insert(grad);
            }
        }
        Ok(out)
    }

    pub fn nonfinite_op(&self) -> Option<&str> {
        self.bad_op.as_deref()
    }
}

fn ensure<'a, T: Real>(
    grads: &'a mut [Option<Tensor<T>>],
    v: Var,
    rows: usize,
    cols: usize,
) -> &'a mut Tensor<T> {
    if grads[v.0].is_none() {
        grads[v.0] = Some(Tensor::zeros(rows, cols));
    }
    grads[v.0].as_mut().unwrap()
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: &Tensor<T>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, &b) in t.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        slot => *slot = Some(g.clone()),
    }
}

fn accumulate_scaled<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: &Tensor<T>, s: T) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, &b) in t.data.iter_mut().zip(&g.data) {
                *a += s * b;
            }
        }
        slot => {
            let mut t = g.clone();
            for x in &mut t.data {
                *x *= s;
            }
            *slot = Some(t);
        }
    }
}

fn elementwise<T: Real>(g: &Tensor<T>, v: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!((g.rows, g.cols), (v.rows, v.cols));
    let data = g.data.iter().zip(&v.data).map(|(&gv, &vv)| f(gv, vv)).collect();
    Tensor::from_vec(g.rows, g.cols, data)
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    // max(x, 0) + ln(1 + exp(-|x|)), stable for large |x|
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
