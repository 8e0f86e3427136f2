use num_traits::Float;

/// Scalar type the differentiation engine is generic over.
///
/// Training runs typically use `f32`; tests and gradient checks use `f64`.
pub trait Real:
    Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Flag written into checkpoint blocks (0 = f32, 1 = f64).
    const DTYPE_FLAG: u8;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    const DTYPE_FLAG: u8 = 0;
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    const DTYPE_FLAG: u8 = 1;
}

/// Dense row-major matrix. Vectors are `m x 1` or `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`, shapes `[m x k] * [k x n]`.
    ///
    /// The column dimension is processed in cache-sized blocks; within each
    /// output element the accumulation order over `k` is unchanged, so the
    /// result is bitwise identical to the unblocked loop.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let m = self.rows;
        let k = self.cols;
        let n = other.cols;
        let mut out = Tensor::zeros(m, n);
        for (c0, c1) in col_blocks(n) {
            for i in 0..m {
                let a_row = &self.row(i)[..k];
                let out_row = &mut out.data[i * n + c0..i * n + c1];
                let mut c = 0;
                // register-resident accumulator chunks keep the k loop off
                // the store port and hide FMA latency
                while c + REG_CHUNK <= out_row.len() {
                    let mut acc = [T::zero(); REG_CHUNK];
                    for (l, &a) in a_row.iter().enumerate() {
                        if a == T::zero() {
                            continue;
                        }
                        let b_chunk = &other.data[l * n + c0 + c..l * n + c0 + c + REG_CHUNK];
                        for j in 0..REG_CHUNK {
                            acc[j] += a * b_chunk[j];
                        }
                    }
                    out_row[c..c + REG_CHUNK].copy_from_slice(&acc);
                    c += REG_CHUNK;
                }
                if c < out_row.len() {
                    let tail = &mut out_row[c..];
                    for (l, &a) in a_row.iter().enumerate() {
                        if a == T::zero() {
                            continue;
                        }
                        let b_row = &other.data[l * n + c0 + c..l * n + c1];
                        for (o, &b) in tail.iter_mut().zip(b_row.iter()) {
                            *o += a * b;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Width of the register-resident accumulator chunks used by the matmul
/// kernels (eight 512-bit vectors of f32).
pub(crate) const REG_CHUNK: usize = 128;

/// Dot product accumulated in 16 independent lanes so the compiler can
/// vectorize the reduction. The lane layout and the final fold are fixed,
/// so results are deterministic (though not bitwise equal to a serial sum).
pub(crate) fn lane_dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 16;
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for j in 0..LANES {
            acc[j] += xa[j] * xb[j];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let mut total = tail;
    for v in acc {
        total += v;
    }
    total
}

/// Slice sum with the same 16-lane scheme as [`lane_dot`].
pub(crate) fn lane_sum<T: Real>(a: &[T]) -> T {
    const LANES: usize = 16;
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    for xa in &mut ca {
        for j in 0..LANES {
            acc[j] += xa[j];
        }
    }
    let mut tail = T::zero();
    for &x in ca.remainder() {
        tail += x;
    }
    let mut total = tail;
    for v in acc {
        total += v;
    }
    total
}

/// Column-block size used to keep matmul operands resident in cache.
pub(crate) const MATMUL_BLOCK: usize = 1024;

/// Blocks `[c0, c1)` covering `0..n` in `MATMUL_BLOCK`-sized steps.
pub(crate) fn col_blocks(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n.div_ceil(MATMUL_BLOCK)).map(move |b| {
        let c0 = b * MATMUL_BLOCK;
        (c0, (c0 + MATMUL_BLOCK).min(n))
    })
}
