//! Dense matrices, vector metrics and the deterministic PRNG shared by the
//! rest of the crate.
//!
//! Storage is `f32`; every reduction accumulates in `f64` in ascending index
//! order so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{AtvError, Result};

/// Norms below this are treated as zero vectors by [`cosine_distance`].
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Default absolute/relative tolerance used by the numeric property checks.
pub const TEST_TOL: f64 = 1e-6;

/// Row-major 2-D `f32` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AtvError::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(AtvError::NonFinite(format!(
                "entry ({}, {}) is {}",
                pos / cols.max(1),
                pos % cols.max(1),
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(AtvError::DimensionMismatch(format!(
                    "row {i} has width {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Like [`Matrix::from_vec`] but fills from a closure over `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep entries finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics; a zero-width matrix still has `rows` empty rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Copies the listed rows, in the given order, into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&self, s: f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Frobenius norm, accumulated in `f64`.
    pub fn frobenius(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(AtvError::DimensionMismatch(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let bt = b.transpose();
    linear(a, &bt)
}

/// Applies a linear layer stored as `out x in`: returns `x · wᵀ`.
pub fn linear(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    if x.cols != w.cols {
        return Err(AtvError::DimensionMismatch(format!(
            "linear input width {} vs layer input width {}",
            x.cols, w.cols
        )));
    }
    let xf = x.to_f64();
    let wf = w.to_f64();
    let mut out = Matrix::zeros(x.rows, w.rows);
    linear_f64_into(&xf, x.rows, &wf, w.rows, x.cols, out.data_mut());
    Ok(out)
}

/// `out[i, o] = Σ_j x[i, j] · w[o, j]`, with `x` (`n x k`) and `w` (`m x k`)
/// already widened to `f64`. Each output entry uses [`dot`], so the result
/// for a given row never depends on how rows are batched.
pub(crate) fn linear_f64_into(x: &[f64], n: usize, w: &[f64], m: usize, k: usize, out: &mut [f32]) {
    debug_assert_eq!(x.len(), n * k);
    debug_assert_eq!(w.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    if k == 0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2. No FMA is enabled, so every
        // product and sum rounds exactly as on the baseline path.
        unsafe { linear_avx2(x, n, w, m, k, out) };
        return;
    }
    linear_kernel(x, n, w, m, k, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn linear_avx2(x: &[f64], n: usize, w: &[f64], m: usize, k: usize, out: &mut [f32]) {
    linear_kernel(x, n, w, m, k, out);
}

const ROW_BLOCK: usize = 8;

#[inline(always)]
fn linear_kernel(x: &[f64], n: usize, w: &[f64], m: usize, k: usize, out: &mut [f32]) {
    let full = n / ROW_BLOCK * ROW_BLOCK;
    for i in (0..full).step_by(ROW_BLOCK) {
        let xs = &x[i * k..(i + ROW_BLOCK) * k];
        for (o, wr) in w.chunks_exact(k).enumerate() {
            let d = dot_rows::<ROW_BLOCK>(xs, wr);
            for (r, v) in d.iter().enumerate() {
                out[(i + r) * m + o] = *v as f32;
            }
        }
    }
    for i in full..n {
        let xr = &x[i * k..(i + 1) * k];
        for (o, wr) in w.chunks_exact(k).enumerate() {
            out[i * m + o] = dot(xr, wr) as f32;
        }
    }
}

const LANES: usize = 8;

#[inline(always)]
fn reduce_lanes(acc: &[f64; LANES]) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Fixed-order `f64` dot product: eight interleaved partial sums, combined
/// pairwise.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    for l in 0..ta.len() {
        acc[l] += ta[l] * tb[l];
    }
    reduce_lanes(&acc)
}

/// `R` simultaneous [`dot`]s against the same `w`, with `x` holding the
/// rows back to back; bitwise identical to calling [`dot`] per row.
#[inline(always)]
fn dot_rows<const R: usize>(x: &[f64], w: &[f64]) -> [f64; R] {
    let k = w.len();
    let mut a = [[0.0f64; LANES]; R];
    let full = k / LANES * LANES;
    let mut c = 0;
    while c < full {
        let wc: &[f64; LANES] = w[c..c + LANES].try_into().unwrap();
        for (r, acc) in a.iter_mut().enumerate() {
            let xc: &[f64; LANES] = x[r * k + c..r * k + c + LANES].try_into().unwrap();
            for l in 0..LANES {
                acc[l] += xc[l] * wc[l];
            }
        }
        c += LANES;
    }
    for (r, acc) in a.iter_mut().enumerate() {
        for l in 0..k - full {
            acc[l] += x[r * k + full + l] * w[full + l];
        }
    }
    a.map(|acc| reduce_lanes(&acc))
}

/// Cosine distance with its degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineDistance {
    pub value: f64,
    /// Set when either input norm is below [`DEGENERATE_EPS`]; `value` is
    /// then 0 ("no drift").
    pub degenerate: bool,
}

/// `1 − u·v / (‖u‖‖v‖)`, clamped to `[0, 2]`.
///
/// A near-zero vector carries no direction, so the distance is reported as
/// 0 with `degenerate` set.
pub fn cosine_distance_checked(u: &[f32], v: &[f32]) -> CosineDistance {
    assert_eq!(u.len(), v.len(), "cosine distance of unequal lengths");
    let mut uv = 0.0f64;
    let mut uu = 0.0f64;
    let mut vv = 0.0f64;
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    let (nu, nv) = (uu.sqrt(), vv.sqrt());
    if nu < DEGENERATE_EPS || nv < DEGENERATE_EPS {
        return CosineDistance {
            value: 0.0,
            degenerate: true,
        };
    }
    // sqrt(uu·vv) keeps cos exactly 1 for u == v.
    let cos = (uv / (uu * vv).sqrt()).clamp(-1.0, 1.0);
    CosineDistance {
        value: 1.0 - cos,
        degenerate: false,
    }
}

pub fn cosine_distance(u: &[f32], v: &[f32]) -> f64 {
    cosine_distance_checked(u, v).value
}

/// Adds `Σ_{i ∈ rows} x[i, j]²` into `acc[j]`, visiting rows in the order
/// given.
pub fn accumulate_column_squares(x: &Matrix, rows: &[usize], acc: &mut [f64]) {
    assert_eq!(acc.len(), x.cols, "accumulator width");
    for &r in rows {
        for (a, &v) in acc.iter_mut().zip(x.row(r)) {
            let v = f64::from(v);
            *a += v * v;
        }
    }
}

/// Per-column L2 norm over a subset of rows.
///
/// The subset is visited in ascending order regardless of how it is given.
/// An empty subset yields zeros and logs an `empty-calibration` warning.
pub fn column_l2_norms(x: &Matrix, row_subset: &[usize]) -> Result<Vec<f64>> {
    if let Some(&bad) = row_subset.iter().find(|&&r| r >= x.rows) {
        return Err(AtvError::DimensionMismatch(format!(
            "row {bad} outside a matrix with {} rows",
            x.rows
        )));
    }
    let mut rows = row_subset.to_vec();
    rows.sort_unstable();
    rows.dedup();
    if rows.is_empty() {
        log::warn!("empty-calibration: column norms over an empty row subset");
    }
    let mut acc = vec![0.0; x.cols];
    accumulate_column_squares(x, &rows, &mut acc);
    Ok(acc.into_iter().map(f64::sqrt).collect())
}

/// SplitMix64 generator.
///
/// Each step adds the golden-ratio increment `0x9E3779B97F4A7C15` to the
/// state and mixes it with the multipliers `0xBF58476D1CE4E5B9` and
/// `0x94D049BB133111EB` (shifts 30, 27, 31). Output depends only on the
/// seed, never on the platform.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derives an independent stream from a seed and a list of
    /// discriminators (sample hash, block index, ...).
    pub fn derived(seed: u64, parts: &[u64]) -> Self {
        let mut s = Rng::new(seed);
        let mut h = s.next_u64();
        for &p in parts {
            h = Rng::new(h ^ p).next_u64();
        }
        Rng::new(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by widening multiply.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Standard normal draw (Box–Muller, one output per two uniforms).
    /// Uses the portable `libm` routines so draws match across platforms.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * libm::log(u1)).sqrt() * libm::cos(std::f64::consts::TAU * u2)
    }

    /// Uniform `k`-subset of `items` without replacement (partial
    /// Fisher–Yates), returned sorted ascending.
    pub fn sample<T: Copy + Ord>(&mut self, items: &[T], k: usize) -> Vec<T> {
        let mut pool = items.to_vec();
        let k = k.min(pool.len());
        for i in 0..k {
            let j = i + self.below(pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool.sort_unstable();
        pool
    }
}

/// FNV-1a over a byte string; stable across Rust versions, unlike
/// `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
