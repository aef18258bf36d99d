//! Scalar/vector/matrix kernels shared by every other module.
//!
//! All reductions accumulate in `f64` in a fixed left-to-right order, so a
//! given input always produces the same bits. Matrices are row-major with a
//! row stride equal to `cols`.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

use crate::error::{check_len, GazeError, Result};

/// Storage precision of cached tensors.
///
/// Arithmetic always runs in `f64`; `Single` rounds stored values through
/// `f32` and halves the byte accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }

    /// Round a value to what this precision can store.
    #[inline]
    pub fn store(self, x: f64) -> f64 {
        match self {
            Precision::Single => x as f32 as f64,
            Precision::Double => x,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" | "f32" => Some(Precision::Single),
            "double" | "f64" => Some(Precision::Double),
            _ => None,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Precision::Single => 4,
            Precision::Double => 8,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            4 => Some(Precision::Single),
            8 => Some(Precision::Double),
            _ => None,
        }
    }
}

/// Dense row-major matrix with fixed dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("Matrix::from_vec", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len("Matrix::from_rows", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity_like(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m.data[i * cols + i] = 1.0;
        }
        m
    }

    /// Entries drawn i.i.d. from `scale * N(0, 1)`.
    pub fn random_normal(rows: usize, cols: usize, scale: f64, stream: &mut SeededStream) -> Self {
        let data = (0..rows * cols).map(|_| scale * stream.normal()).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    /// `self += c * other`
    pub fn add_scaled(&mut self, c: f64, other: &Matrix) -> Result<()> {
        check_len("Matrix::add_scaled rows", self.rows, other.rows)?;
        check_len("Matrix::add_scaled cols", self.cols, other.cols)?;
        axpy(c, &other.data, &mut self.data);
        Ok(())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_len("Matrix::matmul", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let lhs = self.row(r);
            let dst = out.row_mut(r);
            for (k, &a) in lhs.iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), dst);
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`, without materialising the transpose.
    pub fn transpose_matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_len("Matrix::transpose_matmul", self.rows, other.rows)?;
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let rhs = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, rhs, out.row_mut(i));
                }
            }
        }
        Ok(out)
    }
}

/// Row vector times matrix: `x · m`.
pub fn vec_mat(x: &[f64], m: &Matrix) -> Result<Vec<f64>> {
    check_len("vec_mat", m.rows(), x.len())?;
    let mut out = vec![0.0; m.cols()];
    for (k, &a) in x.iter().enumerate() {
        axpy(a, m.row(k), &mut out);
    }
    Ok(out)
}

/// Matrix times column vector: `m · y`.
pub fn mat_vec(m: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    check_len("mat_vec", m.cols(), y.len())?;
    Ok((0..m.rows()).map(|r| dot_unchecked(m.row(r), y)).collect())
}

/// Inner product, accumulated left to right.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("dot", a.len(), b.len())?;
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Softmax with max subtraction. Outputs are positive and sum to one.
pub fn softmax_stable(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(GazeError::Dimension {
            context: "softmax_stable",
            expected: 1,
            got: 0,
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GazeError::Numeric("softmax_stable input".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Deterministic random stream backed by SplitMix64.
///
/// Uniform draws take the top 53 bits of each output (`(x >> 11) * 2^-53`);
/// normal draws use the ziggurat sampler of `rand_distr`. The sequence for a
/// given seed is fixed across runs and platforms.
#[derive(Debug, Clone)]
pub struct SeededStream {
    rng: SplitMix64,
}

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: SplitMix64::seed_from_u64(seed),
        }
    }

    /// Independent child stream; `tag` distinguishes siblings.
    pub fn fork(&mut self, tag: u64) -> Self {
        let base = self.next_u64();
        Self::new(base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer on `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * self.normal()).collect()
    }
}

/// Central-difference gradient estimate of `f` at `x`.
pub fn central_difference<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GazeError::Numeric(format!(
                "central_difference evaluation at coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Error-free transformation based dot (Ogita–Rump–Oishi Dot2).
    fn dot2(a: &[f64], b: &[f64]) -> f64 {
        fn two_sum(a: f64, b: f64) -> (f64, f64) {
            let s = a + b;
            let z = s - a;
            (s, (a - (s - z)) + (b - z))
        }
        fn two_prod(a: f64, b: f64) -> (f64, f64) {
            let p = a * b;
            (p, a.mul_add(b, -p))
        }
        let (mut s, mut c) = two_prod(a[0], b[0]);
        for i in 1..a.len() {
            let (p, q) = two_prod(a[i], b[i]);
            let (t, r) = two_sum(s, p);
            s = t;
            c += q + r;
        }
        s + c
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(dot(&[2.0, 3.0], &[2.0, 3.0]).unwrap(), 13.0);
        assert!(matches!(
            dot(&[1.0], &[1.0, 2.0]),
            Err(GazeError::Dimension { .. })
        ));
    }

    #[test]
    fn dot_against_compensated_oracle() {
        let mut s = SeededStream::new(11);
        for _ in 0..50 {
            let a = s.normal_vec(128, 1.0);
            let b = s.normal_vec(128, 1.0);
            let exact = dot2(&a, &b);
            let got = dot(&a, &b).unwrap();
            let scale: f64 = a.iter().zip(&b).map(|(x, y)| (x * y).abs()).sum();
            // relative to the magnitude of the summands; the result itself can be near 0
            assert!((got - exact).abs() / scale < 1e-12, "{got} vs {exact}");
            assert_eq!(got, dot(&b, &a).unwrap());
        }
    }

    #[test]
    fn softmax_examples() {
        for c in [-1e3, 0.0, 3.5, 1e3] {
            let p = softmax_stable(&[c; 4]).unwrap();
            assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-15));
        }
        assert_eq!(softmax_stable(&[42.0]).unwrap(), vec![1.0]);
        assert!(softmax_stable(&[]).is_err());

        // after shifting by the max, [1000, 1001] is [-1, 0]
        let p = softmax_stable(&[1000.0, 1001.0]).unwrap();
        let e = (-1.0f64).exp();
        let oracle = [e / (1.0 + e), 1.0 / (1.0 + e)];
        assert!((p[0] - oracle[0]).abs() < 1e-12);
        assert!((p[1] - oracle[1]).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_at_length_1e5() {
        let mut s = SeededStream::new(5);
        let x = s.normal_vec(100_000, 30.0);
        let p = softmax_stable(&x).unwrap();
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn stream_determinism_and_mean() {
        let mut a = SeededStream::new(99);
        let mut b = SeededStream::new(99);
        let mut c = SeededStream::new(100);
        let xs: Vec<u64> = (0..100).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..100).map(|_| b.next_u64()).collect();
        let zs: Vec<u64> = (0..100).map(|_| c.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);

        let mut u = SeededStream::new(3);
        let mean = (0..100_000).map(|_| u.uniform()).sum::<f64>() / 1e5;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn stream_golden_prefix() {
        // SplitMix64 reference outputs for seed 0.
        let mut s = SeededStream::new(0);
        assert_eq!(s.next_u64(), 0xe220a8397b1dcdaf);
        assert_eq!(s.next_u64(), 0x6e789e6aa1b965f4);
    }

    #[test]
    fn central_difference_examples() {
        let g = central_difference(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);

        let g = central_difference(|_| 7.0, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);

        let err = central_difference(|x| 1.0 / x[0], &[1e-6], 1e-6);
        assert!(matches!(err, Err(GazeError::Numeric(_))));
    }

    #[test]
    fn central_difference_matches_softmax_jacobian() {
        // f(x) = sum_i softmax(x)_i * w_i  =>  df/dx_j = p_j (w_j - sum_i p_i w_i)
        let mut s = SeededStream::new(21);
        for _ in 0..20 {
            let x = s.normal_vec(4, 1.0);
            let w = s.normal_vec(4, 1.0);
            let f = |z: &[f64]| {
                let p = softmax_stable(z).unwrap();
                p.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
            };
            let p = softmax_stable(&x).unwrap();
            let mean: f64 = p.iter().zip(&w).map(|(a, b)| a * b).sum();
            let numeric = central_difference(f, &x, 1e-5).unwrap();
            for j in 0..4 {
                let analytic = p[j] * (w[j] - mean);
                assert!((analytic - numeric[j]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn matmul_shapes() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.row(2), &[5.0, 6.0, 16.0]);
        let t = a.transpose_matmul(&a).unwrap();
        assert_eq!(t.row(0), &[35.0, 44.0]);
        assert_eq!(vec_mat(&[1.0, 1.0, 1.0], &a).unwrap(), vec![9.0, 12.0]);
        assert_eq!(mat_vec(&a, &[1.0, 1.0]).unwrap(), vec![3.0, 7.0, 11.0]);
        assert!(a.matmul(&a).is_err());
    }
}
