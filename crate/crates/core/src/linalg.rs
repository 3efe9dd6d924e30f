//! Dense row-major `f64` matrices and the handful of kernels the rest of the
//! crate needs: products, inversion, the spectral norm and the max norm.
//!
//! Products accumulate over the inner index in ascending order, skipping
//! exact zeros of the left operand. Skipping a zero term never changes a
//! finite sum, and the fixed order is relied on by the attention-head
//! constructions, which cancel gate terms to exactly `0.0`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {op} of {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is numerically singular (pivot {index} has magnitude {magnitude:e})")]
    Singular { index: usize, magnitude: f64 },
    #[error("power iteration did not converge after {iterations} iterations (last gap {gap:e})")]
    NoConvergence { iterations: usize, gap: f64 },
    #[error("entries length {len} does not match shape {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },
}

/// Pivots smaller than this are treated as exact zeros by [`invert`].
pub const PIVOT_TOLERANCE: f64 = 1e-12;

const POWER_MAX_ITERS: usize = 10_000;
const POWER_REL_TOL: f64 = 1e-14;

#[derive(Clone, PartialEq)]
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.check_same(other, "add")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.check_same(other, "sub")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<(), LinalgError> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Matrix) {
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(r0 + i, c0 + j)] = block[(i, j)];
            }
        }
    }

    fn check_same(&self, other: &Matrix, op: &'static str) -> Result<(), LinalgError> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let out = &mut c.data[i * n..(i + 1) * n];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            for (o, &bkj) in out.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(c)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.cols, b.cols);
    let n = b.cols;
    for k in 0..a.rows {
        let brow = &b.data[k * n..(k + 1) * n];
        for i in 0..a.cols {
            let aki = a.data[k * a.cols + i];
            if aki == 0.0 {
                continue;
            }
            let out = &mut c.data[i * n..(i + 1) * n];
            for (o, &bkj) in out.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(c)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.cols {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.rows, b.rows);
    let kdim = a.cols;
    for i in 0..a.rows {
        let arow = &a.data[i * kdim..(i + 1) * kdim];
        for j in 0..b.rows {
            let brow = &b.data[j * kdim..(j + 1) * kdim];
            c.data[i * b.rows + j] = dot(arow, brow);
        }
    }
    Ok(c)
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let xs = x.chunks_exact(4);
    let ys = y.chunks_exact(4);
    let (xr, yr) = (xs.remainder(), ys.remainder());
    for (a, b) in xs.zip(ys) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = 0.0;
    for (a, b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `a · x` for a vector `x`.
pub fn matvec(a: &Matrix, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if a.cols != x.len() {
        return Err(LinalgError::DimensionMismatch {
            op: "matvec",
            left: a.shape(),
            right: (x.len(), 1),
        });
    }
    Ok((0..a.rows)
        .map(|i| a.row(i).iter().zip(x).map(|(p, q)| p * q).sum())
        .collect())
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn invert(a: &Matrix) -> Result<Matrix, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let n = a.rows;
    let mut work = a.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let (pivot_row, magnitude) = (col..n)
            .map(|r| (r, work[(r, col)].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(magnitude >= PIVOT_TOLERANCE) {
            return Err(LinalgError::Singular {
                index: col,
                magnitude,
            });
        }
        if pivot_row != col {
            swap_rows(&mut work, pivot_row, col);
            swap_rows(&mut inv, pivot_row, col);
        }
        let p = work[(col, col)];
        for j in 0..n {
            work[(col, j)] /= p;
            inv[(col, j)] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = work[(r, col)];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                work[(r, j)] -= factor * work[(col, j)];
                inv[(r, j)] -= factor * inv[(col, j)];
            }
        }
    }
    Ok(inv)
}

fn swap_rows(m: &mut Matrix, a: usize, b: usize) {
    if a == b {
        return;
    }
    let cols = m.cols;
    for j in 0..cols {
        m.data.swap(a * cols + j, b * cols + j);
    }
}

/// Largest entry in absolute value; `0` for an empty matrix.
pub fn max_norm(a: &Matrix) -> f64 {
    a.data.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Largest singular value by power iteration on `aᵀa`.
///
/// The iteration starts from the normalized all-ones vector. A second run
/// from a fixed non-uniform vector guards against a start that happens to
/// be orthogonal to the top singular direction; the larger estimate wins.
pub fn spectral_norm(a: &Matrix) -> Result<f64, LinalgError> {
    if a.rows == 0 || a.cols == 0 || max_norm(a) == 0.0 {
        return Ok(0.0);
    }
    let gram = matmul_tn(a, a)?;
    let n = gram.rows;
    let ones = vec![1.0; n];
    let skewed: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 + 1.0).sqrt()).collect();
    let l1 = power_top_eigenvalue(&gram, ones)?;
    let l2 = power_top_eigenvalue(&gram, skewed)?;
    Ok(l1.max(l2).max(0.0).sqrt())
}

fn power_top_eigenvalue(sym: &Matrix, start: Vec<f64>) -> Result<f64, LinalgError> {
    let mut v = start;
    normalize(&mut v);
    let mut lambda = 0.0_f64;
    let mut gap = f64::INFINITY;
    for _ in 0..POWER_MAX_ITERS {
        let w = matvec(sym, &v)?;
        let next: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        gap = (next - lambda).abs();
        lambda = next;
        v = w.into_iter().map(|x| x / norm).collect();
        if gap <= POWER_REL_TOL * lambda.abs().max(f64::MIN_POSITIVE) {
            return Ok(lambda);
        }
    }
    Err(LinalgError::NoConvergence {
        iterations: POWER_MAX_ITERS,
        gap,
    })
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lcg_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Matrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                c[(i, j)] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_annihilation() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
        let p = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let col = Matrix::from_rows(&[vec![0.0], vec![5.0]]);
        assert_eq!(
            matmul(&p, &col).unwrap(),
            Matrix::from_rows(&[vec![0.0], vec![0.0]])
        );
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = lcg_matrix(3, 4, 1);
        let b = lcg_matrix(4, 2, 2);
        let fast = matmul(&a, &b).unwrap();
        let slow = triple_loop(&a, &b);
        assert!(max_norm(&fast.sub(&slow).unwrap()) <= 1e-12);
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        assert!(max_norm(&tn.sub(&slow).unwrap()) <= 1e-12);
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        assert!(max_norm(&nt.sub(&slow).unwrap()) <= 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, LinalgError::DimensionMismatch { .. }));
    }

    #[test]
    fn invert_simple_cases() {
        let inv = invert(&Matrix::diag(&[2.0, 4.0])).unwrap();
        assert_eq!(inv, Matrix::diag(&[0.5, 0.25]));
        assert_eq!(invert(&Matrix::identity(5)).unwrap(), Matrix::identity(5));
    }

    #[test]
    fn invert_random_spd() {
        let b = lcg_matrix(4, 4, 7);
        let spd = matmul_tn(&b, &b)
            .unwrap()
            .add(&Matrix::identity(4).scale(0.5))
            .unwrap();
        let inv = invert(&spd).unwrap();
        let prod = matmul(&inv, &spd).unwrap();
        assert!(max_norm(&prod.sub(&Matrix::identity(4)).unwrap()) <= 1e-9);
    }

    #[test]
    fn invert_singular_reports_pivot() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        match invert(&m) {
            Err(LinalgError::Singular { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected singular error, got {other:?}"),
        }
        assert!(matches!(
            invert(&Matrix::zeros(2, 3)),
            Err(LinalgError::NotSquare { .. })
        ));
    }

    #[test]
    fn spectral_norm_simple_cases() {
        assert!((spectral_norm(&Matrix::diag(&[3.0, 1.0])).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(spectral_norm(&Matrix::zeros(3, 3)).unwrap(), 0.0);
        // top singular direction orthogonal to the all-ones start
        let m = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]);
        assert!((spectral_norm(&m).unwrap() - 2.0).abs() < 1e-10);
    }

    /// Counts eigenvalues of the symmetric `s` strictly below `lambda` from
    /// the sign changes of the leading principal minors of `s - lambda I`.
    fn count_below(s: &Matrix, lambda: f64) -> usize {
        let n = s.rows();
        let mut m = s.clone();
        for i in 0..n {
            m[(i, i)] -= lambda;
        }
        let mut negatives = 0;
        for k in 0..n {
            let pivot = m[(k, k)];
            if pivot < 0.0 {
                negatives += 1;
            }
            for r in k + 1..n {
                let f = m[(r, k)] / pivot;
                for c in k..n {
                    m[(r, c)] -= f * m[(k, c)];
                }
            }
        }
        negatives
    }

    fn top_eigen_by_bisection(s: &Matrix) -> f64 {
        let n = s.rows();
        let mut hi: f64 = (0..n).map(|i| s.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max) + 1.0;
        let mut lo = -hi;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if count_below(s, mid) == n {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn spectral_norm_matches_bisection_oracle() {
        for seed in 0..5 {
            let a = lcg_matrix(5, 5, 100 + seed);
            let gram = matmul_tn(&a, &a).unwrap();
            let expected = top_eigen_by_bisection(&gram).sqrt();
            let got = spectral_norm(&a).unwrap();
            assert!((got - expected).abs() <= 1e-5, "{got} vs {expected}");
        }
    }

    #[test]
    fn max_norm_cases() {
        let m = Matrix::from_rows(&[vec![-7.0, 2.0], vec![0.0, 3.0]]);
        assert_eq!(max_norm(&m), 7.0);
        assert_eq!(max_norm(&Matrix::zeros(2, 2)), 0.0);
        let r = lcg_matrix(6, 7, 3);
        let scan = r.as_slice().iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert_eq!(max_norm(&r), scan);
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = max_norm(&left).max(1.0);
            prop_assert!(max_norm(&left.sub(&right).unwrap()) <= 1e-9 * scale);
        }

        #[test]
        fn invert_twice_is_identity(b in small_matrix(4, 4)) {
            let spd = matmul_tn(&b, &b).unwrap().add(&Matrix::identity(4)).unwrap();
            let twice = invert(&invert(&spd).unwrap()).unwrap();
            prop_assert!(max_norm(&twice.sub(&spd).unwrap()) <= 1e-7 * max_norm(&spd));
        }

        #[test]
        fn spectral_norm_transpose_invariant(a in small_matrix(4, 3)) {
            let s1 = spectral_norm(&a).unwrap();
            let s2 = spectral_norm(&a.transpose()).unwrap();
            prop_assert!((s1 - s2).abs() <= 1e-8 * s1.max(1.0));
        }

        #[test]
        fn max_norm_is_homogeneous(a in small_matrix(3, 3), k in -8i32..8) {
            let c = 2f64.powi(k);
            prop_assert_eq!(max_norm(&a.scale(c)), c.abs() * max_norm(&a));
        }
    }
}
