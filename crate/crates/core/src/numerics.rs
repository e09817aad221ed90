//! Dense row-major matrices and the handful of kernels the adapter needs.
//!
//! Everything here runs in `f64`. The kernels are pure functions; nothing in
//! this module holds shared state.

use std::fmt;

use crate::error::{Error, Result};

/// Guard used by [`rowwise_l2_normalize`] so that zero rows stay zero.
pub const NORM_EPS: f64 = 1e-12;

/// Row-major dense matrix of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut list = f.debug_list();
        for r in 0..self.rows {
            list.entry(&self.row(r));
        }
        list.finish()
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    /// Wraps data produced by an internal kernel. Finiteness is the caller's
    /// responsibility.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero; an empty-column matrix has no row data.
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(indices.len(), self.cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let out_row = &mut out[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    finite_or_err(Matrix::from_raw(a.rows, b.cols, out), "matmul")
}

/// `a · bᵀ` without materialising the transpose.
pub(crate) fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "cannot multiply {}x{} by transpose of {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for ar in a.row_iter() {
        for br in b.row_iter() {
            out.push(dot(ar, br));
        }
    }
    finite_or_err(Matrix::from_raw(a.rows, b.rows, out), "matmul")
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn finite_or_err(m: Matrix, what: &str) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::Numeric(format!("{what} produced a non-finite value")))
    }
}

/// Softmax of one slice in place, stabilised by subtracting the maximum.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax with row-max subtraction.
pub fn rowwise_softmax(m: &Matrix) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

/// Divides each row by `max(‖row‖₂, NORM_EPS)`.
pub fn rowwise_l2_normalize(m: &Matrix) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(Error::Numeric("normalize input is not finite".into()));
    }
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let denom = l2_norm(row).max(NORM_EPS);
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    Ok(out)
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central-difference gradient of `f` at `x` with step `h`.
///
/// Used as the reference against which every analytic gradient is checked.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::param(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::Oracle(i));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest coordinate-wise relative error between two gradients.
///
/// Each coordinate is scaled by `max(|a|, |b|, floor)`; the floor keeps
/// coordinates whose true value is zero from amplifying round-off noise.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.data[i * b.cols() + j] = acc;
            }
        }
        out
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(matches!(Matrix::new(2, 2, vec![1.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(Matrix::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn identity_times_x_is_x() {
        let x = Matrix::from_rows(&[[1.5, -2.0, 3.0], [0.0, 4.0, 7.25]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &x).unwrap(), x);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[5.0], [6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), (2, 1));
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn mismatched_product_is_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_agrees_with_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 7, 5);
            let b = random_matrix(&mut rng, 5, 3);
            let fast = matmul(&a, &b).unwrap();
            let slow = naive_matmul(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
            let bt = b.transpose();
            let via_t = matmul_transposed(&a, &bt).unwrap();
            for (x, y) in via_t.data().iter().zip(slow.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let m = Matrix::from_rows(&[[0.0, 0.0], [0.0, 3f64.ln()]]).unwrap();
        let s = rowwise_softmax(&m).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.get(1, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(1, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let m = Matrix::from_rows(&[[1000.0, 999.0, -1000.0]]).unwrap();
        let s = rowwise_softmax(&m).unwrap();
        assert!(s.is_finite());
        assert!((s.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seeded_row_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_matrix(&mut rng, 1, 5);
        let s = rowwise_softmax(&m).unwrap();
        assert!((s.row(0).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn normalize_cases() {
        let m = Matrix::from_rows(&[[3.0, 4.0], [1.0, 0.0], [0.0, 0.0]]).unwrap();
        let n = rowwise_l2_normalize(&m).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(n.row(1), &[1.0, 0.0]);
        assert_eq!(n.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn finite_diff_on_simple_functions() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn finite_diff_reports_non_finite() {
        let err = finite_diff_grad(|x| if x[1] > 0.0 { f64::NAN } else { 0.0 }, &[0.0, 0.0], 1e-3)
            .unwrap_err();
        assert!(matches!(err, Error::Oracle(1)));
    }

    fn finite_rows(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        finite_rows_in(rows, cols, 50.0)
    }

    fn finite_rows_in(rows: usize, cols: usize, bound: f64) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-bound..bound, rows * cols)
            .prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        // Spread kept moderate: with a gap near 40 the largest entry rounds to 1.0.
        fn softmax_rows_are_distributions(m in finite_rows_in(3, 6, 10.0)) {
            let s = rowwise_softmax(&m).unwrap();
            for row in s.row_iter() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }

        #[test]
        fn softmax_is_shift_invariant(m in finite_rows(2, 5), c in -20.0f64..20.0) {
            let shifted = Matrix::new(2, 5, m.data().iter().map(|v| v + c).collect()).unwrap();
            let a = rowwise_softmax(&m).unwrap();
            let b = rowwise_softmax(&shifted).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn normalize_is_idempotent(m in finite_rows(4, 3)) {
            let once = rowwise_l2_normalize(&m).unwrap();
            let twice = rowwise_l2_normalize(&once).unwrap();
            for (x, y) in once.data().iter().zip(twice.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
