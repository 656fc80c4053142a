//! Dense row-major matrices and the handful of factorizations the rest of
//! the crate needs: Cholesky solves for damped Hessians and a symmetric
//! eigensolver used as an oracle for power iteration.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("matrix is not positive definite (failing pivot {pivot}, value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e} at ({row}, {col}))")]
    NotSymmetric {
        row: usize,
        col: usize,
        asymmetry: f64,
    },
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("matrix is singular")]
    Singular,
}

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 64 {
            f.debug_list()
                .entries(self.values.chunks(self.cols.max(1)))
                .finish()?;
        }
        Ok(())
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, LinalgError> {
        if values.len() != rows * cols {
            return Err(LinalgError::Shape {
                op: "DenseMatrix::new",
                expected: format!("{} values ({rows}x{cols})", rows * cols),
                got: format!("{} values", values.len()),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.values[i * n + i] = *d;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(LinalgError::Shape {
                op: "DenseMatrix::from_rows",
                expected: format!("rows of length {cols}"),
                got: format!("row of length {}", bad.len()),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Assembles a matrix from its columns.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        let mut m = Self::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(LinalgError::Shape {
                    op: "DenseMatrix::from_columns",
                    expected: format!("columns of length {rows}"),
                    got: format!("column of length {}", c.len()),
                });
            }
            for (i, v) in c.iter().enumerate() {
                m.values[i * cols + j] = *v;
            }
        }
        if let Some(i) = m.values.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        t
    }

    /// Largest absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn norm_frobenius(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest `|a_ij - a_ji|` with its location.
    pub fn max_asymmetry(&self) -> (usize, usize, f64) {
        let mut worst = (0, 0, 0.0);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                let d = (self.get(i, j) - self.get(j, i)).abs();
                if d > worst.2 {
                    worst = (i, j, d);
                }
            }
        }
        worst
    }

    /// Checks symmetry within `rel_tol * max|a_ij|`.
    pub fn check_symmetric(&self, rel_tol: f64) -> Result<(), LinalgError> {
        if !self.is_square() {
            return Err(LinalgError::Shape {
                op: "check_symmetric",
                expected: "square matrix".into(),
                got: format!("{}x{}", self.rows, self.cols),
            });
        }
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let (row, col, asymmetry) = self.max_asymmetry();
        if asymmetry > rel_tol * scale.max(f64::MIN_POSITIVE) {
            return Err(LinalgError::NotSymmetric {
                row,
                col,
                asymmetry,
            });
        }
        Ok(())
    }

    /// Replaces the matrix with `(A + Aᵀ) / 2`.
    pub fn symmetrize(&mut self) {
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let m = 0.5 * (self.get(i, j) + self.get(j, i));
                self.set(i, j, m);
                self.set(j, i, m);
            }
        }
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if v.len() != self.cols {
            return Err(LinalgError::Shape {
                op: "matvec",
                expected: format!("vector of length {} (matrix {}x{})", self.cols, self.rows, self.cols),
                got: format!("vector of length {}", v.len()),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }
}

pub fn matvec(m: &DenseMatrix, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
    m.matvec(v)
}

/// Solves `(a + jitter·I) x = b` by Cholesky factorization.
///
/// The jitter is applied once. A non-positive pivot is reported with its
/// index rather than retried with a larger shift.
pub fn solve_spd(a: &DenseMatrix, b: &[f64], jitter: f64) -> Result<Vec<f64>, LinalgError> {
    a.check_symmetric(1e-10)?;
    let n = a.rows();
    if b.len() != n {
        return Err(LinalgError::Shape {
            op: "solve_spd",
            expected: format!("right-hand side of length {n}"),
            got: format!("length {}", b.len()),
        });
    }
    let l = cholesky(a, jitter)?;
    // forward: L y = b
    let mut y = vec![0.0; n];
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        y[i] = (b[i] - dot(row, &y[..i])) / l[i * n + i];
    }
    // backward: Lᵀ x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}

/// Solves `a x = b` for a square, possibly indefinite `a` by LU
/// factorization with partial pivoting.
pub fn solve_general(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let n = a.rows();
    if !a.is_square() || b.len() != n {
        return Err(LinalgError::Shape {
            op: "solve_general",
            expected: format!("square matrix and right-hand side of length {n}"),
            got: format!("{}x{} and length {}", a.rows(), a.cols(), b.len()),
        });
    }
    let m = nalgebra::DMatrix::from_row_slice(n, n, a.values());
    let x = m
        .lu()
        .solve(&nalgebra::DVector::from_column_slice(b))
        .ok_or(LinalgError::Singular)?;
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite(i));
    }
    Ok(x.iter().copied().collect())
}

/// Lower-triangular Cholesky factor of `a + jitter·I`, row-major.
fn cholesky(a: &DenseMatrix, jitter: f64) -> Result<Vec<f64>, LinalgError> {
    let n = a.rows();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            if i == j {
                let d = a.get(i, i) + jitter - s;
                if d <= 0.0 || !d.is_finite() {
                    return Err(LinalgError::NotPositiveDefinite { pivot: i, value: d });
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a.get(i, j) - s) / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Algebraically largest eigenvalue of a symmetric matrix and a unit
/// eigenvector for it.
pub fn dense_eigh_max(a: &DenseMatrix) -> Result<(f64, Vec<f64>), LinalgError> {
    a.check_symmetric(1e-8)?;
    let n = a.rows();
    if n == 0 {
        return Err(LinalgError::Shape {
            op: "dense_eigh_max",
            expected: "non-empty matrix".into(),
            got: "0x0".into(),
        });
    }
    let m = nalgebra::DMatrix::from_row_slice(n, n, a.values());
    let eig = m.symmetric_eigen();
    let (k, lambda) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    Ok((lambda, v))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v *= alpha);
}

/// `‖a - b‖ / max(‖b‖, tiny)`
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    diff / norm(b).max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn random_spd(n: usize, rng: &mut RngStream) -> DenseMatrix {
        let g = DenseMatrix::new(n, n, rng.normal(n * n)).unwrap();
        let mut a = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..n).map(|k| g.get(k, i) * g.get(k, j)).sum();
                a.set(i, j, s + if i == j { n as f64 * 0.1 } else { 0.0 });
            }
        }
        a
    }

    #[test]
    fn general_solve_handles_indefinite_systems() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, -3.0]]).unwrap();
        assert!(matches!(solve_spd(&a, &[1.0, 1.0], 0.0), Err(LinalgError::NotPositiveDefinite { .. })));
        let x = solve_general(&a, &[5.0, -4.0]).unwrap();
        assert!(relative_error(&x, &[1.0, 2.0]) < 1e-15);
        let sing = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(solve_general(&sing, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn matvec_examples() {
        let i3 = DenseMatrix::identity(3);
        assert_eq!(i3.matvec(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(DenseMatrix::zeros(2, 2).matvec(&[5.0, 7.0]).unwrap(), vec![0.0, 0.0]);
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn matvec_rejects_bad_shape() {
        let m = DenseMatrix::zeros(2, 3);
        let err = m.matvec(&[1.0, 2.0]).unwrap_err();
        assert!(err.to_string().contains("length 3"), "{err}");
    }

    #[test]
    fn new_rejects_non_finite() {
        assert_eq!(
            DenseMatrix::new(1, 2, vec![1.0, f64::NAN]).unwrap_err(),
            LinalgError::NonFinite(1)
        );
    }

    #[test]
    fn solve_spd_examples() {
        let x = solve_spd(&DenseMatrix::identity(2), &[4.0, 5.0], 0.0).unwrap();
        assert_eq!(x, vec![4.0, 5.0]);
        let x = solve_spd(&DenseMatrix::from_diagonal(&[2.0, 4.0]), &[2.0, 4.0], 0.0).unwrap();
        assert!(relative_error(&x, &[1.0, 1.0]) < 1e-15);
        let a = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let x = solve_spd(&a, &[3.0, 3.0], 0.0).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
        // multiply back
        assert!(relative_error(&a.matvec(&x).unwrap(), &[3.0, 3.0]) < 1e-15);
    }

    #[test]
    fn solve_spd_jitter_shifts_diagonal() {
        let x = solve_spd(&DenseMatrix::zeros(2, 2), &[1.0, 2.0], 0.5).unwrap();
        assert!(relative_error(&x, &[2.0, 4.0]) < 1e-15);
    }

    #[test]
    fn solve_spd_reports_failing_pivot() {
        let a = DenseMatrix::from_diagonal(&[1.0, 2.0, -1.0]);
        match solve_spd(&a, &[1.0, 1.0, 1.0], 0.0) {
            Err(LinalgError::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 2),
            other => panic!("expected pivot failure, got {other:?}"),
        }
        let err = solve_spd(&a, &[1.0; 3], 0.0).unwrap_err();
        assert!(err.to_string().contains("not positive definite"));
    }

    #[test]
    fn solve_spd_rejects_asymmetric() {
        let a = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(
            solve_spd(&a, &[1.0, 1.0], 0.0),
            Err(LinalgError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn solve_spd_residual_bound_random() {
        let mut rng = RngStream::new(11);
        for &n in &[1usize, 5, 40, 200] {
            let a = random_spd(n, &mut rng);
            let b = rng.normal(n);
            let x = solve_spd(&a, &b, 0.0).unwrap();
            let r = a.matvec(&x).unwrap();
            let res: f64 = r.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let bound = 1e-8 * (a.norm_frobenius() * norm(&x) + norm(&b));
            assert!(res <= bound, "n={n} residual {res:e} > {bound:e}");
            assert!(relative_error(&r, &b) < 1e-8);
        }
    }

    #[test]
    fn eigh_max_examples() {
        let (l, v) = dense_eigh_max(&DenseMatrix::from_diagonal(&[1.0, 2.0, 3.0])).unwrap();
        assert!((l - 3.0).abs() < 1e-14);
        assert!((v[2].abs() - 1.0).abs() < 1e-12 && v[0].abs() < 1e-12);

        let (l, v) = dense_eigh_max(&DenseMatrix::identity(4)).unwrap();
        assert!((l - 1.0).abs() < 1e-14);
        assert!((norm(&v) - 1.0).abs() < 1e-12);

        let a = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let (l, v) = dense_eigh_max(&a).unwrap();
        assert!((l - 3.0).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((v[0].abs() - h).abs() < 1e-12 && (v[1].abs() - h).abs() < 1e-12);
        assert!(v[0] * v[1] > 0.0);
    }

    #[test]
    fn eigh_max_picks_algebraic_not_magnitude() {
        let (l, _) = dense_eigh_max(&DenseMatrix::from_diagonal(&[-10.0, 2.0])).unwrap();
        assert_eq!(l, 2.0);
    }

    #[test]
    fn eigh_max_residual_random() {
        let mut rng = RngStream::new(5);
        let a = random_spd(60, &mut rng);
        let (l, v) = dense_eigh_max(&a).unwrap();
        let av = a.matvec(&v).unwrap();
        let res: f64 = av.iter().zip(&v).map(|(p, q)| (p - l * q).powi(2)).sum::<f64>().sqrt();
        assert!(res <= 1e-8 * a.norm_frobenius());
    }

    #[test]
    fn eigh_max_rejects_asymmetric() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 5.0], vec![0.0, 1.0]]).unwrap();
        assert!(dense_eigh_max(&a).is_err());
    }

    proptest! {
        #[test]
        fn matvec_is_linear(seed in 0u64..1000, alpha in -10.0f64..10.0, beta in -10.0f64..10.0) {
            let mut rng = RngStream::new(seed);
            let m = DenseMatrix::new(7, 5, rng.normal(35)).unwrap();
            let u = rng.normal(5);
            let w = rng.normal(5);
            let combo: Vec<f64> = u.iter().zip(&w).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = m.matvec(&combo).unwrap();
            let mu = m.matvec(&u).unwrap();
            let mw = m.matvec(&w).unwrap();
            let rhs: Vec<f64> = mu.iter().zip(&mw).map(|(a, b)| alpha * a + beta * b).collect();
            let scale = norm(&rhs).max(alpha.abs() * norm(&mu) + beta.abs() * norm(&mw)).max(1e-300);
            let diff: f64 = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(diff <= 1e-12 * scale);
        }

        #[test]
        fn solve_then_matvec_recovers_rhs(seed in 0u64..200, n in 1usize..30) {
            let mut rng = RngStream::new(seed);
            let a = random_spd(n, &mut rng);
            let b = rng.normal(n);
            let x = solve_spd(&a, &b, 0.0).unwrap();
            prop_assert!(relative_error(&a.matvec(&x).unwrap(), &b) < 1e-8);
        }
    }
}
