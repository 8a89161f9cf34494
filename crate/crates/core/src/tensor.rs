//! Dense linear-algebra substrate.
//!
//! Row-major `f64` matrices, a vector newtype, a matrix-free conjugate
//! gradient solver and a small Cholesky factorization used as its dense
//! backstop. Everything here is a pure function of its inputs.

use std::ops::{Deref, DerefMut};

use crate::error::{DpcnError, Result};

/// Columns with norm below this are treated as zero.
pub const ZERO_COLUMN_EPS: f64 = 1e-12;

/// Owned vector of `f64`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector(vec![value; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm2(&self) -> f64 {
        norm2(&self.0)
    }

    pub fn norm1(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DpcnError::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(DpcnError::DimensionMismatch("ragged rows".into()));
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `M x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    /// `Mᵀ x`
    pub fn t_matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        self.t_matvec_into(x, &mut out);
        out
    }

    pub fn t_matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, xr) in x.iter().enumerate() {
            if *xr != 0.0 {
                axpy(*xr, self.row(r), out);
            }
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(DpcnError::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, a) in self.row(r).iter().enumerate() {
                if *a != 0.0 {
                    axpy(*a, other.row(k), dst);
                }
            }
        }
        Ok(out)
    }

    /// `Mᵀ M`, symmetric `cols x cols`.
    pub fn gram(&self) -> Matrix {
        let n = self.cols;
        let mut g = Matrix::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                let dst = &mut g.data[i * n..(i + 1) * n];
                for j in i..n {
                    dst[j] += ri * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g.data[i * n + j] = g.data[j * n + i];
            }
        }
        g
    }

    /// `self - alpha * other`, shapes must agree.
    pub fn sub_scaled(&self, alpha: f64, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(DpcnError::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - alpha * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn frobenius(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn column_norms(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, v) in sq.iter_mut().zip(self.row(r)) {
                *s += v * v;
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    /// Largest eigenvalue of `Mᵀ M` by power iteration.
    pub fn spectral_norm_sq(&self, iters: usize) -> f64 {
        if self.cols == 0 || self.rows == 0 {
            return 0.0;
        }
        let mut v = vec![1.0 / (self.cols as f64).sqrt(); self.cols];
        let mut est = 0.0;
        for _ in 0..iters {
            let w = self.t_matvec(&self.matvec(&v));
            let n = norm2(&w);
            if n == 0.0 {
                return 0.0;
            }
            est = dot(&v, &w);
            v = w.into_iter().map(|x| x / n).collect();
        }
        // one more Rayleigh quotient on the converged direction
        let w = self.t_matvec(&self.matvec(&v));
        est.max(dot(&v, &w))
    }
}

/// Scale every column to unit ℓ2 norm.
pub fn column_normalize(m: &Matrix) -> Result<Matrix> {
    let norms = m.column_norms();
    if let Some(c) = norms.iter().position(|n| *n < ZERO_COLUMN_EPS) {
        return Err(DpcnError::ZeroColumn(c));
    }
    let mut out = m.clone();
    for r in 0..out.rows {
        let cols = out.cols;
        for (v, n) in out.data[r * cols..(r + 1) * cols].iter_mut().zip(&norms) {
            *v /= n;
        }
    }
    Ok(out)
}

/// Conjugate gradient for a symmetric positive-definite operator.
///
/// `apply(v, out)` must write `M v` into `out`. Stops once
/// `‖M z − b‖₂ ≤ tol · max(1, ‖b‖₂)`.
pub fn cg_solve<F>(apply: F, b: &[f64], tol: f64, max_iter: usize) -> Result<Vector>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let target = tol * norm2(b).max(1.0);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    if !rr.is_finite() {
        return Err(DpcnError::NonFinite("conjugate gradient"));
    }
    if rr.sqrt() <= target {
        return Ok(Vector(x));
    }
    for it in 0..max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !pap.is_finite() {
            return Err(DpcnError::NonFinite("conjugate gradient"));
        }
        if pap <= 0.0 {
            return Err(DpcnError::NonConvergence {
                iterations: it,
                residual: rr.sqrt(),
            });
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rr_new = dot(&r, &r);
        if !rr_new.is_finite() {
            return Err(DpcnError::NonFinite("conjugate gradient"));
        }
        if rr_new.sqrt() <= target {
            // recompute the true residual; the recursive one drifts
            apply(&x, &mut ap);
            let true_res = ap
                .iter()
                .zip(b)
                .map(|(a, bi)| (a - bi) * (a - bi))
                .sum::<f64>()
                .sqrt();
            if true_res <= target {
                return Ok(Vector(x));
            }
            r = b.iter().zip(&ap).map(|(bi, a)| bi - a).collect();
            p.copy_from_slice(&r);
            rr = dot(&r, &r);
            continue;
        }
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }
    Err(DpcnError::NonConvergence {
        iterations: max_iter,
        residual: rr.sqrt(),
    })
}

/// Cholesky factor `L` of an SPD matrix (`M = L Lᵀ`), lower triangle row-major.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(m: &Matrix) -> Result<Self> {
        let (rows, cols) = m.shape();
        if rows != cols {
            return Err(DpcnError::DimensionMismatch(format!(
                "cholesky of {rows}x{cols}"
            )));
        }
        let n = rows;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let s = dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
                if i == j {
                    let d = m.get(i, i) - s;
                    if d <= 0.0 || !d.is_finite() {
                        return Err(DpcnError::NotPositiveDefinite);
                    }
                    l[i * n + i] = d.sqrt();
                } else {
                    l[i * n + j] = (m.get(i, j) - s) / l[j * n + j];
                }
            }
        }
        Ok(Cholesky { n, l })
    }

    pub fn solve(&self, b: &[f64]) -> Vector {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let s = dot(&self.l[i * n..i * n + i], &y[..i]);
            y[i] = (y[i] - s) / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        Vector(y)
    }
}

/// Solve `M z = b` for SPD `M` by Cholesky.
pub fn solve_spd(m: &Matrix, b: &[f64]) -> Result<Vector> {
    if m.rows() != b.len() {
        return Err(DpcnError::DimensionMismatch(format!(
            "{}x{} system with rhs of length {}",
            m.rows(),
            m.cols(),
            b.len()
        )));
    }
    Ok(Cholesky::factor(m)?.solve(b))
}

/// Conjugate gradient on an explicit SPD matrix with the default
/// dense fallback when CG stalls.
pub fn solve_spd_cg(m: &Matrix, b: &[f64], tol: f64, max_iter: usize) -> Result<Vector> {
    match cg_solve(|v, out| m.matvec_into(v, out), b, tol, max_iter) {
        Ok(z) => Ok(z),
        Err(DpcnError::NonConvergence { .. }) => solve_spd(m, b),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let g = random_matrix(rng, n, n);
        let mut m = g.gram();
        for i in 0..n {
            m.set(i, i, m.get(i, i) + 1.0);
        }
        m
    }

    fn lu_oracle(m: &Matrix, b: &[f64]) -> Vec<f64> {
        let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
        let db = DVector::from_column_slice(b);
        dm.lu().solve(&db).unwrap().iter().copied().collect()
    }

    #[test]
    fn cg_identity_and_diagonal() {
        let z = cg_solve(|v, o| o.copy_from_slice(v), &[3.0, -1.0], 1e-8, 2).unwrap();
        assert_eq!(z.as_slice(), &[3.0, -1.0]);

        let d = [2.0, 4.0];
        let z = cg_solve(
            |v, o| {
                for i in 0..2 {
                    o[i] = d[i] * v[i];
                }
            },
            &[2.0, 8.0],
            1e-8,
            2,
        )
        .unwrap();
        assert!((z[0] - 1.0).abs() < 1e-12 && (z[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cg_matches_lu_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_spd(&mut rng, 8);
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = cg_solve(|v, o| m.matvec_into(v, o), &b, 1e-12, 64).unwrap();
        let oracle = lu_oracle(&m, &b);
        for (a, e) in z.iter().zip(&oracle) {
            assert!((a - e).abs() < 1e-8 * e.abs().max(1.0));
        }
    }

    #[test]
    fn cg_reports_nonconvergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_spd(&mut rng, 20);
        let b = vec![1.0; 20];
        let err = cg_solve(|v, o| m.matvec_into(v, o), &b, 1e-14, 1).unwrap_err();
        assert!(matches!(err, DpcnError::NonConvergence { .. }));
        // dense backstop still solves it
        let z = solve_spd_cg(&m, &b, 1e-14, 1).unwrap();
        let oracle = lu_oracle(&m, &b);
        for (a, e) in z.iter().zip(&oracle) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn cg_rejects_non_finite() {
        let err = cg_solve(|v, o| o.copy_from_slice(v), &[f64::NAN, 1.0], 1e-8, 4).unwrap_err();
        assert!(matches!(err, DpcnError::NonFinite(_)));
    }

    #[test]
    fn column_normalize_examples() {
        let m = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let n = column_normalize(&m).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(1, 0) - 0.8).abs() < 1e-15);

        let eye = Matrix::identity(4);
        assert_eq!(column_normalize(&eye).unwrap(), eye);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = random_matrix(&mut rng, 5, 7);
        let n = column_normalize(&r).unwrap();
        for norm in n.column_norms() {
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn column_normalize_zero_column() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert!(matches!(column_normalize(&m), Err(DpcnError::ZeroColumn(1))));
    }

    #[test]
    fn gram_and_matmul_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_matrix(&mut rng, 6, 4);
        let g1 = c.gram();
        let g2 = c.transpose().matmul(&c).unwrap();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_norm_matches_eigen() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = random_matrix(&mut rng, 6, 9);
        let g = c.gram();
        let dm = DMatrix::from_row_slice(9, 9, g.data());
        let top = dm
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::MIN, |a, b| a.max(*b));
        assert!((c.spectral_norm_sq(500) - top).abs() < 1e-6 * top);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn cg_agrees_with_dense_solve(seed in any::<u64>(), n in 1usize..=64) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_spd(&mut rng, n);
                let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let z = solve_spd_cg(&m, &b, 1e-12, 4 * n).unwrap();
                let oracle = lu_oracle(&m, &b);
                let num: f64 = z.iter().zip(&oracle).map(|(a, e)| (a - e).powi(2)).sum::<f64>().sqrt();
                prop_assert!(num <= 1e-8 * norm2(&oracle).max(1e-300));
            }

            #[test]
            fn column_normalize_idempotent(seed in any::<u64>(), r in 1usize..8, c in 1usize..8) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_matrix(&mut rng, r, c);
                prop_assume!(m.column_norms().iter().all(|n| *n > 1e-6));
                let once = column_normalize(&m).unwrap();
                let twice = column_normalize(&once).unwrap();
                for (a, b) in once.data().iter().zip(twice.data()) {
                    prop_assert!((a - b).abs() <= 1e-15);
                }
            }
        }
    }
}
