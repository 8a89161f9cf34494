//! Majorization machinery shared by state and cause inference.
//!
//! * the smoothed ℓ1 approximator `f_s(e) = α*ᵀe − (m/2)‖α*‖²`, `α* = clip(e/m, −1, 1)`;
//! * the quadratic majorizer `h(x, v) = ½ xᵀ diag(w/|v|) x + Σ w|v_k|/2 ≥ w‖x‖₁`;
//! * the reweighting diagonal `R = diag(|v|/w)`, the inverse of the majorizer's curvature;
//! * `T(C, R) = R − R Cᵀ(I + C R Cᵀ)⁻¹ C R = (CᵀC + R⁻¹)⁻¹` restricted to the support of `R`.

use crate::error::{DpcnError, Result};
use crate::tensor::{cg_solve, dot, solve_spd, Cholesky, Matrix, Vector};

/// Inner `P×P` systems at or below this size are factorized densely.
pub const DENSE_INNER_MAX: usize = 32;

/// Residual tolerance for the inner conjugate gradient solve.
pub const INNER_CG_TOL: f64 = 1e-12;

/// `α* = clip(e / m, −1, 1)` componentwise.
pub fn soft_clip(e: &[f64], m: f64) -> Vector {
    e.iter().map(|v| (v / m).clamp(-1.0, 1.0)).collect::<Vec<_>>().into()
}

/// Nesterov smoothing of `‖e‖₁`; never exceeds it, and falls short by at most `m/2` per component.
pub fn smooth_l1(e: &[f64], m: f64) -> f64 {
    e.iter()
        .map(|v| {
            let a = (v / m).clamp(-1.0, 1.0);
            a * v - 0.5 * m * a * a
        })
        .sum()
}

/// The smoothed temporal term at a given innovation `e = x − A x_prev`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothApprox {
    pub alpha_star: Vector,
    pub m_smooth: f64,
    pub innovation: Vector,
}

impl SmoothApprox {
    pub fn new(innovation: Vector, m_smooth: f64) -> Self {
        let alpha_star = soft_clip(&innovation, m_smooth);
        SmoothApprox {
            alpha_star,
            m_smooth,
            innovation,
        }
    }

    pub fn value(&self) -> f64 {
        dot(&self.alpha_star, &self.innovation)
            - 0.5 * self.m_smooth * dot(&self.alpha_star, &self.alpha_star)
    }
}

/// `h(x, v)` for the penalty `weight·‖x‖₁`, touching it at `|x| = |v|`.
///
/// Components with `v_k = 0` are exact-zero carriers: they contribute 0 when
/// `x_k = 0` and `+∞` otherwise.
pub fn majorizer_value(x: &[f64], v: &[f64], weight: f64) -> f64 {
    debug_assert_eq!(x.len(), v.len());
    x.iter()
        .zip(v)
        .map(|(xk, vk)| {
            let av = vk.abs();
            if av == 0.0 {
                if *xk == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                0.5 * weight / av * xk * xk + 0.5 * weight * av
            }
        })
        .sum()
}

/// `R = diag(|v| / weight)`. Zero components stay zero under every update.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightDiagonal {
    pub r: Vector,
    pub weight: f64,
}

impl ReweightDiagonal {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    /// Indices with `r_k > 0`.
    pub fn support(&self) -> Vec<usize> {
        self.r
            .iter()
            .enumerate()
            .filter(|(_, r)| **r > 0.0)
            .map(|(k, _)| k)
            .collect()
    }

    /// Majorizer curvature `W = R⁻¹`; infinite off the support.
    pub fn curvature(&self) -> Vector {
        self.r
            .iter()
            .map(|r| if *r > 0.0 { 1.0 / r } else { f64::INFINITY })
            .collect::<Vec<_>>()
            .into()
    }
}

pub fn reweight(v: &[f64], weight: f64) -> ReweightDiagonal {
    ReweightDiagonal {
        r: v.iter().map(|x| x.abs() / weight).collect::<Vec<_>>().into(),
        weight,
    }
}

/// How the `P×P` system `(I + C R Cᵀ)` is solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerSolve {
    /// Dense Cholesky up to [`DENSE_INNER_MAX`], conjugate gradient above.
    Auto,
    Dense,
    ConjugateGradient,
}

/// `T(C, R) · rhs` through the matrix inverse lemma.
pub fn woodbury_apply(c: &Matrix, r: &ReweightDiagonal, rhs: &[f64]) -> Result<Vector> {
    woodbury_apply_with(c, r, rhs, InnerSolve::Auto)
}

pub fn woodbury_apply_with(
    c: &Matrix,
    r: &ReweightDiagonal,
    rhs: &[f64],
    solve: InnerSolve,
) -> Result<Vector> {
    let (p, k) = c.shape();
    if r.len() != k || rhs.len() != k {
        return Err(DpcnError::DimensionMismatch(format!(
            "C is {p}x{k}, R has {} entries, rhs has {}",
            r.len(),
            rhs.len()
        )));
    }
    let support = r.support();
    if support.is_empty() {
        return Ok(Vector::zeros(k));
    }
    // w = R rhs, v = C w
    let w: Vec<f64> = rhs.iter().zip(r.r.iter()).map(|(b, ri)| ri * b).collect();
    let v = c.matvec(&w);

    let dense = match solve {
        InnerSolve::Dense => true,
        InnerSolve::ConjugateGradient => false,
        InnerSolve::Auto => p <= DENSE_INNER_MAX,
    };
    let z = if dense {
        solve_spd(&inner_matrix(c, r, &support), &v)?
    } else {
        let apply = |q: &[f64], out: &mut [f64]| {
            // out = q + C R Cᵀ q, restricted to the support
            out.copy_from_slice(q);
            let mut coeff = vec![0.0; support.len()];
            for row in 0..p {
                let crow = c.row(row);
                let qr = q[row];
                if qr == 0.0 {
                    continue;
                }
                for (s, &kk) in coeff.iter_mut().zip(&support) {
                    *s += crow[kk] * qr;
                }
            }
            for (s, &kk) in coeff.iter_mut().zip(&support) {
                *s *= r.r[kk];
            }
            for (row, o) in out.iter_mut().enumerate() {
                let crow = c.row(row);
                *o += support
                    .iter()
                    .zip(&coeff)
                    .map(|(&kk, s)| crow[kk] * s)
                    .sum::<f64>();
            }
        };
        match cg_solve(apply, &v, INNER_CG_TOL, p.max(1) * 4) {
            Ok(z) => z,
            Err(DpcnError::NonConvergence { .. }) => {
                solve_spd(&inner_matrix(c, r, &support), &v)?
            }
            Err(e) => return Err(e),
        }
    };
    // out = w − R Cᵀ z
    let ctz = c.t_matvec(&z);
    let out: Vec<f64> = w
        .iter()
        .zip(r.r.iter())
        .zip(&ctz)
        .map(|((wi, ri), ci)| wi - ri * ci)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(DpcnError::NonFinite("woodbury_apply"));
    }
    Ok(out.into())
}

/// `I + C_S R_S C_Sᵀ`
fn inner_matrix(c: &Matrix, r: &ReweightDiagonal, support: &[usize]) -> Matrix {
    let p = c.rows();
    let mut m = Matrix::identity(p);
    let scaled: Vec<Vec<f64>> = (0..p)
        .map(|row| support.iter().map(|&k| c.get(row, k)).collect())
        .collect();
    let rs: Vec<f64> = support.iter().map(|&k| r.r[k]).collect();
    for i in 0..p {
        for j in i..p {
            let s: f64 = scaled[i]
                .iter()
                .zip(&scaled[j])
                .zip(&rs)
                .map(|((a, b), rr)| a * b * rr)
                .sum();
            let v = m.get(i, j) + s;
            m.set(i, j, v);
            if i != j {
                m.set(j, i, v);
            }
        }
    }
    m
}

/// `(C_SᵀC_S + W_S)⁻¹ rhs_S` on the support, zero elsewhere, from a cached Gram matrix.
///
/// Same operator as [`woodbury_apply`]; cheaper once the support is smaller
/// than the patch dimension.
pub fn support_apply(gram: &Matrix, r: &ReweightDiagonal, rhs: &[f64]) -> Result<Vector> {
    let k = gram.rows();
    if r.len() != k || rhs.len() != k {
        return Err(DpcnError::DimensionMismatch(format!(
            "Gram is {k}x{k}, R has {} entries, rhs has {}",
            r.len(),
            rhs.len()
        )));
    }
    let support = r.support();
    let s = support.len();
    let mut out = Vector::zeros(k);
    if s == 0 {
        return Ok(out);
    }
    let mut m = Matrix::zeros(s, s);
    for (i, &ki) in support.iter().enumerate() {
        let grow = gram.row(ki);
        for (j, &kj) in support.iter().enumerate() {
            m.set(i, j, grow[kj]);
        }
        m.set(i, i, m.get(i, i) + 1.0 / r.r[ki]);
    }
    let b: Vec<f64> = support.iter().map(|&k| rhs[k]).collect();
    let z = Cholesky::factor(&m)?.solve(&b);
    for (&kk, v) in support.iter().zip(z.iter()) {
        out[kk] = *v;
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(DpcnError::NonFinite("support_apply"));
    }
    Ok(out)
}
