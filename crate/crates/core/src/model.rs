//! Generative-model types and exact objective evaluators.
//!
//! One layer explains each patch `y_n ≈ C x_n` with sparse states that
//! evolve through `x_t ≈ A x_{t−1}`, and a per-frame cause `u` that gates the
//! pooled state magnitudes through `B`:
//!
//! ```text
//! E_x = Σ_n ½‖y_n − C x_n‖² + μ‖x_n‖₁ + λ‖x_n − A x_{t−1,n}‖₁
//! E_u = |X|ᵀ(1 + exp(−B u)) + β‖u‖₁,   |X| = γ Σ_n |x_n|
//! E_p = E_x + E_u
//! ```

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{DpcnError, Result};
use crate::majorizer::smooth_l1;
use crate::tensor::{column_normalize, Matrix, Vector};

/// Bound applied to the exponent in `exp(−B u)`.
pub const EXP_GUARD: f64 = 700.0;

#[inline]
pub(crate) fn guarded_exp_neg(z: f64) -> f64 {
    (-z.clamp(-EXP_GUARD, EXP_GUARD)).exp()
}

/// Weights, thresholds and iteration schedule for one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    /// State sparsity weight μ.
    pub mu: f64,
    /// Temporal innovation weight λ.
    pub lambda: f64,
    /// Pooling weight γ.
    pub gamma: f64,
    /// Cause sparsity weight β.
    pub beta: f64,
    /// Smoothing constant of the ℓ1 approximator.
    pub m_smooth: f64,
    /// States with magnitude below this are clamped to zero.
    pub clamp_state: f64,
    /// Causes with magnitude below this are clamped to zero.
    pub clamp_cause: f64,
    /// State sub-iterations per interleaving block.
    pub i_s: usize,
    /// Cause sub-iterations per interleaving block.
    pub j_s: usize,
    pub inner_tol: f64,
    pub max_inner_iter: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            mu: 0.3,
            lambda: 0.1,
            gamma: 0.1,
            beta: 0.3,
            m_smooth: 0.1,
            clamp_state: 1e-4,
            clamp_cause: 1e-4,
            i_s: 5,
            j_s: 5,
            inner_tol: 1e-6,
            max_inner_iter: 200,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(DpcnError::InvalidConfig(msg.to_string()));
        if !(self.mu > 0.0 && self.gamma > 0.0 && self.beta > 0.0) {
            return bad("mu, gamma and beta must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.m_smooth > 0.0) {
            return bad("m_smooth must be positive");
        }
        if !(self.clamp_state >= 0.0 && self.clamp_cause >= 0.0) {
            return bad("clamp thresholds must be non-negative");
        }
        if self.i_s == 0 || self.j_s == 0 {
            return bad("i_s and j_s must be at least 1");
        }
        if !(self.inner_tol > 0.0) || self.max_inner_iter == 0 {
            return bad("inner_tol must be positive and max_inner_iter at least 1");
        }
        Ok(())
    }
}

/// Layer dimensions: patch `p`, state `k`, cause `d`, patches per frame `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub p: usize,
    pub k: usize,
    pub d: usize,
    pub n: usize,
}

impl LayerDims {
    pub fn new(p: usize, k: usize, d: usize, n: usize) -> Result<Self> {
        let dims = LayerDims { p, k, d, n };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.k == 0 || self.d == 0 || self.n == 0 {
            return Err(DpcnError::InvalidConfig(
                "layer dimensions must be positive".into(),
            ));
        }
        if self.p >= self.k {
            return Err(DpcnError::InvalidConfig(format!(
                "dictionary must be overcomplete (p={} < k={})",
                self.p, self.k
            )));
        }
        Ok(())
    }
}

/// Transition `A` (K×K), coupling `B` (K×D) and observation dictionary `C` (P×K).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerModel {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

impl LayerModel {
    pub fn new(a: Matrix, b: Matrix, c: Matrix) -> Result<Self> {
        let m = LayerModel { a, b, c };
        m.check()?;
        Ok(m)
    }

    /// Random initialization: standard normal entries scaled by `1/sqrt(rows)`,
    /// then unit columns for `B` and `C`.
    pub fn random<R: Rng + ?Sized>(dims: &LayerDims, rng: &mut R) -> Result<Self> {
        let mut gen = |rows: usize, cols: usize| {
            let s = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Matrix::from_vec(rows, cols, data)
        };
        let a = gen(dims.k, dims.k)?;
        let b = column_normalize(&gen(dims.k, dims.d)?)?;
        let c = column_normalize(&gen(dims.p, dims.k)?)?;
        LayerModel::new(a, b, c)
    }

    pub fn p(&self) -> usize {
        self.c.rows()
    }

    pub fn k(&self) -> usize {
        self.c.cols()
    }

    pub fn d(&self) -> usize {
        self.b.cols()
    }

    pub fn check(&self) -> Result<()> {
        let k = self.c.cols();
        if self.a.shape() != (k, k) || self.b.rows() != k {
            return Err(DpcnError::DimensionMismatch(format!(
                "A {:?}, B {:?}, C {:?}",
                self.a.shape(),
                self.b.shape(),
                self.c.shape()
            )));
        }
        Ok(())
    }

    pub fn check_dims(&self, dims: &LayerDims) -> Result<()> {
        self.check()?;
        if self.p() != dims.p || self.k() != dims.k || self.d() != dims.d {
            return Err(DpcnError::DimensionMismatch(format!(
                "model is {}x{}x{}, layer expects p={} k={} d={}",
                self.p(),
                self.k(),
                self.d(),
                dims.p,
                dims.k,
                dims.d
            )));
        }
        Ok(())
    }
}

/// Sparse state `x_{t,n}` plus the set of components clamped to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub x: Vector,
    pub clamped_mask: Vec<bool>,
}

impl StateVector {
    pub fn from_vec(x: Vec<f64>) -> Self {
        let clamped_mask = vec![false; x.len()];
        StateVector {
            x: x.into(),
            clamped_mask,
        }
    }

    pub fn zeros(k: usize) -> Self {
        StateVector::from_vec(vec![0.0; k])
    }

    pub fn filled(k: usize, value: f64) -> Self {
        StateVector::from_vec(vec![value; k])
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Zero every component with `|x_k| < threshold` and mark it clamped.
    pub fn clamp_below(&mut self, threshold: f64) {
        clamp_components(&mut self.x, &mut self.clamped_mask, threshold);
    }
}

/// Sparse cause `u_t` plus its clamp mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CauseVector {
    pub u: Vector,
    pub clamped_mask: Vec<bool>,
}

impl CauseVector {
    pub fn from_vec(u: Vec<f64>) -> Self {
        let clamped_mask = vec![false; u.len()];
        CauseVector {
            u: u.into(),
            clamped_mask,
        }
    }

    pub fn zeros(d: usize) -> Self {
        CauseVector::from_vec(vec![0.0; d])
    }

    pub fn filled(d: usize, value: f64) -> Self {
        CauseVector::from_vec(vec![value; d])
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn clamp_below(&mut self, threshold: f64) {
        clamp_components(&mut self.u, &mut self.clamped_mask, threshold);
    }
}

pub(crate) fn clamp_components(v: &mut [f64], mask: &mut [bool], threshold: f64) {
    for (x, m) in v.iter_mut().zip(mask.iter_mut()) {
        if *m || x.abs() < threshold {
            *x = 0.0;
            *m = true;
        }
    }
}

/// The `N` vectorized patches `y_{t,n}` of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub t: usize,
    pub patches: Vec<Vector>,
}

impl PatchBatch {
    pub fn new(t: usize, patches: Vec<Vector>) -> Result<Self> {
        if let Some(first) = patches.first() {
            let p = first.len();
            if patches.iter().any(|y| y.len() != p) {
                return Err(DpcnError::DimensionMismatch(
                    "patches of a frame must share one length".into(),
                ));
            }
        }
        Ok(PatchBatch { t, patches })
    }

    pub fn n(&self) -> usize {
        self.patches.len()
    }

    pub fn patch_len(&self) -> usize {
        self.patches.first().map_or(0, |y| y.len())
    }
}

/// `|X_t| = γ Σ_n |x_{t,n}|`, with γ already folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledStateMagnitude {
    pub xt_abs: Vector,
}

impl PooledStateMagnitude {
    pub fn from_states(states: &[StateVector], gamma: f64) -> Result<Self> {
        let k = states.first().map_or(0, |s| s.len());
        if states.iter().any(|s| s.len() != k) {
            return Err(DpcnError::DimensionMismatch(
                "states of a frame must share one length".into(),
            ));
        }
        let mut acc = vec![0.0; k];
        for s in states {
            for (a, x) in acc.iter_mut().zip(s.x.iter()) {
                *a += x.abs();
            }
        }
        acc.iter_mut().for_each(|a| *a *= gamma);
        Ok(PooledStateMagnitude { xt_abs: acc.into() })
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        PooledStateMagnitude { xt_abs: v.into() }
    }

    pub fn len(&self) -> usize {
        self.xt_abs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xt_abs.is_empty()
    }
}

fn check_patch(y: &[f64], x: &[f64], model: &LayerModel) -> Result<()> {
    if y.len() != model.p() || x.len() != model.k() {
        return Err(DpcnError::DimensionMismatch(format!(
            "patch {} / state {} against C {}x{}",
            y.len(),
            x.len(),
            model.p(),
            model.k()
        )));
    }
    Ok(())
}

/// `½‖y − C x‖²`
pub(crate) fn half_residual_sq(y: &[f64], x: &[f64], c: &Matrix) -> f64 {
    let cx = c.matvec(x);
    0.5 * y
        .iter()
        .zip(&cx)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
}

/// Innovation `x − A x_prev`.
pub(crate) fn innovation(x: &[f64], x_prev: &[f64], a: &Matrix) -> Vec<f64> {
    let ax = a.matvec(x_prev);
    x.iter().zip(&ax).map(|(xi, ai)| xi - ai).collect()
}

/// Single-patch `E_x`. `x_prev = None` drops the temporal term.
pub fn patch_ex(
    y: &[f64],
    x: &[f64],
    x_prev: Option<&[f64]>,
    model: &LayerModel,
    hp: &HyperParams,
) -> Result<f64> {
    check_patch(y, x, model)?;
    let mut e = half_residual_sq(y, x, &model.c) + hp.mu * l1(x);
    if let Some(xp) = x_prev {
        if xp.len() != x.len() {
            return Err(DpcnError::DimensionMismatch("previous state length".into()));
        }
        if hp.lambda != 0.0 {
            e += hp.lambda * l1(&innovation(x, xp, &model.a));
        }
    }
    Ok(e)
}

/// Single-patch auxiliary objective with the temporal ℓ1 term smoothed:
/// `F(x) = ½‖y − Cx‖² + λ f_s(x − A x_prev) + μ‖x‖₁`.
pub fn patch_smoothed_objective(
    y: &[f64],
    x: &[f64],
    x_prev: Option<&[f64]>,
    model: &LayerModel,
    hp: &HyperParams,
) -> Result<f64> {
    check_patch(y, x, model)?;
    let mut e = half_residual_sq(y, x, &model.c) + hp.mu * l1(x);
    if let Some(xp) = x_prev {
        if xp.len() != x.len() {
            return Err(DpcnError::DimensionMismatch("previous state length".into()));
        }
        if hp.lambda != 0.0 {
            e += hp.lambda * smooth_l1(&innovation(x, xp, &model.a), hp.m_smooth);
        }
    }
    Ok(e)
}

pub(crate) fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// `E_x` over a frame. `prev_states = None` marks the first frame.
pub fn eval_ex(
    batch: &PatchBatch,
    states: &[StateVector],
    prev_states: Option<&[StateVector]>,
    model: &LayerModel,
    hp: &HyperParams,
) -> Result<f64> {
    if states.len() != batch.n() {
        return Err(DpcnError::DimensionMismatch(format!(
            "{} states for {} patches",
            states.len(),
            batch.n()
        )));
    }
    if let Some(prev) = prev_states {
        if prev.len() != batch.n() {
            return Err(DpcnError::DimensionMismatch(format!(
                "{} previous states for {} patches",
                prev.len(),
                batch.n()
            )));
        }
    }
    let mut total = 0.0;
    for (n, (y, s)) in batch.patches.iter().zip(states).enumerate() {
        let xp = prev_states.map(|p| p[n].x.as_slice());
        total += patch_ex(y, &s.x, xp, model, hp)?;
    }
    Ok(total)
}

fn check_cause(u: &[f64], pooled: &PooledStateMagnitude, model: &LayerModel) -> Result<()> {
    if u.len() != model.d() || pooled.len() != model.k() {
        return Err(DpcnError::DimensionMismatch(format!(
            "cause {} / pooled {} against B {}x{}",
            u.len(),
            pooled.len(),
            model.b.rows(),
            model.b.cols()
        )));
    }
    Ok(())
}

/// Smooth part of `E_u`: `|X|ᵀ(1 + exp(−B u))`.
pub(crate) fn cause_data_term(u: &[f64], pooled: &[f64], b: &Matrix) -> f64 {
    let bu = b.matvec(u);
    pooled
        .iter()
        .zip(&bu)
        .map(|(x, z)| x * (1.0 + guarded_exp_neg(*z)))
        .sum()
}

/// `E_u = |X|ᵀ(1 + exp(−B u)) + β‖u‖₁`.
pub fn eval_eu(
    cause: &CauseVector,
    pooled: &PooledStateMagnitude,
    model: &LayerModel,
    hp: &HyperParams,
) -> Result<f64> {
    eval_eu_raw(&cause.u, pooled, model, hp)
}

pub fn eval_eu_raw(
    u: &[f64],
    pooled: &PooledStateMagnitude,
    model: &LayerModel,
    hp: &HyperParams,
) -> Result<f64> {
    check_cause(u, pooled, model)?;
    Ok(cause_data_term(u, &pooled.xt_abs, &model.b) + hp.beta * l1(u))
}

/// `E_u + ½‖u − û‖²`, the objective with a top-down preference.
pub fn eval_eu_topdown(
    cause: &CauseVector,
    pooled: &PooledStateMagnitude,
    u_hat: &[f64],
    model: &LayerModel,
    hp: &HyperParams,
) -> Result<f64> {
    eval_eu_topdown_raw(&cause.u, pooled, u_hat, model, hp)
}

pub fn eval_eu_topdown_raw(
    u: &[f64],
    pooled: &PooledStateMagnitude,
    u_hat: &[f64],
    model: &LayerModel,
    hp: &HyperParams,
) -> Result<f64> {
    if u_hat.len() != u.len() {
        return Err(DpcnError::DimensionMismatch("top-down prediction length".into()));
    }
    let pull: f64 = u.iter().zip(u_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(eval_eu_raw(u, pooled, model, hp)? + 0.5 * pull)
}

/// `E_p = E_x + E_u` for one frame.
pub fn eval_ep(
    batch: &PatchBatch,
    states: &[StateVector],
    prev_states: Option<&[StateVector]>,
    cause: &CauseVector,
    model: &LayerModel,
    hp: &HyperParams,
) -> Result<f64> {
    let pooled = PooledStateMagnitude::from_states(states, hp.gamma)?;
    Ok(eval_ex(batch, states, prev_states, model, hp)? + eval_eu(cause, &pooled, model, hp)?)
}
