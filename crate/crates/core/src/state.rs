//! Majorization-minimization state inference.
//!
//! Each iteration solves the stationarity condition of the majorized
//! objective
//!
//! ```text
//! (CᵀC + W) x = Cᵀy − λ α*,   W = diag(μ / |x^i|)
//! ```
//!
//! through `x^{i+1} = T(C, R^i)(Cᵀy − λα*)` with `R^i = diag(|x^i| / μ)`.
//! Zero components of `x^i` have `r_k = 0` and stay zero.
//!
//! With `λ > 0` the smoothed temporal term is linearized at `x^i`, which is
//! not itself a majorizer. The update is still a descent direction for
//! `F(x) = ½‖y − Cx‖² + λ f_s(x − A x_prev) + μ‖x‖₁`, so the step is halved
//! until `F` decreases.

use std::time::Instant;

use crate::error::{DpcnError, Result};
use crate::majorizer::{reweight, smooth_l1, soft_clip, support_apply, woodbury_apply};
use crate::model::{half_residual_sq, innovation, l1, HyperParams, LayerModel, PatchBatch, StateVector};
use crate::par;
use crate::tensor::{Matrix, Vector};

/// Default magnitude of every component of the initial state.
pub const DEFAULT_STATE_INIT: f64 = 0.1;

const MAX_BACKTRACK: usize = 40;

/// Per-iteration record of one solve.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveTrace {
    /// Objective at the initial point followed by one value per iteration.
    pub objective_per_iter: Vec<f64>,
    /// Percentage of exactly-zero components after each iteration.
    pub sparsity_per_iter: Vec<f64>,
    /// Seconds.
    pub wall_time: f64,
    pub iterations: usize,
    pub converged: bool,
    /// ∞-norm of the stationarity residual on the support at return.
    pub kkt_residual: f64,
}

impl SolveTrace {
    pub fn final_objective(&self) -> f64 {
        self.objective_per_iter.last().copied().unwrap_or(f64::NAN)
    }

    /// First iteration whose objective is within `rel` of the final value.
    pub fn iterations_to_within(&self, rel: f64) -> usize {
        let fin = self.final_objective();
        let tol = rel * fin.abs().max(f64::MIN_POSITIVE);
        self.objective_per_iter
            .iter()
            .position(|f| (f - fin).abs() <= tol)
            .unwrap_or(self.objective_per_iter.len())
    }
}

pub(crate) fn percent_zero(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 100.0;
    }
    100.0 * v.iter().filter(|x| **x == 0.0).count() as f64 / v.len() as f64
}

/// Shared, read-only data for solving many patches against one model.
#[derive(Debug, Clone)]
pub struct StateKernel<'a> {
    pub model: &'a LayerModel,
    gram: Matrix,
}

impl<'a> StateKernel<'a> {
    pub fn new(model: &'a LayerModel) -> Self {
        StateKernel {
            model,
            gram: model.c.gram(),
        }
    }

    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    /// `T(C, R) rhs`, through whichever of the two equivalent systems is
    /// cheaper: an `|S|×|S|` Cholesky on the cached Gram matrix, or the
    /// `P×P` inner system of the matrix inverse lemma, which also has to be
    /// formed (about `P²|S|` operations).
    fn apply_inverse(&self, x: &[f64], mu: f64, rhs: &[f64]) -> Result<Vector> {
        let r = reweight(x, mu);
        let s = r.r.iter().filter(|v| **v > 0.0).count() as f64;
        let p = self.model.p() as f64;
        if s * s * s / 3.0 <= p * p * s + p * p * p / 3.0 {
            support_apply(&self.gram, &r, rhs)
        } else {
            woodbury_apply(&self.model.c, &r, rhs)
        }
    }
}

struct Problem<'p> {
    y: &'p [f64],
    cty: Vec<f64>,
    prev_pred: Option<Vec<f64>>,
    kernel: &'p StateKernel<'p>,
    hp: &'p HyperParams,
}

impl Problem<'_> {
    fn temporal(&self) -> Option<&[f64]> {
        if self.hp.lambda == 0.0 {
            None
        } else {
            self.prev_pred.as_deref()
        }
    }

    fn innovation(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.temporal()
            .map(|ax| x.iter().zip(ax).map(|(a, b)| a - b).collect())
    }

    /// `½‖y − Cx‖² + λ f_s(x − A x_prev)`
    fn smooth_part(&self, x: &[f64]) -> f64 {
        let mut f = half_residual_sq(self.y, x, &self.kernel.model.c);
        if let Some(e) = self.innovation(x) {
            f += self.hp.lambda * smooth_l1(&e, self.hp.m_smooth);
        }
        f
    }

    fn objective(&self, x: &[f64]) -> f64 {
        self.smooth_part(x) + self.hp.mu * l1(x)
    }

    fn kkt_residual(&self, x: &[f64]) -> f64 {
        let c = &self.kernel.model.c;
        let cx = c.matvec(x);
        let resid: Vec<f64> = cx.iter().zip(self.y).map(|(a, b)| a - b).collect();
        let mut g = c.t_matvec(&resid);
        if let Some(e) = self.innovation(x) {
            for (gk, a) in g.iter_mut().zip(soft_clip(&e, self.hp.m_smooth).iter()) {
                *gk += self.hp.lambda * a;
            }
        }
        x.iter()
            .zip(&g)
            .filter(|(xk, _)| **xk != 0.0)
            .map(|(xk, gk)| (gk + self.hp.mu * xk.signum()).abs())
            .fold(0.0, f64::max)
    }
}

fn check_inputs(
    y: &[f64],
    x_prev: Option<&StateVector>,
    model: &LayerModel,
    x_init: Option<&StateVector>,
) -> Result<()> {
    let (p, k) = model.c.shape();
    if y.len() != p {
        return Err(DpcnError::DimensionMismatch(format!(
            "patch of length {} for C with {p} rows",
            y.len()
        )));
    }
    for (what, s) in [("previous state", x_prev), ("initial state", x_init)] {
        if let Some(s) = s {
            if s.len() != k {
                return Err(DpcnError::DimensionMismatch(format!(
                    "{what} of length {} for K={k}",
                    s.len()
                )));
            }
        }
    }
    Ok(())
}

/// Infer the sparse state of one patch.
///
/// `x_prev = None` marks the first frame (no temporal term). `x_init = None`
/// starts from `0.1` in every component.
pub fn infer_state(
    y: &[f64],
    x_prev: Option<&StateVector>,
    model: &LayerModel,
    hp: &HyperParams,
    x_init: Option<&StateVector>,
) -> Result<(StateVector, SolveTrace)> {
    let kernel = StateKernel::new(model);
    infer_state_with(&kernel, y, x_prev, hp, x_init)
}

pub fn infer_state_with(
    kernel: &StateKernel<'_>,
    y: &[f64],
    x_prev: Option<&StateVector>,
    hp: &HyperParams,
    x_init: Option<&StateVector>,
) -> Result<(StateVector, SolveTrace)> {
    let start = Instant::now();
    let model = kernel.model;
    check_inputs(y, x_prev, model, x_init)?;
    let k = model.k();

    let problem = Problem {
        y,
        cty: model.c.t_matvec(y),
        prev_pred: x_prev.map(|s| model.a.matvec(&s.x)),
        kernel,
        hp,
    };

    let mut state = x_init
        .cloned()
        .unwrap_or_else(|| StateVector::filled(k, DEFAULT_STATE_INIT));
    state.clamp_below(0.0);
    for (x, m) in state.x.iter_mut().zip(state.clamped_mask.iter_mut()) {
        if *x == 0.0 {
            *m = true;
        }
    }

    let mut f_cur = problem.objective(&state.x);
    let mut trace = SolveTrace {
        objective_per_iter: vec![f_cur],
        sparsity_per_iter: vec![percent_zero(&state.x)],
        ..SolveTrace::default()
    };

    for _ in 0..hp.max_inner_iter {
        let x = state.x.clone();
        let rhs: Vec<f64> = match problem.innovation(&x) {
            Some(e) => {
                let alpha = soft_clip(&e, hp.m_smooth);
                problem
                    .cty
                    .iter()
                    .zip(alpha.iter())
                    .map(|(c, a)| c - hp.lambda * a)
                    .collect()
            }
            None => problem.cty.clone(),
        };
        let cand = kernel.apply_inverse(&x, hp.mu, &rhs)?;

        let mut next: Vec<f64> = cand.into_inner();
        if problem.temporal().is_some() {
            let dir: Vec<f64> = next.iter().zip(x.iter()).map(|(c, a)| c - a).collect();
            let mut tau = 1.0;
            let mut accepted = false;
            for _ in 0..MAX_BACKTRACK {
                let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + tau * d).collect();
                if problem.objective(&trial) <= f_cur {
                    next = trial;
                    accepted = true;
                    break;
                }
                tau *= 0.5;
            }
            if !accepted {
                next = x.to_vec();
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DpcnError::NonFinite("state inference"));
        }

        // clamp, unless zeroing the small entries would raise the objective
        let mut clamped = StateVector {
            x: next.clone().into(),
            clamped_mask: state.clamped_mask.clone(),
        };
        clamped.clamp_below(hp.clamp_state);
        let f_clamped = problem.objective(&clamped.x);
        let (new_state, f_new) = if f_clamped <= f_cur || clamped.x.as_slice() == next.as_slice() {
            (clamped, f_clamped)
        } else {
            let s = StateVector {
                x: next.into(),
                clamped_mask: state.clamped_mask.clone(),
            };
            let f = problem.objective(&s.x);
            (s, f)
        };

        let dx = new_state
            .x
            .iter()
            .zip(x.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale_x = new_state.x.norm_inf().max(1.0);
        let df = (f_cur - f_new).abs() / f_cur.abs().max(f64::MIN_POSITIVE);

        state = new_state;
        f_cur = f_new;
        trace.iterations += 1;
        trace.objective_per_iter.push(f_cur);
        trace.sparsity_per_iter.push(percent_zero(&state.x));

        let kkt = problem.kkt_residual(&state.x);
        let small_step = dx <= hp.inner_tol * scale_x;
        if f_cur == 0.0 || (small_step && (kkt <= hp.inner_tol || df <= hp.inner_tol)) {
            trace.converged = true;
            break;
        }
    }

    // final clamp so every sub-threshold entry is reported as an exact zero
    let before = state.x.clone();
    state.clamp_below(hp.clamp_state);
    if state.x != before {
        f_cur = problem.objective(&state.x);
        trace.objective_per_iter.push(f_cur);
        trace.sparsity_per_iter.push(percent_zero(&state.x));
    }
    trace.kkt_residual = problem.kkt_residual(&state.x);
    trace.wall_time = start.elapsed().as_secs_f64();
    Ok((state, trace))
}

/// Smoothed single-patch objective `F` as minimized by [`infer_state`].
pub fn state_objective(
    y: &[f64],
    x: &[f64],
    x_prev: Option<&StateVector>,
    model: &LayerModel,
    hp: &HyperParams,
) -> Result<f64> {
    crate::model::patch_smoothed_objective(y, x, x_prev.map(|s| s.x.as_slice()), model, hp)
}

/// Innovation `x − A x_prev` of a solved state.
pub fn state_innovation(x: &StateVector, x_prev: &StateVector, model: &LayerModel) -> Vec<f64> {
    innovation(&x.x, &x_prev.x, &model.a)
}

fn check_batch(
    batch: &PatchBatch,
    prev: Option<&[StateVector]>,
    init: Option<&[StateVector]>,
) -> Result<()> {
    for (what, list) in [("previous states", prev), ("initial states", init)] {
        if let Some(l) = list {
            if l.len() != batch.n() {
                return Err(DpcnError::DimensionMismatch(format!(
                    "{} {what} for {} patches",
                    l.len(),
                    batch.n()
                )));
            }
        }
    }
    Ok(())
}

type BatchResult = Result<(Vec<StateVector>, Vec<SolveTrace>)>;

fn collect_batch(results: Vec<Result<(StateVector, SolveTrace)>>) -> BatchResult {
    let mut states = Vec::with_capacity(results.len());
    let mut traces = Vec::with_capacity(results.len());
    for r in results {
        let (s, t) = r?;
        states.push(s);
        traces.push(t);
    }
    Ok((states, traces))
}

/// Independent state inference for every patch of a frame, patch-parallel
/// when built with the `parallel` feature.
pub fn infer_states_batch(
    batch: &PatchBatch,
    prev: Option<&[StateVector]>,
    model: &LayerModel,
    hp: &HyperParams,
) -> BatchResult {
    let kernel = StateKernel::new(model);
    infer_states_batch_with(&kernel, batch, prev, hp, None)
}

pub fn infer_states_batch_with(
    kernel: &StateKernel<'_>,
    batch: &PatchBatch,
    prev: Option<&[StateVector]>,
    hp: &HyperParams,
    init: Option<&[StateVector]>,
) -> BatchResult {
    check_batch(batch, prev, init)?;
    collect_batch(par::map(&batch.patches, |n, y| {
        infer_state_with(kernel, y, prev.map(|p| &p[n]), hp, init.map(|i| &i[n]))
    }))
}

/// Same as [`infer_states_batch`], always in patch order on the calling thread.
pub fn infer_states_batch_sequential(
    batch: &PatchBatch,
    prev: Option<&[StateVector]>,
    model: &LayerModel,
    hp: &HyperParams,
) -> BatchResult {
    check_batch(batch, prev, None)?;
    let kernel = StateKernel::new(model);
    collect_batch(par::map_sequential(&batch.patches, |n, y| {
        infer_state_with(&kernel, y, prev.map(|p| &p[n]), hp, None)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerDims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_model() -> LayerModel {
        LayerModel {
            a: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            b: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            c: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
        }
    }

    fn lasso_hp() -> HyperParams {
        HyperParams {
            mu: 0.3,
            lambda: 0.0,
            ..HyperParams::default()
        }
    }

    #[test]
    fn zero_patch_gives_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = LayerModel::random(&LayerDims { p: 4, k: 6, d: 2, n: 1 }, &mut rng).unwrap();
        let (s, t) = infer_state(&[0.0; 4], None, &m, &lasso_hp(), None).unwrap();
        assert!(s.x.iter().all(|v| *v == 0.0));
        assert_eq!(t.iterations, 1);
        assert!(s.clamped_mask.iter().all(|m| *m));
    }

    #[test]
    fn scalar_iterates_follow_fixed_point() {
        let hp = HyperParams {
            max_inner_iter: 2,
            ..lasso_hp()
        };
        let init = StateVector::filled(1, 1.0);
        let model = scalar_model();
        let (s1, _) = infer_state(&[1.0], None, &model, &HyperParams { max_inner_iter: 1, ..hp }, Some(&init)).unwrap();
        assert!((s1.x[0] - 1.0 / 1.3).abs() < 1e-12);
        let (s2, _) = infer_state(&[1.0], None, &model, &hp, Some(&init)).unwrap();
        let r = (1.0 / 1.3) / 0.3;
        assert!((s2.x[0] - r / (1.0 + r)).abs() < 1e-12);
        assert!((s2.x[0] - 0.7194).abs() < 1e-4);

        let (s, t) = infer_state(&[1.0], None, &model, &lasso_hp(), Some(&init)).unwrap();
        assert!((s.x[0] - 0.7).abs() < 1e-6);
        assert!(t.converged);
        assert!(t.kkt_residual <= 1e-6);
    }

    #[test]
    fn identical_patches_identical_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = LayerModel::random(&LayerDims { p: 5, k: 8, d: 2, n: 4 }, &mut rng).unwrap();
        let y: Vector = (0..5).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>().into();
        let batch = PatchBatch::new(0, vec![y; 4]).unwrap();
        let (states, _) = infer_states_batch(&batch, None, &m, &lasso_hp()).unwrap();
        for s in &states[1..] {
            assert_eq!(s, &states[0]);
        }
    }

    #[test]
    fn batch_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = LayerModel::random(&LayerDims { p: 6, k: 10, d: 2, n: 4 }, &mut rng).unwrap();
        let patches = (0..4)
            .map(|_| (0..6).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>().into())
            .collect();
        let batch = PatchBatch::new(1, patches).unwrap();
        let prev: Vec<StateVector> = (0..4)
            .map(|_| StateVector::from_vec((0..10).map(|_| rng.random_range(-0.5..0.5)).collect()))
            .collect();
        let hp = HyperParams::default();
        let (a, ta) = infer_states_batch(&batch, Some(&prev), &m, &hp).unwrap();
        let (b, tb) = infer_states_batch_sequential(&batch, Some(&prev), &m, &hp).unwrap();
        assert_eq!(a, b);
        for (x, y) in ta.iter().zip(&tb) {
            assert_eq!(x.objective_per_iter, y.objective_per_iter);
        }
        // N = 1 degenerates to a single solve
        let single = PatchBatch::new(1, vec![batch.patches[0].clone()]).unwrap();
        let (s, _) = infer_states_batch(&single, Some(&prev[..1]), &m, &hp).unwrap();
        let (d, _) = infer_state(&batch.patches[0], Some(&prev[0]), &m, &hp, None).unwrap();
        assert_eq!(s[0], d);
    }

    #[test]
    fn dimension_mismatch() {
        let m = scalar_model();
        assert!(matches!(
            infer_state(&[1.0, 2.0], None, &m, &lasso_hp(), None),
            Err(DpcnError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn clamped_components_stay_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = LayerModel::random(&LayerDims { p: 8, k: 16, d: 2, n: 1 }, &mut rng).unwrap();
        let y: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
        let hp = HyperParams { max_inner_iter: 1, ..lasso_hp() };
        let mut s = StateVector::filled(16, 0.1);
        let mut zero_seen = vec![false; 16];
        for _ in 0..60 {
            let (next, _) = infer_state(&y, None, &m, &hp, Some(&s)).unwrap();
            for k in 0..16 {
                if zero_seen[k] {
                    assert_eq!(next.x[k], 0.0);
                }
                zero_seen[k] |= next.x[k] == 0.0;
            }
            s = next;
        }
        assert!(zero_seen.iter().any(|z| *z));
    }
}
