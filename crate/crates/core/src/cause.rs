//! Cause inference, bottom-up and with a top-down preference.
//!
//! Bottom-up causes minimize `E_u = |X|ᵀ(1 + exp(−Bu)) + β‖u‖₁` through the
//! reweighted fixed point `u ← R Bᵀ(|X| ⊙ exp(−Bu))`, `R = diag(|u|/β)`.
//! With a prediction `û` from the layer above the objective gains
//! `½‖u − û‖²` and the update becomes `u ← (I + W)⁻¹(û + Bᵀ(|X| ⊙ exp(−Bu)))`
//! with `W = diag(β/|u|)`.
//!
//! Both updates linearize the exponential term, so a full step can overshoot
//! when the drive `|X|/β` is large. The update direction agrees with the
//! negative gradient of the objective on the support (scaled by a positive
//! diagonal), so the step is halved until the objective decreases; in the
//! well-behaved regime the full step is always taken.

use std::time::Instant;

use crate::error::{DpcnError, Result};
use crate::model::{
    cause_data_term, guarded_exp_neg, l1, CauseVector, HyperParams, LayerModel,
    PooledStateMagnitude, StateVector,
};
use crate::state::{percent_zero, SolveTrace};
use crate::tensor::{Matrix, Vector};

/// Default magnitude of every component of the initial cause.
pub const DEFAULT_CAUSE_INIT: f64 = 0.1;

const MAX_BACKTRACK: usize = 60;

struct CauseProblem<'p> {
    pooled: &'p [f64],
    b: &'p Matrix,
    hp: &'p HyperParams,
    u_hat: Option<&'p [f64]>,
}

impl CauseProblem<'_> {
    fn pull(&self, u: &[f64]) -> f64 {
        self.u_hat.map_or(0.0, |h| {
            0.5 * u.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
    }

    fn objective(&self, u: &[f64]) -> f64 {
        cause_data_term(u, self.pooled, self.b) + self.hp.beta * l1(u) + self.pull(u)
    }

    /// `Bᵀ(|X| ⊙ exp(−Bu))`, the negative gradient of the smooth data term.
    fn drive(&self, u: &[f64]) -> Vec<f64> {
        let bu = self.b.matvec(u);
        let weighted: Vec<f64> = self
            .pooled
            .iter()
            .zip(&bu)
            .map(|(x, z)| x * guarded_exp_neg(*z))
            .collect();
        self.b.t_matvec(&weighted)
    }

    fn kkt_residual(&self, u: &[f64]) -> f64 {
        let g = self.drive(u);
        u.iter()
            .enumerate()
            .filter(|(_, uk)| **uk != 0.0)
            .map(|(k, uk)| {
                let pull = self.u_hat.map_or(0.0, |h| uk - h[k]);
                (pull + self.hp.beta * uk.signum() - g[k]).abs()
            })
            .fold(0.0, f64::max)
    }

    fn candidate(&self, u: &[f64]) -> Vec<f64> {
        let g = self.drive(u);
        let beta = self.hp.beta;
        match self.u_hat {
            None => u.iter().zip(&g).map(|(uk, gk)| uk.abs() / beta * gk).collect(),
            Some(h) => u
                .iter()
                .zip(&g)
                .zip(h)
                .map(|((uk, gk), hk)| {
                    let a = uk.abs();
                    // (1 + β/|u|)⁻¹ = |u| / (|u| + β), zero stays zero
                    if a == 0.0 {
                        0.0
                    } else {
                        a / (a + beta) * (hk + gk)
                    }
                })
                .collect(),
        }
    }
}

fn check_inputs(
    pooled: &PooledStateMagnitude,
    model: &LayerModel,
    u_init: Option<&CauseVector>,
    u_hat: Option<&[f64]>,
) -> Result<()> {
    let (k, d) = model.b.shape();
    if pooled.len() != k {
        return Err(DpcnError::DimensionMismatch(format!(
            "pooled magnitude of length {} for B with {k} rows",
            pooled.len()
        )));
    }
    if u_init.is_some_and(|u| u.len() != d) || u_hat.is_some_and(|h| h.len() != d) {
        return Err(DpcnError::DimensionMismatch(format!(
            "cause vectors must have length D={d}"
        )));
    }
    Ok(())
}

fn solve(problem: &CauseProblem<'_>, d: usize, u_init: Option<&CauseVector>) -> Result<(CauseVector, SolveTrace)> {
    let start = Instant::now();
    let hp = problem.hp;
    let mut cause = u_init
        .cloned()
        .unwrap_or_else(|| CauseVector::filled(d, DEFAULT_CAUSE_INIT));
    for (u, m) in cause.u.iter_mut().zip(cause.clamped_mask.iter_mut()) {
        if *m || *u == 0.0 {
            *u = 0.0;
            *m = true;
        }
    }
    let mut e_cur = problem.objective(&cause.u);
    let mut trace = SolveTrace {
        objective_per_iter: vec![e_cur],
        sparsity_per_iter: vec![percent_zero(&cause.u)],
        ..SolveTrace::default()
    };

    for _ in 0..hp.max_inner_iter {
        let u = cause.u.clone();
        let cand = problem.candidate(&u);
        let dir: Vec<f64> = cand.iter().zip(u.iter()).map(|(c, a)| c - a).collect();
        let mut tau = 1.0;
        let mut next = u.to_vec();
        for _ in 0..MAX_BACKTRACK {
            let trial: Vec<f64> = u.iter().zip(&dir).map(|(a, dd)| a + tau * dd).collect();
            if problem.objective(&trial) <= e_cur {
                next = trial;
                break;
            }
            tau *= 0.5;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DpcnError::NonFinite("cause inference"));
        }

        let mut clamped = CauseVector {
            u: next.clone().into(),
            clamped_mask: cause.clamped_mask.clone(),
        };
        clamped.clamp_below(hp.clamp_cause);
        let e_clamped = problem.objective(&clamped.u);
        let (new_cause, e_new) = if e_clamped <= e_cur || clamped.u.as_slice() == next.as_slice() {
            (clamped, e_clamped)
        } else {
            let c = CauseVector {
                u: next.into(),
                clamped_mask: cause.clamped_mask.clone(),
            };
            let e = problem.objective(&c.u);
            (c, e)
        };

        let du = new_cause
            .u
            .iter()
            .zip(u.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = new_cause.u.norm_inf().max(1.0);
        let de = (e_cur - e_new).abs() / e_cur.abs().max(f64::MIN_POSITIVE);

        cause = new_cause;
        e_cur = e_new;
        trace.iterations += 1;
        trace.objective_per_iter.push(e_cur);
        trace.sparsity_per_iter.push(percent_zero(&cause.u));

        let kkt = problem.kkt_residual(&cause.u);
        let small_step = du <= hp.inner_tol * scale;
        if cause.u.iter().all(|v| *v == 0.0) || (small_step && (kkt <= hp.inner_tol || de <= hp.inner_tol)) {
            trace.converged = true;
            break;
        }
    }

    let before = cause.u.clone();
    cause.clamp_below(hp.clamp_cause);
    if cause.u != before {
        e_cur = problem.objective(&cause.u);
        trace.objective_per_iter.push(e_cur);
        trace.sparsity_per_iter.push(percent_zero(&cause.u));
    }
    trace.kkt_residual = problem.kkt_residual(&cause.u);
    trace.wall_time = start.elapsed().as_secs_f64();
    Ok((cause, trace))
}

/// Bottom-up cause inference. `u_init = None` starts from `0.1` everywhere.
pub fn infer_cause(
    pooled: &PooledStateMagnitude,
    model: &LayerModel,
    hp: &HyperParams,
    u_init: Option<&CauseVector>,
) -> Result<(CauseVector, SolveTrace)> {
    check_inputs(pooled, model, u_init, None)?;
    let problem = CauseProblem {
        pooled: &pooled.xt_abs,
        b: &model.b,
        hp,
        u_hat: None,
    };
    solve(&problem, model.d(), u_init)
}

/// Cause inference pulled toward the top-down prediction `u_hat`.
pub fn infer_cause_topdown(
    pooled: &PooledStateMagnitude,
    u_hat: &[f64],
    model: &LayerModel,
    hp: &HyperParams,
    u_init: Option<&CauseVector>,
) -> Result<(CauseVector, SolveTrace)> {
    check_inputs(pooled, model, u_init, Some(u_hat))?;
    let problem = CauseProblem {
        pooled: &pooled.xt_abs,
        b: &model.b,
        hp,
        u_hat: Some(u_hat),
    };
    solve(&problem, model.d(), u_init)
}

/// Prediction sent from layer `l+1` down to layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopDownPrediction {
    /// Preferred cause `û` for the lower layer.
    pub u_hat: Vector,
    /// Gated one-step state prediction of the upper layer; empty at the top.
    pub x_hat: Vector,
}

impl TopDownPrediction {
    /// At the top of the hierarchy the preference is the previous cause.
    pub fn top_layer(prev_cause: &CauseVector) -> Self {
        TopDownPrediction {
            u_hat: prev_cause.u.clone(),
            x_hat: Vector::default(),
        }
    }
}

/// Gated prediction `x̂_k = (A x_{t−1})_k` where `λ > γ(1 + exp(−(Bu)_k))`, else 0,
/// and `û = C x̂`, using the upper layer's model and weights.
pub fn top_down_prediction(
    upper_model: &LayerModel,
    upper_x_prev: &StateVector,
    upper_u: &CauseVector,
    upper_hp: &HyperParams,
) -> Result<TopDownPrediction> {
    upper_model.check()?;
    if upper_x_prev.len() != upper_model.k() || upper_u.len() != upper_model.d() {
        return Err(DpcnError::DimensionMismatch(format!(
            "upper state {} / cause {} for K={} D={}",
            upper_x_prev.len(),
            upper_u.len(),
            upper_model.k(),
            upper_model.d()
        )));
    }
    let ax = upper_model.a.matvec(&upper_x_prev.x);
    let bu = upper_model.b.matvec(&upper_u.u);
    let x_hat: Vec<f64> = ax
        .iter()
        .zip(&bu)
        .map(|(a, z)| {
            if upper_hp.lambda > upper_hp.gamma * (1.0 + guarded_exp_neg(*z)) {
                *a
            } else {
                0.0
            }
        })
        .collect();
    let u_hat = upper_model.c.matvec(&x_hat);
    Ok(TopDownPrediction {
        u_hat: u_hat.into(),
        x_hat: x_hat.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerDims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_model() -> LayerModel {
        let one = || Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        LayerModel {
            a: one(),
            b: one(),
            c: one(),
        }
    }

    fn hp() -> HyperParams {
        HyperParams {
            beta: 0.3,
            ..HyperParams::default()
        }
    }

    fn pooled(v: &[f64]) -> PooledStateMagnitude {
        PooledStateMagnitude::from_vec(v.to_vec())
    }

    /// Golden-section minimization of a unimodal scalar function.
    fn golden(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        while (b - a).abs() > 1e-12 {
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
            c = b - g * (b - a);
            d = a + g * (b - a);
        }
        0.5 * (a + b)
    }

    #[test]
    fn zero_drive_zero_cause() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = LayerModel::random(&LayerDims { p: 3, k: 6, d: 3, n: 1 }, &mut rng).unwrap();
        let (u, t) = infer_cause(&pooled(&[0.0; 6]), &m, &hp(), None).unwrap();
        assert!(u.u.iter().all(|v| *v == 0.0));
        assert_eq!(t.iterations, 1);
    }

    #[test]
    fn scalar_fixed_point() {
        let m = scalar_model();
        let init = CauseVector::filled(1, 1.0);
        let one = HyperParams { max_inner_iter: 1, ..hp() };
        let (u1, _) = infer_cause(&pooled(&[1.0]), &m, &one, Some(&init)).unwrap();
        assert!((u1.u[0] - (-1.0f64).exp() / 0.3).abs() < 1e-12);
        assert!((u1.u[0] - 1.226).abs() < 1e-3);
        let two = HyperParams { max_inner_iter: 2, ..hp() };
        let (u2, _) = infer_cause(&pooled(&[1.0]), &m, &two, Some(&init)).unwrap();
        let u1x = (-1.0f64).exp() / 0.3;
        let u2x = u1x * (-u1x).exp() / 0.3;
        assert!((u2.u[0] - u2x).abs() < 1e-12);
        assert!((u2.u[0] - 1.1992).abs() < 1e-4);

        let (u, t) = infer_cause(&pooled(&[1.0]), &m, &hp(), Some(&init)).unwrap();
        assert!((u.u[0] - (1.0f64 / 0.3).ln()).abs() < 1e-6);
        assert!(t.converged);
    }

    #[test]
    fn weak_drive_clamps_to_zero() {
        let m = scalar_model();
        let (u, _) = infer_cause(&pooled(&[0.2]), &m, &hp(), None).unwrap();
        assert_eq!(u.u[0], 0.0);
        assert!(u.clamped_mask[0]);
        // numeric minimizer of E_u on u ≥ 0 confirms the boundary optimum
        let f = |v: f64| 0.2 * (1.0 + (-v).exp()) + 0.3 * v.abs();
        assert!(golden(f, 0.0, 5.0) < 1e-5);
    }

    #[test]
    fn large_drive_still_descends() {
        let m = scalar_model();
        let (u, t) = infer_cause(&pooled(&[100.0]), &m, &hp(), None).unwrap();
        for w in t.objective_per_iter.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        assert!((u.u[0] - (100.0f64 / 0.3).ln()).abs() < 1e-5);
    }

    #[test]
    fn topdown_examples() {
        let m = scalar_model();
        let (u, _) = infer_cause_topdown(&pooled(&[0.0]), &[0.0], &m, &hp(), None).unwrap();
        assert_eq!(u.u[0], 0.0);

        let (u, _) = infer_cause_topdown(&pooled(&[0.0]), &[1.0], &m, &hp(), None).unwrap();
        assert!((u.u[0] - 0.7).abs() < 1e-6);

        let (u, _) = infer_cause_topdown(&pooled(&[1.0]), &[2.0], &m, &hp(), None).unwrap();
        let f = |v: f64| 0.5 * (v - 2.0) * (v - 2.0) + (1.0 + (-v).exp()) + 0.3 * v.abs();
        let oracle = golden(f, -5.0, 5.0);
        assert!((u.u[0] - oracle).abs() < 1e-5);
    }

    #[test]
    fn prediction_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = LayerModel::random(&LayerDims { p: 3, k: 5, d: 2, n: 1 }, &mut rng).unwrap();
        let xp = StateVector::from_vec((0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
        let u = CauseVector::from_vec(vec![0.5, 0.2]);

        let open = HyperParams { lambda: 10.0, gamma: 0.1, ..HyperParams::default() };
        let p = top_down_prediction(&m, &xp, &u, &open).unwrap();
        assert_eq!(p.x_hat.as_slice(), m.a.matvec(&xp.x).as_slice());
        assert_eq!(p.u_hat.as_slice(), m.c.matvec(&p.x_hat).as_slice());

        let shut = HyperParams { lambda: 0.0, ..HyperParams::default() };
        let p = top_down_prediction(&m, &xp, &u, &shut).unwrap();
        assert!(p.x_hat.iter().all(|v| *v == 0.0));
        assert!(p.u_hat.iter().all(|v| *v == 0.0));

        let prev = CauseVector::from_vec(vec![0.3, 0.0]);
        assert_eq!(TopDownPrediction::top_layer(&prev).u_hat, prev.u);
    }

    #[test]
    fn dimension_mismatch() {
        let m = scalar_model();
        assert!(matches!(
            infer_cause(&pooled(&[1.0, 1.0]), &m, &hp(), None),
            Err(DpcnError::DimensionMismatch(_))
        ));
        assert!(matches!(
            infer_cause_topdown(&pooled(&[1.0]), &[1.0, 2.0], &m, &hp(), None),
            Err(DpcnError::DimensionMismatch(_))
        ));
    }
}
