//! Gradient-based reference solvers for the state objective
//! `F(x) = ½‖y − Cx‖² + λ f_s(x − A x_prev) + μ‖x‖₁`, plus an accelerated
//! proximal solver for causes.
//!
//! ISTA and FISTA treat the temporal term through its smooth approximation
//! inside the gradient and apply the ℓ1 prox for `μ‖x‖₁` only. Adam runs on
//! the fully smoothed objective (both ℓ1 terms through `f_s`) and clamps
//! small components when it stops.

use std::time::Instant;

use crate::error::{DpcnError, Result};
use crate::majorizer::{smooth_l1, soft_clip};
use crate::model::{
    cause_data_term, guarded_exp_neg, half_residual_sq, l1, CauseVector, HyperParams, LayerModel,
    PatchBatch, PooledStateMagnitude, StateVector,
};
use crate::par;
use crate::state::{percent_zero, SolveTrace};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ista,
    Fista,
    Adam,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ista => "ista",
            Method::Fista => "fista",
            Method::Adam => "adam",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = DpcnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ista" => Ok(Method::Ista),
            "fista" => Ok(Method::Fista),
            "adam" => Ok(Method::Adam),
            other => Err(DpcnError::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub method: Method,
    /// Step size η.
    pub step: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_iter: usize,
    /// Stop once the step and the relative objective change both fall below
    /// `tol`; `0` runs the full budget.
    pub tol: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            method: Method::Fista,
            step: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_iter: 200,
            tol: 0.0,
        }
    }
}

impl BaselineConfig {
    pub fn with_method(method: Method) -> Self {
        BaselineConfig {
            method,
            ..BaselineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(DpcnError::InvalidConfig("step must be > 0".into()));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(DpcnError::InvalidConfig(format!("{name} must lie in (0,1)")));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps < 1.0) {
            return Err(DpcnError::InvalidConfig("adam_eps must lie in (0,1)".into()));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(DpcnError::InvalidConfig("tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// Soft threshold `sign(v) max(|v| − t, 0)`.
pub fn shrink(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

struct StateProblem<'p> {
    y: &'p [f64],
    c: &'p Matrix,
    prev_pred: Option<Vec<f64>>,
    hp: &'p HyperParams,
}

impl<'p> StateProblem<'p> {
    fn new(y: &'p [f64], x_prev: Option<&StateVector>, model: &'p LayerModel, hp: &'p HyperParams) -> Self {
        let prev_pred = if hp.lambda == 0.0 {
            None
        } else {
            x_prev.map(|s| model.a.matvec(&s.x))
        };
        StateProblem { y, c: &model.c, prev_pred, hp }
    }

    fn innovation(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.prev_pred
            .as_ref()
            .map(|ax| x.iter().zip(ax).map(|(a, b)| a - b).collect())
    }

    fn smooth_value(&self, x: &[f64]) -> f64 {
        let mut f = half_residual_sq(self.y, x, self.c);
        if let Some(e) = self.innovation(x) {
            f += self.hp.lambda * smooth_l1(&e, self.hp.m_smooth);
        }
        f
    }

    fn objective(&self, x: &[f64]) -> f64 {
        self.smooth_value(x) + self.hp.mu * l1(x)
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let cx = self.c.matvec(x);
        let r: Vec<f64> = cx.iter().zip(self.y).map(|(a, b)| a - b).collect();
        let mut g = self.c.t_matvec(&r);
        if let Some(e) = self.innovation(x) {
            for (gk, a) in g.iter_mut().zip(soft_clip(&e, self.hp.m_smooth).iter()) {
                *gk += self.hp.lambda * a;
            }
        }
        g
    }
}

fn check_state_inputs(
    y: &[f64],
    x_prev: Option<&StateVector>,
    model: &LayerModel,
    x_init: Option<&StateVector>,
) -> Result<()> {
    let (p, k) = model.c.shape();
    if y.len() != p
        || x_prev.is_some_and(|s| s.len() != k)
        || x_init.is_some_and(|s| s.len() != k)
    {
        return Err(DpcnError::DimensionMismatch(format!(
            "patch {} against C {p}x{k}",
            y.len()
        )));
    }
    Ok(())
}

struct Stopper {
    tol: f64,
}

impl Stopper {
    fn done(&self, f_old: f64, f_new: f64, x_old: &[f64], x_new: &[f64]) -> bool {
        if f_new == 0.0 {
            return true;
        }
        if self.tol == 0.0 {
            return false;
        }
        let dx = x_old
            .iter()
            .zip(x_new)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = x_new.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let df = (f_old - f_new).abs() / f_old.abs().max(f64::MIN_POSITIVE);
        dx <= self.tol * scale && df <= self.tol
    }
}

fn finish(state: Vec<f64>, mut trace: SolveTrace, start: Instant) -> Result<(StateVector, SolveTrace)> {
    if state.iter().any(|v| !v.is_finite()) {
        return Err(DpcnError::NonFinite("baseline solver"));
    }
    trace.wall_time = start.elapsed().as_secs_f64();
    Ok((StateVector::from_vec(state), trace))
}

/// Proximal gradient descent with fixed step η.
pub fn ista_solve(
    y: &[f64],
    x_prev: Option<&StateVector>,
    model: &LayerModel,
    hp: &HyperParams,
    cfg: &BaselineConfig,
    x_init: Option<&StateVector>,
) -> Result<(StateVector, SolveTrace)> {
    proximal_solve(y, x_prev, model, hp, cfg, x_init, false)
}

/// Proximal gradient descent with Nesterov momentum.
pub fn fista_solve(
    y: &[f64],
    x_prev: Option<&StateVector>,
    model: &LayerModel,
    hp: &HyperParams,
    cfg: &BaselineConfig,
    x_init: Option<&StateVector>,
) -> Result<(StateVector, SolveTrace)> {
    proximal_solve(y, x_prev, model, hp, cfg, x_init, true)
}

fn proximal_solve(
    y: &[f64],
    x_prev: Option<&StateVector>,
    model: &LayerModel,
    hp: &HyperParams,
    cfg: &BaselineConfig,
    x_init: Option<&StateVector>,
    accelerate: bool,
) -> Result<(StateVector, SolveTrace)> {
    let start = Instant::now();
    cfg.validate()?;
    check_state_inputs(y, x_prev, model, x_init)?;
    let problem = StateProblem::new(y, x_prev, model, hp);
    let eta = cfg.step;
    let thresh = eta * hp.mu;
    let stop = Stopper { tol: cfg.tol };

    let mut x: Vec<f64> = x_init.map_or_else(|| vec![0.0; model.k()], |s| s.x.to_vec());
    let mut z = x.clone();
    let mut t = 1.0f64;
    let mut f = problem.objective(&x);
    let mut trace = SolveTrace {
        objective_per_iter: vec![f],
        sparsity_per_iter: vec![percent_zero(&x)],
        ..SolveTrace::default()
    };
    if f == 0.0 {
        trace.converged = true;
        return finish(x, trace, start);
    }

    for _ in 0..cfg.max_iter {
        let base = if accelerate { &z } else { &x };
        let g = problem.grad(base);
        let x_new: Vec<f64> = base
            .iter()
            .zip(&g)
            .map(|(b, gk)| shrink(b - eta * gk, thresh))
            .collect();
        if accelerate {
            let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let w = (t - 1.0) / t_new;
            z = x_new
                .iter()
                .zip(&x)
                .map(|(a, b)| a + w * (a - b))
                .collect();
            t = t_new;
        }
        let f_new = problem.objective(&x_new);
        if !f_new.is_finite() {
            return Err(DpcnError::NonFinite("baseline solver"));
        }
        trace.iterations += 1;
        trace.objective_per_iter.push(f_new);
        trace.sparsity_per_iter.push(percent_zero(&x_new));
        let done = stop.done(f, f_new, &x, &x_new);
        x = x_new;
        f = f_new;
        if done {
            trace.converged = true;
            break;
        }
    }
    finish(x, trace, start)
}

/// Adam on the fully smoothed objective; components with
/// `|x_k| ≤ clamp_state` are zeroed on return. The trace records the
/// unclamped iterates, so its last sparsity entry is the raw sparsity.
pub fn adam_solve(
    y: &[f64],
    x_prev: Option<&StateVector>,
    model: &LayerModel,
    hp: &HyperParams,
    cfg: &BaselineConfig,
    x_init: Option<&StateVector>,
) -> Result<(StateVector, SolveTrace)> {
    let start = Instant::now();
    cfg.validate()?;
    check_state_inputs(y, x_prev, model, x_init)?;
    let problem = StateProblem::new(y, x_prev, model, hp);
    let stop = Stopper { tol: cfg.tol };
    let k = model.k();

    let mut x: Vec<f64> = x_init.map_or_else(|| vec![0.0; k], |s| s.x.to_vec());
    let mut m1 = vec![0.0; k];
    let mut m2 = vec![0.0; k];
    let mut f = problem.objective(&x);
    let mut trace = SolveTrace {
        objective_per_iter: vec![f],
        sparsity_per_iter: vec![percent_zero(&x)],
        ..SolveTrace::default()
    };
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let (mut b1t, mut b2t) = (1.0, 1.0);

    if f != 0.0 {
        for _ in 0..cfg.max_iter {
            let mut g = problem.grad(&x);
            for (gk, a) in g.iter_mut().zip(soft_clip(&x, hp.m_smooth).iter()) {
                *gk += hp.mu * a;
            }
            b1t *= b1;
            b2t *= b2;
            let x_new: Vec<f64> = (0..k)
                .map(|i| {
                    m1[i] = b1 * m1[i] + (1.0 - b1) * g[i];
                    m2[i] = b2 * m2[i] + (1.0 - b2) * g[i] * g[i];
                    let mh = m1[i] / (1.0 - b1t);
                    let vh = m2[i] / (1.0 - b2t);
                    x[i] - cfg.step * mh / (vh.sqrt() + cfg.adam_eps)
                })
                .collect();
            let f_new = problem.objective(&x_new);
            if !f_new.is_finite() {
                return Err(DpcnError::NonFinite("baseline solver"));
            }
            trace.iterations += 1;
            trace.objective_per_iter.push(f_new);
            trace.sparsity_per_iter.push(percent_zero(&x_new));
            let done = stop.done(f, f_new, &x, &x_new);
            x = x_new;
            f = f_new;
            if done {
                trace.converged = true;
                break;
            }
        }
    } else {
        trace.converged = true;
    }
    let (mut state, trace) = finish(x, trace, start)?;
    state.clamp_below(hp.clamp_state);
    Ok((state, trace))
}

/// Dispatch on `cfg.method`.
pub fn baseline_solve(
    y: &[f64],
    x_prev: Option<&StateVector>,
    model: &LayerModel,
    hp: &HyperParams,
    cfg: &BaselineConfig,
    x_init: Option<&StateVector>,
) -> Result<(StateVector, SolveTrace)> {
    match cfg.method {
        Method::Ista => ista_solve(y, x_prev, model, hp, cfg, x_init),
        Method::Fista => fista_solve(y, x_prev, model, hp, cfg, x_init),
        Method::Adam => adam_solve(y, x_prev, model, hp, cfg, x_init),
    }
}

/// [`baseline_solve`] over every patch of a frame, patch-parallel when built
/// with the `parallel` feature.
pub fn baseline_solve_batch(
    batch: &PatchBatch,
    prev: Option<&[StateVector]>,
    model: &LayerModel,
    hp: &HyperParams,
    cfg: &BaselineConfig,
    init: Option<&[StateVector]>,
) -> Result<(Vec<StateVector>, Vec<SolveTrace>)> {
    if prev.is_some_and(|p| p.len() != batch.n()) || init.is_some_and(|i| i.len() != batch.n()) {
        return Err(DpcnError::DimensionMismatch("per-patch state count".into()));
    }
    let results = par::map(&batch.patches, |n, y| {
        baseline_solve(y, prev.map(|p| &p[n]), model, hp, cfg, init.map(|i| &i[n]))
    });
    let mut states = Vec::with_capacity(results.len());
    let mut traces = Vec::with_capacity(results.len());
    for r in results {
        let (s, t) = r?;
        states.push(s);
        traces.push(t);
    }
    Ok((states, traces))
}

/// FISTA on `|X|ᵀ(1 + exp(−Bu)) + β‖u‖₁ (+ ½‖u − û‖²)`.
pub fn fista_cause(
    pooled: &PooledStateMagnitude,
    u_hat: Option<&[f64]>,
    model: &LayerModel,
    hp: &HyperParams,
    cfg: &BaselineConfig,
    u_init: Option<&CauseVector>,
) -> Result<(CauseVector, SolveTrace)> {
    let start = Instant::now();
    cfg.validate()?;
    let (k, d) = model.b.shape();
    if pooled.len() != k
        || u_hat.is_some_and(|h| h.len() != d)
        || u_init.is_some_and(|u| u.len() != d)
    {
        return Err(DpcnError::DimensionMismatch(format!(
            "cause inputs against B {k}x{d}"
        )));
    }
    let b = &model.b;
    let xs = &pooled.xt_abs;
    let objective = |u: &[f64]| -> f64 {
        let pull = u_hat.map_or(0.0, |h| {
            0.5 * u.iter().zip(h).map(|(a, c)| (a - c) * (a - c)).sum::<f64>()
        });
        cause_data_term(u, xs, b) + hp.beta * l1(u) + pull
    };
    let grad = |u: &[f64]| -> Vec<f64> {
        let bu = b.matvec(u);
        let w: Vec<f64> = xs.iter().zip(&bu).map(|(x, z)| -x * guarded_exp_neg(*z)).collect();
        let mut g = b.t_matvec(&w);
        if let Some(h) = u_hat {
            for ((gk, uk), hk) in g.iter_mut().zip(u).zip(h) {
                *gk += uk - hk;
            }
        }
        g
    };

    let eta = cfg.step;
    let stop = Stopper { tol: cfg.tol };
    let mut u: Vec<f64> = u_init.map_or_else(|| vec![0.0; d], |c| c.u.to_vec());
    let mut z = u.clone();
    let mut t = 1.0f64;
    let mut f = objective(&u);
    let mut trace = SolveTrace {
        objective_per_iter: vec![f],
        sparsity_per_iter: vec![percent_zero(&u)],
        ..SolveTrace::default()
    };
    for _ in 0..cfg.max_iter {
        let g = grad(&z);
        let u_new: Vec<f64> = z
            .iter()
            .zip(&g)
            .map(|(a, gk)| shrink(a - eta * gk, eta * hp.beta))
            .collect();
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let w = (t - 1.0) / t_new;
        z = u_new.iter().zip(&u).map(|(a, c)| a + w * (a - c)).collect();
        t = t_new;
        let f_new = objective(&u_new);
        if !f_new.is_finite() {
            return Err(DpcnError::NonFinite("baseline cause solver"));
        }
        trace.iterations += 1;
        trace.objective_per_iter.push(f_new);
        trace.sparsity_per_iter.push(percent_zero(&u_new));
        let done = stop.done(f, f_new, &u, &u_new);
        u = u_new;
        f = f_new;
        if done {
            trace.converged = true;
            break;
        }
    }
    trace.wall_time = start.elapsed().as_secs_f64();
    Ok((CauseVector::from_vec(u), trace))
}
