//! Model learning for one layer.
//!
//! With the variables of every frame converged for the current model, the
//! gradients of `E_p` with respect to each matrix are
//!
//! ```text
//! ∂C = −Σ_n (y_n − C x_n) x_nᵀ
//! ∂A = −λ Σ_n α*(x_n − A x_{t−1,n}) x_{t−1,n}ᵀ
//! ∂B = −(|X| ⊙ exp(−B u)) uᵀ
//! ```
//!
//! where `α*` is the smoothed sign used by state inference. A fit alternates
//! variable inference over the whole sequence with one gradient step on the
//! summed objective. Steps that would raise the objective are rejected and
//! retried with half the step, so the recorded trace never goes up.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cause::{infer_cause, infer_cause_topdown};
use crate::error::{DpcnError, Result};
use crate::majorizer::soft_clip;
use crate::model::{
    eval_ep, guarded_exp_neg, CauseVector, HyperParams, LayerDims, LayerModel, PatchBatch,
    PooledStateMagnitude, StateVector,
};
use crate::state::{infer_states_batch_with, SolveTrace, StateKernel};
use crate::tensor::{column_normalize, Matrix};

/// Step sizes and stopping rule for [`fit_layer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearnConfig {
    pub lr_a: f64,
    pub lr_b: f64,
    pub lr_c: f64,
    /// Weight of `½‖θ − θ_prev‖²` when refitting from a previous model.
    pub theta_prox: f64,
    pub outer_tol: f64,
    pub max_outer_iter: usize,
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            lr_a: 1e-3,
            lr_b: 1e-3,
            lr_c: 1e-3,
            theta_prox: 0.5,
            outer_tol: 1e-4,
            max_outer_iter: 300,
            seed: 0,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_a, self.lr_b, self.lr_c];
        if lrs.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(DpcnError::InvalidConfig("learning rates must be > 0".into()));
        }
        if !(self.theta_prox.is_finite() && self.theta_prox >= 0.0) {
            return Err(DpcnError::InvalidConfig("theta_prox must be >= 0".into()));
        }
        if !(self.outer_tol.is_finite() && self.outer_tol >= 0.0) {
            return Err(DpcnError::InvalidConfig("outer_tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// Gradients of `E_p` with respect to `A`, `B` and `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub da: Matrix,
    pub db: Matrix,
    pub dc: Matrix,
}

impl ModelGrads {
    pub fn zeros(model: &LayerModel) -> Self {
        ModelGrads {
            da: Matrix::zeros(model.k(), model.k()),
            db: Matrix::zeros(model.k(), model.d()),
            dc: Matrix::zeros(model.p(), model.k()),
        }
    }

    fn accumulate(&mut self, other: &ModelGrads) {
        for (dst, src) in [
            (&mut self.da, &other.da),
            (&mut self.db, &other.db),
            (&mut self.dc, &other.dc),
        ] {
            for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
                *a += b;
            }
        }
    }
}

fn add_outer(m: &mut Matrix, scale: f64, left: &[f64], right: &[f64]) {
    let cols = m.cols();
    let data = m.data_mut();
    for (i, l) in left.iter().enumerate() {
        if *l == 0.0 {
            continue;
        }
        let row = &mut data[i * cols..(i + 1) * cols];
        for (d, r) in row.iter_mut().zip(right) {
            *d += scale * l * r;
        }
    }
}

/// Gradients of one frame's `E_p` at fixed variables.
pub fn grad_model(
    batch: &PatchBatch,
    states: &[StateVector],
    prev_states: Option<&[StateVector]>,
    cause: &CauseVector,
    pooled: &PooledStateMagnitude,
    model: &LayerModel,
    hp: &HyperParams,
) -> Result<ModelGrads> {
    model.check()?;
    let (p, k, d) = (model.p(), model.k(), model.d());
    if states.len() != batch.n() || prev_states.is_some_and(|ps| ps.len() != batch.n()) {
        return Err(DpcnError::DimensionMismatch(format!(
            "{} states for {} patches",
            states.len(),
            batch.n()
        )));
    }
    if batch.n() > 0 && batch.patch_len() != p
        || states.iter().any(|s| s.len() != k)
        || prev_states.is_some_and(|ps| ps.iter().any(|s| s.len() != k))
        || cause.len() != d
        || pooled.len() != k
    {
        return Err(DpcnError::DimensionMismatch(format!(
            "variables do not match a layer with p={p} k={k} d={d}"
        )));
    }

    let mut g = ModelGrads::zeros(model);
    for (n, (y, s)) in batch.patches.iter().zip(states).enumerate() {
        let cx = model.c.matvec(&s.x);
        let resid: Vec<f64> = y.iter().zip(&cx).map(|(a, b)| a - b).collect();
        add_outer(&mut g.dc, -1.0, &resid, &s.x);
        if let Some(ps) = prev_states {
            if hp.lambda != 0.0 {
                let xp = &ps[n].x;
                let ax = model.a.matvec(xp);
                let e: Vec<f64> = s.x.iter().zip(&ax).map(|(a, b)| a - b).collect();
                let alpha = soft_clip(&e, hp.m_smooth);
                add_outer(&mut g.da, -hp.lambda, &alpha, xp);
            }
        }
    }
    let bu = model.b.matvec(&cause.u);
    let w: Vec<f64> = pooled
        .xt_abs
        .iter()
        .zip(&bu)
        .map(|(x, z)| x * guarded_exp_neg(*z))
        .collect();
    add_outer(&mut g.db, -1.0, &w, &cause.u);
    Ok(g)
}

fn step_matrix(m: &Matrix, g: &Matrix, lr: f64, prox: f64, anchor: Option<&Matrix>) -> Matrix {
    let mut out = m.clone();
    let data = out.data_mut();
    for (i, v) in data.iter_mut().enumerate() {
        let pull = anchor.map_or(0.0, |a| prox * (m.data()[i] - a.data()[i]));
        *v -= lr * (g.data()[i] + pull);
    }
    out
}

fn check_same_shape(a: &LayerModel, b: &LayerModel) -> Result<()> {
    if a.a.shape() != b.a.shape() || a.b.shape() != b.b.shape() || a.c.shape() != b.c.shape() {
        return Err(DpcnError::DimensionMismatch("models differ in shape".into()));
    }
    Ok(())
}

/// `θ ← θ − lr (∇θ + theta_prox (θ − θ_prev))`, then unit columns for `B`, `C`.
pub fn update_model(
    model: &LayerModel,
    grads: &ModelGrads,
    cfg: &LearnConfig,
    model_prev: &LayerModel,
) -> Result<LayerModel> {
    update_model_scaled(model, grads, cfg, Some(model_prev), 1.0)
}

/// [`update_model`] with every learning rate multiplied by `scale`;
/// `anchor = None` drops the proximity term.
pub fn update_model_scaled(
    model: &LayerModel,
    grads: &ModelGrads,
    cfg: &LearnConfig,
    anchor: Option<&LayerModel>,
    scale: f64,
) -> Result<LayerModel> {
    model.check()?;
    if let Some(a) = anchor {
        check_same_shape(model, a)?;
    }
    if grads.da.shape() != model.a.shape()
        || grads.db.shape() != model.b.shape()
        || grads.dc.shape() != model.c.shape()
    {
        return Err(DpcnError::DimensionMismatch("gradient shapes".into()));
    }
    let prox = cfg.theta_prox;
    let a = step_matrix(&model.a, &grads.da, scale * cfg.lr_a, prox, anchor.map(|m| &m.a));
    let b = step_matrix(&model.b, &grads.db, scale * cfg.lr_b, prox, anchor.map(|m| &m.b));
    let c = step_matrix(&model.c, &grads.dc, scale * cfg.lr_c, prox, anchor.map(|m| &m.c));
    if !(a.is_finite() && b.is_finite() && c.is_finite()) {
        return Err(DpcnError::NonFinite("model update"));
    }
    LayerModel::new(a, column_normalize(&b)?, column_normalize(&c)?)
}

/// Converged variables of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameVariables {
    pub states: Vec<StateVector>,
    pub cause: CauseVector,
    /// Alternation blocks run.
    pub blocks: usize,
    pub converged: bool,
    /// Seconds spent in inference.
    pub wall_time: f64,
}

impl FrameVariables {
    pub fn pooled(&self, hp: &HyperParams) -> Result<PooledStateMagnitude> {
        PooledStateMagnitude::from_states(&self.states, hp.gamma)
    }
}

fn pooled_or_zero(states: &[StateVector], k: usize, hp: &HyperParams) -> Result<PooledStateMagnitude> {
    if states.is_empty() {
        Ok(PooledStateMagnitude::from_vec(vec![0.0; k]))
    } else {
        PooledStateMagnitude::from_states(states, hp.gamma)
    }
}

fn all_converged(traces: &[SolveTrace]) -> bool {
    traces.iter().all(|t| t.converged)
}

/// Alternate `i_s` state iterations with `j_s` cause iterations until both
/// solvers report convergence or one block changes the frame objective by at
/// most `inner_tol` (relative). `u_hat` switches cause inference to the
/// top-down form and adds `½‖u − û‖²` to the monitored objective.
pub fn infer_frame(
    kernel: &StateKernel<'_>,
    batch: &PatchBatch,
    prev_states: Option<&[StateVector]>,
    hp: &HyperParams,
    u_hat: Option<&[f64]>,
    init: Option<(&[StateVector], &CauseVector)>,
) -> Result<FrameVariables> {
    let start = Instant::now();
    let model = kernel.model;
    let hp_x = HyperParams {
        max_inner_iter: hp.i_s.max(1),
        ..*hp
    };
    let hp_u = HyperParams {
        max_inner_iter: hp.j_s.max(1),
        ..*hp
    };
    let max_blocks = hp.max_inner_iter.div_ceil(hp.i_s.max(1).min(hp.j_s.max(1))).max(1);

    let mut states: Option<Vec<StateVector>> = init.map(|(s, _)| s.to_vec());
    let mut cause: Option<CauseVector> = init.map(|(_, u)| u.clone());
    let mut converged = false;
    let mut blocks = 0;
    let mut e_prev = f64::INFINITY;
    while blocks < max_blocks {
        blocks += 1;
        let (xs, xt) = infer_states_batch_with(kernel, batch, prev_states, &hp_x, states.as_deref())?;
        let pooled = pooled_or_zero(&xs, model.k(), hp)?;
        let (u, ut) = match u_hat {
            Some(h) => infer_cause_topdown(&pooled, h, model, &hp_u, cause.as_ref())?,
            None => infer_cause(&pooled, model, &hp_u, cause.as_ref())?,
        };
        let mut e = eval_ep(batch, &xs, prev_states, &u, model, hp)?;
        if let Some(h) = u_hat {
            e += 0.5 * u.u.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        states = Some(xs);
        cause = Some(u);
        let settled = (e_prev - e).abs() <= hp.inner_tol * e.abs().max(1.0);
        e_prev = e;
        if (all_converged(&xt) && ut.converged) || settled {
            converged = true;
            break;
        }
    }
    Ok(FrameVariables {
        states: states.unwrap_or_default(),
        cause: cause.unwrap_or_else(|| CauseVector::zeros(model.d())),
        blocks,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Per-frame variables of a whole sequence, frames in order so that each
/// frame's states see the previous frame's states.
pub fn infer_sequence(
    frames: &[PatchBatch],
    model: &LayerModel,
    hp: &HyperParams,
) -> Result<Vec<FrameVariables>> {
    let kernel = StateKernel::new(model);
    let mut out: Vec<FrameVariables> = Vec::with_capacity(frames.len());
    for batch in frames {
        let prev = out.last().map(|v| v.states.as_slice());
        out.push(infer_frame(&kernel, batch, prev, hp, None, None)?);
    }
    Ok(out)
}

/// `Σ_t E_p` of a sequence at fixed variables.
pub fn sequence_ep(
    frames: &[PatchBatch],
    vars: &[FrameVariables],
    model: &LayerModel,
    hp: &HyperParams,
) -> Result<f64> {
    let mut total = 0.0;
    for (t, (batch, v)) in frames.iter().zip(vars).enumerate() {
        let prev = (t > 0).then(|| vars[t - 1].states.as_slice());
        total += eval_ep(batch, &v.states, prev, &v.cause, model, hp)?;
    }
    Ok(total)
}

/// `Σ_t ∇θ E_p` at fixed variables.
pub fn sequence_grads(
    frames: &[PatchBatch],
    vars: &[FrameVariables],
    model: &LayerModel,
    hp: &HyperParams,
) -> Result<ModelGrads> {
    let mut g = ModelGrads::zeros(model);
    for (t, (batch, v)) in frames.iter().zip(vars).enumerate() {
        let prev = (t > 0).then(|| vars[t - 1].states.as_slice());
        let pooled = pooled_or_zero(&v.states, model.k(), hp)?;
        g.accumulate(&grad_model(batch, &v.states, prev, &v.cause, &pooled, model, hp)?);
    }
    Ok(g)
}

/// Outcome of one [`fit_layer`] run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitReport {
    /// Objective at the initial model followed by one value per accepted step.
    /// Equals `Σ_t E_p` unless a proximity anchor is active, in which case
    /// `theta_prox/2 ‖θ − θ_prev‖²` is included.
    pub ep_trace: Vec<f64>,
    /// Outer iterations, accepted and rejected.
    pub outer_iterations: usize,
    pub rejected_steps: usize,
    pub converged: bool,
    /// Set when `max_outer_iter` ran out first.
    pub non_convergence: bool,
    /// Seconds.
    pub wall_time: f64,
}

const MIN_STEP_SCALE: f64 = 1e-12;

fn prox_penalty(model: &LayerModel, anchor: Option<&LayerModel>, theta_prox: f64) -> f64 {
    let Some(a) = anchor else { return 0.0 };
    let sq = |m: &Matrix, n: &Matrix| -> f64 {
        m.data().iter().zip(n.data()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    0.5 * theta_prox * (sq(&model.a, &a.a) + sq(&model.b, &a.b) + sq(&model.c, &a.c))
}

fn check_frames(frames: &[PatchBatch], p: usize) -> Result<()> {
    if frames.is_empty() {
        return Err(DpcnError::InvalidConfig("fit needs at least one frame".into()));
    }
    let n = frames[0].n();
    for f in frames {
        if f.n() != n {
            return Err(DpcnError::DimensionMismatch(
                "every frame must have the same patch count".into(),
            ));
        }
        if f.n() > 0 && f.patch_len() != p {
            return Err(DpcnError::DimensionMismatch(format!(
                "patch length {} for p={p}",
                f.patch_len()
            )));
        }
    }
    Ok(())
}

/// Fit one layer from a seeded random model.
///
/// Returns the model, the per-frame causes at that model and the report.
pub fn fit_layer(
    frames: &[PatchBatch],
    dims: &LayerDims,
    hp: &HyperParams,
    cfg: &LearnConfig,
) -> Result<(LayerModel, Vec<CauseVector>, FitReport)> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = LayerModel::random(dims, &mut rng)?;
    fit_layer_from(frames, init, None, hp, cfg)
}

/// Fit one layer starting at `init`. With `anchor = Some(θ_prev)` the
/// objective gains `theta_prox/2 ‖θ − θ_prev‖²`.
pub fn fit_layer_from(
    frames: &[PatchBatch],
    init: LayerModel,
    anchor: Option<&LayerModel>,
    hp: &HyperParams,
    cfg: &LearnConfig,
) -> Result<(LayerModel, Vec<CauseVector>, FitReport)> {
    let start = Instant::now();
    hp.validate()?;
    cfg.validate()?;
    init.check()?;
    if let Some(a) = anchor {
        check_same_shape(&init, a)?;
    }
    check_frames(frames, init.p())?;

    let objective = |m: &LayerModel, v: &[FrameVariables]| -> Result<f64> {
        Ok(sequence_ep(frames, v, m, hp)? + prox_penalty(m, anchor, cfg.theta_prox))
    };

    let mut model = init;
    let mut vars = infer_sequence(frames, &model, hp)?;
    let mut e_cur = objective(&model, &vars)?;
    let mut report = FitReport {
        ep_trace: vec![e_cur],
        ..FitReport::default()
    };
    let mut scale = 1.0;

    while report.outer_iterations < cfg.max_outer_iter {
        let grads = sequence_grads(frames, &vars, &model, hp)?;
        // shrink the step until the objective drops at the current variables;
        // this needs no inference and screens out most overshoots
        let mut proposal = None;
        while scale >= MIN_STEP_SCALE {
            let cand = update_model_scaled(&model, &grads, cfg, anchor, scale)?;
            if objective(&cand, &vars)? <= e_cur {
                proposal = Some(cand);
                break;
            }
            scale *= 0.5;
        }
        let Some(cand) = proposal else {
            report.converged = true;
            break;
        };

        report.outer_iterations += 1;
        let cand_vars = infer_sequence(frames, &cand, hp)?;
        let e_new = objective(&cand, &cand_vars)?;
        if e_new > e_cur {
            report.rejected_steps += 1;
            scale *= 0.5;
            if scale < MIN_STEP_SCALE {
                report.converged = true;
                break;
            }
            continue;
        }

        let rel = (e_cur - e_new) / e_cur.abs().max(f64::MIN_POSITIVE);
        model = cand;
        vars = cand_vars;
        e_cur = e_new;
        report.ep_trace.push(e_cur);
        if rel < cfg.outer_tol {
            report.converged = true;
            break;
        }
    }
    report.non_convergence = !report.converged;
    report.wall_time = start.elapsed().as_secs_f64();
    let causes = vars.into_iter().map(|v| v.cause).collect();
    Ok((model, causes, report))
}
