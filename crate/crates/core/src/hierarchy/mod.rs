//! Stacked layers: patch decomposition, greedy layer-wise training and
//! bottom-up/top-down variable inference.
//!
//! Layer 1 sees a frame as `rows × cols` patches. Every higher layer sees the
//! cause vector of the layer below as a single patch.

mod persist;

use std::time::Instant;

pub use persist::{load_network, network_from_bytes, network_to_bytes, save_network};

use crate::baselines::{baseline_solve_batch, fista_cause, BaselineConfig, Method};
use crate::cause::top_down_prediction;
use crate::error::{DpcnError, Result};
use crate::learn::{fit_layer, infer_frame, FitReport, FrameVariables, LearnConfig};
use crate::model::{
    eval_ep, CauseVector, HyperParams, LayerDims, LayerModel, PatchBatch, PooledStateMagnitude,
    StateVector,
};
use crate::state::StateKernel;
use crate::tensor::Vector;

/// Pixel tensor, row-major `height × width × channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(DpcnError::Shape("frame dimensions must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(DpcnError::Shape(format!(
                "{} values for a {height}x{width}x{channels} frame",
                data.len()
            )));
        }
        Ok(Frame {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Frame {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }
}

/// Split of a frame into `rows × cols` equal patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Grid { rows, cols }
    }

    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }

    fn patch_shape(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if self.rows == 0
            || self.cols == 0
            || height % self.rows != 0
            || width % self.cols != 0
        {
            return Err(DpcnError::GridMismatch {
                height,
                width,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok((height / self.rows, width / self.cols))
    }

    /// Patch length for a frame of the given size.
    pub fn patch_len(&self, height: usize, width: usize, channels: usize) -> Result<usize> {
        let (ph, pw) = self.patch_shape(height, width)?;
        Ok(ph * pw * channels)
    }
}

/// Cut a frame into contiguous patches, grid cells in row-major order, each
/// patch vectorized in row-major pixel order then channel.
pub fn decompose_frame(frame: &Frame, grid: Grid, t: usize) -> Result<PatchBatch> {
    let (ph, pw) = grid.patch_shape(frame.height, frame.width)?;
    let ch = frame.channels;
    let mut patches = Vec::with_capacity(grid.patches());
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let mut v = Vec::with_capacity(ph * pw * ch);
            for r in 0..ph {
                let row = gr * ph + r;
                let start = (row * frame.width + gc * pw) * ch;
                v.extend_from_slice(&frame.data[start..start + pw * ch]);
            }
            patches.push(Vector::from(v));
        }
    }
    PatchBatch::new(t, patches)
}

/// Inverse of [`decompose_frame`].
pub fn reassemble(
    batch: &PatchBatch,
    grid: Grid,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Frame> {
    let (ph, pw) = grid.patch_shape(height, width)?;
    if batch.n() != grid.patches() {
        return Err(DpcnError::Shape(format!(
            "{} patches for a {}x{} grid",
            batch.n(),
            grid.rows,
            grid.cols
        )));
    }
    if batch.patch_len() != ph * pw * channels {
        return Err(DpcnError::Shape(format!(
            "patch length {} for {ph}x{pw}x{channels} patches",
            batch.patch_len()
        )));
    }
    let mut frame = Frame::zeros(height, width, channels);
    for (i, patch) in batch.patches.iter().enumerate() {
        let (gr, gc) = (i / grid.cols, i % grid.cols);
        for r in 0..ph {
            let row = gr * ph + r;
            let start = (row * width + gc * pw) * channels;
            frame.data[start..start + pw * channels]
                .copy_from_slice(&patch[r * pw * channels..(r + 1) * pw * channels]);
        }
    }
    Ok(frame)
}

/// Settings of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub dims: LayerDims,
    pub hp: HyperParams,
    pub learn: LearnConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Bottom layer first.
    pub layers: Vec<LayerConfig>,
    pub grid: Grid,
    pub channels: usize,
}

impl NetworkConfig {
    /// Checks every layer, the chaining `p^{l+1} = d^l`, and that layer 1
    /// has one patch per grid cell while higher layers have one patch.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DpcnError::InvalidConfig("network needs at least one layer".into()));
        }
        if self.channels == 0 {
            return Err(DpcnError::InvalidConfig("channels must be positive".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            layer.dims.validate()?;
            layer.hp.validate()?;
            layer.learn.validate()?;
            let want_n = if l == 0 { self.grid.patches() } else { 1 };
            if layer.dims.n != want_n {
                return Err(DpcnError::InvalidConfig(format!(
                    "layer {} has n={} patches, expected {want_n}",
                    l + 1,
                    layer.dims.n
                )));
            }
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[1].dims.p != pair[0].dims.d {
                return Err(DpcnError::InvalidConfig(format!(
                    "layer {} input p={} does not match layer {} cause dimension d={}",
                    l + 2,
                    pair[1].dims.p,
                    l + 1,
                    pair[0].dims.d
                )));
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the layer-1 patch length for frames
    /// of this size.
    pub fn validate_for_frame(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        let p = self.grid.patch_len(height, width, self.channels)?;
        if p != self.layers[0].dims.p {
            return Err(DpcnError::InvalidConfig(format!(
                "layer 1 p={} but {height}x{width}x{} frames on a {}x{} grid give patches of {p}",
                self.layers[0].dims.p, self.channels, self.grid.rows, self.grid.cols
            )));
        }
        Ok(())
    }
}

/// One trained layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkLayer {
    pub dims: LayerDims,
    pub hp: HyperParams,
    pub model: LayerModel,
}

/// Trained stack, bottom layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<NetworkLayer>,
}

impl Network {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DpcnError::Shape("network has no layers".into()));
        }
        for layer in &self.layers {
            layer.dims.validate()?;
            layer.hp.validate()?;
            layer.model.check_dims(&layer.dims)?;
        }
        for pair in self.layers.windows(2) {
            if pair[1].dims.p != pair[0].dims.d || pair[1].dims.n != 1 {
                return Err(DpcnError::Shape("layer chaining p^(l+1) = d^l, n = 1".into()));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Decompose a video for layer 1.
pub fn decompose_video(frames: &[Frame], grid: Grid) -> Result<Vec<PatchBatch>> {
    frames
        .iter()
        .enumerate()
        .map(|(t, f)| decompose_frame(f, grid, t))
        .collect()
}

fn causes_as_input(causes: &[CauseVector]) -> Result<Vec<PatchBatch>> {
    causes
        .iter()
        .enumerate()
        .map(|(t, u)| PatchBatch::new(t, vec![u.u.clone()]))
        .collect()
}

/// Greedy layer-wise training: layer 1 on the patch batches, each higher
/// layer on the per-frame causes of the layer below, each fit to
/// convergence before the next starts.
pub fn train_network_batches(
    layer1: &[PatchBatch],
    cfg: &NetworkConfig,
) -> Result<(Network, Vec<FitReport>)> {
    cfg.validate()?;
    let mut layers = Vec::with_capacity(cfg.layers.len());
    let mut reports = Vec::with_capacity(cfg.layers.len());
    let mut input: Vec<PatchBatch> = layer1.to_vec();
    for lc in &cfg.layers {
        let (model, causes, report) = fit_layer(&input, &lc.dims, &lc.hp, &lc.learn)?;
        layers.push(NetworkLayer {
            dims: lc.dims,
            hp: lc.hp,
            model,
        });
        reports.push(report);
        input = causes_as_input(&causes)?;
    }
    Ok((Network { layers }, reports))
}

/// [`train_network_batches`] on raw frames.
pub fn train_network(frames: &[Frame], cfg: &NetworkConfig) -> Result<(Network, Vec<FitReport>)> {
    let first = frames
        .first()
        .ok_or_else(|| DpcnError::InvalidConfig("training needs at least one frame".into()))?;
    cfg.validate_for_frame(first.height, first.width)?;
    if frames
        .iter()
        .any(|f| (f.height, f.width, f.channels) != (first.height, first.width, cfg.channels))
    {
        return Err(DpcnError::Shape("frames differ in size or channel count".into()));
    }
    train_network_batches(&decompose_video(frames, cfg.grid)?, cfg)
}

/// Solver used for per-frame variable inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Engine {
    Mm,
    /// Proximal-gradient states and causes with the given step. The method
    /// field is ignored; FISTA is always used.
    Fista(BaselineConfig),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    pub engine: Engine,
    pub max_sweeps: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            engine: Engine::Mm,
            max_sweeps: 10,
        }
    }
}

/// Variables of one layer at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerVariables {
    pub states: Vec<StateVector>,
    pub cause: CauseVector,
}

/// All layers at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInference {
    /// Bottom layer first.
    pub layers: Vec<LayerVariables>,
    pub sweeps: usize,
    /// Seconds.
    pub wall_time: f64,
}

impl FrameInference {
    pub fn top_cause(&self) -> &CauseVector {
        &self.layers[self.layers.len() - 1].cause
    }
}

fn infer_frame_fista(
    model: &LayerModel,
    batch: &PatchBatch,
    prev: Option<&[StateVector]>,
    hp: &HyperParams,
    base: &BaselineConfig,
    u_hat: Option<&[f64]>,
    init: Option<(&[StateVector], &CauseVector)>,
) -> Result<FrameVariables> {
    let start = Instant::now();
    let cfg_x = BaselineConfig {
        method: Method::Fista,
        max_iter: hp.i_s.max(1),
        ..*base
    };
    let cfg_u = BaselineConfig {
        max_iter: hp.j_s.max(1),
        ..cfg_x
    };
    let max_blocks = hp.max_inner_iter.div_ceil(hp.i_s.max(1).min(hp.j_s.max(1))).max(1);
    let mut states: Option<Vec<StateVector>> = init.map(|(s, _)| s.to_vec());
    let mut cause: Option<CauseVector> = init.map(|(_, u)| u.clone());
    let mut e_prev = f64::INFINITY;
    let mut blocks = 0;
    let mut converged = false;
    while blocks < max_blocks {
        blocks += 1;
        let (xs, _) = baseline_solve_batch(batch, prev, model, hp, &cfg_x, states.as_deref())?;
        let pooled = if xs.is_empty() {
            PooledStateMagnitude::from_vec(vec![0.0; model.k()])
        } else {
            PooledStateMagnitude::from_states(&xs, hp.gamma)?
        };
        let (u, _) = fista_cause(&pooled, u_hat, model, hp, &cfg_u, cause.as_ref())?;
        let mut e = eval_ep(batch, &xs, prev, &u, model, hp)?;
        if let Some(h) = u_hat {
            e += 0.5 * u.u.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        states = Some(xs);
        cause = Some(u);
        let settled = (e_prev - e).abs() <= hp.inner_tol * e.abs().max(1.0);
        e_prev = e;
        if settled {
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

fn relative_change(a: &CauseVector, b: &CauseVector) -> f64 {
    let diff = a.u.iter().zip(b.u.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.u.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    diff / scale
}

/// Per-frame variables of every layer.
///
/// Each sweep runs the layers bottom-up. Layer `l` below the top is pulled
/// toward the top-down prediction built from the previous frame's state and
/// the latest cause of layer `l+1`; the top layer is pulled toward its own
/// previous cause. Sweeps repeat until no layer's cause moves by more than
/// its `inner_tol` (relative) or `max_sweeps` is reached. The first frame
/// has no previous-frame quantities and runs bottom-up only.
pub fn infer_variables_batches(
    layer1: &[PatchBatch],
    network: &Network,
    opts: &InferOptions,
) -> Result<Vec<FrameInference>> {
    network.validate()?;
    if opts.max_sweeps == 0 {
        return Err(DpcnError::InvalidConfig("max_sweeps must be positive".into()));
    }
    let depth = network.depth();
    let kernels: Vec<StateKernel<'_>> = network
        .layers
        .iter()
        .map(|l| StateKernel::new(&l.model))
        .collect();
    let mut out: Vec<FrameInference> = Vec::with_capacity(layer1.len());

    for batch in layer1 {
        let start = Instant::now();
        let prev = out.last();
        let mut cur: Vec<Option<LayerVariables>> = vec![None; depth];
        let mut sweeps = 0;
        while sweeps < opts.max_sweeps {
            sweeps += 1;
            let mut change = 0.0f64;
            for l in 0..depth {
                let layer = &network.layers[l];
                let input = if l == 0 {
                    batch.clone()
                } else {
                    let below = cur[l - 1].as_ref().expect("lower layer inferred first");
                    PatchBatch::new(batch.t, vec![below.cause.u.clone()])?
                };
                let prev_states = prev.map(|p| p.layers[l].states.as_slice());
                let u_hat: Option<Vector> = match prev {
                    None => None,
                    Some(p) if l + 1 == depth => Some(p.layers[l].cause.u.clone()),
                    Some(p) => match &cur[l + 1] {
                        Some(upper) => {
                            let up = &network.layers[l + 1];
                            Some(
                                top_down_prediction(
                                    &up.model,
                                    &p.layers[l + 1].states[0],
                                    &upper.cause,
                                    &up.hp,
                                )?
                                .u_hat,
                            )
                        }
                        None => None,
                    },
                };
                let init = cur[l].as_ref().map(|v| (v.states.as_slice(), &v.cause));
                let vars = match opts.engine {
                    Engine::Mm => infer_frame(
                        &kernels[l],
                        &input,
                        prev_states,
                        &layer.hp,
                        u_hat.as_deref(),
                        init,
                    )?,
                    Engine::Fista(cfg) => infer_frame_fista(
                        &layer.model,
                        &input,
                        prev_states,
                        &layer.hp,
                        &cfg,
                        u_hat.as_deref(),
                        init,
                    )?,
                };
                let rel = match &cur[l] {
                    Some(old) => relative_change(&old.cause, &vars.cause) / layer.hp.inner_tol,
                    None => f64::INFINITY,
                };
                change = change.max(rel);
                cur[l] = Some(LayerVariables {
                    states: vars.states,
                    cause: vars.cause,
                });
            }
            // a single layer receives no feedback, and without a previous
            // frame there is no top-down prediction
            if depth == 1 || prev.is_none() || change <= 1.0 {
                break;
            }
        }
        out.push(FrameInference {
            layers: cur.into_iter().map(|v| v.expect("every layer inferred")).collect(),
            sweeps,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}

/// [`infer_variables_batches`] on raw frames.
pub fn infer_variables(
    frames: &[Frame],
    network: &Network,
    grid: Grid,
    opts: &InferOptions,
) -> Result<Vec<FrameInference>> {
    network.validate()?;
    if let Some(f) = frames.first() {
        let p = grid.patch_len(f.height, f.width, f.channels)?;
        let l1 = &network.layers[0].dims;
        if p != l1.p || grid.patches() != l1.n {
            return Err(DpcnError::DimensionMismatch(format!(
                "frames give {} patches of {p}, layer 1 expects {} of {}",
                grid.patches(),
                l1.n,
                l1.p
            )));
        }
    }
    infer_variables_batches(&decompose_video(frames, grid)?, network, opts)
}
