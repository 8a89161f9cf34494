//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! grid = "2x2"
//! grayscale = false
//!
//! [shapes]
//! frames_per_shape = 100
//!
//! [[layer]]
//! p = 64
//! k = 96
//! d = 24
//! mu = 0.3
//!
//! [[layer]]
//! p = 24
//! k = 48
//! d = 12
//! ```
//!
//! Every key is optional except the layer dimensions. Unknown keys are
//! errors.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mmdpcn::baselines::{BaselineConfig, Method};
use mmdpcn::hierarchy::{Grid, LayerConfig, NetworkConfig};
use mmdpcn::learn::LearnConfig;
use mmdpcn::model::{HyperParams, LayerDims};
use serde::{Deserialize, Serialize};

use crate::shapes::ShapesConfig;

/// Parse `RxC`.
pub fn parse_grid(s: &str) -> Result<Grid> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("grid {s:?} is not of the form RxC"))?;
    let grid = Grid::new(r.trim().parse()?, c.trim().parse()?);
    if grid.rows == 0 || grid.cols == 0 {
        bail!("grid {s:?} has a zero side");
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesSection {
    pub size: usize,
    pub frames_per_shape: usize,
    pub cells: usize,
    pub radius: f64,
    pub drift: f64,
    pub noise: f64,
}

impl Default for ShapesSection {
    fn default() -> Self {
        let d = ShapesConfig::default();
        ShapesSection {
            size: d.size,
            frames_per_shape: d.frames_per_shape,
            cells: d.cells,
            radius: d.radius,
            drift: d.drift,
            noise: d.noise,
        }
    }
}

impl ShapesSection {
    pub fn to_config(&self) -> ShapesConfig {
        ShapesConfig {
            size: self.size,
            frames_per_shape: self.frames_per_shape,
            cells: self.cells,
            radius: self.radius,
            drift: self.drift,
            noise: self.noise,
        }
    }
}

/// Synthetic sparse-coding benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub patches: usize,
    pub p: usize,
    pub k: usize,
    /// Nonzeros of each generating code.
    pub nnz: usize,
    /// Code magnitudes are `amplitude · U[0.5, 1.5]` with random sign.
    pub amplitude: f64,
    /// Standard deviation of the additive noise.
    pub noise: f64,
    pub mu: f64,
    pub lambda: f64,
    pub max_iter: usize,
    /// Learning rate of ISTA, FISTA and Adam.
    pub step: f64,
    /// Tolerance for MM's own stopping rule.
    pub inner_tol: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            patches: 16,
            p: 256,
            k: 300,
            nnz: 20,
            amplitude: 100.0,
            noise: 1.0,
            mu: 0.3,
            lambda: 0.0,
            max_iter: 200,
            step: 1e-2,
            inner_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub k: usize,
    pub pca_dims: usize,
    pub max_sweeps: usize,
    pub kmeans_iter: usize,
    /// Step of the FISTA engine.
    pub fista_step: f64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection {
            k: 3,
            pca_dims: 3,
            max_sweeps: 10,
            kmeans_iter: 300,
            fista_step: 1e-2,
        }
    }
}

impl ClusterSection {
    pub fn fista(&self) -> BaselineConfig {
        BaselineConfig {
            step: self.fista_step,
            ..BaselineConfig::with_method(Method::Fista)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSection {
    pub p: usize,
    pub k: usize,
    pub d: usize,
    #[serde(default = "defaults::mu")]
    pub mu: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::m_smooth")]
    pub m_smooth: f64,
    #[serde(default = "defaults::clamp")]
    pub clamp_state: f64,
    #[serde(default = "defaults::clamp")]
    pub clamp_cause: f64,
    #[serde(default = "defaults::i_s")]
    pub i_s: usize,
    #[serde(default = "defaults::i_s")]
    pub j_s: usize,
    #[serde(default = "defaults::inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "defaults::max_inner_iter")]
    pub max_inner_iter: usize,
    #[serde(default = "defaults::lr")]
    pub lr_a: f64,
    #[serde(default = "defaults::lr")]
    pub lr_b: f64,
    #[serde(default = "defaults::lr")]
    pub lr_c: f64,
    #[serde(default = "defaults::theta_prox")]
    pub theta_prox: f64,
    #[serde(default = "defaults::outer_tol")]
    pub outer_tol: f64,
    #[serde(default = "defaults::max_outer_iter")]
    pub max_outer_iter: usize,
}

mod defaults {
    use super::*;

    pub fn mu() -> f64 {
        HyperParams::default().mu
    }
    pub fn lambda() -> f64 {
        HyperParams::default().lambda
    }
    pub fn gamma() -> f64 {
        HyperParams::default().gamma
    }
    pub fn beta() -> f64 {
        HyperParams::default().beta
    }
    pub fn m_smooth() -> f64 {
        HyperParams::default().m_smooth
    }
    pub fn clamp() -> f64 {
        HyperParams::default().clamp_state
    }
    pub fn i_s() -> usize {
        HyperParams::default().i_s
    }
    pub fn inner_tol() -> f64 {
        HyperParams::default().inner_tol
    }
    pub fn max_inner_iter() -> usize {
        HyperParams::default().max_inner_iter
    }
    pub fn lr() -> f64 {
        LearnConfig::default().lr_c
    }
    pub fn theta_prox() -> f64 {
        LearnConfig::default().theta_prox
    }
    pub fn outer_tol() -> f64 {
        LearnConfig::default().outer_tol
    }
    pub fn max_outer_iter() -> usize {
        LearnConfig::default().max_outer_iter
    }
}

impl LayerSection {
    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            mu: self.mu,
            lambda: self.lambda,
            gamma: self.gamma,
            beta: self.beta,
            m_smooth: self.m_smooth,
            clamp_state: self.clamp_state,
            clamp_cause: self.clamp_cause,
            i_s: self.i_s,
            j_s: self.j_s,
            inner_tol: self.inner_tol,
            max_inner_iter: self.max_inner_iter,
        }
    }

    fn learn(&self, seed: u64) -> LearnConfig {
        LearnConfig {
            lr_a: self.lr_a,
            lr_b: self.lr_b,
            lr_c: self.lr_c,
            theta_prox: self.theta_prox,
            outer_tol: self.outer_tol,
            max_outer_iter: self.max_outer_iter,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: String,
    pub grayscale: bool,
    pub shapes: ShapesSection,
    pub bench: BenchSection,
    pub cluster: ClusterSection,
    pub layer: Vec<LayerSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            grid: "2x2".into(),
            grayscale: false,
            shapes: ShapesSection::default(),
            bench: BenchSection::default(),
            cluster: ClusterSection::default(),
            layer: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn grid(&self) -> Result<Grid> {
        parse_grid(&self.grid)
    }

    /// Network settings; layer `l` learns with seed `seed + l`.
    pub fn network(&self, channels: usize) -> Result<NetworkConfig> {
        if self.layer.is_empty() {
            bail!("config has no [[layer]] sections");
        }
        let grid = self.grid()?;
        let layers = self
            .layer
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let n = if l == 0 { grid.patches() } else { 1 };
                Ok(LayerConfig {
                    dims: LayerDims { p: s.p, k: s.k, d: s.d, n },
                    hp: s.hyper_params(),
                    learn: s.learn(self.seed.wrapping_add(l as u64)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = NetworkConfig {
            layers,
            grid,
            channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
