//! The subcommands. Each writes its outputs and a `manifest.json` into one
//! directory.
//!
//! Metric CSVs hold only quantities that are a function of the inputs and the
//! seed, so two runs with the same seed produce identical files. Wall-clock
//! times go to `timing.csv`.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, ensure, Context, Result};
use mmdpcn::baselines::{baseline_solve, BaselineConfig, Method};
use mmdpcn::hierarchy::{
    decompose_frame, decompose_video, infer_variables, load_network, reassemble, save_network,
    train_network, Engine, Frame, FrameInference, Grid, InferOptions, Network,
};
use mmdpcn::metrics::{kmeans, mean_sparsity, pca_project, sparsity, ClusterReport};
use mmdpcn::model::{patch_ex, HyperParams, LayerModel, PatchBatch};
use mmdpcn::state::{infer_state, SolveTrace};
use mmdpcn::tensor::{column_normalize, Matrix, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::{parse_grid, BenchSection, RunConfig};
use crate::io::{fmt_f64, load_frames, mean_std, read_labels, write_labels, write_pnm, MetricWriter};
use crate::shapes::{generate, ShapesVideo};

/// Components with magnitude at or below this count as zero in SPA.
pub const SPA_THRESHOLD: f64 = 1e-4;

/// Settings shared by every command after flags are merged into the config.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: RunConfig,
    pub config_path: Option<PathBuf>,
    pub out: PathBuf,
}

impl RunContext {
    pub fn new(config: RunConfig, config_path: Option<PathBuf>, out: PathBuf) -> Self {
        RunContext {
            config,
            config_path,
            out,
        }
    }

    fn grid(&self) -> Result<Grid> {
        parse_grid(&self.config.grid)
    }

    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub output_dir: String,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// `git describe` of the source tree when available, else the crate version.
pub fn version_string() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

fn write_manifest(ctx: &RunContext, command: &str, inputs: &[&Path], started: f64) -> Result<()> {
    let manifest = RunManifest {
        command: command.into(),
        config_path: ctx.config_path.as_ref().map(|p| p.display().to_string()),
        seed: ctx.config.seed,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        output_dir: ctx.out.display().to_string(),
        version: version_string(),
        started_unix: started,
        finished_unix: unix_now(),
    };
    let path = ctx.out.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

// ---------------------------------------------------------------- gen-shapes

/// Write `frames/frame_NNNNN.pgm` and `labels.csv`.
pub fn gen_shapes(ctx: &RunContext) -> Result<ShapesVideo> {
    let started = unix_now();
    ctx.prepare()?;
    let video = generate(&ctx.config.shapes.to_config(), ctx.config.seed)?;
    let dir = ctx.out.join("frames");
    fs::create_dir_all(&dir)?;
    for (t, frame) in video.frames.iter().enumerate() {
        write_pnm(frame, &dir.join(format!("frame_{t:05}.pgm")))?;
    }
    write_labels(&video.labels, &ctx.out.join("labels.csv"))?;
    write_manifest(ctx, "gen-shapes", &[], started)?;
    Ok(video)
}

// --------------------------------------------------------------------- bench

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Mm,
    Baseline(Method),
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Mm => "mm",
            Solver::Baseline(m) => m.name(),
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Solver {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("mm") {
            return Ok(Solver::Mm);
        }
        Ok(Solver::Baseline(s.parse()?))
    }
}

/// Parse a comma-separated method list.
pub fn parse_methods<T: FromStr<Err = anyhow::Error>>(s: &str) -> Result<Vec<T>> {
    let methods = s
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(T::from_str)
        .collect::<Result<Vec<T>>>()?;
    ensure!(!methods.is_empty(), "empty method list");
    Ok(methods)
}

/// Benchmark problem: a dictionary and the patches to code with it.
#[derive(Debug, Clone)]
pub struct BenchProblem {
    pub model: LayerModel,
    pub patches: Vec<Vector>,
}

fn random_dictionary(p: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let data = (0..p * k).map(|_| rng.sample(StandardNormal)).collect();
    Ok(column_normalize(&Matrix::from_vec(p, k, data)?)?)
}

/// Seeded synthetic sparse-generative patches `y = C x₀ + n` with `nnz`
/// signed nonzeros in `x₀`, coded against the generating dictionary.
pub fn synthetic_problem(cfg: &BenchSection, seed: u64) -> Result<BenchProblem> {
    ensure!(cfg.p > 0 && cfg.k > 0 && cfg.patches > 0, "bench sizes must be positive");
    ensure!(cfg.nnz <= cfg.k, "nnz ({}) exceeds k ({})", cfg.nnz, cfg.k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = random_dictionary(cfg.p, cfg.k, &mut rng)?;
    let mut patches = Vec::with_capacity(cfg.patches);
    for _ in 0..cfg.patches {
        let mut x0 = vec![0.0; cfg.k];
        let mut support: Vec<usize> = (0..cfg.k).collect();
        for i in 0..cfg.nnz {
            let j = rng.random_range(i..cfg.k);
            support.swap(i, j);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            x0[support[i]] = sign * cfg.amplitude * rng.random_range(0.5..1.5);
        }
        let y: Vec<f64> = c
            .matvec(&x0)
            .into_iter()
            .map(|v| v + cfg.noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        patches.push(Vector::from(y));
    }
    Ok(BenchProblem {
        model: coding_model(c),
        patches,
    })
}

/// Patches of every frame in `path`, coded against a seeded random
/// dictionary.
pub fn patch_problem(cfg: &BenchSection, frames: &[Frame], grid: Grid, seed: u64) -> Result<BenchProblem> {
    let mut patches = Vec::new();
    for (t, f) in frames.iter().enumerate() {
        patches.extend(decompose_frame(f, grid, t)?.patches);
    }
    let p = patches.first().map(|v| v.len()).context("no patches")?;
    ensure!(p == cfg.p, "patch length {p} does not match bench.p = {}", cfg.p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = random_dictionary(cfg.p, cfg.k, &mut rng)?;
    Ok(BenchProblem {
        model: coding_model(c),
        patches,
    })
}

fn coding_model(c: Matrix) -> LayerModel {
    let k = c.cols();
    LayerModel {
        a: Matrix::identity(k),
        b: Matrix::zeros(k, 1),
        c,
    }
}

/// Per-method benchmark summary.
#[derive(Debug, Clone)]
pub struct BenchResult {
    pub solver: Solver,
    pub final_ex: Vec<f64>,
    pub spa: Vec<f64>,
    pub iters_to_1pct: Vec<f64>,
    pub wall_time: Vec<f64>,
    pub traces: Vec<SolveTrace>,
}

impl BenchResult {
    pub fn mean_ex(&self) -> f64 {
        mean_std(&self.final_ex).0
    }

    pub fn mean_spa(&self) -> f64 {
        mean_std(&self.spa).0
    }
}

pub fn bench_hyper_params(cfg: &BenchSection) -> HyperParams {
    HyperParams {
        mu: cfg.mu,
        lambda: cfg.lambda,
        inner_tol: cfg.inner_tol,
        max_inner_iter: cfg.max_iter,
        ..HyperParams::default()
    }
}

/// Solve every patch of `problem` with each solver from the same start.
pub fn run_bench(problem: &BenchProblem, cfg: &BenchSection, solvers: &[Solver]) -> Result<Vec<BenchResult>> {
    let hp = bench_hyper_params(cfg);
    let mut results = Vec::with_capacity(solvers.len());
    for &solver in solvers {
        let mut r = BenchResult {
            solver,
            final_ex: Vec::new(),
            spa: Vec::new(),
            iters_to_1pct: Vec::new(),
            wall_time: Vec::new(),
            traces: Vec::new(),
        };
        for y in &problem.patches {
            let (x, trace) = match solver {
                Solver::Mm => infer_state(y, None, &problem.model, &hp, None)?,
                Solver::Baseline(method) => {
                    let bc = BaselineConfig {
                        step: cfg.step,
                        max_iter: cfg.max_iter,
                        ..BaselineConfig::with_method(method)
                    };
                    baseline_solve(y, None, &problem.model, &hp, &bc, None)?
                }
            };
            r.final_ex.push(patch_ex(y, &x.x, None, &problem.model, &hp)?);
            r.spa.push(sparsity(&x.x, SPA_THRESHOLD)?);
            r.iters_to_1pct.push(trace.iterations_to_within(0.01) as f64);
            r.wall_time.push(trace.wall_time);
            r.traces.push(trace);
        }
        results.push(r);
    }
    Ok(results)
}

/// `bench.csv`, `timing.csv` and `traces/<method>.csv`.
pub fn write_bench(out: &Path, results: &[BenchResult]) -> Result<()> {
    let mut metrics = MetricWriter::create(&out.join("bench.csv"))?;
    let mut timing = MetricWriter::create(&out.join("timing.csv"))?;
    let traces = out.join("traces");
    fs::create_dir_all(&traces)?;
    for r in results {
        let name = r.solver.name();
        for (metric, values) in [
            ("final_ex", &r.final_ex),
            ("spa", &r.spa),
            ("iters_to_1pct", &r.iters_to_1pct),
        ] {
            let (m, s) = mean_std(values);
            metrics.row(&format!("{name}_{metric}"), m, s)?;
        }
        let (m, s) = mean_std(&r.wall_time);
        timing.row(&format!("{name}_wall_time"), m, s)?;

        let mut w = create(&traces.join(format!("{name}.csv")))?;
        writeln!(w, "patch,iteration,objective,spa")?;
        for (n, t) in r.traces.iter().enumerate() {
            for (i, (e, s)) in t.objective_per_iter.iter().zip(&t.sparsity_per_iter).enumerate() {
                writeln!(w, "{n},{i},{},{}", fmt_f64(*e), fmt_f64(*s))?;
            }
        }
        w.flush()?;
    }
    metrics.finish()?;
    timing.finish()
}

/// Run the solver benchmark on synthetic data, or on the patches of the
/// frames in `patch_dir`.
pub fn bench(ctx: &RunContext, patch_dir: Option<&Path>, solvers: &[Solver]) -> Result<Vec<BenchResult>> {
    let started = unix_now();
    ctx.prepare()?;
    let cfg = &ctx.config.bench;
    let problem = match patch_dir {
        None => synthetic_problem(cfg, ctx.config.seed)?,
        Some(dir) => {
            let (frames, _) = load_frames(dir, ctx.config.grayscale)?;
            patch_problem(cfg, &frames, ctx.grid()?, ctx.config.seed)?
        }
    };
    let results = run_bench(&problem, cfg, solvers)?;
    write_bench(&ctx.out, &results)?;
    let inputs: Vec<&Path> = patch_dir.into_iter().collect();
    write_manifest(ctx, "bench", &inputs, started)?;
    Ok(results)
}

// --------------------------------------------------------------------- train

/// Train the network of the config on the frames at `frames_path`; writes
/// `model.dpcn`, `fit_report.csv`, `timing.csv` and the effective
/// `config.toml`.
pub fn train(ctx: &RunContext, frames_path: &Path) -> Result<Network> {
    let started = unix_now();
    ctx.prepare()?;
    let (frames, _) = load_frames(frames_path, ctx.config.grayscale)?;
    let channels = frames[0].channels;
    let cfg = ctx.config.network(channels)?;
    cfg.validate_for_frame(frames[0].height, frames[0].width)?;
    let (network, reports) = train_network(&frames, &cfg)?;
    save_network(&network, ctx.out.join("model.dpcn"))?;

    let mut w = create(&ctx.out.join("fit_report.csv"))?;
    writeln!(w, "layer,step,ep")?;
    for (l, r) in reports.iter().enumerate() {
        for (i, e) in r.ep_trace.iter().enumerate() {
            writeln!(w, "{},{i},{}", l + 1, fmt_f64(*e))?;
        }
    }
    w.flush()?;
    let mut summary = MetricWriter::create(&ctx.out.join("fit_summary.csv"))?;
    let mut timing = MetricWriter::create(&ctx.out.join("timing.csv"))?;
    for (l, r) in reports.iter().enumerate() {
        let l = l + 1;
        summary.row(&format!("layer{l}_outer_iterations"), r.outer_iterations as f64, 0.0)?;
        summary.row(&format!("layer{l}_rejected_steps"), r.rejected_steps as f64, 0.0)?;
        summary.row(&format!("layer{l}_converged"), r.converged as u8 as f64, 0.0)?;
        timing.row(&format!("layer{l}_wall_time"), r.wall_time, 0.0)?;
    }
    summary.finish()?;
    timing.finish()?;
    fs::write(ctx.out.join("config.toml"), ctx.config.to_toml()?)?;
    write_manifest(ctx, "train", &[frames_path], started)?;
    Ok(network)
}

// ------------------------------------------------------------------- cluster

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterEngine {
    Mm,
    Fista,
}

impl ClusterEngine {
    pub fn name(self) -> &'static str {
        match self {
            ClusterEngine::Mm => "mm",
            ClusterEngine::Fista => "fista",
        }
    }
}

impl FromStr for ClusterEngine {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mm" => Ok(ClusterEngine::Mm),
            "fista" => Ok(ClusterEngine::Fista),
            other => bail!("unknown inference engine {other:?} (expected mm or fista)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterRun {
    pub engine: ClusterEngine,
    pub report: ClusterReport,
    pub pca: Vec<Vector>,
    /// Mean per-frame inference time in seconds.
    pub lct_per_frame: f64,
    pub mean_sweeps: f64,
}

/// Infer variables, then PCA and K-Means on the top-layer causes.
pub fn cluster_frames(
    network: &Network,
    frames: &[Frame],
    labels: &[usize],
    grid: Grid,
    config: &RunConfig,
    engine: ClusterEngine,
) -> Result<ClusterRun> {
    ensure!(
        frames.len() == labels.len(),
        "{} frames but {} labels",
        frames.len(),
        labels.len()
    );
    let cc = &config.cluster;
    let opts = InferOptions {
        engine: match engine {
            ClusterEngine::Mm => Engine::Mm,
            ClusterEngine::Fista => Engine::Fista(cc.fista()),
        },
        max_sweeps: cc.max_sweeps,
    };
    let inferred: Vec<FrameInference> = infer_variables(frames, network, grid, &opts)?;
    let causes: Vec<Vector> = inferred.iter().map(|f| f.top_cause().u.clone()).collect();
    let spa = mean_sparsity(causes.iter().map(|u| &u[..]), SPA_THRESHOLD)?;
    let pca = pca_project(&causes, cc.pca_dims)?;
    let km = kmeans(&pca.points, cc.k, config.seed, cc.kmeans_iter)?;
    let n = inferred.len().max(1) as f64;
    let lct = inferred.iter().map(|f| f.wall_time).sum::<f64>() / n;
    let sweeps = inferred.iter().map(|f| f.sweeps as f64).sum::<f64>() / n;
    Ok(ClusterRun {
        engine,
        report: ClusterReport::new(labels, km.labels, spa, lct)?,
        pca: pca.points,
        lct_per_frame: lct,
        mean_sweeps: sweeps,
    })
}

/// `cluster.csv`, `timing.csv`, and per engine `assignments_<engine>.csv`
/// and `pca_<engine>.csv`.
pub fn write_cluster(out: &Path, labels: &[usize], runs: &[ClusterRun]) -> Result<()> {
    let mut metrics = MetricWriter::create(&out.join("cluster.csv"))?;
    let mut timing = MetricWriter::create(&out.join("timing.csv"))?;
    for run in runs {
        let name = run.engine.name();
        let r = &run.report;
        metrics.row(&format!("{name}_acc"), r.acc, 0.0)?;
        metrics.row(&format!("{name}_ari"), r.ari, 0.0)?;
        metrics.row(&format!("{name}_hungarian_acc"), r.hungarian_acc, 0.0)?;
        metrics.row(&format!("{name}_spa"), r.spa, 0.0)?;
        metrics.row(&format!("{name}_mean_sweeps"), run.mean_sweeps, 0.0)?;
        timing.row(&format!("{name}_lct_per_frame"), run.lct_per_frame, 0.0)?;

        let mut w = create(&out.join(format!("assignments_{name}.csv")))?;
        writeln!(w, "frame_index,label,cluster")?;
        for (t, (l, c)) in labels.iter().zip(&r.assignments).enumerate() {
            writeln!(w, "{t},{l},{c}")?;
        }
        w.flush()?;

        let mut w = create(&out.join(format!("pca_{name}.csv")))?;
        let dims = run.pca.first().map_or(0, |p| p.len());
        let header: Vec<String> = (1..=dims).map(|i| format!("pc{i}")).collect();
        writeln!(w, "frame_index,label,{}", header.join(","))?;
        for (t, (l, p)) in labels.iter().zip(&run.pca).enumerate() {
            let row: Vec<String> = p.iter().map(|v| fmt_f64(*v)).collect();
            writeln!(w, "{t},{l},{}", row.join(","))?;
        }
        w.flush()?;
    }
    metrics.finish()?;
    timing.finish()
}

pub fn cluster(
    ctx: &RunContext,
    model_path: &Path,
    frames_path: &Path,
    labels_path: &Path,
    engines: &[ClusterEngine],
) -> Result<Vec<ClusterRun>> {
    let started = unix_now();
    ctx.prepare()?;
    let network = load_network(model_path)?;
    let (frames, _) = load_frames(frames_path, ctx.config.grayscale)?;
    let labels = read_labels(labels_path)?;
    let grid = ctx.grid()?;
    let runs = engines
        .iter()
        .map(|&e| cluster_frames(&network, &frames, &labels, grid, &ctx.config, e))
        .collect::<Result<Vec<_>>>()?;
    write_cluster(&ctx.out, &labels, &runs)?;
    write_manifest(ctx, "cluster", &[model_path, frames_path, labels_path], started)?;
    Ok(runs)
}

// --------------------------------------------------------------- reconstruct

/// Frames rebuilt from the layer-1 states of the bi-directional inference,
/// with the per-frame mean squared error.
pub fn reconstruct_frames(network: &Network, frames: &[Frame], grid: Grid, max_sweeps: usize) -> Result<Vec<(Frame, f64)>> {
    let first = frames.first().context("no frames")?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let opts = InferOptions {
        engine: Engine::Mm,
        max_sweeps,
    };
    let inferred = infer_variables(frames, network, grid, &opts)?;
    let batches: Vec<PatchBatch> = decompose_video(frames, grid)?;
    let model = &network.layers[0].model;
    inferred
        .iter()
        .zip(&batches)
        .zip(frames)
        .map(|((inf, batch), frame)| {
            let patches = inf.layers[0]
                .states
                .iter()
                .map(|x| Vector::from(model.c.matvec(&x.x)))
                .collect();
            let recon = reassemble(&PatchBatch::new(batch.t, patches)?, grid, h, w, c)?;
            let n = frame.data.len().max(1) as f64;
            let mse = frame
                .data
                .iter()
                .zip(&recon.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n;
            Ok((recon, mse))
        })
        .collect()
}

/// Writes `recon/frame_NNNNN.pgm` (or `.ppm`), `mse.csv` and `metrics.csv`.
pub fn reconstruct(ctx: &RunContext, model_path: &Path, frames_path: &Path) -> Result<Vec<f64>> {
    let started = unix_now();
    ctx.prepare()?;
    let network = load_network(model_path)?;
    let (frames, _) = load_frames(frames_path, ctx.config.grayscale)?;
    let recon = reconstruct_frames(&network, &frames, ctx.grid()?, ctx.config.cluster.max_sweeps)?;
    let dir = ctx.out.join("recon");
    fs::create_dir_all(&dir)?;
    let ext = if frames[0].channels == 1 { "pgm" } else { "ppm" };
    let mut w = create(&ctx.out.join("mse.csv"))?;
    writeln!(w, "frame_index,mse")?;
    let mut errors = Vec::with_capacity(recon.len());
    for (t, (frame, mse)) in recon.iter().enumerate() {
        if frame.channels == 1 || frame.channels == 3 {
            write_pnm(frame, &dir.join(format!("frame_{t:05}.{ext}")))?;
        }
        writeln!(w, "{t},{}", fmt_f64(*mse))?;
        errors.push(*mse);
    }
    w.flush()?;
    let mut metrics = MetricWriter::create(&ctx.out.join("metrics.csv"))?;
    let (m, s) = mean_std(&errors);
    metrics.row("mse", m, s)?;
    metrics.finish()?;
    write_manifest(ctx, "reconstruct", &[model_path, frames_path], started)?;
    Ok(errors)
}
