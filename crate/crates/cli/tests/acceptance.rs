//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Failures are reported, not hidden; the process exits non-zero on any
//! failure only when `ACCEPTANCE_STRICT` is set, so that the rest of the
//! workspace suite still runs after a known failure.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use mmdpcn::cause::{infer_cause, infer_cause_topdown};
use mmdpcn::learn::grad_model;
use mmdpcn::majorizer::{support_apply, woodbury_apply_with, InnerSolve, ReweightDiagonal};
use mmdpcn::model::{
    eval_ep, CauseVector, HyperParams, LayerDims, LayerModel, PatchBatch, PooledStateMagnitude,
    StateVector,
};
use mmdpcn::state::infer_state;
use mmdpcn::tensor::{Matrix, Vector};
use mmdpcn_cli::commands::{
    cluster, gen_shapes, parse_methods, run_bench, synthetic_problem, train, BenchResult, ClusterEngine,
    ClusterRun, RunContext, Solver,
};
use mmdpcn_cli::config::RunConfig;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal(rng)).collect()).unwrap()
}

// ------------------------------------------------------------------ scalar

fn scalar_oracles() -> Outcome {
    let one = || Matrix::from_vec(1, 1, vec![1.0]).unwrap();
    let model = LayerModel {
        a: one(),
        b: one(),
        c: one(),
    };
    let hp = HyperParams {
        mu: 0.3,
        lambda: 0.0,
        beta: 0.3,
        ..HyperParams::default()
    };
    let start = Instant::now();
    let (x, _) = infer_state(&[1.0], None, &model, &hp, None).unwrap();
    let pooled = PooledStateMagnitude::from_vec(vec![1.0]);
    let (u, _) = infer_cause(&pooled, &model, &hp, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ex = (x.x[0] - 0.7).abs();
    let eu = (u.u[0] - (10.0f64 / 3.0).ln()).abs();
    outcome(
        ex <= 1e-6 && eu <= 1e-6 && secs < 1.0,
        format!("|x-0.7| = {ex:.2e}, |u-ln(10/3)| = {eu:.2e}, {secs:.3} s"),
    )
}

// --------------------------------------------------------------- woodbury

fn dense_oracle(c: &Matrix, r: &[f64], rhs: &[f64]) -> Vec<f64> {
    let support: Vec<usize> = (0..r.len()).filter(|&k| r[k] > 0.0).collect();
    let mut out = vec![0.0; r.len()];
    if support.is_empty() {
        return out;
    }
    let cs = DMatrix::from_fn(c.rows(), support.len(), |i, j| c.get(i, support[j]));
    let mut m = cs.transpose() * &cs;
    for (j, &k) in support.iter().enumerate() {
        m[(j, j)] += 1.0 / r[k];
    }
    let b = DVector::from_iterator(support.len(), support.iter().map(|&k| rhs[k]));
    let x = m.lu().solve(&b).expect("nonsingular");
    for (j, &k) in support.iter().enumerate() {
        out[k] = x[j];
    }
    out
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn woodbury_vs_dense() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = rng.random_range(1..=16);
        let k = rng.random_range(1..=32);
        let c = random_matrix(&mut rng, p, k);
        let r: Vec<f64> = (0..k)
            .map(|_| {
                if rng.random_bool(0.2) {
                    0.0
                } else {
                    10f64.powf(rng.random_range(-2.0..2.0))
                }
            })
            .collect();
        let rhs: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        let oracle = dense_oracle(&c, &r, &rhs);
        let diag = ReweightDiagonal {
            r: Vector::from(r.clone()),
            weight: 1.0,
        };
        for solve in [InnerSolve::Auto, InnerSolve::Dense, InnerSolve::ConjugateGradient] {
            let got = woodbury_apply_with(&c, &diag, &rhs, solve).unwrap();
            worst = worst.max(rel_err(&got, &oracle));
        }
        let got = support_apply(&c.gram(), &diag, &rhs).unwrap();
        worst = worst.max(rel_err(&got, &oracle));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-8 && secs < 10.0,
        format!("worst relative error {worst:.2e} over 1000 instances x 4 routes, {secs:.2} s"),
    )
}

// ------------------------------------------------------------ monotonicity

fn nonincreasing(trace: &[f64]) -> Option<f64> {
    trace
        .windows(2)
        .map(|w| w[1] - w[0])
        .find(|&rise| rise > 1e-9)
}

fn monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut state_bad = 0;
    let mut cause_bad = 0;
    let mut worst = 0.0f64;
    for i in 0..500 {
        let p = rng.random_range(2..=12);
        let k = rng.random_range(p + 1..=24);
        let d = rng.random_range(1..=6);
        let model = LayerModel::random(&LayerDims { p, k, d, n: 1 }, &mut rng).unwrap();
        let hp = HyperParams {
            mu: rng.random_range(0.05..1.0),
            lambda: if i % 2 == 0 { 0.0 } else { rng.random_range(0.05..1.0) },
            beta: rng.random_range(0.05..1.0),
            gamma: rng.random_range(0.1..2.0),
            max_inner_iter: 100,
            inner_tol: 1e-10,
            ..HyperParams::default()
        };
        let y: Vec<f64> = (0..p).map(|_| 3.0 * normal(&mut rng)).collect();
        let prev = StateVector::from_vec((0..k).map(|_| normal(&mut rng)).collect());
        let (_, t) = infer_state(&y, Some(&prev), &model, &hp, None).unwrap();
        if let Some(r) = nonincreasing(&t.objective_per_iter) {
            state_bad += 1;
            worst = worst.max(r);
        }
        let pooled = PooledStateMagnitude::from_vec((0..k).map(|_| rng.random_range(0.0..3.0)).collect());
        let (_, t) = if i % 3 == 0 {
            let u_hat: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            infer_cause_topdown(&pooled, &u_hat, &model, &hp, None).unwrap()
        } else {
            infer_cause(&pooled, &model, &hp, None).unwrap()
        };
        if let Some(r) = nonincreasing(&t.objective_per_iter) {
            cause_bad += 1;
            worst = worst.max(r);
        }
    }
    outcome(
        state_bad == 0 && cause_bad == 0,
        format!("increases: state {state_bad}/500, cause {cause_bad}/500, largest rise {worst:.2e}"),
    )
}

// --------------------------------------------------------------- gradients

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let h = 1e-6;
    for _ in 0..100 {
        let p = rng.random_range(2..=5);
        let k = rng.random_range(p + 1..=8);
        let d = rng.random_range(1..=4);
        let n = rng.random_range(1..=3);
        let model = LayerModel::random(&LayerDims { p, k, d, n }, &mut rng).unwrap();
        let hp = HyperParams {
            lambda: rng.random_range(0.05..0.5),
            ..HyperParams::default()
        };
        let prev: Vec<StateVector> = (0..n)
            .map(|_| StateVector::from_vec((0..k).map(|_| normal(&mut rng)).collect()))
            .collect();
        // keep every l1 term of E_p at least 0.25 away from its kink, where
        // central differences are meaningful
        let states: Vec<StateVector> = prev
            .iter()
            .map(|xp| {
                let ax = model.a.matvec(&xp.x);
                StateVector::from_vec(
                    ax.iter()
                        .map(|a| {
                            let s = rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                            if (a + s).abs() < 0.25 {
                                a + 2.0 * s
                            } else {
                                a + s
                            }
                        })
                        .collect(),
                )
            })
            .collect();
        let batch = PatchBatch::new(
            0,
            (0..n).map(|_| Vector::from((0..p).map(|_| normal(&mut rng)).collect::<Vec<_>>())).collect(),
        )
        .unwrap();
        let cause = CauseVector::from_vec((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let pooled = PooledStateMagnitude::from_states(&states, hp.gamma).unwrap();
        let g = grad_model(&batch, &states, Some(&prev), &cause, &pooled, &model, &hp).unwrap();
        for which in 0..3 {
            let grad = [&g.da, &g.db, &g.dc][which];
            let len = grad.data().len();
            let fd: Vec<f64> = (0..len)
                .map(|i| {
                    let at = |delta: f64| {
                        let mut m = model.clone();
                        [&mut m.a, &mut m.b, &mut m.c][which].data_mut()[i] += delta;
                        eval_ep(&batch, &states, Some(&prev), &cause, &m, &hp).unwrap()
                    };
                    (at(h) - at(-h)) / (2.0 * h)
                })
                .collect();
            worst = worst.max(rel_err(grad.data(), &fd));
        }
    }
    outcome(
        worst <= 1e-4,
        format!("worst relative error {worst:.2e} over 100 instances (dA, dB, dC)"),
    )
}

// ----------------------------------------------------------------- bench

fn bench_results() -> &'static (Vec<BenchResult>, f64) {
    static CELL: OnceLock<(Vec<BenchResult>, f64)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = RunConfig::load(&repo_root().join("configs/bench.toml")).unwrap();
        assert_eq!(cfg.bench.mu, 0.3);
        assert_eq!(cfg.bench.lambda, 0.0);
        assert_eq!((cfg.bench.p, cfg.bench.k, cfg.bench.max_iter), (256, 300, 200));
        assert_eq!(cfg.bench.step, 1e-2);
        let start = Instant::now();
        let problem = synthetic_problem(&cfg.bench, cfg.seed).unwrap();
        let solvers = parse_methods::<Solver>("mm,adam,fista,ista").unwrap();
        let results = run_bench(&problem, &cfg.bench, &solvers).unwrap();
        (results, start.elapsed().as_secs_f64())
    })
}

fn solver_ordering() -> Outcome {
    let (results, secs) = bench_results();
    let e: Vec<f64> = results.iter().map(|r| r.mean_ex()).collect();
    let s: Vec<f64> = results.iter().map(|r| r.mean_spa()).collect();
    // mm, adam, fista, ista
    let gap = |lo: f64, hi: f64| hi >= 1.05 * lo;
    let ex_pairs = [("mm<=adam", 0, 1), ("adam<=fista", 1, 2), ("fista<=ista", 2, 3)];
    let mut failed = Vec::new();
    for (name, a, b) in ex_pairs {
        if !gap(e[a], e[b]) {
            failed.push(name);
        }
    }
    if !gap(s[2], s[0]) {
        failed.push("spa mm>fista");
    }
    if !gap(s[3], s[2]) {
        failed.push("spa fista>ista");
    }
    if *secs >= 300.0 {
        failed.push("runtime");
    }
    outcome(
        failed.is_empty(),
        format!(
            "E_x mm {:.1} adam {:.1} fista {:.1} ista {:.1}; SPA mm {:.1} fista {:.1} ista {:.1}; {secs:.1} s{}",
            e[0],
            e[1],
            e[2],
            e[3],
            s[0],
            s[2],
            s[3],
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    )
}

fn convergence_speed() -> Outcome {
    let (results, _) = bench_results();
    let by = |name: &str| results.iter().find(|r| r.solver.name() == name).unwrap();
    let mm = by("mm");
    let mm_worst = mm.traces.iter().map(|t| t.iterations_to_within(0.01)).max().unwrap();
    let mut within_by_15 = Vec::new();
    for name in ["ista", "fista"] {
        let r = by(name);
        let reached = r
            .traces
            .iter()
            .zip(&mm.traces)
            .filter(|(t, m)| {
                let target = m.final_objective();
                t.objective_per_iter
                    .iter()
                    .take(16)
                    .any(|f| (f - target).abs() <= 0.01 * target.abs())
            })
            .count();
        within_by_15.push((name, reached));
    }
    let pass = mm_worst <= 15 && within_by_15.iter().all(|(_, n)| *n == 0);
    outcome(
        pass,
        format!(
            "mm within 1% after at most {mm_worst} iterations; patches within 1% by iteration 15: ista {}, fista {} (of {})",
            within_by_15[0].1,
            within_by_15[1].1,
            mm.traces.len()
        ),
    )
}

// ---------------------------------------------------------------- shapes

struct ShapesRun {
    _dir: TempDir,
    runs: Vec<ClusterRun>,
    train_secs: f64,
    mm_secs: f64,
}

fn shapes_run() -> &'static ShapesRun {
    static CELL: OnceLock<ShapesRun> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let config = RunConfig::load(&repo_root().join("configs/shapes.toml")).unwrap();
        let ctx = |sub: &str, seed: u64| {
            let mut c = config.clone();
            c.seed = seed;
            RunContext::new(c, None, dir.path().join(sub))
        };
        let start = Instant::now();
        gen_shapes(&ctx("train", config.seed)).unwrap();
        // held-out video from the next seed
        gen_shapes(&ctx("test", config.seed + 1)).unwrap();
        train(&ctx("model", config.seed), &dir.path().join("train/frames")).unwrap();
        let train_secs = start.elapsed().as_secs_f64();
        let model = dir.path().join("model/model.dpcn");
        let frames = dir.path().join("test/frames");
        let labels = dir.path().join("test/labels.csv");
        let start = Instant::now();
        let mut runs = cluster(&ctx("cluster_mm", config.seed), &model, &frames, &labels, &[ClusterEngine::Mm]).unwrap();
        let mm_secs = start.elapsed().as_secs_f64();
        runs.extend(cluster(&ctx("cluster_fista", config.seed), &model, &frames, &labels, &[ClusterEngine::Fista]).unwrap());
        ShapesRun {
            _dir: dir,
            runs,
            train_secs,
            mm_secs,
        }
    })
}

fn speed_ratio() -> Outcome {
    let run = shapes_run();
    let (mm, fista) = (run.runs[0].lct_per_frame, run.runs[1].lct_per_frame);
    let ratio = mm / fista;
    outcome(
        ratio <= 1.0 / 3.0,
        format!(
            "per frame mm {mm:.5} s ({:.2} sweeps), fista {fista:.5} s ({:.2} sweeps), ratio {ratio:.3}",
            run.runs[0].mean_sweeps, run.runs[1].mean_sweeps
        ),
    )
}

fn shapes_clustering() -> Outcome {
    let run = shapes_run();
    let r = &run.runs[0].report;
    let secs = run.train_secs + run.mm_secs;
    outcome(
        r.acc >= 0.90 && r.ari >= 0.80 && secs < 600.0,
        format!(
            "held-out ACC {:.4} ARI {:.4} (hungarian {:.4}, SPA {:.1}); train {:.1} s + inference {:.1} s",
            r.acc, r.ari, r.hungarian_acc, r.spa, run.train_secs, run.mm_secs
        ),
    )
}

// ------------------------------------------------------------ determinism

const SMALL: &str = r#"
seed = 11
grid = "2x2"
grayscale = true

[shapes]
frames_per_shape = 10

[bench]
patches = 4
max_iter = 60

[cluster]
max_sweeps = 4

[[layer]]
p = 64
k = 96
d = 8
gamma = 1.0
inner_tol = 1e-3
lr_b = 1e-5
max_outer_iter = 3

[[layer]]
p = 8
k = 16
d = 4
gamma = 1.0
inner_tol = 1e-3
max_outer_iter = 3
"#;

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(csv_files(&path));
        } else if path.extension().is_some_and(|e| e == "csv") && path.file_name().unwrap() != "timing.csv" {
            out.push(path);
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let config = RunConfig::parse(SMALL).unwrap();
    let roots = [TempDir::new().unwrap(), TempDir::new().unwrap()];
    for root in &roots {
        let ctx = |sub: &str| RunContext::new(config.clone(), None, root.path().join(sub));
        gen_shapes(&ctx("data")).unwrap();
        let solvers = parse_methods::<Solver>("mm,ista,fista,adam").unwrap();
        mmdpcn_cli::commands::bench(&ctx("bench"), None, &solvers).unwrap();
        train(&ctx("model"), &root.path().join("data/frames")).unwrap();
        let model = root.path().join("model/model.dpcn");
        let frames = root.path().join("data/frames");
        cluster(
            &ctx("cluster"),
            &model,
            &frames,
            &root.path().join("data/labels.csv"),
            &[ClusterEngine::Mm, ClusterEngine::Fista],
        )
        .unwrap();
        mmdpcn_cli::commands::reconstruct(&ctx("recon"), &model, &frames).unwrap();
    }
    let files = csv_files(roots[0].path());
    let mut differ = Vec::new();
    for f in &files {
        let rel = f.strip_prefix(roots[0].path()).unwrap();
        if fs::read(f).unwrap() != fs::read(roots[1].path().join(rel)).unwrap() {
            differ.push(rel.display().to_string());
        }
    }
    let models_equal = fs::read(roots[0].path().join("model/model.dpcn")).unwrap()
        == fs::read(roots[1].path().join("model/model.dpcn")).unwrap();
    outcome(
        differ.is_empty() && models_equal && files.len() >= 10,
        format!(
            "{} metric CSVs across gen-shapes, bench, train, cluster, reconstruct; {} differ; model files {}",
            files.len(),
            differ.len(),
            if models_equal { "identical" } else { "differ" }
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("scalar oracles", scalar_oracles),
        ("woodbury and CG against dense solve", woodbury_vs_dense),
        ("monotone state and cause objectives", monotonicity),
        ("model gradients against finite differences", gradients),
        ("solver ordering on synthetic sparse data", solver_ordering),
        ("MM convergence within 15 iterations", convergence_speed),
        ("MM inference at most 1/3 of FISTA time", speed_ratio),
        ("shapes clustering ACC >= 0.90, ARI >= 0.80", shapes_clustering),
        ("bitwise-identical metric CSVs", determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                outcome(false, format!("panicked: {msg}"))
            });
        if !result.pass {
            failures += 1;
        }
        println!(
            "{} [{id}] {name}: {} ({:.1} s)",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failures} failing");
    if failures > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
