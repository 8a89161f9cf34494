use mmdpcn::baselines::{baseline_solve, BaselineConfig, Method};
use mmdpcn::cause::infer_cause;
use mmdpcn::hierarchy::*;
use mmdpcn::learn::{fit_layer, infer_sequence, LearnConfig};
use mmdpcn::metrics::{mean_sparsity, reconstruction_mse};
use mmdpcn::model::*;
use mmdpcn::state::{infer_state, infer_states_batch, infer_states_batch_sequential};
use mmdpcn::tensor::Vector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(p: usize, k: usize, d: usize, seed: u64) -> LayerModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LayerModel::random(&LayerDims { p, k, d, n: 1 }, &mut rng).unwrap()
}

fn sparse_video(frames: usize, size: usize, seed: u64) -> Vec<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames)
        .map(|_| {
            let data = (0..size * size)
                .map(|_| if rng.random::<f64>() < 0.2 { rng.random() } else { 0.0 })
                .collect();
            Frame::new(size, size, 1, data).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn parallel_batch_matches_sequential(seed in 0u64..1000, n in 1usize..6, lambda in 0.0f64..0.5) {
        let m = model(6, 10, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let batch = PatchBatch::new(0, (0..n).map(|_| Vector::from((0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())).collect()).unwrap();
        let prev: Vec<StateVector> = (0..n).map(|_| StateVector::from_vec((0..10).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let hp = HyperParams { lambda, ..HyperParams::default() };
        let (a, _) = infer_states_batch(&batch, Some(&prev), &m, &hp).unwrap();
        let (b, _) = infer_states_batch_sequential(&batch, Some(&prev), &m, &hp).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mm_state_beats_ista_budget(seed in 0u64..1000) {
        let m = model(8, 16, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let y: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let hp = HyperParams { lambda: 0.0, mu: 0.3, inner_tol: 1e-9, max_inner_iter: 500, ..HyperParams::default() };
        let (x, t) = infer_state(&y, None, &m, &hp, None).unwrap();
        let (xi, _) = baseline_solve(&y, None, &m, &hp, &BaselineConfig { max_iter: 20, ..BaselineConfig::with_method(Method::Ista) }, None).unwrap();
        let e_mm = patch_ex(&y, &x.x, None, &m, &hp).unwrap();
        let e_ista = patch_ex(&y, &xi.x, None, &m, &hp).unwrap();
        prop_assert!(e_mm <= e_ista + 1e-9, "mm {} ista {}", e_mm, e_ista);
        prop_assert!(t.objective_per_iter.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn cause_is_stationary(seed in 0u64..1000, beta in 0.1f64..1.0) {
        let m = model(4, 8, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        let pooled = PooledStateMagnitude::from_vec((0..8).map(|_| rng.random_range(0.0..2.0)).collect());
        let hp = HyperParams { beta, inner_tol: 1e-10, max_inner_iter: 2000, ..HyperParams::default() };
        let (u, _) = infer_cause(&pooled, &m, &hp, None).unwrap();
        let e0 = eval_eu(&u, &pooled, &m, &hp).unwrap();
        // zeros are absorbing; on the support no coordinate move of 1e-3 helps
        for k in (0..3).filter(|&k| u.u[k] != 0.0) {
            for delta in [-1e-3, 1e-3] {
                let mut v = u.clone();
                v.u[k] += delta;
                let e1 = eval_eu(&v, &pooled, &m, &hp).unwrap();
                prop_assert!(e1 >= e0 - 1e-9, "k {} d {} u {:?} e0 {} e1 {}", k, delta, u.u, e0, e1);
            }
        }
    }
}

#[test]
fn learned_layer_lowers_objective_and_reconstructs() {
    let frames = sparse_video(12, 8, 1);
    let batches = decompose_video(&frames, Grid::new(2, 2)).unwrap();
    let dims = LayerDims { p: 16, k: 24, d: 4, n: 4 };
    let hp = HyperParams { gamma: 1.0, inner_tol: 1e-9, max_inner_iter: 1000, ..HyperParams::default() };
    let cfg = LearnConfig { max_outer_iter: 40, seed: 2, ..LearnConfig::default() };
    let (m, causes, report) = fit_layer(&batches, &dims, &hp, &cfg).unwrap();
    assert_eq!(causes.len(), 12);
    assert!(report.ep_trace.windows(2).all(|w| w[1] <= w[0]));
    assert!(report.ep_trace.last() < report.ep_trace.first(), "{report:?}");
    let vars = infer_sequence(&batches, &m, &hp).unwrap();
    let states: Vec<Vec<StateVector>> = vars.iter().map(|v| v.states.clone()).collect();
    let mse = reconstruction_mse(&batches, &states, &m).unwrap();
    let energy = frames.iter().flat_map(|f| f.data.iter()).map(|v| v * v).sum::<f64>() / (12.0 * 64.0);
    assert!(mse < energy, "mse {mse} vs signal {energy}");
    let spa = mean_sparsity(states.iter().flatten().map(|s| &s.x[..]), 1e-4).unwrap();
    assert!(spa > 10.0, "state sparsity {spa}");
}

#[test]
fn two_layer_network_round_trips_and_infers() {
    let frames = sparse_video(10, 8, 4);
    let lc = |p, k, d, n| LayerConfig {
        dims: LayerDims { p, k, d, n },
        hp: HyperParams { gamma: 1.0, inner_tol: 1e-3, ..HyperParams::default() },
        learn: LearnConfig { max_outer_iter: 2, seed: 3, ..LearnConfig::default() },
    };
    let cfg = NetworkConfig { layers: vec![lc(16, 24, 6, 4), lc(6, 10, 3, 1)], grid: Grid::new(2, 2), channels: 1 };
    let (net, reports) = train_network(&frames, &cfg).unwrap();
    assert_eq!(reports.len(), 2);
    let bytes = network_to_bytes(&net).unwrap();
    assert_eq!(network_from_bytes(&bytes).unwrap(), net);

    let opts = InferOptions::default();
    let a = infer_variables(&frames, &net, Grid::new(2, 2), &opts).unwrap();
    let b = infer_variables(&frames, &network_from_bytes(&bytes).unwrap(), Grid::new(2, 2), &opts).unwrap();
    assert_eq!(a.len(), 10);
    assert_eq!(a[0].sweeps, 1);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.sweeps <= opts.max_sweeps);
        assert_eq!(x.top_cause().len(), 3);
        assert_eq!(x.layers[0].cause, y.layers[0].cause);
        assert_eq!(x.layers[1].states, y.layers[1].states);
    }
    let fista = InferOptions { engine: Engine::Fista(BaselineConfig::with_method(Method::Fista)), ..opts };
    let c = infer_variables(&frames, &net, Grid::new(2, 2), &fista).unwrap();
    assert_eq!(c.len(), 10);
}
