use proptest::prelude::*;

use sgcn::analysis::{finite_difference_gradient, grad_mse, max_relative_error, FdTarget};
use sgcn::graph::{
    load_dataset_with, save_dataset, GraphDataset, Labels, Masks, NormalizeMode, NormalizeOptions,
};
use sgcn::matrix::{DenseMatrix, SparseMatrix};
use sgcn::model::{evaluate_loss, full_gradient, init_params, Activation, GradientSet, LossKind};
use sgcn::sampler::{sample_plan, Purpose, RandomChoice, SamplerConfig};
use sgcn::train::{train_with_hook, StepView, TrainConfig, VrMode};
use sgcn::vr::{early_stop_check, snapshot_full, HistoricalStore, SnapshotConfig};

#[derive(Clone, Debug)]
struct GraphDraw {
    n: usize,
    edges: Vec<(usize, usize)>,
    features: Vec<f64>,
    labels: Vec<usize>,
}

const FEATS: usize = 3;
const CLASSES: usize = 3;

fn graph_draw(max_nodes: usize) -> impl Strategy<Value = GraphDraw> {
    (2..=max_nodes).prop_flat_map(|n| {
        (
            prop::collection::vec((0..n, 0..n), 0..2 * n),
            prop::collection::vec(-1.0..1.0f64, n * FEATS),
            prop::collection::vec(0..CLASSES, n),
        )
            .prop_map(move |(raw, features, labels)| GraphDraw {
                n,
                edges: raw.into_iter().filter(|(u, v)| u != v).collect(),
                features,
                labels,
            })
    })
}

fn build(draw: &GraphDraw, mode: NormalizeMode) -> GraphDataset {
    let n = draw.n;
    GraphDataset::new(
        &draw.edges,
        DenseMatrix::from_vec(n, FEATS, draw.features.clone()).unwrap(),
        Labels::Single(draw.labels.clone()),
        Masks {
            train: (0..n).step_by(2).chain((1..n).step_by(4)).collect(),
            val: (3..n).step_by(4).collect(),
            test: Vec::new(),
        },
        CLASSES,
        NormalizeOptions {
            mode,
            self_loops: true,
        },
    )
    .unwrap()
}

fn sampler_config() -> impl Strategy<Value = SamplerConfig> {
    prop_oneof![
        Just(SamplerConfig::exact()),
        (1..4usize).prop_map(SamplerConfig::nodewise),
        (1..5usize).prop_map(SamplerConfig::fastgcn),
        (1..5usize).prop_map(SamplerConfig::ladies),
        (2..6usize).prop_map(SamplerConfig::subgraph),
    ]
}

fn params(layers: usize, act: Activation, seed: u64) -> sgcn::model::ModelParams {
    let mut dims = vec![FEATS];
    dims.extend(std::iter::repeat_n(4, layers - 1));
    dims.push(CLASSES);
    init_params(&dims, act, LossKind::SoftmaxCe, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn symmetric_laplacian_is_symmetric(draw in graph_draw(8)) {
        let g = build(&draw, NormalizeMode::Symmetric);
        let lap = g.laplacian();
        for (i, j, v) in lap.iter() {
            prop_assert_eq!(v, lap.get(j, i));
            prop_assert!(v > 0.0);
        }
    }

    #[test]
    fn random_walk_rows_sum_to_one(draw in graph_draw(8)) {
        let g = build(&draw, NormalizeMode::RandomWalk);
        for i in 0..draw.n {
            let (_, vals) = g.laplacian().row(i);
            prop_assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn save_load_round_trip(draw in graph_draw(8)) {
        let g = build(&draw, NormalizeMode::Symmetric);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&g, dir.path()).unwrap();
        let back = load_dataset_with(dir.path(), NormalizeOptions::default()).unwrap();
        prop_assert_eq!(back.laplacian(), g.laplacian());
        prop_assert_eq!(back.features(), g.features());
        prop_assert_eq!(back.labels(), g.labels());
        prop_assert_eq!(back.masks(), g.masks());
    }

    #[test]
    fn plans_are_deterministic_and_stay_in_the_support(
        draw in graph_draw(8),
        config in sampler_config(),
        layers in 1..4usize,
        seed in any::<u64>(),
    ) {
        let g = build(&draw, NormalizeMode::Symmetric);
        let batch: Vec<usize> = g.train_nodes().iter().copied().take(3).collect();
        let draw = || {
            let mut src = RandomChoice::new(seed, Purpose::Step, 0);
            sample_plan(&g, &config, &batch, layers, &mut src)
        };
        let (a, b) = (draw(), draw());
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a, &b);
                a.check(g.num_nodes()).unwrap();
                for l in 1..=layers {
                    for (i, j, v) in a.layer(l).laplacian.iter() {
                        prop_assert!(g.laplacian().get(i, j) != 0.0, "({i},{j}) outside the support");
                        prop_assert!(v.is_finite() && v > 0.0);
                    }
                }
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "same seed, different outcome"),
        }
    }

    #[test]
    fn grad_mse_is_a_squared_metric(
        a in prop::collection::vec(-3.0..3.0f64, 6),
        b in prop::collection::vec(-3.0..3.0f64, 6),
        c in prop::collection::vec(-3.0..3.0f64, 6),
    ) {
        let set = |v: &[f64]| GradientSet {
            weight_grads: vec![
                DenseMatrix::from_vec(2, 2, v[..4].to_vec()).unwrap(),
                DenseMatrix::from_vec(2, 1, v[4..].to_vec()).unwrap(),
            ],
            embed_grads: Vec::new(),
            output_grad: DenseMatrix::zeros(0, 0),
        };
        let (x, y) = (set(&a), set(&b));
        let d = grad_mse(&x, &y).unwrap();
        let direct: f64 = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum();
        prop_assert!((d - direct).abs() < 1e-12);
        prop_assert!((d - grad_mse(&y, &x).unwrap()).abs() < 1e-15);
        prop_assert_eq!(grad_mse(&x, &x).unwrap(), 0.0);
        prop_assert_eq!(d == 0.0, a == b);
        let z = set(&c);
        let dist = |p: &GradientSet, q: &GradientSet| grad_mse(p, q).unwrap().sqrt();
        prop_assert!(dist(&x, &z) <= dist(&x, &y) + dist(&y, &z) + 1e-12);
    }

    #[test]
    fn losses_are_nonnegative(
        logits in prop::collection::vec(-50.0..50.0f64, 12),
        classes in prop::collection::vec(0..3usize, 4),
        bits in prop::collection::vec(any::<bool>(), 12),
    ) {
        let out = DenseMatrix::from_vec(4, 3, logits).unwrap();
        let nodes = [0, 1, 2, 3];
        let ce = evaluate_loss(&out, &Labels::Single(classes), &nodes, LossKind::SoftmaxCe).unwrap();
        let multi = DenseMatrix::from_fn(4, 3, |r, c| f64::from(u8::from(bits[r * 3 + c])));
        let bce = evaluate_loss(&out, &Labels::Multi(multi), &nodes, LossKind::SigmoidBce).unwrap();
        prop_assert!(ce >= 0.0 && ce.is_finite());
        prop_assert!(bce >= 0.0 && bce.is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn spmm_matches_dense_product(
        (rows, cols, k, entries, right) in (1..=8usize, 1..=8usize, 1..=8usize).prop_flat_map(|(r, c, k)| (
            Just(r), Just(c), Just(k),
            prop::collection::vec((0..r, 0..c, -2.0..2.0f64), 0..24),
            prop::collection::vec(-2.0..2.0f64, c * k),
        ))
    ) {
        let sparse = SparseMatrix::from_triplets(rows, cols, entries).unwrap();
        let right = DenseMatrix::from_vec(cols, k, right).unwrap();
        let expected = sparse.to_dense().matmul(&right).unwrap();
        prop_assert!(sparse.spmm(&right).unwrap().max_abs_diff(&expected).unwrap() < 1e-12);

        let left = DenseMatrix::from_fn(rows, k, |r, c| (r as f64) - 0.5 * c as f64);
        let expected_t = sparse.to_dense().t_matmul(&left).unwrap();
        prop_assert!(sparse.t_spmm(&left).unwrap().max_abs_diff(&expected_t).unwrap() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backward_matches_finite_differences(
        draw in graph_draw(6),
        layers in 1..4usize,
        elu in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let g = build(&draw, NormalizeMode::Symmetric);
        let act = if elu { Activation::Elu } else { Activation::Relu };
        let p = params(layers, act, seed);
        let nodes = g.train_nodes().to_vec();
        let (_, cache, grads) = full_gradient(&g, &p, &nodes).unwrap();
        // Stay clear of the ReLU kink, where the derivative is one-sided.
        let kink = cache.z.iter().flat_map(|z| z.values()).any(|v| v.abs() < 1e-4);
        prop_assume!(elu || !kink);
        let fd = finite_difference_gradient(&g, &p, FdTarget::Full(&nodes), 1e-5).unwrap();
        let err = max_relative_error(&grads.weight_grads, &fd, 1e-7).unwrap();
        prop_assert!(err < 1e-5, "relative error {err:e}");
    }

    #[test]
    fn early_stop_is_monotone_in_the_norms(
        draw in graph_draw(6),
        scale in prop::collection::vec(0.0..3.0f64, 2),
        bump in 1.0..4.0f64,
        alpha in 0.5..2.0f64,
    ) {
        let g = build(&draw, NormalizeMode::Symmetric);
        let p = params(2, Activation::Elu, 3);
        let mut store = HistoricalStore::new(alpha, alpha);
        snapshot_full(&g, &p, &mut store, 0).unwrap();
        let h: Vec<f64> = store
            .snapshot_h_norms()
            .iter()
            .zip(&scale)
            .map(|(n, s)| n * s)
            .collect();
        let bigger: Vec<f64> = h.iter().map(|v| v * bump).collect();
        if early_stop_check(&store, &h, None) {
            prop_assert!(early_stop_check(&store, &bigger, None));
        }
        let zeros = vec![0.0; h.len()];
        prop_assert!(!early_stop_check(&store, &zeros, None));

        let mut stricter = HistoricalStore::new(alpha * bump, alpha * bump);
        snapshot_full(&g, &p, &mut stricter, 0).unwrap();
        if !early_stop_check(&store, &h, Some(&h)) {
            prop_assert!(!early_stop_check(&stricter, &h, Some(&h)));
        }
    }

    #[test]
    fn store_shapes_are_stable(
        draw in graph_draw(7),
        config in sampler_config(),
        doubly in any::<bool>(),
        seed in 0..1000u64,
    ) {
        let g = build(&draw, NormalizeMode::Symmetric);
        let cfg = TrainConfig {
            sampler: config,
            vr_mode: if doubly { VrMode::Doubly } else { VrMode::Zeroth },
            snapshot: SnapshotConfig { gap: 3, ..SnapshotConfig::default() },
            batch_size: 2,
            iters_per_epoch: Some(8),
            seed,
            ..TrainConfig::default()
        };
        let mut shapes: Option<Vec<(usize, usize)>> = None;
        let mut stable = true;
        let mut hook = |view: &StepView| {
            let store = view.store.expect("variance-reduced runs keep a store");
            let now: Vec<(usize, usize)> = store
                .z_store()
                .iter()
                .chain(store.d_store())
                .chain(store.g_store())
                .map(DenseMatrix::shape)
                .collect();
            match &shapes {
                None => shapes = Some(now),
                Some(s) => stable &= *s == now,
            }
        };
        let res = train_with_hook(&g, params(2, Activation::Elu, seed), &cfg, &mut |_| Ok(()), &mut hook);
        if res.is_ok() {
            prop_assert!(stable);
        }
    }

    #[test]
    fn exact_full_batch_runs_coincide(draw in graph_draw(7), seed in 0..1000u64) {
        let g = build(&draw, NormalizeMode::Symmetric);
        let base = TrainConfig {
            batch_size: draw.n,
            iters_per_epoch: Some(5),
            optimizer: sgcn::optim::OptimizerKind::Sgd,
            lr: 0.3,
            seed,
            snapshot: SnapshotConfig { gap: 1, ..SnapshotConfig::default() },
            ..TrainConfig::default()
        };
        let init = params(2, Activation::Elu, seed);
        let run = |vr_mode| {
            let cfg = TrainConfig { vr_mode, ..base.clone() };
            sgcn::train::train(&g, init.clone(), &cfg, &mut |_| Ok(())).unwrap()
        };
        let plain = run(VrMode::None);
        for mode in [VrMode::Zeroth, VrMode::Doubly] {
            prop_assert!(plain.distance(&run(mode)).unwrap() < 1e-10);
        }
    }
}
