use sgcn::analysis::{
    bias_variance_decompose, finite_difference_gradient, AnalysisMethod, BatchLaw, FdTarget,
};
use sgcn::graph::{generate_sbm, GraphDataset, SbmConfig};
use sgcn::matrix::DenseMatrix;
use sgcn::model::{
    backward_full, backward_sampled, forward_full, forward_sampled, full_gradient, init_params,
    loss_and_output_grad, Activation, LossKind, ModelParams,
};
use sgcn::sampler::{
    propagation_matrix, sample_exact, sample_plan, PropagationMethod, Purpose, RandomChoice,
    SamplerConfig,
};
use sgcn::train::{train, train_with_hook, RunRecord, StepView, TrainConfig, VrMode};
use sgcn::vr::{backward_plusplus, forward_plus, snapshot_full, HistoricalStore, SnapshotConfig};

fn sbm(n_nodes: usize, seed: u64) -> GraphDataset {
    generate_sbm(&SbmConfig {
        n_nodes,
        n_blocks: 3,
        p_in: 0.3,
        p_out: 0.02,
        feat_dim: 8,
        noise: 0.5,
        seed,
    })
    .unwrap()
}

fn model(graph: &GraphDataset, hidden: &[usize], act: Activation, seed: u64) -> ModelParams {
    let mut dims = vec![graph.num_features()];
    dims.extend_from_slice(hidden);
    dims.push(graph.num_classes());
    init_params(&dims, act, LossKind::SoftmaxCe, seed).unwrap()
}

fn max_diff(a: &[DenseMatrix], b: &[DenseMatrix]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| x.max_abs_diff(y).unwrap())
        .fold(0.0, f64::max)
}

fn rows_diff(a: &DenseMatrix, b: &DenseMatrix, rows: &[usize]) -> f64 {
    rows.iter()
        .flat_map(|&i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn identity_model_gradient_has_closed_form() {
    let g = sbm(12, 2);
    let w = DenseMatrix::from_fn(8, 3, |r, c| 0.1 * (r as f64) - 0.2 * (c as f64));
    let p = ModelParams::new(vec![w], Activation::Identity, LossKind::SoftmaxCe).unwrap();
    let nodes = g.train_nodes().to_vec();
    let cache = forward_full(&g, &p).unwrap();
    let (_, d_out) = loss_and_output_grad(cache.output(), g.labels(), &nodes, p.loss).unwrap();
    let closed = g
        .laplacian()
        .spmm(g.features())
        .unwrap()
        .t_matmul(&d_out)
        .unwrap();
    let fd = finite_difference_gradient(&g, &p, FdTarget::Full(&nodes), 1e-6).unwrap();
    assert!(fd[0].max_abs_diff(&closed).unwrap() < 1e-7);
}

#[test]
fn exact_plans_reproduce_full_computation() {
    let g = sbm(30, 4);
    for layers in 1..=3 {
        let hidden = vec![5; layers - 1];
        let p = model(&g, &hidden, Activation::Elu, layers as u64);
        let batch = g.train_nodes().to_vec();
        let plan = sample_exact(&g, &batch, layers).unwrap();
        let sampled = forward_sampled(&g, &p, &plan).unwrap();
        let full = forward_full(&g, &p).unwrap();
        assert!(rows_diff(sampled.output(), full.output(), &batch) < 1e-12);

        let (_, d_out) = loss_and_output_grad(full.output(), g.labels(), &batch, p.loss).unwrap();
        let bf = backward_full(&g, &full, &d_out, &p).unwrap();
        let bs = backward_sampled(&g, &plan, &sampled, &d_out, &p).unwrap();
        assert!(max_diff(&bf.weight_grads, &bs.weight_grads) < 1e-12);
        for (gr, w) in bf.weight_grads.iter().zip(&p.weights) {
            assert_eq!(gr.shape(), w.shape());
        }
        assert_eq!(bf.embed_grads.len(), layers);
        for (l, d) in bf.embed_grads.iter().enumerate() {
            assert_eq!(d.shape(), (g.num_nodes(), p.dims()[l]));
        }

        // Over every node the exact plan is the full computation.
        let everyone: Vec<usize> = (0..g.num_nodes()).collect();
        let all = sample_exact(&g, &everyone, layers).unwrap();
        let out = forward_sampled(&g, &p, &all).unwrap();
        assert!(max_diff(&out.z, &full.z) < 1e-12);
    }
}

#[test]
fn regular_step_after_snapshot_reproduces_it() {
    let g = sbm(30, 6);
    let p = model(&g, &[6], Activation::Elu, 1);
    let mut store = HistoricalStore::new(1.1, 1.1);
    snapshot_full(&g, &p, &mut store, 0).unwrap();
    let plan = sample_exact(&g, g.train_nodes(), 2).unwrap();
    let fwd = forward_plus(&g, &p, &plan, &store).unwrap();
    assert!(max_diff(&fwd.current.z, store.z_store()) < 1e-12);
    let (_, d_out) =
        loss_and_output_grad(fwd.current.output(), g.labels(), &plan.batch, p.loss).unwrap();
    let grads = backward_plusplus(&g, &plan, &fwd, &d_out, &p, &store).unwrap();
    assert!(max_diff(&grads.weight_grads, store.g_store()) < 1e-12);
    assert!(max_diff(&grads.embed_grads, store.d_store()) < 1e-12);
}

#[test]
fn telescoping_embeddings_track_the_full_forward() {
    let g = sbm(40, 8);
    let config = TrainConfig {
        sampler: SamplerConfig::exact(),
        vr_mode: VrMode::Doubly,
        snapshot: SnapshotConfig {
            gap: 6,
            alpha: 1e9,
            beta: 1e9,
            ..SnapshotConfig::default()
        },
        batch_size: g.num_nodes(),
        iters_per_epoch: Some(20),
        ..TrainConfig::default()
    };
    let plan = sample_exact(&g, g.train_nodes(), 2).unwrap();
    let mut worst: f64 = 0.0;
    let mut hook = |view: &StepView| {
        let store = view.store.unwrap();
        if view.snapshot {
            return;
        }
        // The hook runs before commit, so compare the step's gradient against
        // the full gradient and the store against the previous parameters.
        let full = full_gradient(&g, view.params, g.train_nodes()).unwrap().2;
        worst = worst.max(max_diff(&view.grads.weight_grads, &full.weight_grads));
        let prev = ModelParams {
            weights: store.weights().to_vec(),
            ..view.params.clone()
        };
        let prev_full = forward_full(&g, &prev).unwrap();
        for (l, z) in store.z_store().iter().enumerate() {
            let rows = &plan.layer(l + 1).output_nodes;
            worst = worst.max(rows_diff(z, &prev_full.z[l], rows));
        }
    };
    train_with_hook(
        &g,
        model(&g, &[6], Activation::Elu, 2),
        &config,
        &mut |_| Ok(()),
        &mut hook,
    )
    .unwrap();
    assert!(worst < 1e-10, "deviation {worst:e}");
}

#[test]
fn full_batch_adam_loss_decreases() {
    let g = sbm(60, 13);
    for seed in 0..5 {
        let config = TrainConfig {
            batch_size: g.train_nodes().len(),
            iters_per_epoch: Some(56),
            seed,
            lr: 0.01,
            ..TrainConfig::default()
        };
        let mut losses = Vec::new();
        train(
            &g,
            model(&g, &[16], Activation::Elu, seed),
            &config,
            &mut |r| {
                losses.push(r.train_loss);
                Ok(())
            },
        )
        .unwrap();
        for w in losses[5..].windows(2) {
            assert!(
                w[1] <= w[0],
                "seed {seed}: loss rose from {} to {}",
                w[0],
                w[1]
            );
        }
    }
}

#[test]
fn snapshot_count_is_at_least_the_schedule() {
    let g = sbm(60, 13);
    for (alpha, gap) in [(1.0, 4), (1.1, 7), (1e9, 5)] {
        let config = TrainConfig {
            sampler: SamplerConfig::ladies(4),
            vr_mode: VrMode::Zeroth,
            snapshot: SnapshotConfig {
                gap,
                alpha,
                beta: alpha,
                ..SnapshotConfig::default()
            },
            batch_size: 16,
            iters_per_epoch: Some(29),
            ..TrainConfig::default()
        };
        let mut records: Vec<RunRecord> = Vec::new();
        train(&g, model(&g, &[8], Activation::Elu, 0), &config, &mut |r| {
            records.push(r);
            Ok(())
        })
        .unwrap();
        let count = records.iter().filter(|r| r.snapshot_flag).count();
        assert!(
            count >= 29usize.div_ceil(gap),
            "alpha {alpha}, K {gap}: {count}"
        );
        if alpha == 1e9 {
            assert_eq!(count, 29usize.div_ceil(gap));
        }
    }
}

#[test]
fn exact_sampler_is_unbiased_but_layerwise_is_not() {
    let g = sbm(6, 3);
    let n_train = g.train_nodes().len();
    let p = model(&g, &[], Activation::Elu, 5);
    let decompose = |config: &SamplerConfig, law: &BatchLaw| {
        bias_variance_decompose(&g, &p, config, law, AnalysisMethod::Enumerate).unwrap()
    };

    let exact = decompose(&SamplerConfig::exact(), &BatchLaw::Uniform(n_train));
    assert!(exact.bias_sq < 1e-20);
    assert!(exact.mse < 1e-20);

    let exact_mini = decompose(&SamplerConfig::exact(), &BatchLaw::Uniform(1));
    assert!(exact_mini.bias_sq < 1e-20);
    assert!(exact_mini.variance > 0.0);

    let all = BatchLaw::Fixed(g.train_nodes().to_vec());
    for config in [
        SamplerConfig::ladies(1),
        SamplerConfig::ladies(2),
        SamplerConfig::fastgcn(2),
    ] {
        let d = decompose(&config, &all);
        assert!(d.bias_sq > 1e-8, "{config:?}: bias {}", d.bias_sq);
    }
}

#[test]
fn monte_carlo_propagation_is_within_three_standard_errors() {
    let g = sbm(15, 9);
    let config = SamplerConfig::nodewise(2).with_seed(17);
    let batch: Vec<usize> = (0..g.num_nodes())
        .filter(|&i| g.neighbors(i).len() >= 2)
        .take(3)
        .collect();
    assert_eq!(batch.len(), 3);
    let draws = 4000;
    let lap = g.laplacian();
    let n = g.num_nodes();
    let mut sum = vec![0.0; n * n];
    let mut sum_sq = vec![0.0; n * n];
    for k in 0..draws {
        let mut src = RandomChoice::new(config.seed, Purpose::Analysis, k);
        let plan = sample_plan(&g, &config, &batch, 1, &mut src).unwrap();
        let dense = plan.layer(1).laplacian.to_dense();
        for (idx, v) in dense.values().iter().enumerate() {
            sum[idx] += v;
            sum_sq[idx] += v * v;
        }
    }
    let m = draws as f64;
    for &i in &batch {
        for j in 0..n {
            let idx = i * n + j;
            let mean = sum[idx] / m;
            let var = (sum_sq[idx] - m * mean * mean) / (m - 1.0);
            let se = (var.max(0.0) / m).sqrt();
            let target = lap.get(i, j);
            assert!(
                (mean - target).abs() <= 3.0 * se + 1e-12,
                "({i},{j}): {mean} vs {target}"
            );
        }
    }
    let oracle = propagation_matrix(
        &g,
        &config,
        &batch,
        1,
        1,
        PropagationMethod::MonteCarlo(4000),
    )
    .unwrap();
    for &i in &batch {
        for j in 0..n {
            assert!((oracle.get(i, j) - sum[i * n + j] / m).abs() < 1e-12);
        }
    }
}

#[test]
fn nodewise_rows_shorter_than_s_keep_everything_scaled() {
    let g = sbm(15, 9);
    let lap = g.laplacian();
    let s = 1
        + (0..g.num_nodes())
            .map(|i| g.neighbors(i).len())
            .max()
            .unwrap();
    let config = SamplerConfig::nodewise(s);
    let batch: Vec<usize> = (0..g.num_nodes()).collect();
    let mut src = RandomChoice::new(0, Purpose::Analysis, 0);
    let plan = sample_plan(&g, &config, &batch, 1, &mut src).unwrap();
    for i in 0..g.num_nodes() {
        let deg = g.neighbors(i).len() as f64;
        for &j in g.neighbors(i) {
            let got = plan.layer(1).laplacian.get(i, j);
            assert!((got - deg / s as f64 * lap.get(i, j)).abs() < 1e-15);
        }
    }
}
