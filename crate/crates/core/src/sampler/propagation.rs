use std::collections::BTreeMap;

use super::{
    enumerate, sample_plan, LayerPlan, Purpose, RandomChoice, SamplerConfig, ENUMERATION_LIMIT,
};
use crate::error::{Error, Result};
use crate::graph::GraphDataset;
use crate::matrix::SparseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PropagationMethod {
    /// Exhaustive over every sampler outcome (at most [`ENUMERATION_LIMIT`]).
    Enumerate,
    /// Empirical mean over this many seeded draws.
    MonteCarlo(usize),
}

/// Row-conditional expectation `P_ij = E[L̃_ij | i is an output node]` of the
/// layer-`layer` sampled Laplacian (1-based). Rows never sampled are empty.
pub fn propagation_matrix(
    graph: &GraphDataset,
    config: &SamplerConfig,
    batch: &[usize],
    n_layers: usize,
    layer: usize,
    method: PropagationMethod,
) -> Result<SparseMatrix> {
    if layer == 0 || layer > n_layers {
        return Err(Error::Config(format!(
            "layer {layer} outside 1..={n_layers}"
        )));
    }
    let n = graph.num_nodes();
    let mut sums: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    let mut mass = vec![0.0; n];
    let mut add = |prob: f64, plan: &LayerPlan| {
        let pl = plan.layer(layer);
        for &i in &pl.output_nodes {
            mass[i] += prob;
        }
        for (i, j, v) in pl.laplacian.iter() {
            *sums[i].entry(j).or_insert(0.0) += prob * v;
        }
    };
    match method {
        PropagationMethod::Enumerate => {
            let outcomes = enumerate(ENUMERATION_LIMIT, |c| {
                sample_plan(graph, config, batch, n_layers, c)
            })?;
            for o in &outcomes {
                add(o.prob, &o.value);
            }
        }
        PropagationMethod::MonteCarlo(draws) => {
            if draws == 0 {
                return Err(Error::Config("Monte Carlo needs at least one draw".into()));
            }
            for k in 0..draws {
                let mut src = RandomChoice::new(config.seed, Purpose::Analysis, k as u64);
                let plan = sample_plan(graph, config, batch, n_layers, &mut src)?;
                add(1.0, &plan);
            }
        }
    }
    let triplets = sums.into_iter().enumerate().flat_map(|(i, row)| {
        let m = mass[i];
        row.into_iter().map(move |(j, v)| (i, j, v / m))
    });
    SparseMatrix::from_triplets(n, n, triplets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::tests::graph_from;

    #[test]
    fn exact_sampler_gives_reachable_rows_of_l() {
        let g = graph_from(4, &[(0, 1), (1, 2), (2, 3)], true);
        let p = propagation_matrix(
            &g,
            &SamplerConfig::exact(),
            &[0],
            2,
            1,
            PropagationMethod::Enumerate,
        )
        .unwrap();
        assert_eq!(p, g.laplacian().restrict_rows(&[0, 1]));
    }

    #[test]
    fn nodewise_wide_s_scales_rows() {
        let g = graph_from(4, &[(0, 1), (0, 2), (0, 3)], true);
        let s = 6;
        let p = propagation_matrix(
            &g,
            &SamplerConfig::nodewise(s),
            &[0, 1],
            1,
            1,
            PropagationMethod::Enumerate,
        )
        .unwrap();
        for i in [0, 1] {
            let (cols, vals) = g.laplacian().row(i);
            let scale = cols.len() as f64 / s as f64;
            for (&j, &v) in cols.iter().zip(vals) {
                assert_eq!(p.get(i, j), scale * v);
            }
        }
    }

    #[test]
    fn nodewise_single_neighbor_on_star_center() {
        let g = graph_from(4, &[(0, 1), (0, 2), (0, 3)], false);
        let p = propagation_matrix(
            &g,
            &SamplerConfig::nodewise(1),
            &[0],
            1,
            1,
            PropagationMethod::Enumerate,
        )
        .unwrap();
        for j in 1..4 {
            assert!((p.get(0, j) - g.laplacian().get(0, j)).abs() < 1e-15);
        }
    }

    #[test]
    fn monte_carlo_approaches_enumeration() {
        let g = graph_from(5, &[(0, 1), (0, 2), (1, 2), (2, 3), (3, 4)], true);
        let cfg = SamplerConfig::ladies(2).with_seed(4);
        let exact =
            propagation_matrix(&g, &cfg, &[1, 3], 1, 1, PropagationMethod::Enumerate).unwrap();
        let mc = propagation_matrix(&g, &cfg, &[1, 3], 1, 1, PropagationMethod::MonteCarlo(4000))
            .unwrap();
        let d = exact.to_dense().max_abs_diff(&mc.to_dense()).unwrap();
        assert!(d < 0.05, "{d}");
    }
}
