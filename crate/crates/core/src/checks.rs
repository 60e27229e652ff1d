//! Property suites behind `megagnn check`.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agg::{reduce_ops, segment_reduce, AggSpec, GroupedFeatures, Groups, PnaSpec};
use crate::error::{Error, Result};
use crate::graph::{
    apply_permutation, build_reverse_index, build_support_index, random_connected_multigraph,
    GraphPermutation, Multigraph,
};
use crate::idproof::{bfs_assign_ids, bfs_distances, label_edges_by_features, nonequivariance_witness, Witness};
use crate::model::{Model, ModelConfig, PreparedGraph, Readout};
use crate::nn::{finite_difference_gradient, relative_error, Mode};

/// Common shape of every suite report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub cases: usize,
    pub failures: Vec<String>,
    /// Suite-specific figures (largest error, counts, witnesses…).
    pub details: serde_json::Value,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Aggregators compared by the equivariance suite.
pub fn aggregator_family() -> Vec<AggSpec> {
    vec![
        AggSpec::Sum,
        AggSpec::Mean,
        AggSpec::Max,
        AggSpec::Min,
        AggSpec::Pna(PnaSpec::standard(2f64.ln())),
    ]
}

fn permuted_rows(perm: &[usize], m: &Array2<f64>) -> Array2<f64> {
    GraphPermutation::permute_rows(perm, m.view())
}

/// Largest norm-wise relative error between the outputs of the model on a
/// graph (then permuted) and on the permuted graph.
pub fn equivariance_error(model: &Model, g: &Multigraph, p: &GraphPermutation) -> Result<f64> {
    let gp = apply_permutation(g, p)?;
    let (a, _) = model.forward(&PreparedGraph::new(g.clone()), &[], Mode::Eval)?;
    let (b, _) = model.forward(&PreparedGraph::new(gp), &[], Mode::Eval)?;
    let la = a.logits.view().insert_axis(ndarray::Axis(1)).to_owned();
    let lperm = match model.config.readout {
        Readout::Edge => p.edge_perm(),
        Readout::Node => p.node_perm(),
    };
    let pairs = [
        (permuted_rows(lperm, &la), b.logits.view().insert_axis(ndarray::Axis(1)).to_owned()),
        (permuted_rows(p.node_perm(), &a.state.x), b.state.x),
        (permuted_rows(p.edge_perm(), &a.state.e), b.state.e),
    ];
    Ok(pairs
        .iter()
        .map(|(u, v)| relative_error(u.as_slice().expect("contiguous"), v.as_slice().expect("contiguous")))
        .fold(0.0, f64::max))
}

/// Random graphs × every EdgeAgg/AGG pair × bidirectional on/off.
pub fn equivariance_suite(trials: usize, seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aggs = aggregator_family();
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for t in 0..trials {
        let n = rng.random_range(2..=20);
        let m = rng.random_range(n - 1..=80);
        let g = random_connected_multigraph(n, m, rng.random())?;
        let p = GraphPermutation::random(n, m, &mut rng);
        for ea in &aggs {
            for na in &aggs {
                for bidirectional in [false, true] {
                    let cfg = ModelConfig {
                        num_layers: 2,
                        hidden_size: 6,
                        bidirectional,
                        edge_agg: ea.clone(),
                        node_agg: na.clone(),
                        edge_agg_mlp: true,
                        ..ModelConfig::new(g.node_dim(), g.edge_dim())
                    };
                    let model = Model::new(cfg, rng.random())?;
                    let err = equivariance_error(&model, &g, &p)?;
                    worst = worst.max(err);
                    cases += 1;
                    if !(err <= tolerance) {
                        failures.push(format!(
                            "trial {t}: {}∘{} bidirectional={bidirectional}: relative error {err:.3e}",
                            ea.name(),
                            na.name()
                        ));
                    }
                }
            }
        }
    }
    Ok(SuiteReport {
        suite: "equivariance".into(),
        cases,
        failures,
        details: serde_json::json!({ "graphs": trials, "max_relative_error": worst, "tolerance": tolerance }),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// BFS identifiers on random connected multigraphs: uniqueness and the
/// digit-count law.
pub fn node_id_suite(graphs: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut longest = 0;
    for t in 0..graphs {
        let n = rng.random_range(1..=30);
        let m = rng.random_range(n - 1..=120);
        let g = random_connected_multigraph(n, m, rng.random())?;
        let supp = build_support_index(&g);
        let rev = build_reverse_index(&g, &supp)?;
        let labels = label_edges_by_features(&g)?;
        let root = rng.random_range(0..n);
        let state = bfs_assign_ids(&g, &supp, &rev, &labels, root, None)?;
        let mut sorted = state.ids.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != n {
            failures.push(format!("graph {t}: {} distinct ids for {n} nodes", sorted.len()));
        }
        let dist = bfs_distances(&g, root);
        for v in 0..n {
            longest = longest.max(state.ids[v].len());
            if state.ids[v].len() != dist[v] + 1 {
                failures.push(format!(
                    "graph {t}: node {v} at distance {} has {} digits",
                    dist[v],
                    state.ids[v].len()
                ));
            }
        }
    }
    Ok(SuiteReport {
        suite: "node-ids".into(),
        cases: graphs,
        failures,
        details: serde_json::json!({ "longest_id": longest }),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Port-numbering counterexample on stars of the given orders.
pub fn port_witness_suite(orders: &[usize], seeds: usize, trials: usize) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut witnesses: Vec<Witness> = Vec::new();
    for &n in orders {
        for s in 0..seeds as u64 {
            match nonequivariance_witness(n, trials, s * 1000) {
                Ok(w) => witnesses.push(w),
                Err(e) => failures.push(format!("n={n} seed {s}: {e}")),
            }
        }
    }
    Ok(SuiteReport {
        suite: "port-witness".into(),
        cases: orders.len() * seeds,
        failures,
        details: serde_json::to_value(&witnesses)?,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Aggregates of the two-sender construction: single-stage sum and max over
/// all payments, and two-stage max of per-sender sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationFigures {
    pub single_sum: f64,
    pub single_max: f64,
    pub max_of_sums: f64,
}

/// Two senders paying one receiver; `groups[s]` lists sender `s`'s payments.
pub fn separation_figures(groups: &[Vec<f64>]) -> Result<SeparationFigures> {
    let values: Vec<f64> = groups.iter().flatten().copied().collect();
    let col = Array2::from_shape_vec((values.len(), 1), values).map_err(|e| Error::Shape(e.to_string()))?;
    let all = Groups::contiguous(&[col.nrows()]);
    let per_sender = Groups::contiguous(&groups.iter().map(Vec::len).collect::<Vec<_>>());
    let single_sum = segment_reduce(&AggSpec::Sum, GroupedFeatures::new(col.view(), &all), None)?[[0, 0]];
    let single_max = segment_reduce(&AggSpec::Max, GroupedFeatures::new(col.view(), &all), None)?[[0, 0]];
    let sums = segment_reduce(&AggSpec::Sum, GroupedFeatures::new(col.view(), &per_sender), None)?;
    let senders = Groups::contiguous(&[groups.len()]);
    let max_of_sums = segment_reduce(&AggSpec::Max, GroupedFeatures::new(sums.view(), &senders), None)?[[0, 0]];
    Ok(SeparationFigures {
        single_sum,
        single_max,
        max_of_sums,
    })
}

pub fn separation_suite() -> Result<SuiteReport> {
    let start = Instant::now();
    let g1 = separation_figures(&[vec![5.0, 1.0], vec![3.0, 4.0]])?;
    let g2 = separation_figures(&[vec![5.0, 3.0], vec![1.0, 4.0]])?;
    let mut failures = Vec::new();
    if g1.single_sum != g2.single_sum || g1.single_max != g2.single_max {
        failures.push("single-stage aggregates differ".into());
    }
    if g1.max_of_sums == g2.max_of_sums {
        failures.push("two-stage aggregates coincide".into());
    }
    Ok(SuiteReport {
        suite: "separation".into(),
        cases: 2,
        failures,
        details: serde_json::json!({ "g1": g1, "g2": g2 }),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Configuration cycled through by the gradient suite: every case is
/// bidirectional and two-stage unless noted, with dropout active.
pub fn gradient_case_config(case: usize, node_dim: usize, edge_dim: usize) -> ModelConfig {
    let aggs = aggregator_family();
    let base = ModelConfig {
        num_layers: 2,
        hidden_size: 4,
        bidirectional: true,
        ego_ids: case % 2 == 0,
        edge_agg: aggs[case % aggs.len()].clone(),
        node_agg: aggs[(case / aggs.len() + case) % aggs.len()].clone(),
        edge_agg_mlp: case % 3 != 0,
        readout: if case % 4 == 3 { Readout::Node } else { Readout::Edge },
        dropout: 0.1,
        ..ModelConfig::new(node_dim, edge_dim)
    };
    if case % 7 == 6 {
        ModelConfig {
            stages: crate::model::Stages::SingleStage,
            ..base
        }
    } else {
        base
    }
}

/// Analytic against central-difference gradients of a random projection of
/// the logits.
pub fn gradient_check(model: &Model, g: &Multigraph, roots: &[usize], seed: u64, eps: f64) -> Result<f64> {
    let pg = PreparedGraph::new(g.clone());
    let mode = Mode::Train { seed };
    let (out, cache) = model.forward(&pg, roots, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Array1<f64> = (0..out.logits.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let analytic = model.backward(&pg, &cache, &w)?.to_flat();
    let theta = model.params.to_flat();
    let mut probe = model.clone();
    let mut failure = None;
    let numeric = finite_difference_gradient(&theta, eps, |t| {
        if let Err(e) = probe.params.set_flat(t) {
            failure.get_or_insert(e);
            return f64::NAN;
        }
        match probe.forward(&pg, roots, mode) {
            Ok((o, _)) => o.logits.dot(&w),
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(relative_error(&analytic, &numeric))
}

pub fn gradient_suite(graphs: usize, seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut errors = Vec::new();
    for case in 0..graphs {
        let n = rng.random_range(3..=7);
        let m = rng.random_range(n..=12);
        let g = random_connected_multigraph(n, m, rng.random())?;
        let mut cfg = gradient_case_config(case, g.node_dim(), g.edge_dim());
        cfg.calibrate_degrees(&g);
        let model = Model::new(cfg, rng.random())?;
        let err = gradient_check(&model, &g, &[0], rng.random(), 1e-5)?;
        errors.push(err);
        if !(err <= tolerance) {
            failures.push(format!("graph {case}: relative error {err:.3e}"));
        }
    }
    Ok(SuiteReport {
        suite: "gradient".into(),
        cases: graphs,
        failures,
        details: serde_json::json!({
            "max_relative_error": errors.iter().copied().fold(0.0, f64::max),
            "tolerance": tolerance,
        }),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Reduction work of one forward pass of a bidirectional two-stage model.
pub fn reduction_work(num_edges: usize, seed: u64) -> Result<u64> {
    let g = random_connected_multigraph((num_edges / 4).max(1), num_edges, seed)?;
    let cfg = ModelConfig {
        num_layers: 1,
        hidden_size: 4,
        bidirectional: true,
        ..ModelConfig::new(g.node_dim(), g.edge_dim())
    };
    let model = Model::new(cfg, seed)?;
    let pg = PreparedGraph::new(g);
    reduce_ops::reset();
    model.forward(&pg, &[], Mode::Eval)?;
    Ok(reduce_ops::get())
}

/// Reduction counts at each size, checked against linear growth.
pub fn complexity_suite(sizes: &[usize], seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let start = Instant::now();
    let counts = sizes.iter().map(|&m| reduction_work(m, seed)).collect::<Result<Vec<_>>>()?;
    let mut failures = Vec::new();
    for i in 1..sizes.len() {
        let size_ratio = sizes[i] as f64 / sizes[0] as f64;
        let count_ratio = counts[i] as f64 / counts[0] as f64;
        if (count_ratio / size_ratio - 1.0).abs() > tolerance {
            failures.push(format!(
                "|E| ratio {size_ratio} but reduction ratio {count_ratio:.4}"
            ));
        }
    }
    Ok(SuiteReport {
        suite: "complexity".into(),
        cases: sizes.len(),
        failures,
        details: serde_json::json!({ "sizes": sizes, "reductions": counts }),
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separation_numbers() {
        let g1 = separation_figures(&[vec![5.0, 1.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!((g1.single_sum, g1.single_max, g1.max_of_sums), (13.0, 5.0, 7.0));
        let g2 = separation_figures(&[vec![5.0, 3.0], vec![1.0, 4.0]]).unwrap();
        assert_eq!(g2.max_of_sums, 8.0);
        assert!(separation_suite().unwrap().passed());
    }

    #[test]
    fn small_suites_pass() {
        assert!(equivariance_suite(2, 0, 1e-5).unwrap().passed());
        assert!(node_id_suite(10, 0).unwrap().passed());
        assert!(port_witness_suite(&[4, 5], 2, 10).unwrap().passed());
        let r = gradient_suite(3, 0, 1e-4).unwrap();
        assert!(r.passed(), "{:?}", r.failures);
    }

    #[test]
    fn reduction_counts_scale() {
        let r = complexity_suite(&[500, 5000], 1, 0.05).unwrap();
        assert!(r.passed(), "{:?}", r.details);
    }
}
