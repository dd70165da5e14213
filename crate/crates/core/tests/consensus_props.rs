//! Gossip averaging invariants over random small-world graphs.

use std::collections::VecDeque;

use proptest::prelude::*;
use ra_marl::consensus::{build_ws_graph, ConsensusTopology, Graph, RoundsSpec, WeightRule};

fn norm_from_mean(x: &[f64], mean: f64) -> f64 {
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn distances_from(g: &Graph, src: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; g.n()];
    dist[src] = 0;
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        for v in g.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Connected Watts-Strogatz graph with Metropolis weights.
fn topology() -> impl Strategy<Value = ConsensusTopology> {
    (3usize..=16, 0.0f64..=1.0, any::<u64>(), 0usize..=1).prop_flat_map(|(n, p, seed, extra)| {
        let k = 1 + extra.min((n - 1) / 2 - 1);
        let g = build_ws_graph(n, k, p, seed).expect("small-world graph");
        Just(ConsensusTopology::from_graph(g, WeightRule::Metropolis, RoundsSpec::Fixed(3)).expect("topology"))
    })
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weights_are_symmetric_doubly_stochastic(t in topology()) {
        let w = t.weights();
        let n = t.n_devices();
        for i in 0..n {
            let row: f64 = (0..n).map(|j| w[(i, j)]).sum();
            let col: f64 = (0..n).map(|j| w[(j, i)]).sum();
            prop_assert!((row - 1.0).abs() < 1e-12);
            prop_assert!((col - 1.0).abs() < 1e-12);
            for j in 0..n {
                prop_assert!(w[(i, j)] >= 0.0);
                prop_assert!((w[(i, j)] - w[(j, i)]).abs() < 1e-15);
                if i != j && !t.graph().has_edge(i, j) {
                    prop_assert_eq!(w[(i, j)], 0.0);
                }
            }
        }
        prop_assert!(t.lambda2() < 1.0);
    }

    #[test]
    fn gossip_preserves_mean_and_contracts(
        (t, x, g) in topology().prop_flat_map(|t| {
            let n = t.n_devices();
            (Just(t), values(n), 0usize..12)
        })
    ) {
        let y = t.gossip(&x, g).unwrap();
        let m = mean(&x);
        prop_assert!((mean(&y) - m).abs() <= 1e-10);
        let bound = t.lambda2().powi(g as i32) * norm_from_mean(&x, m) + 1e-9;
        prop_assert!(norm_from_mean(&y, m) <= bound);
        let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        for v in &y {
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn information_travels_one_hop_per_round(
        (t, x, g, src, bump) in topology().prop_flat_map(|t| {
            let n = t.n_devices();
            (Just(t), values(n), 0usize..6, 0..n, 0.5f64..5.0)
        })
    ) {
        let base = t.gossip(&x, g).unwrap();
        let mut perturbed = x.clone();
        perturbed[src] += bump;
        let moved = t.gossip(&perturbed, g).unwrap();
        let dist = distances_from(t.graph(), src);
        for i in 0..t.n_devices() {
            if dist[i] > g {
                prop_assert_eq!(base[i], moved[i]);
            } else {
                prop_assert!(moved[i] > base[i], "node {} at distance {} should see the change", i, dist[i]);
            }
        }
    }

    #[test]
    fn ring_lattice_equal_weights_contract(
        (n, k, x, g) in (4usize..=12).prop_flat_map(|n| {
            (Just(n), 1usize..=(n - 1) / 2, values(n), 0usize..10)
        })
    ) {
        let t = ConsensusTopology::from_graph(
            Graph::ring_lattice(n, k),
            WeightRule::EqualNeighbor,
            RoundsSpec::Fixed(g),
        ).unwrap();
        let y = t.average(&x).unwrap();
        let m = mean(&x);
        prop_assert!((mean(&y) - m).abs() <= 1e-10);
        prop_assert!(norm_from_mean(&y, m) <= t.lambda2().powi(g as i32) * norm_from_mean(&x, m) + 1e-9);
    }
}
