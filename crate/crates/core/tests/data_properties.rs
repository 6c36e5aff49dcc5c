use autograd::{RngStream, Tensor};
use circuitnet::data::{bandpass_filter, edge_dropout, fisher_z, knn_graph, pearson_fc, BrainGraph, Edge};
use proptest::prelude::*;

fn series(rows: usize, t: usize, seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed, "series");
    Tensor::from_fn(rows, t, |_, _| rng.normal())
}

fn energy(x: &Tensor) -> f64 {
    x.data().iter().map(|v| v * v).sum()
}

proptest! {
    #[test]
    fn correlation_ignores_positive_affine_maps(
        seed in 0u64..1000,
        scales in prop::collection::vec(0.01f64..100.0, 4),
        shifts in prop::collection::vec(-50.0f64..50.0, 4),
    ) {
        let x = series(4, 30, seed);
        let y = Tensor::from_fn(4, 30, |i, j| scales[i] * x.get(i, j) + shifts[i]);
        let (a, b) = (pearson_fc(&x).unwrap(), pearson_fc(&y).unwrap());
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn correlation_is_symmetric_and_bounded(seed in 0u64..1000) {
        let fc = pearson_fc(&series(6, 25, seed)).unwrap();
        for i in 0..6 {
            prop_assert!((fc.get(i, i) - 1.0).abs() < 1e-12);
            for j in 0..6 {
                prop_assert_eq!(fc.get(i, j), fc.get(j, i));
                prop_assert!(fc.get(i, j).abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn fisher_is_odd_and_monotone(mut r in prop::collection::vec(-1.0f64..=1.0, 2..12)) {
        r.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = r.len();
        let fc = Tensor::from_fn(n, n, |i, j| if i == j { 1.0 } else { r[i.max(j)] });
        let neg = fc.map(|v| -v);
        let (z, zn) = (fisher_z(&fc), fisher_z(&neg));
        for i in 2..n {
            prop_assert!(z.get(i, 0) >= z.get(i - 1, 0));
        }
        for i in 1..n {
            prop_assert!(z.get(i, 0).is_finite());
            prop_assert!((z.get(i, 0) + zn.get(i, 0)).abs() <= 1e-9);
        }
        for i in 0..n {
            prop_assert_eq!(z.get(i, i), 0.0);
        }
    }

    #[test]
    fn knn_out_degree(seed in 0u64..1000, n in 3usize..12, k in 1usize..15) {
        let fc = pearson_fc(&series(n, 20, seed)).unwrap();
        let g = knn_graph(&fc, k, false);
        for node in 0..n {
            prop_assert_eq!(g.out_degree(node), k.min(n - 1));
        }
        prop_assert!(g.edges.iter().all(|e| e.src != e.dst));
    }

    #[test]
    fn symmetrized_knn_is_symmetric(seed in 0u64..1000, n in 3usize..10, k in 1usize..4) {
        let fc = pearson_fc(&series(n, 20, seed)).unwrap();
        let a = knn_graph(&fc, k, true).adjacency();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(a.get(i, j) != 0.0, a.get(j, i) != 0.0);
            }
        }
    }

    #[test]
    fn complementary_bands_reconstruct(seed in 0u64..1000, t in 16usize..80, split in 0.05f64..0.95) {
        let tr = 2.0;
        let nyquist = 1.0 / (2.0 * tr);
        let x = series(3, t, seed);
        // Split halfway between two bins so no bin lies on the edge.
        let bin = 1.0 / (t as f64 * tr);
        let edge = ((split * nyquist / bin).floor() + 0.5) * bin;
        prop_assume!(edge < nyquist);
        let low = bandpass_filter(&x, 0.0, edge, tr).unwrap();
        let high = bandpass_filter(&x, edge, nyquist, tr).unwrap();
        let sum = Tensor::from_fn(3, t, |i, j| low.get(i, j) + high.get(i, j));
        prop_assert!(sum.max_abs_diff(&x) < 1e-9);
        // Disjoint spectral supports: energies add (Parseval).
        prop_assert!((energy(&low) + energy(&high) - energy(&x)).abs() < 1e-9 * energy(&x));
    }
}

#[test]
fn full_band_is_identity() {
    let x = series(4, 50, 3);
    let y = bandpass_filter(&x, 0.0, 0.25, 2.0).unwrap();
    assert!(y.max_abs_diff(&x) < 1e-12);
}

#[test]
fn edge_dropout_count_within_binomial_bound() {
    let edges: Vec<Edge> = (0..10_000)
        .map(|i| Edge {
            src: i % 100,
            dst: (i / 100 + 1 + i % 100) % 101,
            weight: 1.0,
        })
        .collect();
    let g = BrainGraph {
        n_nodes: 101,
        k: 100,
        edges,
    };
    for seed in 0..20 {
        let mut rng = RngStream::new(seed, "dropout");
        let removed = g.edges.len() - edge_dropout(&g, 0.1, &mut rng).edges.len();
        assert!((880..=1120).contains(&removed), "seed {seed}: removed {removed}");
    }
}
