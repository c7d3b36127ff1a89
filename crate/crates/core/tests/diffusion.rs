mod common;

use common::*;
use crfconv::diffusion::{compare_crf_vs_diffusion, diffuse_to_steady, diffusion_step, laplacian_residual};
use crfconv::energy::dirichlet_energy_features;
use crfconv::fixtures::rng;
use crfconv::{FeatureMatrix, NeighborGraph, SimilarityField};
use rand::Rng;

#[test]
fn first_step_matches_crf_on_random_fields() {
    let mut rng = rng(61);
    for _ in 0..40 {
        let n = rng.random_range(1..=100);
        let d = rng.random_range(1..=5);
        let sim = random_asymmetric_field(&mut rng, n, 0.1);
        let z = random_matrix(&mut rng, n, d, 1.0);
        let report = compare_crf_vs_diffusion(&z, &sim, 1).unwrap();
        assert!(report.first_step_gap <= 1e-12);
    }
}

#[test]
fn max_principle_holds() {
    let mut rng = rng(62);
    for _ in 0..50 {
        let n = rng.random_range(1..=40);
        let sim = random_asymmetric_field(&mut rng, n, 0.2);
        let g = sim.weighted_graph();
        let h0 = random_matrix(&mut rng, n, 2, 1.0);
        let c = rng.random_range(0.0..=1.0);
        let mut h = h0.clone();
        for _ in 0..20 {
            h = diffusion_step(&h, &g, c).unwrap();
            for k in 0..2 {
                let col: Vec<f64> = (0..n).map(|i| h0.get(i, k)).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!((0..n).all(|i| h.get(i, k) >= lo - 1e-12 && h.get(i, k) <= hi + 1e-12));
            }
        }
    }
}

#[test]
fn ring_preserves_mean() {
    let n = 12;
    let lists = (0..n).map(|i| vec![(i + 1) % n, (i + n - 1) % n]).collect();
    let g = NeighborGraph::new(lists).unwrap();
    let mut rng = rng(63);
    let mut h = random_matrix(&mut rng, n, 1, 1.0);
    let mean0: f64 = h.as_slice().iter().sum::<f64>() / n as f64;
    for _ in 0..50 {
        h = diffusion_step(&h, &g, 0.5).unwrap();
        let mean: f64 = h.as_slice().iter().sum::<f64>() / n as f64;
        assert!((mean - mean0).abs() < 1e-12);
    }
}

#[test]
fn steady_state_is_harmonic_and_smoother() {
    let mut rng = rng(64);
    let mut checked = 0;
    while checked < 30 {
        let n = rng.random_range(2..=30);
        let sim = random_reversible_field(&mut rng, n, 0.3);
        let g = sim.weighted_graph();
        if !is_connected(&g) {
            continue;
        }
        checked += 1;
        let h = random_matrix(&mut rng, n, 2, 1.0);
        let tol = 1e-10;
        let (out, _) = diffuse_to_steady(&h, &g, 0.5, tol, 200_000).unwrap();
        assert!(laplacian_residual(&g, &out).unwrap() <= 10.0 * tol);
        for k in 0..2 {
            let col: Vec<f64> = (0..n).map(|i| out.get(i, k)).collect();
            assert!(col.iter().all(|v| (v - col[0]).abs() < 1e-7));
        }
        assert!(dirichlet_energy_features(&g, &out).unwrap() <= dirichlet_energy_features(&g, &h).unwrap() + 1e-12);
    }
}

#[test]
fn dirichlet_energy_scan() {
    // symmetric doubly-normalised weights make the Laplacian symmetric PSD
    let mut rng = rng(65);
    let mut negatives = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=12);
        let sim = random_reversible_field(&mut rng, n, 0.4);
        let g = sim.weighted_graph();
        let h = random_matrix(&mut rng, n, 1, 1.0);
        if dirichlet_energy_features(&g, &h).unwrap() < -1e-12 {
            negatives += 1;
        }
    }
    eprintln!("random-walk Laplacian gave a negative quadratic form on {negatives} of 1000 graphs");
    let ring = NeighborGraph::with_weights(
        (0..8).map(|i| vec![(i + 1) % 8, (i + 7) % 8]).collect(),
        vec![vec![0.5, 0.5]; 8],
    )
    .unwrap();
    for _ in 0..200 {
        let h = random_matrix(&mut rng, 8, 1, 1.0);
        assert!(dirichlet_energy_features(&ring, &h).unwrap() >= -1e-12);
    }
}

#[test]
fn pair_fixture_limits() {
    let g = NeighborGraph::new(vec![vec![1], vec![0]]).unwrap();
    let sim = SimilarityField::from_graph_weights(&g).unwrap();
    let z = FeatureMatrix::column(&[0.0, 2.0]);
    let report = compare_crf_vs_diffusion(&z, &sim, 200).unwrap();
    assert!(report.diffusion_final.max_abs_diff(&FeatureMatrix::column(&[1.0, 1.0])) < 1e-8);
    assert!(report.crf_final.max_abs_diff(&FeatureMatrix::column(&[2.0 / 3.0, 4.0 / 3.0])) < 1e-8);
    let last = report.rows.last().unwrap();
    assert!(last.crf_fidelity < last.diff_fidelity);
}

fn is_connected(g: &NeighborGraph) -> bool {
    let n = g.num_nodes();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for &j in g.neighbors(i) {
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}
