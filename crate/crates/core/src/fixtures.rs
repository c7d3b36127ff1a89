//! Seeded synthetic inputs for demos, benchmarks and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::{knn_graph, symmetrize, NeighborGraph, PointCloud};
use crate::{FeatureMatrix, Result};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A cloud with planted clusters.
#[derive(Debug, Clone)]
pub struct PlantedClusters {
    pub cloud: PointCloud,
    /// Cluster each point was drawn from.
    pub labels: Vec<usize>,
    /// Noise-free features (the cluster's one-hot code).
    pub clean: FeatureMatrix,
}

/// `n` points split round-robin over `clusters` Gaussian blobs whose centres sit
/// on a circle of radius 3. Features are the cluster's one-hot code plus
/// Gaussian noise of standard deviation `feature_noise`.
pub fn planted_clusters(
    n: usize,
    clusters: usize,
    spread: f64,
    feature_noise: f64,
    seed: u64,
) -> Result<PlantedClusters> {
    let mut rng = rng(seed);
    let pos_noise = Normal::new(0.0, spread).expect("spread must be finite and >= 0");
    let feat_noise = Normal::new(0.0, feature_noise).expect("noise must be finite and >= 0");
    let mut positions = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut clean = FeatureMatrix::zeros(n, clusters);
    let mut noisy = FeatureMatrix::zeros(n, clusters);
    for i in 0..n {
        let c = i % clusters;
        let angle = std::f64::consts::TAU * c as f64 / clusters as f64;
        positions.push([
            3.0 * angle.cos() + pos_noise.sample(&mut rng),
            3.0 * angle.sin() + pos_noise.sample(&mut rng),
            pos_noise.sample(&mut rng),
        ]);
        labels.push(c);
        clean.set(i, c, 1.0);
        for k in 0..clusters {
            noisy.set(i, k, clean.get(i, k) + feat_noise.sample(&mut rng));
        }
    }
    Ok(PlantedClusters {
        cloud: PointCloud::new(positions, noisy)?,
        labels,
        clean,
    })
}

/// Uniform positions in the unit cube with `d` standard-normal features.
pub fn random_cloud(rng: &mut impl Rng, n: usize, d: usize) -> PointCloud {
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let positions = (0..n)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    let feats = (0..n * d).map(|_| normal.sample(rng)).collect();
    PointCloud::new(positions, FeatureMatrix::from_vec(n, d, feats).expect("sized"))
        .expect("finite")
}

/// Standard-normal `rows x cols` matrix.
pub fn random_features(rng: &mut impl Rng, rows: usize, cols: usize) -> FeatureMatrix {
    let normal = Normal::new(0.0, 1.0).expect("valid");
    FeatureMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
        .expect("sized")
}

/// Symmetrised kNN graph of a random cloud; every node has at least one neighbour
/// when `n >= 2`.
pub fn random_symmetric_graph(rng: &mut impl Rng, n: usize, k: usize) -> NeighborGraph {
    let cloud = random_cloud(rng, n, 0);
    symmetrize(&knn_graph(&cloud, k).expect("n >= 1, k >= 1"))
}
