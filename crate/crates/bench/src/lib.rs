//! Workloads shared by the benchmarks. Every input is a deterministic function of
//! its size, so timings are comparable across runs.

use crfconv::cloud::{knn_graph, symmetrize};
use crfconv::crf_continuous::pairwise_similarity;
use crfconv::crf_discrete::kernel_weights;
use crfconv::fixtures::{random_cloud, random_features, rng};
use crfconv::{
    CompatibilityMatrix, CrfConfig, FeatureMatrix, KernelMixture, LabelCompatibility, LabelField, NeighborGraph,
    PointCloud, PointwiseTransform, Result, Schedule, SimilarityField,
};

pub use crfconv;

/// A random cloud with its symmetrised kNN graph and matching layer parts.
pub struct Workload {
    pub cloud: PointCloud,
    pub graph: NeighborGraph,
    pub unary: PointwiseTransform,
    pub projection: PointwiseTransform,
    pub sim: SimilarityField,
    pub z: FeatureMatrix,
}

impl Workload {
    /// `n` points with `d` feature channels and `k` neighbours per point.
    pub fn new(n: usize, d: usize, k: usize) -> Result<Self> {
        let mut r = rng(n as u64 ^ (d as u64) << 32);
        let cloud = random_cloud(&mut r, n, d);
        let graph = symmetrize(&knn_graph(&cloud, k)?);
        let unary = PointwiseTransform::identity(d);
        let projection = PointwiseTransform::identity(d);
        let z = cloud.features().clone();
        let sim = pairwise_similarity(cloud.features(), &graph, &projection)?;
        Ok(Self { cloud, graph, unary, projection, sim, z })
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    pub fn crf_config(&self, steps: usize, schedule: Schedule) -> Result<CrfConfig> {
        Ok(CrfConfig::new(self.dim())
            .with_steps(steps)
            .with_schedule(schedule)
            .with_compat(CompatibilityMatrix::from_param(crfconv::nalgebra::DMatrix::identity(self.dim(), self.dim()), 1e-4)?))
    }

    /// Random `labels`-class posteriors with unit-kernel weights and the Potts complement.
    pub fn label_problem(&self, labels: usize) -> Result<(LabelField, Vec<Vec<f64>>, LabelCompatibility)> {
        let mut r = rng(labels as u64);
        let mut p = random_features(&mut r, self.cloud.len(), labels);
        for i in 0..p.rows() {
            let row: Vec<f64> = p.row(i).iter().map(|v| v.exp()).collect();
            let total: f64 = row.iter().sum();
            for (a, v) in row.iter().enumerate() {
                p.set(i, a, v / total);
            }
        }
        let field = LabelField::from_probabilities(p, 1e-9)?;
        let weights = kernel_weights(self.cloud.features(), &self.graph, &KernelMixture::unit(self.dim()))?;
        Ok((field, weights, LabelCompatibility::potts_complement(labels)))
    }
}
