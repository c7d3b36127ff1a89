//! Gaussian mean-field updates (means and covariances) and the plain
//! coordinate-descent update they coincide with.

use nalgebra::{DMatrix, DVector};

use super::{Schedule, SimilarityField};
use crate::cloud::NeighborGraph;
use crate::energy::CompatibilityMatrix;
use crate::{Error, FeatureMatrix, Result};

fn check(graph: &NeighborGraph, compat: &CompatibilityMatrix, z: &FeatureMatrix, x: &FeatureMatrix) -> Result<()> {
    z.check_shape(graph.num_nodes(), compat.dim(), "observed features")?;
    x.check_shape(graph.num_nodes(), compat.dim(), "latent features")
}

fn half_inverse(m: DMatrix<f64>) -> DMatrix<f64> {
    let inv = m.try_inverse().expect("precision matrix is positive definite");
    (&inv + inv.transpose()) * 0.25
}

/// Per-node covariance `Sigma_i = 1/2 (I + sum_j s^_ij C)^-1`.
///
/// Rows of a normalised field sum to one, so nodes with neighbours get
/// `1/2 (I + C)^-1`; isolated nodes get `1/2 I`.
pub fn mean_field_covariance(sim: &SimilarityField, compat: &CompatibilityMatrix) -> Vec<DMatrix<f64>> {
    let d = compat.dim();
    let eye = DMatrix::<f64>::identity(d, d);
    let connected = half_inverse(&eye + compat.matrix());
    (0..sim.num_nodes())
        .map(|i| {
            if sim.row(i).is_empty() {
                &eye * 0.5
            } else {
                connected.clone()
            }
        })
        .collect()
}

/// Coordinate-descent update for unnormalised similarities:
/// `x_i = (I + sum_j s_ij C)^-1 (z_i + C sum_j s_ij x_j)` with `s_ij` the graph's
/// edge weights (1 when unweighted).
pub fn coordinate_descent_step(
    graph: &NeighborGraph,
    compat: &CompatibilityMatrix,
    z: &FeatureMatrix,
    x: &FeatureMatrix,
    schedule: Schedule,
) -> Result<FeatureMatrix> {
    check(graph, compat, z, x)?;
    let d = compat.dim();
    let c = compat.matrix();
    let prev = x.clone();
    let mut next = x.clone();
    for i in 0..graph.num_nodes() {
        let source = match schedule {
            Schedule::Jacobi => &prev,
            Schedule::GaussSeidel => &next,
        };
        let mut total = 0.0;
        let mut agg = DVector::<f64>::zeros(d);
        for (k, &j) in graph.neighbors(i).iter().enumerate() {
            let s = graph.weights(i).map_or(1.0, |w| w[k]);
            total += s;
            agg += DVector::from_column_slice(source.row(j)) * s;
        }
        let lhs = DMatrix::identity(d, d) + c * total;
        let rhs = DVector::from_column_slice(z.row(i)) + c * agg;
        let xi = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Invalid(format!("singular update matrix at node {i}")))?;
        next.row_mut(i).copy_from_slice(xi.as_slice());
    }
    Ok(next)
}

/// Mean-field update of a Gaussian factorisation `Q_i = N(mu_i, Sigma_i)`.
///
/// Minimises the KL objective node by node: the precision is
/// `Lambda_i = I + sum_j w_ij` with `w_ij = s_ij C`, the mean solves
/// `Lambda_i mu_i = z_i + sum_j w_ij mu_j`, and `Sigma_i = 1/2 Lambda_i^-1`.
/// Returns the new means and covariances.
pub fn mean_field_update(
    graph: &NeighborGraph,
    compat: &CompatibilityMatrix,
    z: &FeatureMatrix,
    mu: &FeatureMatrix,
    schedule: Schedule,
) -> Result<(FeatureMatrix, Vec<DMatrix<f64>>)> {
    check(graph, compat, z, mu)?;
    let d = compat.dim();
    let c = compat.matrix();
    let prev = mu.clone();
    let mut next = mu.clone();
    let mut sigma = Vec::with_capacity(graph.num_nodes());
    for i in 0..graph.num_nodes() {
        let mut precision = DMatrix::<f64>::identity(d, d);
        let mut rhs = DVector::from_column_slice(z.row(i));
        for (k, &j) in graph.neighbors(i).iter().enumerate() {
            let w = c * graph.weights(i).map_or(1.0, |w| w[k]);
            let mu_j = match schedule {
                Schedule::Jacobi => DVector::from_column_slice(prev.row(j)),
                Schedule::GaussSeidel => DVector::from_column_slice(next.row(j)),
            };
            rhs += &w * mu_j;
            precision += w;
        }
        let chol = precision
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Invalid(format!("precision at node {i} is not positive definite")))?;
        let mean = chol.solve(&rhs);
        next.row_mut(i).copy_from_slice(mean.as_slice());
        let cov = chol.inverse() * 0.5;
        sigma.push((&cov + cov.transpose()) * 0.5);
    }
    Ok((next, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isolated_node_is_half_identity() {
        let sim = SimilarityField::from_normalized(NeighborGraph::empty(2), vec![vec![], vec![]]).unwrap();
        let cov = mean_field_covariance(&sim, &CompatibilityMatrix::initial(3));
        assert_eq!(cov[0], DMatrix::identity(3, 3) * 0.5);
    }

    #[test]
    fn identity_compat_gives_quarter_identity() {
        let g = NeighborGraph::new(vec![vec![1, 2], vec![0], vec![0]]).unwrap();
        let sim = SimilarityField::from_normalized(g, vec![vec![0.3, 0.7], vec![1.0], vec![1.0]]).unwrap();
        for cov in mean_field_covariance(&sim, &CompatibilityMatrix::identity(4)) {
            assert_eq!(cov, DMatrix::identity(4, 4) * 0.25);
        }
    }

    #[test]
    fn mean_field_matches_covariance_op() {
        let g = NeighborGraph::new(vec![vec![1, 2], vec![0], vec![]]).unwrap();
        let sim = SimilarityField::from_normalized(g, vec![vec![0.4, 0.6], vec![1.0], vec![]]).unwrap();
        let compat = CompatibilityMatrix::from_param(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]),
            1e-4,
        )
        .unwrap();
        let z = FeatureMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]).unwrap();
        let (_, sigma) = mean_field_update(&sim.weighted_graph(), &compat, &z, &z, Schedule::Jacobi).unwrap();
        for (a, b) in sigma.iter().zip(mean_field_covariance(&sim, &compat)) {
            assert!((a - b).amax() < 1e-12);
        }
    }
}
