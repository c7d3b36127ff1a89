use super::transform::{PointwiseTransform, TransformTape};
use crate::cloud::NeighborGraph;
use crate::energy::{CompatibilityMatrix, QuadraticEnergyModel};
use crate::{Error, FeatureMatrix, Result};

/// Row-normalised edge similarities `s^_ij` over a neighbour graph.
///
/// Alongside the normalised rows the field keeps a positive mass `m_i` per node,
/// proportional to the un-normalised row total. When the raw similarity is
/// symmetric on a symmetric graph, `m_i s^_ij = m_j s^_ji`, and the message-passing
/// update is exact coordinate descent on [`SimilarityField::energy_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityField {
    graph: NeighborGraph,
    s_hat: Vec<Vec<f64>>,
    mass: Vec<f64>,
}

impl SimilarityField {
    /// Takes already normalised rows; node masses default to 1.
    pub fn from_normalized(graph: NeighborGraph, s_hat: Vec<Vec<f64>>) -> Result<Self> {
        let n = graph.num_nodes();
        Self::check_rows(&graph, &s_hat)?;
        for (i, row) in s_hat.iter().enumerate() {
            if row.is_empty() {
                continue;
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!(
                    "normalised similarities of node {i} sum to {total}"
                )));
            }
        }
        Ok(Self {
            graph: graph.without_weights(),
            s_hat,
            mass: vec![1.0; n],
        })
    }

    /// Normalises raw non-negative similarities `s_ij` per row. Rows that sum to
    /// zero are treated as isolated.
    pub fn from_similarities(graph: NeighborGraph, s: Vec<Vec<f64>>) -> Result<Self> {
        Self::check_rows(&graph, &s)?;
        let mut totals = Vec::with_capacity(s.len());
        let mut s_hat = Vec::with_capacity(s.len());
        let mut lists = Vec::with_capacity(s.len());
        for (i, row) in s.into_iter().enumerate() {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                s_hat.push(row.iter().map(|v| v / total).collect());
                lists.push(graph.neighbors(i).to_vec());
                totals.push(Some(total));
            } else {
                s_hat.push(Vec::new());
                lists.push(Vec::new());
                totals.push(None);
            }
        }
        let scale = totals.iter().flatten().copied().fold(0.0, f64::max);
        let mass = totals
            .iter()
            .map(|t| t.map_or(1.0, |t| (t / scale).max(f64::MIN_POSITIVE)))
            .collect();
        Ok(Self {
            graph: NeighborGraph::new(lists)?,
            s_hat,
            mass,
        })
    }

    /// Takes the graph's own edge weights (1 when unweighted) as raw similarities.
    pub fn from_graph_weights(graph: &NeighborGraph) -> Result<Self> {
        let s = (0..graph.num_nodes())
            .map(|i| {
                graph
                    .weights(i)
                    .map_or_else(|| vec![1.0; graph.neighbors(i).len()], <[f64]>::to_vec)
            })
            .collect();
        Self::from_similarities(graph.without_weights(), s)
    }

    fn check_rows(graph: &NeighborGraph, rows: &[Vec<f64>]) -> Result<()> {
        if rows.len() != graph.num_nodes()
            || rows
                .iter()
                .zip(graph.neighbor_lists())
                .any(|(r, l)| r.len() != l.len())
        {
            return Err(Error::Shape("similarities must align with neighbour lists".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid("similarities must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn graph(&self) -> &NeighborGraph {
        &self.graph
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.s_hat[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.s_hat
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// `sum_j s^_ij x_j` for node `i`, accumulated in neighbour order.
    #[inline]
    pub(crate) fn aggregate(&self, i: usize, x: &FeatureMatrix, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (&j, &s) in self.graph.neighbors(i).iter().zip(&self.s_hat[i]) {
            for (o, v) in out.iter_mut().zip(x.row(j)) {
                *o += s * v;
            }
        }
    }

    /// The graph with `s^_ij` attached as edge weights.
    pub fn weighted_graph(&self) -> NeighborGraph {
        self.graph
            .clone()
            .set_weights(self.s_hat.clone())
            .expect("normalised similarities are valid weights")
    }

    /// Quadratic energy whose coordinate descent is the normalised message-passing
    /// update: fidelity weights `m_i`, edge similarities `m_i s^_ij / 2`, and an
    /// `m_i x_i^T C x_i` anchor on isolated nodes (whose update is `(I + C)^-1 z_i`).
    pub fn energy_model(
        &self,
        z: &FeatureMatrix,
        compat: &CompatibilityMatrix,
    ) -> Result<QuadraticEnergyModel> {
        let weights = self
            .s_hat
            .iter()
            .zip(&self.mass)
            .map(|(row, m)| row.iter().map(|s| 0.5 * m * s).collect())
            .collect();
        let graph = self.graph.clone().set_weights(weights)?;
        let anchors = (0..self.num_nodes())
            .map(|i| if self.s_hat[i].is_empty() { self.mass[i] } else { 0.0 })
            .collect();
        QuadraticEnergyModel::new(graph, compat.clone(), z.clone())?
            .with_fidelity_weights(self.mass.clone())?
            .with_anchor_weights(anchors)
    }

    /// Same field on relabelled nodes (`i` becomes `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.num_nodes();
        let mut s_hat = vec![Vec::new(); n];
        let mut mass = vec![0.0; n];
        for i in 0..n {
            s_hat[perm[i]] = self.s_hat[i].clone();
            mass[perm[i]] = self.mass[i];
        }
        Self {
            graph: self.graph.permuted(perm),
            s_hat,
            mass,
        }
    }
}

pub(crate) struct SimilarityTape {
    pub projected: FeatureMatrix,
    pub transform: TransformTape,
}

/// `s^_ij = softmax_j(-|T(f_i) - T(f_j)|^2)` over each node's neighbourhood.
pub fn pairwise_similarity(
    features: &FeatureMatrix,
    graph: &NeighborGraph,
    projection: &PointwiseTransform,
) -> Result<SimilarityField> {
    Ok(pairwise_similarity_taped(features, graph, projection)?.0)
}

pub(crate) fn pairwise_similarity_taped(
    features: &FeatureMatrix,
    graph: &NeighborGraph,
    projection: &PointwiseTransform,
) -> Result<(SimilarityField, SimilarityTape)> {
    if features.rows() != graph.num_nodes() {
        return Err(Error::Shape(format!(
            "{} guide rows for {} graph nodes",
            features.rows(),
            graph.num_nodes()
        )));
    }
    let (g, tape) = projection.forward_taped(features)?;
    let n = graph.num_nodes();
    let mut s_hat = Vec::with_capacity(n);
    let mut log_totals = Vec::with_capacity(n);
    for i in 0..n {
        let list = graph.neighbors(i);
        if list.is_empty() {
            s_hat.push(Vec::new());
            log_totals.push(None);
            continue;
        }
        let logits: Vec<f64> = list
            .iter()
            .map(|&j| {
                -g.row(i)
                    .iter()
                    .zip(g.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        s_hat.push(exps.iter().map(|e| e / total).collect());
        log_totals.push(Some(max + total.ln()));
    }
    let top = log_totals.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let mass = log_totals
        .iter()
        .map(|l| l.map_or(1.0, |l| (l - top).exp().max(f64::MIN_POSITIVE)))
        .collect();
    let field = SimilarityField {
        graph: graph.without_weights(),
        s_hat,
        mass,
    };
    Ok((
        field,
        SimilarityTape {
            projected: g,
            transform: tape,
        },
    ))
}
