//! Point clouds, neighbour graphs and resampling between resolutions.

mod graph;
mod interpolate;
mod io;
mod sampling;

pub use graph::{dilated_knn_graph, knn_graph, radius_graph, symmetrize};
pub use interpolate::{knn_interpolate, knn_interpolation_weights, COINCIDENT_DISTANCE};
pub use io::{read_cloud, write_cloud, CloudFormat};
pub use sampling::farthest_point_sample;

use crate::{Error, FeatureMatrix, Result};

/// Positions in 3D plus one feature vector per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    features: FeatureMatrix,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, features: FeatureMatrix) -> Result<Self> {
        if features.rows() != positions.len() {
            return Err(Error::Shape(format!(
                "{} positions but {} feature rows",
                positions.len(),
                features.rows()
            )));
        }
        if let Some(i) = positions
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Invalid(format!("non-finite position at point {i}")));
        }
        if !features.is_finite() {
            return Err(Error::Invalid("non-finite feature value".into()));
        }
        Ok(Self {
            positions,
            features,
        })
    }

    /// Cloud with `d = 0` features.
    pub fn from_positions(positions: Vec<[f64; 3]>) -> Result<Self> {
        let n = positions.len();
        Self::new(positions, FeatureMatrix::zeros(n, 0))
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    /// Replaces the features, keeping positions.
    pub fn with_features(&self, features: FeatureMatrix) -> Result<Self> {
        Self::new(self.positions.clone(), features)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            features: self.features.select_rows(idx),
        }
    }
}

#[inline]
pub(crate) fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Directed adjacency: `neighbors[i]` lists the nodes that send messages to `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    num_nodes: usize,
    neighbors: Vec<Vec<usize>>,
    edge_weights: Option<Vec<Vec<f64>>>,
}

impl NeighborGraph {
    pub fn new(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let g = Self {
            num_nodes: neighbors.len(),
            neighbors,
            edge_weights: None,
        };
        g.validate_structure()?;
        Ok(g)
    }

    pub fn with_weights(neighbors: Vec<Vec<usize>>, weights: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(neighbors)?.set_weights(weights)
    }

    /// Graph with no edges.
    pub fn empty(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            neighbors: vec![Vec::new(); num_nodes],
            edge_weights: None,
        }
    }

    /// Attaches per-edge weights aligned with the neighbour lists.
    pub fn set_weights(mut self, weights: Vec<Vec<f64>>) -> Result<Self> {
        if weights.len() != self.num_nodes
            || weights
                .iter()
                .zip(&self.neighbors)
                .any(|(w, n)| w.len() != n.len())
        {
            return Err(Error::Shape(
                "edge weights must align with neighbour lists".into(),
            ));
        }
        for (i, row) in weights.iter().enumerate() {
            if let Some(w) = row.iter().find(|w| !w.is_finite() || **w < 0.0) {
                return Err(Error::Invalid(format!(
                    "edge weight {w} at node {i} must be finite and non-negative"
                )));
            }
        }
        self.edge_weights = Some(weights);
        Ok(self)
    }

    pub fn without_weights(&self) -> Self {
        Self {
            num_nodes: self.num_nodes,
            neighbors: self.neighbors.clone(),
            edge_weights: None,
        }
    }

    fn validate_structure(&self) -> Result<()> {
        for (i, list) in self.neighbors.iter().enumerate() {
            for (pos, &j) in list.iter().enumerate() {
                if j >= self.num_nodes {
                    return Err(Error::Invalid(format!(
                        "node {i} lists neighbour {j} but the graph has {} nodes",
                        self.num_nodes
                    )));
                }
                if j == i {
                    return Err(Error::Invalid(format!("self-loop at node {i}")));
                }
                if list[..pos].contains(&j) {
                    return Err(Error::Invalid(format!(
                        "duplicate neighbour {j} at node {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn weights(&self, i: usize) -> Option<&[f64]> {
        self.edge_weights.as_ref().map(|w| w[i].as_slice())
    }

    pub fn edge_weights(&self) -> Option<&[Vec<f64>]> {
        self.edge_weights.as_deref()
    }

    /// Iterates `(i, j, weight)` for every directed edge, with weight 1 when unweighted.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.neighbors.iter().enumerate().flat_map(move |(i, list)| {
            list.iter().enumerate().map(move |(k, &j)| {
                let w = self.edge_weights.as_ref().map_or(1.0, |w| w[i][k]);
                (i, j, w)
            })
        })
    }

    /// True when `j ∈ N(i)` iff `i ∈ N(j)`.
    pub fn is_symmetric(&self) -> bool {
        self.neighbors
            .iter()
            .enumerate()
            .all(|(i, list)| list.iter().all(|&j| self.neighbors[j].contains(&i)))
    }

    /// Relabels nodes: node `i` of `self` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.num_nodes;
        let mut neighbors = vec![Vec::new(); n];
        let mut weights = self.edge_weights.as_ref().map(|_| vec![Vec::new(); n]);
        for i in 0..n {
            neighbors[perm[i]] = self.neighbors[i].iter().map(|&j| perm[j]).collect();
            if let (Some(dst), Some(src)) = (weights.as_mut(), self.edge_weights.as_ref()) {
                dst[perm[i]] = src[i].clone();
            }
        }
        Self {
            num_nodes: n,
            neighbors,
            edge_weights: weights,
        }
    }

    /// Euclidean length of every edge, aligned with the neighbour lists.
    pub fn edge_lengths(&self, cloud: &PointCloud) -> Result<Vec<Vec<f64>>> {
        if cloud.len() != self.num_nodes {
            return Err(Error::Shape(format!(
                "graph has {} nodes, cloud has {} points",
                self.num_nodes,
                cloud.len()
            )));
        }
        let p = cloud.positions();
        Ok(self
            .neighbors
            .iter()
            .enumerate()
            .map(|(i, list)| {
                list.iter()
                    .map(|&j| squared_distance(&p[i], &p[j]).sqrt())
                    .collect()
            })
            .collect())
    }
}

/// Farthest-point sample of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleIndex {
    pub selected: Vec<usize>,
    pub ratio: f64,
}

impl SampleIndex {
    /// `max(1, ceil(ratio * n))`, tolerant to the rounding of ratios like 2/3.
    pub fn target_len(ratio: f64, n: usize) -> usize {
        let raw = ratio * n as f64;
        let rounded = raw.round();
        let count = if (raw - rounded).abs() <= 1e-9 * raw.max(1.0) {
            rounded
        } else {
            raw.ceil()
        };
        (count as usize).clamp(1, n.max(1))
    }
}
