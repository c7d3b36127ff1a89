use rayon::prelude::*;

use super::{squared_distance, NeighborGraph, PointCloud};
use crate::{Error, Result};

/// All other points sorted by `(distance, index)`.
fn sorted_candidates(cloud: &PointCloud, i: usize) -> Vec<(f64, usize)> {
    let p = cloud.positions();
    let mut cand: Vec<(f64, usize)> = (0..p.len())
        .filter(|&j| j != i)
        .map(|j| (squared_distance(&p[i], &p[j]), j))
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cand
}

fn check_nonempty(cloud: &PointCloud) -> Result<()> {
    if cloud.is_empty() {
        return Err(Error::Invalid("graph construction needs at least one point".into()));
    }
    Ok(())
}

/// Each node lists its `min(k, N-1)` nearest other points, nearest first.
/// Ties go to the lower index.
pub fn knn_graph(cloud: &PointCloud, k: usize) -> Result<NeighborGraph> {
    dilated_knn_graph(cloud, k, 1)
}

/// Keeps distance ranks `dil, 2*dil, .., k*dil` (1-indexed, self excluded) out of the
/// `k*dil` nearest neighbours. Truncates when fewer candidates exist.
pub fn dilated_knn_graph(cloud: &PointCloud, k: usize, dil: usize) -> Result<NeighborGraph> {
    check_nonempty(cloud)?;
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if dil == 0 {
        return Err(Error::Invalid("dilation must be at least 1".into()));
    }
    let neighbors = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let cand = sorted_candidates(cloud, i);
            let window = cand.len().min(k * dil);
            cand[..window]
                .iter()
                .skip(dil - 1)
                .step_by(dil)
                .map(|&(_, j)| j)
                .collect()
        })
        .collect();
    NeighborGraph::new(neighbors)
}

/// Neighbours are the points with squared distance `<= r`, nearest first.
pub fn radius_graph(cloud: &PointCloud, r: f64) -> Result<NeighborGraph> {
    if !(r > 0.0) {
        return Err(Error::Invalid(format!("radius must be positive, got {r}")));
    }
    let neighbors = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            sorted_candidates(cloud, i)
                .into_iter()
                .take_while(|&(d2, _)| d2 <= r)
                .map(|(_, j)| j)
                .collect()
        })
        .collect();
    NeighborGraph::new(neighbors)
}

/// Union of each edge with its reverse. Neighbour order: original list first,
/// then added reverse edges by ascending index. Weights are dropped.
pub fn symmetrize(graph: &NeighborGraph) -> NeighborGraph {
    let n = graph.num_nodes();
    let mut lists: Vec<Vec<usize>> = graph.neighbor_lists().to_vec();
    let mut extra: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, list) in graph.neighbor_lists().iter().enumerate() {
        for &j in list {
            if !graph.neighbors(j).contains(&i) {
                extra[j].push(i);
            }
        }
    }
    for (list, mut add) in lists.iter_mut().zip(extra) {
        add.sort_unstable();
        add.dedup();
        list.extend(add);
    }
    NeighborGraph::new(lists).expect("symmetrising a valid graph keeps it valid")
}
