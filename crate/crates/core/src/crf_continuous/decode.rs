use super::{crf_convolve, CrfConfig, CrfOutput, PointwiseTransform};
use crate::cloud::{knn_interpolate, NeighborGraph, PointCloud};
use crate::{Error, FeatureMatrix, Result};

/// One decoder level: upsample coarse features to the fine points by kNN
/// interpolation, run the CRF layer on the fine graph with the fine cloud's own
/// features as the similarity guide, and concatenate the guide onto the result.
///
/// Output width is `d + d'` where `d` is the unary width and `d'` the guide width.
pub fn decode_level(
    coarse: &PointCloud,
    fine: &PointCloud,
    fine_graph: &NeighborGraph,
    k: usize,
    unary: &PointwiseTransform,
    projection: &PointwiseTransform,
    cfg: &CrfConfig,
) -> Result<(FeatureMatrix, CrfOutput)> {
    if coarse.is_empty() || fine.is_empty() {
        return Err(Error::Invalid("decode needs non-empty coarse and fine clouds".into()));
    }
    if fine_graph.num_nodes() != fine.len() {
        return Err(Error::Shape(format!(
            "fine graph has {} nodes for {} fine points",
            fine_graph.num_nodes(),
            fine.len()
        )));
    }
    let upsampled = knn_interpolate(coarse, fine.positions(), k)?;
    let out = crf_convolve(&upsampled, fine_graph, unary, projection, fine.features(), cfg)?;
    let restored = out.output.hconcat(fine.features())?;
    Ok((restored, out))
}
