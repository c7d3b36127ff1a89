use rayon::prelude::*;

use super::{squared_distance, PointCloud};
use crate::{Error, FeatureMatrix, Result};

/// A fine point closer than this to a coarse point copies its feature exactly.
pub const COINCIDENT_DISTANCE: f64 = 1e-12;

/// Interpolation stencil for each fine point: `(coarse index, weight)` pairs
/// with non-negative weights summing to one.
pub fn knn_interpolation_weights(
    coarse: &[[f64; 3]],
    fine: &[[f64; 3]],
    k: usize,
) -> Result<Vec<Vec<(usize, f64)>>> {
    if coarse.is_empty() {
        return Err(Error::Invalid("coarse cloud must not be empty".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let k = k.min(coarse.len());
    Ok(fine
        .par_iter()
        .map(|q| {
            let mut cand: Vec<(f64, usize)> = coarse
                .iter()
                .enumerate()
                .map(|(j, c)| (squared_distance(q, c), j))
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            if cand[0].0.sqrt() < COINCIDENT_DISTANCE {
                return vec![(cand[0].1, 1.0)];
            }
            let total: f64 = cand.iter().map(|(d2, _)| 1.0 / d2).sum();
            cand.iter().map(|&(d2, j)| (j, (1.0 / d2) / total)).collect()
        })
        .collect())
}

/// Inverse-squared-distance weighted mean of the `k` nearest coarse features.
pub fn knn_interpolate(
    coarse: &PointCloud,
    fine_positions: &[[f64; 3]],
    k: usize,
) -> Result<FeatureMatrix> {
    let stencils = knn_interpolation_weights(coarse.positions(), fine_positions, k)?;
    let d = coarse.feature_dim();
    let src = coarse.features();
    let mut out = FeatureMatrix::zeros(fine_positions.len(), d);
    for (i, stencil) in stencils.iter().enumerate() {
        let row = out.row_mut(i);
        if let [(j, _)] = stencil.as_slice() {
            row.copy_from_slice(src.row(*j));
            continue;
        }
        for &(j, w) in stencil {
            for (o, v) in row.iter_mut().zip(src.row(j)) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}
