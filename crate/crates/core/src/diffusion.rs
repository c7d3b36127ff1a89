//! Anisotropic graph diffusion `h <- h - c L h` with `L = I - D^-1 W`, and a
//! side-by-side comparison against the CRF layer with `C = I`.
//!
//! With `c = 1/2` one diffusion step is `(h_i + sum_j w_ij h_j) / 2`, which is
//! also the first CRF step from `h = z`. Afterwards diffusion feeds back its
//! previous state while the CRF keeps adding the original `z`, so diffusion
//! drifts to a per-component constant and the CRF stays anchored to `z`.
//! Coefficients above 1 can overshoot; `(0, 1]` keeps the max principle.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::cloud::NeighborGraph;
use crate::crf_continuous::{crf_step, ContinuousCrfState, CrfConfig, SimilarityField};
use crate::energy::{dirichlet_energy_features, laplacian_apply, CompatibilityMatrix};
use crate::{Activation, Error, FeatureMatrix, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionConfig {
    pub c: f64,
    pub steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { c: 0.5, steps: 1 }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c.is_finite() && self.c >= 0.0) {
            return Err(Error::Invalid(format!(
                "diffusion coefficient must be finite and non-negative, got {}",
                self.c
            )));
        }
        Ok(())
    }
}

/// Default steady-state tolerance.
pub const STEADY_TOL: f64 = 1e-10;

fn row_weights(graph: &NeighborGraph, i: usize) -> Option<(f64, Vec<f64>)> {
    let list = graph.neighbors(i);
    if list.is_empty() {
        return None;
    }
    let w = graph
        .weights(i)
        .map_or_else(|| vec![1.0; list.len()], <[f64]>::to_vec);
    let total: f64 = w.iter().sum();
    (total > 0.0).then_some((total, w))
}

/// `h_i <- h_i - c sum_j w^_ij (h_i - h_j)` with row-normalised weights.
/// Isolated nodes are unchanged.
pub fn diffusion_step(h: &FeatureMatrix, graph: &NeighborGraph, c: f64) -> Result<FeatureMatrix> {
    h.check_shape(graph.num_nodes(), h.cols(), "heat field")?;
    let d = h.cols();
    let mut out = h.clone();
    if d == 0 {
        return Ok(out);
    }
    out.as_mut_slice().par_chunks_mut(d).enumerate().for_each(|(i, row)| {
        if let Some((total, w)) = row_weights(graph, i) {
            for (k, o) in row.iter_mut().enumerate() {
                let hi = h.get(i, k);
                let flux: f64 = graph
                    .neighbors(i)
                    .iter()
                    .zip(&w)
                    .map(|(&j, wij)| wij / total * (hi - h.get(j, k)))
                    .sum();
                *o = hi - c * flux;
            }
        }
    });
    Ok(out)
}

/// Iterates [`diffusion_step`] until the max-norm change drops below `tol`.
/// Returns the final field and the number of steps applied.
pub fn diffuse_to_steady(
    h: &FeatureMatrix,
    graph: &NeighborGraph,
    c: f64,
    tol: f64,
    max_steps: usize,
) -> Result<(FeatureMatrix, usize)> {
    if !(tol > 0.0) {
        return Err(Error::Invalid(format!("tolerance must be positive, got {tol}")));
    }
    let mut cur = h.clone();
    for step in 0..max_steps {
        let next = diffusion_step(&cur, graph, c)?;
        let change = next.max_abs_diff(&cur);
        if change < tol {
            return Ok((cur, step));
        }
        cur = next;
    }
    let residual = diffusion_step(&cur, graph, c)?.max_abs_diff(&cur);
    if residual < tol {
        return Ok((cur, max_steps));
    }
    Err(Error::NotConverged {
        steps: max_steps,
        residual,
    })
}

/// Default step budget for [`diffuse_to_steady`]: `10 N`.
pub fn default_max_steps(num_nodes: usize) -> usize {
    10 * num_nodes.max(1)
}

/// Max-norm of `L h`.
pub fn laplacian_residual(graph: &NeighborGraph, h: &FeatureMatrix) -> Result<f64> {
    Ok(laplacian_apply(graph, h)?.max_abs())
}

/// One row of the comparison report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonRow {
    pub step: usize,
    pub crf_fidelity: f64,
    pub crf_dirichlet: f64,
    pub diff_fidelity: f64,
    pub diff_dirichlet: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    /// Max-norm difference between the first CRF step and the first diffusion step
    /// over nodes with neighbours. An isolated node's CRF step is `z_i / 2` while
    /// diffusion leaves it at `z_i`.
    pub first_step_gap: f64,
    pub crf_final: FeatureMatrix,
    pub diffusion_final: FeatureMatrix,
}

impl ComparisonReport {
    /// `step,crf_fidelity,crf_dirichlet,diff_fidelity,diff_dirichlet`, one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,crf_fidelity,crf_dirichlet,diff_fidelity,diff_dirichlet\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.step, r.crf_fidelity, r.crf_dirichlet, r.diff_fidelity, r.diff_dirichlet
            );
        }
        out
    }
}

/// Runs the CRF layer (`C = I`, Jacobi) and `c = 1/2` diffusion side by side from
/// `h^0 = Z` for `steps` steps. Fidelity is `|X - Z|_F`; the Dirichlet energy uses
/// the normalised similarities as weights.
pub fn compare_crf_vs_diffusion(
    z: &FeatureMatrix,
    sim: &SimilarityField,
    steps: usize,
) -> Result<ComparisonReport> {
    if steps == 0 {
        return Err(Error::Invalid("comparison needs at least one step".into()));
    }
    let graph = sim.weighted_graph();
    let cfg = CrfConfig::new(z.cols())
        .with_compat(CompatibilityMatrix::identity(z.cols()))
        .with_readout(Activation::Identity)
        .with_steps(1);
    let mut crf = ContinuousCrfState::new(z.clone());
    let mut diff = z.clone();
    let mut rows = Vec::with_capacity(steps);
    let mut first_step_gap = 0.0;
    for step in 1..=steps {
        crf = crf_step(&crf, sim, &cfg)?;
        diff = diffusion_step(&diff, &graph, 0.5)?;
        if step == 1 {
            first_step_gap = (0..z.rows())
                .filter(|&i| !sim.row(i).is_empty())
                .flat_map(|i| crf.x.row(i).iter().zip(diff.row(i)).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
        }
        rows.push(ComparisonRow {
            step,
            crf_fidelity: crf.x.frobenius_diff(z),
            crf_dirichlet: dirichlet_energy_features(&graph, &crf.x)?,
            diff_fidelity: diff.frobenius_diff(z),
            diff_dirichlet: dirichlet_energy_features(&graph, &diff)?,
        });
    }
    Ok(ComparisonReport {
        rows,
        first_step_gap,
        crf_final: crf.x,
        diffusion_final: diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> NeighborGraph {
        NeighborGraph::new(vec![vec![1], vec![0]]).unwrap()
    }

    #[test]
    fn constant_field_is_stationary() {
        let h = FeatureMatrix::column(&[3.0, 3.0]);
        assert_eq!(diffusion_step(&h, &pair(), 0.5).unwrap(), h);
        let (out, steps) = diffuse_to_steady(&h, &pair(), 0.5, 1e-10, 20).unwrap();
        assert_eq!(steps, 0);
        assert_eq!(out, h);
    }

    #[test]
    fn pair_half_step_averages() {
        let h = FeatureMatrix::column(&[0.0, 2.0]);
        assert_eq!(diffusion_step(&h, &pair(), 0.5).unwrap().as_slice(), &[1.0, 1.0]);
        assert_eq!(diffusion_step(&h, &pair(), 0.0).unwrap(), h);
    }

    #[test]
    fn isolated_nodes_unchanged() {
        let g = NeighborGraph::new(vec![vec![1], vec![0], vec![]]).unwrap();
        let h = FeatureMatrix::column(&[0.0, 2.0, 7.0]);
        assert_eq!(diffusion_step(&h, &g, 0.5).unwrap().get(2, 0), 7.0);
    }

    #[test]
    fn non_convergence_reported() {
        let g = NeighborGraph::new(vec![vec![1, 2], vec![0], vec![0]]).unwrap();
        let h = FeatureMatrix::column(&[0.0, 1.0, 5.0]);
        assert!(matches!(
            diffuse_to_steady(&h, &g, 0.5, 1e-14, 3),
            Err(Error::NotConverged { steps: 3, .. })
        ));
    }

    #[test]
    fn report_csv_header() {
        let sim = SimilarityField::from_normalized(pair(), vec![vec![1.0], vec![1.0]]).unwrap();
        let rep = compare_crf_vs_diffusion(&FeatureMatrix::column(&[0.0, 2.0]), &sim, 3).unwrap();
        let csv = rep.to_csv();
        assert!(csv.starts_with("step,crf_fidelity,crf_dirichlet,diff_fidelity,diff_dirichlet\n"));
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(rep.first_step_gap, 0.0);
    }
}
