//! Discrete CRF label refinement over a neighbour graph.
//!
//! With unaries `p_i` (classifier probabilities) and approximate posteriors `q_i`,
//! one mean-field step computes
//!
//! ```text
//! m_i = sum_{j in N(i)} w_ij q_j
//! q_i = softmax(log p_i - C m_i)
//! ```
//!
//! where `w_ij` is a mixture of Gaussian kernels on per-point features.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::NeighborGraph;
use crate::crf_continuous::PointwiseTransform;
use crate::crf_continuous::transform_file::{toml_line, LayerFile, TransformFile};
use crate::{Error, FeatureMatrix, Result};

/// Probabilities are floored here before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// Tolerance on row sums of a stored label field.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Unaries `p` and the current posterior `q`, both `N x L` with rows on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField {
    p: FeatureMatrix,
    q: FeatureMatrix,
}

impl LabelField {
    /// Checks every row of `p` against the simplex with tolerance `tol`, renormalises,
    /// and starts with `q = p`.
    pub fn from_probabilities(p: FeatureMatrix, tol: f64) -> Result<Self> {
        if p.cols() == 0 && p.rows() > 0 {
            return Err(Error::Shape("label field needs at least one label".into()));
        }
        let mut p = p;
        for i in 0..p.rows() {
            let row = p.row_mut(i);
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::Invalid(format!("row {i}: probability {v} is not in [0, 1]")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > tol {
                return Err(Error::Invalid(format!(
                    "row {i}: probabilities sum to {total}, expected 1"
                )));
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(Self { q: p.clone(), p })
    }

    pub fn num_nodes(&self) -> usize {
        self.p.rows()
    }

    pub fn num_labels(&self) -> usize {
        self.p.cols()
    }

    pub fn p(&self) -> &FeatureMatrix {
        &self.p
    }

    pub fn q(&self) -> &FeatureMatrix {
        &self.q
    }

    /// Replaces the posterior, validating the simplex constraint.
    pub fn with_q(&self, q: FeatureMatrix) -> Result<Self> {
        q.check_shape(self.p.rows(), self.p.cols(), "posterior")?;
        let checked = Self::from_probabilities(q, SIMPLEX_TOL)?;
        Ok(Self {
            p: self.p.clone(),
            q: checked.p,
        })
    }

    /// Index of the largest posterior entry per node; ties go to the lower label.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.q
            .iter_rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// One Gaussian term `weight * exp(-|T(f_i) - T(f_j)|^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelComponent {
    pub projection: PointwiseTransform,
    pub weight: f64,
}

/// Mixture of Gaussian kernels on feature differences. Using a projection `P`
/// with `Sigma^-1 = P P^T` avoids inverting covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMixture {
    components: Vec<KernelComponent>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureFile {
    #[serde(rename = "component")]
    components: Vec<ComponentFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentFile {
    weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_dim: Option<usize>,
    #[serde(default, rename = "layer", skip_serializing_if = "Vec::is_empty")]
    layers: Vec<LayerFile>,
}

impl KernelMixture {
    pub fn new(components: Vec<KernelComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Invalid("kernel mixture needs at least one component".into()));
        }
        let d = components[0].projection.input_dim();
        for (m, c) in components.iter().enumerate() {
            if !c.weight.is_finite() {
                return Err(Error::Invalid(format!("component {m}: non-finite weight")));
            }
            if c.projection.input_dim() != d {
                return Err(Error::Shape(format!(
                    "component {m} expects {} channels, component 0 expects {d}",
                    c.projection.input_dim()
                )));
            }
        }
        Ok(Self { components })
    }

    /// Single component, `weight = 1`, `P = I`.
    pub fn unit(dim: usize) -> Self {
        Self {
            components: vec![KernelComponent {
                projection: PointwiseTransform::identity(dim),
                weight: 1.0,
            }],
        }
    }

    pub fn components(&self) -> &[KernelComponent] {
        &self.components
    }

    pub fn input_dim(&self) -> usize {
        self.components[0].projection.input_dim()
    }

    /// Negative mixture weights can produce negative edge weights.
    pub fn has_negative_weights(&self) -> bool {
        self.components.iter().any(|c| c.weight < 0.0)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: MixtureFile =
            toml::from_str(text).map_err(|e| Error::parse(toml_line(text, &e), e.message()))?;
        let comps = file
            .components
            .into_iter()
            .map(|c| {
                let file = TransformFile {
                    input_dim: c.input_dim,
                    layers: c.layers,
                };
                Ok(KernelComponent {
                    projection: file.into_transform()?,
                    weight: c.weight,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(comps)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        let file = MixtureFile {
            components: self
                .components
                .iter()
                .map(|c| {
                    let file = TransformFile::from_transform(&c.projection);
                    ComponentFile {
                        weight: c.weight,
                        input_dim: file.input_dim,
                        layers: file.layers,
                    }
                })
                .collect(),
        };
        toml::to_string(&file).expect("mixture serialises")
    }
}

/// Label compatibility matrix `C` (`L x L`, unconstrained).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelCompatibility {
    matrix: DMatrix<f64>,
}

impl LabelCompatibility {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Shape("label compatibility must be square".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite label compatibility".into()));
        }
        Ok(Self { matrix })
    }

    /// `C = I`: taken literally this penalises agreeing labels.
    pub fn identity(labels: usize) -> Self {
        Self {
            matrix: DMatrix::identity(labels, labels),
        }
    }

    /// `C = 11^T - I`: penalises disagreeing labels (Potts up to a softmax shift).
    pub fn potts_complement(labels: usize) -> Self {
        Self {
            matrix: DMatrix::from_element(labels, labels, 1.0) - DMatrix::identity(labels, labels),
        }
    }

    /// Square CSV matrix, one row per line.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let m = read_matrix_csv(path)?;
        Self::new(DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice()))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn num_labels(&self) -> usize {
        self.matrix.nrows()
    }
}

/// `w_ij = sum_m omega_m exp(-|T_m(f_i) - T_m(f_j)|^2)` for every edge.
pub fn kernel_weights(
    features: &FeatureMatrix,
    graph: &NeighborGraph,
    mix: &KernelMixture,
) -> Result<Vec<Vec<f64>>> {
    if features.rows() != graph.num_nodes() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} nodes",
            features.rows(),
            graph.num_nodes()
        )));
    }
    let projected = mix
        .components
        .iter()
        .map(|c| c.projection.forward(features))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..graph.num_nodes())
        .map(|i| {
            graph
                .neighbors(i)
                .iter()
                .map(|&j| {
                    mix.components
                        .iter()
                        .zip(&projected)
                        .map(|(c, g)| {
                            let d2: f64 = g.row(i).iter().zip(g.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                            c.weight * (-d2).exp()
                        })
                        .sum()
                })
                .collect()
        })
        .collect())
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|v| *v /= total);
}

fn check_step(field: &LabelField, graph: &NeighborGraph, weights: &[Vec<f64>], compat: &LabelCompatibility) -> Result<()> {
    if graph.num_nodes() != field.num_nodes() {
        return Err(Error::Shape(format!(
            "graph has {} nodes, label field has {}",
            graph.num_nodes(),
            field.num_nodes()
        )));
    }
    if weights.len() != graph.num_nodes()
        || weights.iter().zip(graph.neighbor_lists()).any(|(w, l)| w.len() != l.len())
    {
        return Err(Error::Shape("kernel weights must align with neighbour lists".into()));
    }
    if compat.num_labels() != field.num_labels() {
        return Err(Error::Shape(format!(
            "compatibility is {}x{} for {} labels",
            compat.num_labels(),
            compat.num_labels(),
            field.num_labels()
        )));
    }
    Ok(())
}

/// One mean-field step; every node reads the previous posterior.
pub fn discrete_crf_step(
    field: &LabelField,
    graph: &NeighborGraph,
    weights: &[Vec<f64>],
    compat: &LabelCompatibility,
) -> Result<LabelField> {
    check_step(field, graph, weights, compat)?;
    let l = field.num_labels();
    let mut q = FeatureMatrix::zeros(field.num_nodes(), l);
    if l == 0 {
        return Ok(field.clone());
    }
    let c = &compat.matrix;
    q.as_mut_slice().par_chunks_mut(l).enumerate().for_each(|(i, out)| {
        let mut msg = vec![0.0; l];
        for (&j, &w) in graph.neighbors(i).iter().zip(&weights[i]) {
            for (m, v) in msg.iter_mut().zip(field.q.row(j)) {
                *m += w * v;
            }
        }
        let logits: Vec<f64> = (0..l)
            .map(|a| {
                let penalty: f64 = (0..l).map(|b| c[(a, b)] * msg[b]).sum();
                field.p.get(i, a).max(PROBABILITY_FLOOR).ln() - penalty
            })
            .collect();
        softmax_into(&logits, out);
    });
    Ok(LabelField { p: field.p.clone(), q })
}

/// `q^0 = p`, then `steps` mean-field steps; returns the final field.
pub fn discrete_crf_infer(
    unaries: &LabelField,
    features: &FeatureMatrix,
    graph: &NeighborGraph,
    mix: &KernelMixture,
    compat: &LabelCompatibility,
    steps: usize,
) -> Result<LabelField> {
    if steps == 0 {
        return Err(Error::Invalid("discrete CRF needs at least one step".into()));
    }
    let weights = kernel_weights(features, graph, mix)?;
    let mut field = LabelField {
        p: unaries.p.clone(),
        q: unaries.p.clone(),
    };
    for _ in 0..steps {
        field = discrete_crf_step(&field, graph, &weights, compat)?;
    }
    Ok(field)
}

/// Reads an `N x L` numeric CSV without header.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text)
}

pub fn parse_matrix_csv(text: &str) -> Result<FeatureMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let row = raw
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::parse(idx + 1, format!("non-numeric field {:?}", t.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(
                    idx + 1,
                    format!("expected {} columns, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    FeatureMatrix::from_rows(&rows)
}

pub fn format_matrix_csv(m: &FeatureMatrix) -> String {
    let mut out = String::new();
    for row in m.iter_rows() {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}
