//! Continuous CRF graph convolution.
//!
//! A layer maps input features to unaries `z = unary(input)`, computes
//! normalised similarities `s^` from guide features, then runs `T` mean-field
//! steps
//!
//! ```text
//! m_i = C sum_{j in N(i)} s^_ij h_j
//! h_i = (I + C)^-1 (z_i + m_i)
//! ```
//!
//! starting from `h = z`, and reads out `act(h)`.

mod covariance;
mod decode;
mod gradients;
mod similarity;
mod transform;
pub(crate) mod transform_file {
    pub(crate) use super::transform::{toml_line, LayerFile, TransformFile};
}

pub use covariance::{coordinate_descent_step, mean_field_covariance, mean_field_update};
pub use decode::decode_level;
pub use gradients::{crf_gradients, CrfGradients};
pub use similarity::{pairwise_similarity, SimilarityField};
pub use transform::{Activation, AffineLayer, PointwiseTransform, TransformGrad};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::energy::{CompatibilityMatrix, QuadraticEnergyModel};
use crate::cloud::NeighborGraph;
use crate::{Error, FeatureMatrix, Result};

/// Order in which nodes read their neighbours during one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    /// Every node reads the previous iterate.
    #[default]
    Jacobi,
    /// Nodes update in index order and read already-updated neighbours.
    GaussSeidel,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jacobi" => Ok(Schedule::Jacobi),
            "gauss-seidel" | "gauss_seidel" => Ok(Schedule::GaussSeidel),
            other => Err(Error::Invalid(format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrfConfig {
    pub steps: usize,
    pub schedule: Schedule,
    pub compat: CompatibilityMatrix,
    /// A step whose max-norm change is below this is not applied and iteration
    /// stops. `0` runs exactly `steps` steps; `inf` runs none.
    pub convergence_tol: f64,
    pub readout: Activation,
}

impl CrfConfig {
    /// One Jacobi step, `C = c^T c + 1e-4 I` with `c = I`, leaky-ReLU(0.1) readout.
    pub fn new(dim: usize) -> Self {
        Self {
            steps: 1,
            schedule: Schedule::Jacobi,
            compat: CompatibilityMatrix::initial(dim),
            convergence_tol: 0.0,
            readout: Activation::LeakyRelu(0.1),
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_compat(mut self, compat: CompatibilityMatrix) -> Self {
        self.compat = compat;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.convergence_tol = tol;
        self
    }

    pub fn with_readout(mut self, readout: Activation) -> Self {
        self.readout = readout;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Invalid("mean-field steps must be at least 1".into()));
        }
        if self.convergence_tol.is_nan() || self.convergence_tol < 0.0 {
            return Err(Error::Invalid(format!(
                "convergence tolerance must be >= 0, got {}",
                self.convergence_tol
            )));
        }
        Ok(())
    }
}

/// Observed features, current means and bookkeeping of a mean-field run.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousCrfState {
    pub z: FeatureMatrix,
    pub x: FeatureMatrix,
    pub sigma: Option<Vec<DMatrix<f64>>>,
    pub t: usize,
    pub energy_trace: Vec<f64>,
}

impl ContinuousCrfState {
    /// `X = Z`, no steps taken.
    pub fn new(z: FeatureMatrix) -> Self {
        Self {
            x: z.clone(),
            z,
            sigma: None,
            t: 0,
            energy_trace: Vec::new(),
        }
    }
}

/// `(I + C)^-1` and `C`, factored once per layer.
#[derive(Debug, Clone)]
pub(crate) struct Propagator {
    pub c: DMatrix<f64>,
    pub inv: DMatrix<f64>,
}

impl Propagator {
    pub fn new(compat: &CompatibilityMatrix) -> Self {
        let d = compat.dim();
        let c = compat.matrix().clone();
        let i_plus_c = DMatrix::identity(d, d) + &c;
        let inv = i_plus_c
            .try_inverse()
            .expect("I + C is positive definite");
        let inv = (&inv + inv.transpose()) * 0.5;
        Self { c, inv }
    }

    /// `out = (I + C)^-1 (z + C agg)`.
    #[inline]
    pub fn update(&self, z: &[f64], agg: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        let d = z.len();
        for r in 0..d {
            let mut acc = z[r];
            for k in 0..d {
                acc += self.c[(r, k)] * agg[k];
            }
            scratch[r] = acc;
        }
        for r in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += self.inv[(r, k)] * scratch[k];
            }
            out[r] = acc;
        }
    }
}

fn check_step_inputs(z: &FeatureMatrix, x: &FeatureMatrix, sim: &SimilarityField, compat: &CompatibilityMatrix) -> Result<()> {
    let d = compat.dim();
    z.check_shape(sim.num_nodes(), d, "observed features")?;
    x.check_shape(sim.num_nodes(), d, "latent features")
}

/// One sweep over all nodes; returns the new means.
pub(crate) fn propagate(
    z: &FeatureMatrix,
    x: &FeatureMatrix,
    sim: &SimilarityField,
    prop: &Propagator,
    schedule: Schedule,
) -> FeatureMatrix {
    let d = z.cols();
    let mut next = x.clone();
    if d == 0 {
        return next;
    }
    match schedule {
        Schedule::Jacobi => {
            next.as_mut_slice()
                .par_chunks_mut(d)
                .enumerate()
                .for_each(|(i, out)| {
                    let mut agg = vec![0.0; d];
                    let mut scratch = vec![0.0; d];
                    sim.aggregate(i, x, &mut agg);
                    prop.update(z.row(i), &agg, &mut scratch, out);
                });
        }
        Schedule::GaussSeidel => {
            let mut agg = vec![0.0; d];
            let mut scratch = vec![0.0; d];
            let mut out = vec![0.0; d];
            for i in 0..z.rows() {
                sim.aggregate(i, &next, &mut agg);
                prop.update(z.row(i), &agg, &mut scratch, &mut out);
                next.row_mut(i).copy_from_slice(&out);
            }
        }
    }
    next
}

/// One mean-field step. Appends the energy of the new iterate under
/// [`SimilarityField::energy_model`] to the trace.
pub fn crf_step(
    state: &ContinuousCrfState,
    sim: &SimilarityField,
    cfg: &CrfConfig,
) -> Result<ContinuousCrfState> {
    check_step_inputs(&state.z, &state.x, sim, &cfg.compat)?;
    let prop = Propagator::new(&cfg.compat);
    let model = sim.energy_model(&state.z, &cfg.compat)?;
    let x = propagate(&state.z, &state.x, sim, &prop, cfg.schedule);
    let mut energy_trace = state.energy_trace.clone();
    energy_trace.push(model.evaluate(&x)?);
    Ok(ContinuousCrfState {
        z: state.z.clone(),
        x,
        sigma: state.sigma.clone(),
        t: state.t + 1,
        energy_trace,
    })
}

/// Runs up to `cfg.steps` steps from `X = Z`, honouring the convergence tolerance.
pub fn run_mean_field(
    z: &FeatureMatrix,
    sim: &SimilarityField,
    cfg: &CrfConfig,
) -> Result<ContinuousCrfState> {
    cfg.validate()?;
    let mut state = ContinuousCrfState::new(z.clone());
    check_step_inputs(&state.z, &state.x, sim, &cfg.compat)?;
    let prop = Propagator::new(&cfg.compat);
    let model = sim.energy_model(z, &cfg.compat)?;
    for _ in 0..cfg.steps {
        let next = propagate(&state.z, &state.x, sim, &prop, cfg.schedule);
        if next.max_abs_diff(&state.x) < cfg.convergence_tol {
            break;
        }
        state.energy_trace.push(model.evaluate(&next)?);
        state.x = next;
        state.t += 1;
    }
    Ok(state)
}

/// Energy model the trace is measured against; see [`SimilarityField::energy_model`].
pub fn normalized_energy_model(
    sim: &SimilarityField,
    z: &FeatureMatrix,
    compat: &CompatibilityMatrix,
) -> Result<QuadraticEnergyModel> {
    sim.energy_model(z, compat)
}

/// Result of a full layer evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfOutput {
    /// `act(h^T)`.
    pub output: FeatureMatrix,
    /// Unaries `z`.
    pub unary: FeatureMatrix,
    /// Hidden state after the last applied step.
    pub hidden: FeatureMatrix,
    pub steps: usize,
    pub energy_trace: Vec<f64>,
}

/// The full layer: unary transform, similarity from guide features, mean-field
/// steps, readout activation.
pub fn crf_convolve(
    input: &FeatureMatrix,
    graph: &NeighborGraph,
    unary: &PointwiseTransform,
    projection: &PointwiseTransform,
    guide: &FeatureMatrix,
    cfg: &CrfConfig,
) -> Result<CrfOutput> {
    if unary.output_dim() != cfg.compat.dim() {
        return Err(Error::Shape(format!(
            "unary transform outputs {} channels, compatibility matrix is {}x{}",
            unary.output_dim(),
            cfg.compat.dim(),
            cfg.compat.dim()
        )));
    }
    if input.rows() != graph.num_nodes() {
        return Err(Error::Shape(format!(
            "{} input rows for {} graph nodes",
            input.rows(),
            graph.num_nodes()
        )));
    }
    let z = unary.forward(input)?;
    let sim = pairwise_similarity(guide, graph, projection)?;
    let state = run_mean_field(&z, &sim, cfg)?;
    Ok(CrfOutput {
        output: cfg.readout.apply_all(&state.x),
        unary: z,
        hidden: state.x,
        steps: state.t,
        energy_trace: state.energy_trace,
    })
}
