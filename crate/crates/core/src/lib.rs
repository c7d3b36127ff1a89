//! Continuous CRF graph convolution on point clouds.
//!
//! The crate is organised bottom-up:
//!
//! - [`cloud`]: point-cloud data model, PLY/CSV I/O, neighbour graphs,
//!   farthest-point sampling and kNN feature interpolation.
//! - [`energy`]: the quadratic fidelity + smoothness energy, its exact
//!   minimiser (used as an oracle) and the Dirichlet energy.
//! - [`crf_continuous`]: the CRF convolution layer itself (normalised
//!   similarity, message passing, mean-field covariance, gradients).
//! - [`crf_discrete`]: mean-field label refinement with a Gaussian kernel
//!   mixture and a label compatibility matrix.
//! - [`diffusion`]: the anisotropic graph diffusion baseline and the
//!   comparison report against the CRF layer.
//!
//! All numerics are `f64`. Every operation is a pure function of its inputs;
//! internal node-parallel loops accumulate in a fixed order so results do not
//! depend on the number of threads.

// Dense kernels index several buffers per loop; `!(x > 0.0)` also rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cloud;
pub mod crf_continuous;
pub mod crf_discrete;
pub mod diffusion;
pub mod energy;
mod error;
mod features;
pub mod fixtures;

pub use cloud::{NeighborGraph, PointCloud, SampleIndex};
pub use crf_continuous::{
    Activation, ContinuousCrfState, CrfConfig, PointwiseTransform, Schedule, SimilarityField,
};
pub use crf_discrete::{KernelMixture, LabelCompatibility, LabelField};
pub use diffusion::DiffusionConfig;
pub use energy::{CompatibilityMatrix, QuadraticEnergyModel};
pub use error::{Error, Result};
pub use features::FeatureMatrix;
pub use nalgebra;
