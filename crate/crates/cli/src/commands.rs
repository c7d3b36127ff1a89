//! Subcommand bodies. Data goes to files under the output directory; anything
//! meant for a human goes to stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use crfconv::cloud::{
    dilated_knn_graph, farthest_point_sample, radius_graph, read_cloud, symmetrize, write_cloud,
};
use crfconv::crf_continuous::{crf_convolve, mean_field_covariance, pairwise_similarity, run_mean_field};
use crfconv::crf_discrete::{discrete_crf_infer, format_matrix_csv, read_matrix_csv};
use crfconv::diffusion::{compare_crf_vs_diffusion, diffusion_step};
use crfconv::energy::solve_exact;
use crfconv::nalgebra::DMatrix;
use crfconv::{
    CompatibilityMatrix, CrfConfig, FeatureMatrix, KernelMixture, LabelCompatibility, LabelField,
    NeighborGraph, PointCloud, PointwiseTransform, Schedule, SimilarityField,
};

use crate::config::RunConfig;

/// Row sums of an input probability file may be off by this much.
pub const PROBABILITY_ROW_TOL: f64 = 1e-6;

/// The input cloud, or the planted-cluster fixture when no path is set, after
/// optional farthest-point subsampling.
pub fn load_cloud(cfg: &RunConfig) -> Result<PointCloud> {
    let cloud = match &cfg.input.path {
        Some(p) => read_cloud(p, cfg.input_format(p)?)?,
        None => {
            let s = &cfg.input.synthetic;
            crfconv::fixtures::planted_clusters(s.points, s.clusters, s.spread, s.noise, cfg.seed)?.cloud
        }
    };
    ensure!(!cloud.is_empty(), "input cloud has no points");
    if cfg.graph.sample_ratio < 1.0 {
        let seed_index = (cfg.seed % cloud.len() as u64) as usize;
        let s = farthest_point_sample(&cloud, cfg.graph.sample_ratio, seed_index)?;
        return Ok(cloud.select(&s.selected));
    }
    Ok(cloud)
}

pub fn build_neighbor_graph(cfg: &RunConfig, cloud: &PointCloud) -> Result<NeighborGraph> {
    let g = match cfg.graph.radius {
        Some(r) => radius_graph(cloud, r)?,
        None => dilated_knn_graph(cloud, cfg.graph.k, cfg.graph.dilation)?,
    };
    Ok(if cfg.graph.symmetrize { symmetrize(&g) } else { g })
}

fn prepare_output(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.output.dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_text(path: PathBuf, text: &str) -> Result<PathBuf> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn require_features(cloud: &PointCloud) -> Result<()> {
    if cloud.feature_dim() == 0 {
        bail!("the input cloud carries no per-point features to smooth");
    }
    Ok(())
}

/// Unary and projection transforms plus the derived layer configuration.
pub struct Layer {
    pub unary: PointwiseTransform,
    pub projection: PointwiseTransform,
    pub crf: CrfConfig,
}

pub fn layer(cfg: &RunConfig, cloud: &PointCloud) -> Result<Layer> {
    let d_in = cloud.feature_dim();
    let unary = match &cfg.crf.unary {
        Some(p) => PointwiseTransform::load(p)?,
        None => PointwiseTransform::identity(d_in),
    };
    let projection = match &cfg.crf.projection {
        Some(p) => PointwiseTransform::load(p)?,
        None => PointwiseTransform::identity(d_in),
    };
    ensure!(
        unary.input_dim() == d_in,
        "unary transform expects {} channels, the cloud has {d_in}",
        unary.input_dim()
    );
    ensure!(
        projection.input_dim() == d_in,
        "projection expects {} channels, the cloud has {d_in}",
        projection.input_dim()
    );
    let d = unary.output_dim();
    let compat = CompatibilityMatrix::from_param(DMatrix::identity(d, d), cfg.crf.epsilon)?;
    let crf = CrfConfig::new(d)
        .with_steps(cfg.crf.steps)
        .with_schedule(cfg.schedule()?)
        .with_compat(compat)
        .with_tol(cfg.crf.tol)
        .with_readout(cfg.activation()?);
    crf.validate()?;
    Ok(Layer {
        unary,
        projection,
        crf,
    })
}

/// `build-graph`: `graph.csv` with one `src,dst,distance` row per directed edge.
pub fn build_graph(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let cloud = load_cloud(cfg)?;
    let graph = build_neighbor_graph(cfg, &cloud)?;
    let lengths = graph.edge_lengths(&cloud)?;
    let mut out = String::from("src,dst,distance\n");
    for (i, row) in lengths.iter().enumerate() {
        for (&j, len) in graph.neighbors(i).iter().zip(row) {
            let _ = writeln!(out, "{i},{j},{len}");
        }
    }
    let dir = prepare_output(cfg)?;
    eprintln!("{} points, {} edges", graph.num_nodes(), graph.num_edges());
    Ok(vec![write_text(dir.join("graph.csv"), &out)?])
}

fn energy_trace_csv(initial: f64, trace: &[f64]) -> String {
    let mut out = String::from("step,energy\n");
    let _ = writeln!(out, "0,{initial}");
    for (t, e) in trace.iter().enumerate() {
        let _ = writeln!(out, "{},{e}", t + 1);
    }
    out
}

/// `smooth`: `smoothed.<ext>` (positions plus layer output) and `trace.csv`.
pub fn smooth(cfg: &RunConfig, check_exact: bool) -> Result<Vec<PathBuf>> {
    let cloud = load_cloud(cfg)?;
    require_features(&cloud)?;
    let graph = build_neighbor_graph(cfg, &cloud)?;
    let l = layer(cfg, &cloud)?;
    let guide = cloud.features();
    let out = crf_convolve(cloud.features(), &graph, &l.unary, &l.projection, guide, &l.crf)?;
    let sim = pairwise_similarity(guide, &graph, &l.projection)?;
    let model = sim.energy_model(&out.unary, &l.crf.compat)?;
    let initial = model.evaluate(&out.unary)?;
    eprintln!("applied {} of {} steps", out.steps, l.crf.steps);
    if check_exact {
        let exact = solve_exact(&model)?;
        eprintln!(
            "max deviation from the exact minimiser: {:e}",
            out.hidden.max_abs_diff(&exact)
        );
        if !graph.is_symmetric() {
            eprintln!("note: the graph is not symmetric, so the iteration's fixed point need not be the minimiser");
        }
    }
    let dir = prepare_output(cfg)?;
    let cloud_path = dir.join(format!("smoothed.{}", cfg.cloud_extension()));
    write_cloud(&cloud.with_features(out.output)?, &cloud_path, cfg.output_format()?)?;
    let trace = write_text(dir.join("trace.csv"), &energy_trace_csv(initial, &out.energy_trace))?;
    Ok(vec![cloud_path, trace])
}

fn label_compat(cfg: &RunConfig, labels: usize) -> Result<LabelCompatibility> {
    let c = match cfg.discrete.compat.as_str() {
        "identity" => LabelCompatibility::identity(labels),
        "potts-complement" => LabelCompatibility::potts_complement(labels),
        path => LabelCompatibility::load_csv(path)?,
    };
    ensure!(
        c.num_labels() == labels,
        "compatibility matrix is {0}x{0} but there are {labels} labels",
        c.num_labels()
    );
    Ok(c)
}

/// `refine-labels`: `refined.csv` (probabilities) and `labels.csv` (argmax per point).
///
/// The kernel acts on the cloud features, or on positions when the cloud has none.
pub fn refine_labels(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let cloud = load_cloud(cfg)?;
    let Some(prob_path) = &cfg.input.probabilities else {
        bail!("refine-labels needs a probability file (input.probabilities or --probabilities)");
    };
    ensure!(
        cfg.graph.sample_ratio == 1.0,
        "refine-labels keeps one probability row per input point; set graph.sample_ratio = 1"
    );
    let p = read_matrix_csv(prob_path).with_context(|| format!("reading {}", prob_path.display()))?;
    ensure!(
        p.rows() == cloud.len(),
        "{} probability rows for {} points",
        p.rows(),
        cloud.len()
    );
    if let Some(l) = cfg.discrete.labels {
        ensure!(p.cols() == l, "probability file has {} labels, config says {l}", p.cols());
    }
    let field = LabelField::from_probabilities(p, PROBABILITY_ROW_TOL)
        .with_context(|| format!("validating {}", prob_path.display()))?;
    let features = if cloud.feature_dim() > 0 {
        cloud.features().clone()
    } else {
        FeatureMatrix::from_rows(&cloud.positions().iter().map(|p| p.to_vec()).collect::<Vec<_>>())?
    };
    let mix = match &cfg.discrete.kernel {
        Some(path) => KernelMixture::load(path)?,
        None => KernelMixture::unit(features.cols()),
    };
    let compat = label_compat(cfg, field.num_labels())?;
    let graph = build_neighbor_graph(cfg, &cloud)?;
    let out = discrete_crf_infer(&field, &features, &graph, &mix, &compat, cfg.discrete.steps)?;
    let changed = out
        .hard_labels()
        .iter()
        .zip(field.hard_labels())
        .filter(|(a, b)| *a != b)
        .count();
    eprintln!("{changed} of {} hard labels changed", cloud.len());
    let mut labels = String::new();
    for l in out.hard_labels() {
        let _ = writeln!(labels, "{l}");
    }
    let dir = prepare_output(cfg)?;
    Ok(vec![
        write_text(dir.join("refined.csv"), &format_matrix_csv(out.q()))?,
        write_text(dir.join("labels.csv"), &labels)?,
    ])
}

/// Similarity field of the cloud features on the configured graph.
fn feature_field(cfg: &RunConfig, cloud: &PointCloud, l: &Layer) -> Result<SimilarityField> {
    let graph = build_neighbor_graph(cfg, cloud)?;
    Ok(pairwise_similarity(cloud.features(), &graph, &l.projection)?)
}

/// `diffuse-compare`: `compare.csv` with per-step fidelity and Dirichlet energy of
/// both processes.
pub fn diffuse_compare(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let cloud = load_cloud(cfg)?;
    require_features(&cloud)?;
    let l = layer(cfg, &cloud)?;
    let sim = feature_field(cfg, &cloud, &l)?;
    let z = l.unary.forward(cloud.features())?;
    let report = compare_crf_vs_diffusion(&z, &sim, cfg.diffusion.steps)?;
    eprintln!("first-step gap between the two processes: {:e}", report.first_step_gap);
    let dir = prepare_output(cfg)?;
    Ok(vec![write_text(dir.join("compare.csv"), &report.to_csv())?])
}

/// One row of the step sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub t: usize,
    pub steps: usize,
    pub energy: f64,
    pub fidelity: f64,
    pub diffusion_fidelity: f64,
    pub wall_ms: f64,
}

/// Runs the configured layer for every step count in `crf.sweep`.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let cloud = load_cloud(cfg)?;
    require_features(&cloud)?;
    let l = layer(cfg, &cloud)?;
    let sim = feature_field(cfg, &cloud, &l)?;
    let z = l.unary.forward(cloud.features())?;
    let model = sim.energy_model(&z, &l.crf.compat)?;
    let weighted = sim.weighted_graph();
    let mut rows = Vec::with_capacity(cfg.crf.sweep.len());
    for &t in &cfg.crf.sweep {
        let start = Instant::now();
        let state = run_mean_field(&z, &sim, &l.crf.clone().with_steps(t))?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let mut h = z.clone();
        for _ in 0..t {
            h = diffusion_step(&h, &weighted, cfg.diffusion.c)?;
        }
        rows.push(SweepRow {
            t,
            steps: state.t,
            energy: match state.energy_trace.last() {
                Some(e) => *e,
                None => model.evaluate(&z)?,
            },
            fidelity: state.x.frobenius_diff(&z),
            diffusion_fidelity: h.frobenius_diff(&z),
            wall_ms,
        });
    }
    Ok(rows)
}

/// `sweep-steps`: `sweep.csv` with `t,steps,energy,fidelity,diffusion_fidelity`.
pub fn sweep_steps(cfg: &RunConfig, timing: bool) -> Result<Vec<PathBuf>> {
    let rows = sweep(cfg)?;
    let mut out = String::from("t,steps,energy,fidelity,diffusion_fidelity");
    out.push_str(if timing { ",wall_ms\n" } else { "\n" });
    for r in &rows {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.t, r.steps, r.energy, r.fidelity, r.diffusion_fidelity
        );
        if timing {
            let _ = write!(out, ",{}", r.wall_ms);
        }
        out.push('\n');
        eprintln!("T = {}: {:.3} ms", r.t, r.wall_ms);
    }
    let dir = prepare_output(cfg)?;
    Ok(vec![write_text(dir.join("sweep.csv"), &out)?])
}

/// Outcome of one oracle comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.value <= self.threshold
    }
}

/// Compares the configured layer on the input against its oracles.
pub fn oracle_checks(cfg: &RunConfig) -> Result<Vec<OracleCheck>> {
    let cloud = load_cloud(cfg)?;
    require_features(&cloud)?;
    let l = layer(cfg, &cloud)?;
    let sim = feature_field(cfg, &cloud, &l)?;
    ensure!(
        sim.graph().is_symmetric(),
        "check-oracle needs a symmetric graph (graph.symmetrize = true)"
    );
    let z = l.unary.forward(cloud.features())?;
    let model = sim.energy_model(&z, &l.crf.compat)?;
    let exact = solve_exact(&model)?;
    let mut checks = Vec::new();

    let converged = run_mean_field(
        &z,
        &sim,
        &l.crf.clone().with_schedule(Schedule::Jacobi).with_steps(1_000_000).with_tol(1e-12),
    )?;
    checks.push(OracleCheck {
        name: "jacobi_vs_exact_relative_error",
        value: converged.x.frobenius_diff(&exact) / exact.frobenius().max(f64::MIN_POSITIVE),
        threshold: 1e-8,
    });

    let gs = run_mean_field(
        &z,
        &sim,
        &l.crf.clone().with_schedule(Schedule::GaussSeidel).with_tol(0.0),
    )?;
    let mut prev = model.evaluate(&z)?;
    let mut worst_rise = 0.0f64;
    for e in &gs.energy_trace {
        worst_rise = worst_rise.max((e - prev) / (1.0 + prev.abs()));
        prev = *e;
    }
    checks.push(OracleCheck {
        name: "gauss_seidel_max_energy_increase",
        value: worst_rise,
        threshold: 1e-10,
    });

    let first = compare_crf_vs_diffusion(&z, &sim, 1)?;
    checks.push(OracleCheck {
        name: "first_step_diffusion_gap",
        value: first.first_step_gap,
        threshold: 1e-12,
    });

    let covs = mean_field_covariance(&sim, &l.crf.compat);
    let worst_cov = covs
        .iter()
        .map(|s| {
            let asym = (s - s.transpose()).amax();
            let min_eig = s.clone().symmetric_eigen().eigenvalues.min();
            if min_eig > 0.0 {
                asym
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    checks.push(OracleCheck {
        name: "covariance_asymmetry_if_positive_definite",
        value: worst_cov,
        threshold: 0.0,
    });
    Ok(checks)
}

/// `check-oracle`: `oracle.csv` with `check,value,threshold,pass`; fails when any
/// check fails.
pub fn check_oracle(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let checks = oracle_checks(cfg)?;
    let mut out = String::from("check,value,threshold,pass\n");
    for c in &checks {
        let _ = writeln!(out, "{},{},{},{}", c.name, c.value, c.threshold, c.passed());
        eprintln!(
            "{} {}: {:e} (threshold {:e})",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
    }
    let dir = prepare_output(cfg)?;
    let path = write_text(dir.join("oracle.csv"), &out)?;
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    if !failed.is_empty() {
        bail!("oracle checks failed: {}", failed.join(", "));
    }
    Ok(vec![path])
}
