//! The quadratic fidelity + smoothness energy over a neighbour graph.
//!
//! For observed features `Z` and latent features `X` the energy is
//!
//! ```text
//! E(X) = sum_i f_i |x_i - z_i|^2
//!      + sum_i sum_{j in N(i)} s_ij (x_i - x_j)^T C (x_i - x_j)
//!      + sum_i a_i x_i^T C x_i
//! ```
//!
//! with fidelity weights `f_i` (default 1) and zero-anchor weights `a_i`
//! (default 0). Every directed edge contributes once, so a mutual pair
//! contributes twice. [`solve_exact`] returns the minimiser by assembling the
//! normal equations from the gradient of exactly this expression.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::cloud::NeighborGraph;
use crate::{Error, FeatureMatrix, Result};

/// Default `epsilon` in `C = c^T c + epsilon I`.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Systems with at most this many unknowns (`N * d`) are solved densely.
pub const DENSE_SOLVE_LIMIT: usize = 4096;

/// Channel coupling matrix `C`, positive definite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityMatrix {
    param: Option<DMatrix<f64>>,
    epsilon: f64,
    realized: DMatrix<f64>,
}

impl CompatibilityMatrix {
    /// `C = c^T c + epsilon I`.
    pub fn from_param(c: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        if !c.is_square() {
            return Err(Error::Shape(format!(
                "compatibility parameter must be square, got {}x{}",
                c.nrows(),
                c.ncols()
            )));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite compatibility parameter".into()));
        }
        let d = c.nrows();
        let mut realized = c.transpose() * &c + DMatrix::identity(d, d) * epsilon;
        // c^T c is symmetric in exact arithmetic; remove rounding asymmetry
        let sym = (&realized + realized.transpose()) * 0.5;
        realized = sym;
        Ok(Self {
            param: Some(c),
            epsilon,
            realized,
        })
    }

    /// `c = I`, `epsilon = 1e-4`: the usual initialisation.
    pub fn initial(d: usize) -> Self {
        Self::from_param(DMatrix::identity(d, d), DEFAULT_EPSILON).expect("identity is valid")
    }

    /// Exactly `C = I`, with no learnable parameter.
    pub fn identity(d: usize) -> Self {
        Self {
            param: None,
            epsilon: 0.0,
            realized: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.realized.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.realized
    }

    /// The parameter `c`, `None` for the exact identity.
    pub fn param(&self) -> Option<&DMatrix<f64>> {
        self.param.as_ref()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn is_exact_identity(&self) -> bool {
        self.param.is_none()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return f64::INFINITY;
        }
        SymmetricEigen::new(self.realized.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// `y = C x` for a row slice.
    #[inline]
    pub(crate) fn apply(&self, x: &[f64], y: &mut [f64]) {
        let d = self.dim();
        for (r, out) in y.iter_mut().enumerate().take(d) {
            let mut acc = 0.0;
            for (c, xv) in x.iter().enumerate() {
                acc += self.realized[(r, c)] * xv;
            }
            *out = acc;
        }
    }

    /// `x^T C x`.
    #[inline]
    pub(crate) fn quad(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut acc = 0.0;
        for r in 0..d {
            let mut row = 0.0;
            for c in 0..d {
                row += self.realized[(r, c)] * x[c];
            }
            acc += x[r] * row;
        }
        acc
    }
}

/// Energy over a weighted graph. Edge weights of `graph` are the similarities
/// `s_ij`; an unweighted graph means `s_ij = 1` on every edge.
#[derive(Debug, Clone)]
pub struct QuadraticEnergyModel {
    graph: NeighborGraph,
    compat: CompatibilityMatrix,
    observed: FeatureMatrix,
    fidelity: Option<Vec<f64>>,
    anchor: Option<Vec<f64>>,
}

impl QuadraticEnergyModel {
    pub fn new(
        graph: NeighborGraph,
        compat: CompatibilityMatrix,
        observed: FeatureMatrix,
    ) -> Result<Self> {
        if observed.rows() != graph.num_nodes() {
            return Err(Error::Shape(format!(
                "graph has {} nodes, observed features have {} rows",
                graph.num_nodes(),
                observed.rows()
            )));
        }
        if observed.cols() != compat.dim() {
            return Err(Error::Shape(format!(
                "features have {} channels, compatibility matrix is {}x{}",
                observed.cols(),
                compat.dim(),
                compat.dim()
            )));
        }
        if !observed.is_finite() {
            return Err(Error::Invalid("non-finite observed features".into()));
        }
        Ok(Self {
            graph,
            compat,
            observed,
            fidelity: None,
            anchor: None,
        })
    }

    /// Per-node fidelity weights `f_i > 0`.
    pub fn with_fidelity_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        check_node_weights(&weights, self.graph.num_nodes(), "fidelity", true)?;
        self.fidelity = Some(weights);
        Ok(self)
    }

    /// Per-node weights `a_i >= 0` of the `x_i^T C x_i` term.
    pub fn with_anchor_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        check_node_weights(&weights, self.graph.num_nodes(), "anchor", false)?;
        self.anchor = Some(weights);
        Ok(self)
    }

    pub fn graph(&self) -> &NeighborGraph {
        &self.graph
    }

    pub fn compat(&self) -> &CompatibilityMatrix {
        &self.compat
    }

    pub fn observed(&self) -> &FeatureMatrix {
        &self.observed
    }

    fn fidelity(&self, i: usize) -> f64 {
        self.fidelity.as_ref().map_or(1.0, |f| f[i])
    }

    fn anchor(&self, i: usize) -> f64 {
        self.anchor.as_ref().map_or(0.0, |a| a[i])
    }

    /// Evaluates the energy at `x`.
    pub fn evaluate(&self, x: &FeatureMatrix) -> Result<f64> {
        x.check_shape(self.observed.rows(), self.observed.cols(), "latent features")?;
        let d = self.observed.cols();
        let mut diff = vec![0.0; d];
        let mut fidelity = 0.0;
        let mut smooth = 0.0;
        let mut anchor = 0.0;
        for i in 0..self.observed.rows() {
            let (xi, zi) = (x.row(i), self.observed.row(i));
            fidelity += self.fidelity(i) * xi.iter().zip(zi).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let a = self.anchor(i);
            if a != 0.0 {
                anchor += a * self.compat.quad(xi);
            }
        }
        for (i, j, s) in self.graph.edges() {
            if s == 0.0 {
                continue;
            }
            for ((o, a), b) in diff.iter_mut().zip(x.row(i)).zip(x.row(j)) {
                *o = a - b;
            }
            smooth += s * self.compat.quad(&diff);
        }
        Ok(fidelity + smooth + anchor)
    }

    /// Analytic gradient `dE/dX`.
    pub fn gradient(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        x.check_shape(self.observed.rows(), self.observed.cols(), "latent features")?;
        let d = self.observed.cols();
        let mut g = FeatureMatrix::zeros(x.rows(), d);
        let mut diff = vec![0.0; d];
        let mut cdiff = vec![0.0; d];
        for i in 0..x.rows() {
            let f = self.fidelity(i);
            let a = self.anchor(i);
            self.compat.apply(x.row(i), &mut cdiff);
            let zi = self.observed.row(i);
            for (k, gv) in g.row_mut(i).iter_mut().enumerate() {
                *gv += 2.0 * f * (x.get(i, k) - zi[k]) + 2.0 * a * cdiff[k];
            }
        }
        for (i, j, s) in self.graph.edges() {
            for ((o, a), b) in diff.iter_mut().zip(x.row(i)).zip(x.row(j)) {
                *o = a - b;
            }
            self.compat.apply(&diff, &mut cdiff);
            for k in 0..d {
                let v = 2.0 * s * cdiff[k];
                g.as_mut_slice()[i * d + k] += v;
                g.as_mut_slice()[j * d + k] -= v;
            }
        }
        Ok(g)
    }

    /// Node-level coupling of the normal equations: diagonal fidelity, and
    /// the symmetrised Laplacian `D~ - W~` (with `w~_ij = s_ij + s_ji`) plus anchors,
    /// which multiplies `C`.
    fn coupling(&self) -> (Vec<f64>, DMatrix<f64>) {
        let n = self.graph.num_nodes();
        let mut lap = DMatrix::zeros(n, n);
        for (i, j, s) in self.graph.edges() {
            lap[(i, i)] += s;
            lap[(j, j)] += s;
            lap[(i, j)] -= s;
            lap[(j, i)] -= s;
        }
        for i in 0..n {
            lap[(i, i)] += self.anchor(i);
        }
        ((0..n).map(|i| self.fidelity(i)).collect(), lap)
    }

    /// Applies the normal-equation operator `A X = F X + (L~ (x) C) X`.
    fn apply_operator(&self, x: &FeatureMatrix, out: &mut FeatureMatrix) {
        let d = self.observed.cols();
        let n = x.rows();
        // fidelity and anchors
        let mut cx = vec![0.0; d];
        for i in 0..n {
            self.compat.apply(x.row(i), &mut cx);
            let (f, a) = (self.fidelity(i), self.anchor(i));
            let xi = x.row(i).to_vec();
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = f * xi[k] + a * cx[k];
            }
        }
        let mut diff = vec![0.0; d];
        let mut cdiff = vec![0.0; d];
        for (i, j, s) in self.graph.edges() {
            for ((o, a), b) in diff.iter_mut().zip(x.row(i)).zip(x.row(j)) {
                *o = a - b;
            }
            self.compat.apply(&diff, &mut cdiff);
            for k in 0..d {
                out.as_mut_slice()[i * d + k] += s * cdiff[k];
                out.as_mut_slice()[j * d + k] -= s * cdiff[k];
            }
        }
    }

    fn rhs(&self) -> FeatureMatrix {
        let mut b = self.observed.clone();
        for i in 0..b.rows() {
            let f = self.fidelity(i);
            b.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        b
    }

    /// Max-norm residual of the normal equations at `x`.
    pub fn residual(&self, x: &FeatureMatrix) -> f64 {
        let mut ax = FeatureMatrix::zeros(x.rows(), x.cols());
        self.apply_operator(x, &mut ax);
        ax.max_abs_diff(&self.rhs())
    }
}

fn check_node_weights(w: &[f64], n: usize, what: &str, strictly_positive: bool) -> Result<()> {
    if w.len() != n {
        return Err(Error::Shape(format!("{} {what} weights for {n} nodes", w.len())));
    }
    let ok = |v: f64| v.is_finite() && if strictly_positive { v > 0.0 } else { v >= 0.0 };
    if let Some(i) = w.iter().position(|&v| !ok(v)) {
        return Err(Error::Invalid(format!("{what} weight {} at node {i}", w[i])));
    }
    Ok(())
}

/// Energy of `x` under `model`.
pub fn evaluate_energy(model: &QuadraticEnergyModel, x: &FeatureMatrix) -> Result<f64> {
    model.evaluate(x)
}

/// Exact minimiser of the energy.
///
/// Solves `(F + (D~ - W~ + diag(a)) (x) C) X = F Z` where `w~_ij = s_ij + s_ji`, which is
/// the stationarity condition of [`QuadraticEnergyModel::evaluate`] for any (possibly
/// asymmetric) similarity. With unit fidelity and no anchors this is `(I + D - W) X = Z`.
/// Dense Cholesky up to [`DENSE_SOLVE_LIMIT`] unknowns, conjugate gradients above.
pub fn solve_exact(model: &QuadraticEnergyModel) -> Result<FeatureMatrix> {
    let n = model.observed.rows();
    let d = model.observed.cols();
    let x = if n * d <= DENSE_SOLVE_LIMIT {
        solve_dense(model)?
    } else {
        solve_cg(model)?
    };
    let tolerance = 1e-8 * (1.0 + model.rhs().max_abs());
    let residual = model.residual(&x);
    if !(residual <= tolerance) {
        return Err(Error::SolveFailed {
            residual,
            tolerance,
        });
    }
    Ok(x)
}

fn solve_dense(model: &QuadraticEnergyModel) -> Result<FeatureMatrix> {
    let n = model.observed.rows();
    let d = model.observed.cols();
    let (fid, lap) = model.coupling();
    let c = model.compat.matrix();
    let mut a = DMatrix::zeros(n * d, n * d);
    for i in 0..n {
        for k in 0..d {
            a[(i * d + k, i * d + k)] += fid[i];
        }
        for j in 0..n {
            let l = lap[(i, j)];
            if l == 0.0 {
                continue;
            }
            for r in 0..d {
                for s in 0..d {
                    a[(i * d + r, j * d + s)] += l * c[(r, s)];
                }
            }
        }
    }
    let b = DVector::from_column_slice(model.rhs().as_slice());
    let sol = match a.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => a
            .lu()
            .solve(&b)
            .ok_or(Error::SolveFailed {
                residual: f64::INFINITY,
                tolerance: 0.0,
            })?,
    };
    FeatureMatrix::from_vec(n, d, sol.as_slice().to_vec())
}

fn solve_cg(model: &QuadraticEnergyModel) -> Result<FeatureMatrix> {
    let n = model.observed.rows();
    let d = model.observed.cols();
    let b = model.rhs();
    // Jacobi preconditioner from the block diagonal's scalar diagonal
    let (fid, lap) = model.coupling_diagonal();
    let cdiag: Vec<f64> = (0..d).map(|k| model.compat.matrix()[(k, k)]).collect();
    let precond: Vec<f64> = (0..n * d)
        .map(|idx| {
            let (i, k) = (idx / d, idx % d);
            1.0 / (fid[i] + lap[i] * cdiag[k])
        })
        .collect();

    let mut x = b.clone();
    let mut ax = FeatureMatrix::zeros(n, d);
    model.apply_operator(&x, &mut ax);
    let mut r: Vec<f64> = b.as_slice().iter().zip(ax.as_slice()).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(&precond).map(|(r, p)| r * p).collect();
    let mut p = FeatureMatrix::from_vec(n, d, z.clone())?;
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let tol = 1e-11 * (1.0 + b.max_abs());
    let max_iter = 20 * n * d + 100;
    let mut ap = FeatureMatrix::zeros(n, d);
    for _ in 0..max_iter {
        if r.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= tol {
            break;
        }
        model.apply_operator(&p, &mut ap);
        let pap: f64 = p.as_slice().iter().zip(ap.as_slice()).map(|(a, b)| a * b).sum();
        let alpha = rz / pap;
        for ((xv, pv), (rv, apv)) in x
            .as_mut_slice()
            .iter_mut()
            .zip(p.as_slice())
            .zip(r.iter_mut().zip(ap.as_slice()))
        {
            *xv += alpha * pv;
            *rv -= alpha * apv;
        }
        for ((zv, rv), pc) in z.iter_mut().zip(&r).zip(&precond) {
            *zv = rv * pc;
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for (pv, zv) in p.as_mut_slice().iter_mut().zip(&z) {
            *pv = zv + beta * *pv;
        }
    }
    Ok(x)
}

impl QuadraticEnergyModel {
    fn coupling_diagonal(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.graph.num_nodes();
        let mut diag: Vec<f64> = (0..n).map(|i| self.anchor(i)).collect();
        for (i, j, s) in self.graph.edges() {
            diag[i] += s;
            diag[j] += s;
        }
        ((0..n).map(|i| self.fidelity(i)).collect(), diag)
    }
}

/// Solves `(I + D - W) X = Z` with `W(i, j) = s_ij C` and `D(i, i) = sum_j s_ij C`, taking
/// the edge weights as given (no symmetrisation).
///
/// Its solution is the fixed point of the per-node update
/// `x_i = (I + sum_j w_ij)^-1 (z_i + sum_j w_ij x_j)` for any similarity, symmetric or not.
/// Dense LU; meant for oracle use at small sizes.
pub fn solve_fixed_point_system(
    graph: &NeighborGraph,
    compat: &CompatibilityMatrix,
    z: &FeatureMatrix,
) -> Result<FeatureMatrix> {
    let n = graph.num_nodes();
    let d = compat.dim();
    z.check_shape(n, d, "observed features")?;
    let c = compat.matrix();
    let mut a = DMatrix::<f64>::identity(n * d, n * d);
    for (i, j, s) in graph.edges() {
        for r in 0..d {
            for q in 0..d {
                a[(i * d + r, i * d + q)] += s * c[(r, q)];
                a[(i * d + r, j * d + q)] -= s * c[(r, q)];
            }
        }
    }
    let b = DVector::from_column_slice(z.as_slice());
    let sol = a.clone().lu().solve(&b).ok_or(Error::SolveFailed {
        residual: f64::INFINITY,
        tolerance: 0.0,
    })?;
    let residual = (&a * &sol - &b).amax();
    let tolerance = 1e-8 * (1.0 + z.max_abs());
    if residual > tolerance {
        return Err(Error::SolveFailed {
            residual,
            tolerance,
        });
    }
    FeatureMatrix::from_vec(n, d, sol.as_slice().to_vec())
}

fn normalized_rows(graph: &NeighborGraph, i: usize) -> Option<(f64, Vec<f64>)> {
    let list = graph.neighbors(i);
    if list.is_empty() {
        return None;
    }
    let w: Vec<f64> = graph
        .weights(i)
        .map_or_else(|| vec![1.0; list.len()], <[f64]>::to_vec);
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return None;
    }
    Some((total, w))
}

/// `h^T L h` with the random-walk Laplacian `L = I - D^-1 W`.
///
/// Nodes without neighbours (or with zero total weight) keep an identity row.
/// `L` is not symmetric in general, so the value can be slightly negative for
/// asymmetric weight patterns; it is returned as computed.
pub fn dirichlet_energy(graph: &NeighborGraph, h: &[f64]) -> Result<f64> {
    if h.len() != graph.num_nodes() {
        return Err(Error::Shape(format!(
            "signal has {} entries for {} nodes",
            h.len(),
            graph.num_nodes()
        )));
    }
    let mut acc = 0.0;
    for (i, hi) in h.iter().enumerate() {
        let lh = match normalized_rows(graph, i) {
            None => *hi,
            Some((total, w)) => {
                let avg: f64 = graph
                    .neighbors(i)
                    .iter()
                    .zip(&w)
                    .map(|(&j, wij)| wij * h[j])
                    .sum::<f64>()
                    / total;
                hi - avg
            }
        };
        acc += hi * lh;
    }
    Ok(acc)
}

/// Channel-wise sum of [`dirichlet_energy`].
pub fn dirichlet_energy_features(graph: &NeighborGraph, h: &FeatureMatrix) -> Result<f64> {
    let mut total = 0.0;
    let mut column = vec![0.0; h.rows()];
    for k in 0..h.cols() {
        for (i, c) in column.iter_mut().enumerate() {
            *c = h.get(i, k);
        }
        total += dirichlet_energy(graph, &column)?;
    }
    Ok(total)
}

/// `L h` for every channel, with the same conventions as [`dirichlet_energy`].
pub fn laplacian_apply(graph: &NeighborGraph, h: &FeatureMatrix) -> Result<FeatureMatrix> {
    h.check_shape(graph.num_nodes(), h.cols(), "signal")?;
    let mut out = h.clone();
    for i in 0..h.rows() {
        if let Some((total, w)) = normalized_rows(graph, i) {
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                let avg: f64 = graph
                    .neighbors(i)
                    .iter()
                    .zip(&w)
                    .map(|(&j, wij)| wij * h.get(j, k))
                    .sum::<f64>()
                    / total;
                *o -= avg;
            }
        }
    }
    Ok(out)
}
