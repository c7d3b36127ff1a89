//! Independent reference implementations and random instance generators shared by
//! the integration and acceptance tests. Nothing here calls into the algorithms it
//! checks; everything is brute force over plain vectors.

#![allow(clippy::needless_range_loop)]

#![allow(dead_code)]

use crfconv::nalgebra::DMatrix;
use crfconv::{CompatibilityMatrix, FeatureMatrix, NeighborGraph, PointCloud, SimilarityField};
use rand::Rng;

pub fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

/// All-pairs sort, then keep ranks `dil, 2 dil, .., k dil` (1-indexed).
pub fn brute_knn(pos: &[[f64; 3]], k: usize, dil: usize) -> Vec<Vec<usize>> {
    (0..pos.len())
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..pos.len())
                .filter(|&j| j != i)
                .map(|j| (sq_dist(&pos[i], &pos[j]), j))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (1..=k)
                .map(|r| r * dil)
                .filter(|&rank| rank <= all.len())
                .map(|rank| all[rank - 1].1)
                .collect()
        })
        .collect()
}

pub fn brute_radius(pos: &[[f64; 3]], r: f64) -> Vec<Vec<usize>> {
    (0..pos.len())
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..pos.len())
                .filter(|&j| j != i)
                .map(|j| (sq_dist(&pos[i], &pos[j]), j))
                .filter(|&(d, _)| d <= r)
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            all.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Checks that every element of `selected` after the first is a farthest point from
/// the prefix before it, lowest index on ties, and that no index repeats.
pub fn fps_replay_ok(pos: &[[f64; 3]], selected: &[usize]) -> Result<(), String> {
    for t in 1..selected.len() {
        let prefix = &selected[..t];
        let min_to_prefix = |j: usize| {
            prefix
                .iter()
                .map(|&s| sq_dist(&pos[j], &pos[s]))
                .fold(f64::INFINITY, f64::min)
        };
        let mut best = None::<(f64, usize)>;
        for j in 0..pos.len() {
            if prefix.contains(&j) {
                continue;
            }
            let d = min_to_prefix(j);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, j));
            }
        }
        let (_, want) = best.ok_or("ran out of candidates")?;
        if selected[t] != want {
            return Err(format!("step {t}: picked {} but farthest is {want}", selected[t]));
        }
    }
    let mut seen = selected.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != selected.len() {
        return Err("repeated index".into());
    }
    Ok(())
}

/// Gaussian elimination with partial pivoting on a dense row-major system.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Fixed point of `x_i = (I + C)^-1 (z_i + C sum_j s^_ij x_j)` (isolated nodes use
/// `(I + C)^-1 z_i`), i.e. the linear system `(I + C) x_i - C sum_j s^_ij x_j = z_i`.
pub fn message_passing_fixed_point(sim: &SimilarityField, c: &DMatrix<f64>, z: &FeatureMatrix) -> FeatureMatrix {
    let (n, d) = (z.rows(), z.cols());
    let mut a = vec![vec![0.0; n * d]; n * d];
    for i in 0..n {
        for r in 0..d {
            a[i * d + r][i * d + r] += 1.0;
            for q in 0..d {
                a[i * d + r][i * d + q] += c[(r, q)];
            }
        }
        for (&j, &s) in sim.graph().neighbors(i).iter().zip(sim.row(i)) {
            for r in 0..d {
                for q in 0..d {
                    a[i * d + r][j * d + q] -= s * c[(r, q)];
                }
            }
        }
    }
    let x = gauss_solve(a, z.as_slice().to_vec());
    FeatureMatrix::from_vec(n, d, x).unwrap()
}

/// `sum_i f_i |x_i - z_i|^2 + sum_(i,j) s_ij (x_i - x_j)^T C (x_i - x_j) + sum_i a_i x_i^T C x_i`.
pub fn energy_oracle(
    edges: &[(usize, usize, f64)],
    fidelity: &[f64],
    anchor: &[f64],
    c: &DMatrix<f64>,
    z: &FeatureMatrix,
    x: &FeatureMatrix,
) -> f64 {
    let d = z.cols();
    let quad = |v: &[f64]| -> f64 {
        let mut acc = 0.0;
        for r in 0..d {
            for q in 0..d {
                acc += v[r] * c[(r, q)] * v[q];
            }
        }
        acc
    };
    let mut e = 0.0;
    for i in 0..z.rows() {
        e += fidelity[i] * x.row(i).iter().zip(z.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        e += anchor[i] * quad(x.row(i));
    }
    for &(i, j, s) in edges {
        let diff: Vec<f64> = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a - b).collect();
        e += s * quad(&diff);
    }
    e
}

/// Energy of [`SimilarityField::energy_model`] computed from scratch.
pub fn field_energy_oracle(sim: &SimilarityField, c: &DMatrix<f64>, z: &FeatureMatrix, x: &FeatureMatrix) -> f64 {
    let m = sim.mass();
    let mut edges = Vec::new();
    let mut anchor = vec![0.0; sim.num_nodes()];
    for i in 0..sim.num_nodes() {
        if sim.row(i).is_empty() {
            anchor[i] = m[i];
        }
        for (&j, &s) in sim.graph().neighbors(i).iter().zip(sim.row(i)) {
            edges.push((i, j, 0.5 * m[i] * s));
        }
    }
    energy_oracle(&edges, m, &anchor, c, z, x)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; one sample per call keeps the generator stream simple
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> FeatureMatrix {
    FeatureMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| scale * normal(rng)).collect()).unwrap()
}

pub fn random_positions(rng: &mut impl Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
}

/// Random cloud; a fraction of points is snapped to a coarse lattice so exact
/// distance ties and coincident points occur.
pub fn random_cloud_with_ties(rng: &mut impl Rng, n: usize) -> PointCloud {
    let pos = (0..n)
        .map(|_| {
            if rng.random_bool(0.3) {
                [
                    rng.random_range(0..3) as f64,
                    rng.random_range(0..3) as f64,
                    0.0,
                ]
            } else {
                [rng.random(), rng.random(), rng.random()]
            }
        })
        .collect();
    PointCloud::from_positions(pos).unwrap()
}

/// Random symmetric edge set where each unordered pair is present with probability `p`.
pub fn random_symmetric_lists(rng: &mut impl Rng, n: usize, p: f64) -> Vec<Vec<usize>> {
    let mut lists = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                lists[i].push(j);
                lists[j].push(i);
            }
        }
    }
    lists
}

/// Normalised field from symmetric raw similarities on a symmetric graph, so that
/// `m_i s^_ij = m_j s^_ji`.
pub fn random_reversible_field(rng: &mut impl Rng, n: usize, p: f64) -> SimilarityField {
    let lists = random_symmetric_lists(rng, n, p);
    let mut raw = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = rng.random_range(0.05..1.0);
            raw[i][j] = s;
            raw[j][i] = s;
        }
    }
    let s: Vec<Vec<f64>> = lists
        .iter()
        .enumerate()
        .map(|(i, l)| l.iter().map(|&j| raw[i][j]).collect())
        .collect();
    SimilarityField::from_similarities(NeighborGraph::new(lists).unwrap(), s).unwrap()
}

/// Normalised field with independent random rows; generally not reversible.
pub fn random_asymmetric_field(rng: &mut impl Rng, n: usize, p: f64) -> SimilarityField {
    let lists: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && rng.random_bool(p)).collect())
        .collect();
    let s: Vec<Vec<f64>> = lists
        .iter()
        .map(|l| {
            let raw: Vec<f64> = l.iter().map(|_| rng.random_range(0.05..1.0)).collect();
            let t: f64 = raw.iter().sum();
            raw.iter().map(|v| v / t).collect()
        })
        .collect();
    SimilarityField::from_normalized(NeighborGraph::new(lists).unwrap(), s).unwrap()
}

/// Random `c` with entries of size about `scale / sqrt(d)`.
pub fn random_compat(rng: &mut impl Rng, d: usize, scale: f64) -> CompatibilityMatrix {
    let s = scale / (d as f64).sqrt();
    let c = DMatrix::from_fn(d, d, |_, _| s * normal(rng));
    CompatibilityMatrix::from_param(c, 1e-4).unwrap()
}

/// Symmetric eigenvalues by cyclic Jacobi rotations.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| m[(i, j)]).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = cs * akp - sn * akq;
                    a[k][q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = cs * apk - sn * aqk;
                    a[q][k] = sn * apk + cs * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Central difference of `f` along every entry of `x`.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let h = 1e-5 * x[k].abs().max(1.0);
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)` maximised over entries.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn frob_rel(a: &FeatureMatrix, b: &FeatureMatrix) -> f64 {
    a.frobenius_diff(b) / b.frobenius().max(1e-300)
}

/// Relative errors of every analytic cotangent against central differences on one
/// random layer configuration.
#[derive(Debug)]
pub struct GradientCheck {
    pub input: f64,
    pub guide: f64,
    pub unary: f64,
    pub projection: f64,
    pub compat: f64,
}

impl GradientCheck {
    pub fn worst(&self) -> f64 {
        [self.input, self.guide, self.unary, self.projection, self.compat]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn gradient_check(rng: &mut impl Rng, n: usize, d: usize, steps: usize) -> GradientCheck {
    use crfconv::crf_continuous::{crf_convolve, crf_gradients, AffineLayer};
    use crfconv::nalgebra::DVector;
    use crfconv::{Activation, CrfConfig};

    let d_in = rng.random_range(1..=4);
    let d_guide = rng.random_range(1..=4);
    let d_proj = rng.random_range(1..=3);
    let pos = random_positions(rng, n);
    let cloud = PointCloud::from_positions(pos).unwrap();
    let k = 3.min(n - 1).max(1);
    let graph = crfconv::cloud::symmetrize(&crfconv::cloud::knn_graph(&cloud, k).unwrap());

    fn layer(rng: &mut impl Rng, out: usize, inp: usize, act: Activation) -> AffineLayer {
        let w = DMatrix::from_fn(out, inp, |_, _| 0.7 * normal(rng));
        let b = DVector::from_fn(out, |_, _| 0.3 * normal(rng));
        AffineLayer::new(w, b, act).unwrap()
    }
    let hidden = rng.random_range(1..=4);
    let unary = crfconv::PointwiseTransform::new(vec![
        layer(rng, hidden, d_in, Activation::LeakyRelu(0.2)),
        layer(rng, d, hidden, Activation::Identity),
    ])
    .unwrap();
    let projection =
        crfconv::PointwiseTransform::new(vec![layer(rng, d_proj, d_guide, Activation::Identity)]).unwrap();
    let c_param = DMatrix::from_fn(d, d, |_, _| 0.6 * normal(rng) / (d as f64).sqrt());
    let input = random_matrix(rng, n, d_in, 1.0);
    let guide = random_matrix(rng, n, d_guide, 0.6);
    let upstream = random_matrix(rng, n, d, 1.0);
    let cfg_for = |c: &DMatrix<f64>| {
        CrfConfig::new(d)
            .with_steps(steps)
            .with_compat(CompatibilityMatrix::from_param(c.clone(), 1e-4).unwrap())
            .with_readout(Activation::LeakyRelu(0.1))
    };
    let loss = |input: &FeatureMatrix,
                unary: &crfconv::PointwiseTransform,
                projection: &crfconv::PointwiseTransform,
                guide: &FeatureMatrix,
                c: &DMatrix<f64>| {
        let out = crf_convolve(input, &graph, unary, projection, guide, &cfg_for(c)).unwrap();
        out.output.as_slice().iter().zip(upstream.as_slice()).map(|(a, b)| a * b).sum::<f64>()
    };
    let grads = crf_gradients(&input, &graph, &unary, &projection, &guide, &cfg_for(&c_param), &upstream).unwrap();

    let fd_input = central_diff(input.as_slice(), |v| {
        loss(&FeatureMatrix::from_vec(n, d_in, v.to_vec()).unwrap(), &unary, &projection, &guide, &c_param)
    });
    let fd_guide = central_diff(guide.as_slice(), |v| {
        loss(&input, &unary, &projection, &FeatureMatrix::from_vec(n, d_guide, v.to_vec()).unwrap(), &c_param)
    });

    // flatten every layer's weights then biases
    let flatten = |t: &crfconv::PointwiseTransform| -> Vec<f64> {
        let mut v = Vec::new();
        for l in t.layers() {
            v.extend(l.weight.iter());
            v.extend(l.bias.iter());
        }
        v
    };
    let rebuild = |t: &crfconv::PointwiseTransform, v: &[f64]| {
        let mut t = t.clone();
        let mut at = 0;
        for l in t.layers_mut() {
            for w in l.weight.iter_mut() {
                *w = v[at];
                at += 1;
            }
            for b in l.bias.iter_mut() {
                *b = v[at];
                at += 1;
            }
        }
        t
    };
    let flatten_grad = |g: &crfconv::crf_continuous::TransformGrad| -> Vec<f64> {
        let mut v = Vec::new();
        for (w, b) in g.weights.iter().zip(&g.biases) {
            v.extend(w.iter());
            v.extend(b.iter());
        }
        v
    };
    let fd_unary = central_diff(&flatten(&unary), |v| loss(&input, &rebuild(&unary, v), &projection, &guide, &c_param));
    let fd_proj = central_diff(&flatten(&projection), |v| {
        loss(&input, &unary, &rebuild(&projection, v), &guide, &c_param)
    });
    let fd_c = central_diff(c_param.as_slice(), |v| {
        loss(&input, &unary, &projection, &guide, &DMatrix::from_column_slice(d, d, v))
    });

    GradientCheck {
        input: norm_rel_err(grads.input.as_slice(), &fd_input),
        guide: norm_rel_err(grads.guide.as_slice(), &fd_guide),
        unary: norm_rel_err(&flatten_grad(&grads.unary), &fd_unary),
        projection: norm_rel_err(&flatten_grad(&grads.projection), &fd_proj),
        compat: norm_rel_err(grads.compat_param.as_ref().unwrap().as_slice(), &fd_c),
    }
}
