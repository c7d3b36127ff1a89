//! Reverse-mode gradients of the unrolled Jacobi iteration.

use nalgebra::DMatrix;

use super::similarity::pairwise_similarity_taped;
use super::transform::{PointwiseTransform, TransformGrad};
use super::{propagate, CrfConfig, Propagator, Schedule};
use crate::cloud::NeighborGraph;
use crate::{Error, FeatureMatrix, Result};

/// Cotangents of a scalar loss through [`super::crf_convolve`].
#[derive(Debug, Clone, PartialEq)]
pub struct CrfGradients {
    pub input: FeatureMatrix,
    pub guide: FeatureMatrix,
    pub unary: TransformGrad,
    pub projection: TransformGrad,
    /// W.r.t. `c` in `C = c^T c + epsilon I`; `None` for the exact identity.
    pub compat_param: Option<DMatrix<f64>>,
    /// Steps that were applied in the forward pass.
    pub steps: usize,
}

/// Gradients of `<upstream, crf_convolve(..).output>`.
///
/// Only the Jacobi schedule is differentiable here.
pub fn crf_gradients(
    input: &FeatureMatrix,
    graph: &NeighborGraph,
    unary: &PointwiseTransform,
    projection: &PointwiseTransform,
    guide: &FeatureMatrix,
    cfg: &CrfConfig,
    upstream: &FeatureMatrix,
) -> Result<CrfGradients> {
    if cfg.schedule != Schedule::Jacobi {
        return Err(Error::Unsupported(
            "gradients are only available for the jacobi schedule".into(),
        ));
    }
    cfg.validate()?;
    let d = cfg.compat.dim();
    if unary.output_dim() != d {
        return Err(Error::Shape(format!(
            "unary transform outputs {} channels, compatibility matrix is {d}x{d}",
            unary.output_dim()
        )));
    }
    let n = graph.num_nodes();
    upstream.check_shape(n, d, "upstream cotangent")?;

    // forward with tape
    let (z, unary_tape) = unary.forward_taped(input)?;
    z.check_shape(n, d, "unary output")?;
    let (sim, sim_tape) = pairwise_similarity_taped(guide, graph, projection)?;
    let prop = Propagator::new(&cfg.compat);
    let mut hs = vec![z.clone()];
    for _ in 0..cfg.steps {
        let last = hs.last().expect("non-empty");
        let next = propagate(&z, last, &sim, &prop, Schedule::Jacobi);
        if next.max_abs_diff(last) < cfg.convergence_tol {
            break;
        }
        hs.push(next);
    }
    let steps = hs.len() - 1;

    // readout
    let h_final = hs.last().expect("non-empty");
    let mut g = FeatureMatrix::zeros(n, d);
    for (idx, gv) in g.as_mut_slice().iter_mut().enumerate() {
        *gv = upstream.as_slice()[idx] * cfg.readout.derivative(h_final.as_slice()[idx]);
    }

    let mut dz = FeatureMatrix::zeros(n, d);
    let mut ds: Vec<Vec<f64>> = sim.rows().iter().map(|r| vec![0.0; r.len()]).collect();
    let mut dc = DMatrix::<f64>::zeros(d, d);
    let c = &prop.c;
    let a = &prop.inv;
    let mut r = vec![0.0; d];
    let mut u = vec![0.0; d];
    let mut agg = vec![0.0; d];
    for t in (1..=steps).rev() {
        let (h_prev, h_cur) = (&hs[t - 1], &hs[t]);
        let mut g_prev = FeatureMatrix::zeros(n, d);
        for i in 0..n {
            let gi = g.row(i);
            for p in 0..d {
                r[p] = (0..d).map(|q| a[(p, q)] * gi[q]).sum();
            }
            for (o, rv) in dz.row_mut(i).iter_mut().zip(&r) {
                *o += rv;
            }
            sim.aggregate(i, h_prev, &mut agg);
            let hi = h_cur.row(i);
            for p in 0..d {
                for q in 0..d {
                    dc[(p, q)] += r[p] * (agg[q] - hi[q]);
                }
            }
            for q in 0..d {
                u[q] = (0..d).map(|p| c[(p, q)] * r[p]).sum();
            }
            for (k, (&j, &s)) in sim.graph().neighbors(i).iter().zip(sim.row(i)).enumerate() {
                let hj = h_prev.row(j);
                ds[i][k] += u.iter().zip(hj).map(|(a, b)| a * b).sum::<f64>();
                for (o, uv) in g_prev.row_mut(j).iter_mut().zip(&u) {
                    *o += s * uv;
                }
            }
        }
        g = g_prev;
    }
    // h^0 = z
    for (o, v) in dz.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *o += v;
    }

    // softmax and squared distances
    let proj = &sim_tape.projected;
    let dp = proj.cols();
    let mut dproj = FeatureMatrix::zeros(n, dp);
    for i in 0..n {
        let row = sim.row(i);
        if row.is_empty() {
            continue;
        }
        let mean: f64 = row.iter().zip(&ds[i]).map(|(s, g)| s * g).sum();
        for (k, &j) in sim.graph().neighbors(i).iter().enumerate() {
            let dlogit = row[k] * (ds[i][k] - mean);
            if dlogit == 0.0 {
                continue;
            }
            for q in 0..dp {
                let diff = proj.get(i, q) - proj.get(j, q);
                dproj.as_mut_slice()[i * dp + q] -= 2.0 * diff * dlogit;
                dproj.as_mut_slice()[j * dp + q] += 2.0 * diff * dlogit;
            }
        }
    }

    let mut projection_grad = TransformGrad::zeros_like(projection);
    let dguide = projection.backward(&sim_tape.transform, &dproj, &mut projection_grad);
    let mut unary_grad = TransformGrad::zeros_like(unary);
    let dinput = unary.backward(&unary_tape, &dz, &mut unary_grad);

    let compat_param = cfg
        .compat
        .param()
        .map(|cp| cp * (&dc + dc.transpose()));

    Ok(CrfGradients {
        input: dinput,
        guide: dguide,
        unary: unary_grad,
        projection: projection_grad,
        compat_param,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::CompatibilityMatrix;
    use crate::Activation;

    #[test]
    fn gauss_seidel_rejected() {
        let g = NeighborGraph::new(vec![vec![1], vec![0]]).unwrap();
        let z = FeatureMatrix::column(&[0.0, 2.0]);
        let cfg = CrfConfig::new(1).with_schedule(Schedule::GaussSeidel);
        let id = PointwiseTransform::identity(1);
        let err = crf_gradients(&z, &g, &id, &id, &z, &cfg, &z).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let g = NeighborGraph::new(vec![vec![1], vec![0]]).unwrap();
        let z = FeatureMatrix::column(&[0.3, 2.0]);
        let cfg = CrfConfig::new(1).with_steps(3);
        let id = PointwiseTransform::identity(1);
        let grads = crf_gradients(&z, &g, &id, &id, &z, &cfg, &FeatureMatrix::zeros(2, 1)).unwrap();
        assert!(grads.input.as_slice().iter().all(|v| *v == 0.0));
        assert!(grads.guide.as_slice().iter().all(|v| *v == 0.0));
        assert!(grads.compat_param.unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pair_sum_gradient_matches_finite_differences() {
        // T = 1, identity transforms, C = I, loss = sum of outputs
        let g = NeighborGraph::new(vec![vec![1], vec![0]]).unwrap();
        let z = FeatureMatrix::column(&[0.0, 2.0]);
        let guide = FeatureMatrix::column(&[0.0, 1.0]);
        let cfg = CrfConfig::new(1)
            .with_compat(CompatibilityMatrix::identity(1))
            .with_readout(Activation::Identity);
        let id = PointwiseTransform::identity(1);
        let ones = FeatureMatrix::column(&[1.0, 1.0]);
        let grads = crf_gradients(&z, &g, &id, &id, &guide, &cfg, &ones).unwrap();
        let loss = |z: &FeatureMatrix| {
            super::super::crf_convolve(z, &g, &id, &id, &guide, &cfg)
                .unwrap()
                .output
                .as_slice()
                .iter()
                .sum::<f64>()
        };
        for i in 0..2 {
            let h = 1e-5;
            let mut zp = z.clone();
            zp.set(i, 0, z.get(i, 0) + h);
            let mut zm = z.clone();
            zm.set(i, 0, z.get(i, 0) - h);
            let fd = (loss(&zp) - loss(&zm)) / (2.0 * h);
            assert!((fd - grads.input.get(i, 0)).abs() < 1e-9);
        }
        // each output is (z_i + z_j) / 2, so d(sum)/dz_i = 1
        assert!((grads.input.get(0, 0) - 1.0).abs() < 1e-14);
    }
}
