//! Distribution-level alignment of latent point clouds: log-domain entropic
//! Sinkhorn transport and a sliced-Wasserstein estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{fill_gaussian, rng};
use crate::numerics::{Graph, Scalar, Tensor, Var};

fn check_clouds<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::Shape("point clouds must be k×d matrices".into()));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!("cloud dimensions {} vs {}", a.cols(), b.cols())));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite("point cloud".into()));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `log Σ_k exp(lw + pot_k/ε − cost_k)` using `scratch` as workspace.
fn lse(pot: &[f64], costs: &[f64], lw: f64, epsilon: f64, scratch: &mut [f64]) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for (k, (p, c)) in pot.iter().zip(costs).enumerate() {
        let v = lw + p / epsilon - c;
        scratch[k] = v;
        mx = mx.max(v);
    }
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + scratch[..pot.len()].iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornResult {
    /// Entropic transport value `⟨P, C⟩ + ε·KL(P ‖ a bᵀ)`, equal to the dual
    /// objective at convergence.
    pub cost: f64,
    /// Transport plan `[k_a × k_b]`.
    pub plan: Tensor<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Row-marginal L1 error at exit.
    pub marginal_error: f64,
}

/// Entropic OT between uniform clouds with squared Euclidean ground cost.
/// Non-convergence is reported through `converged`, not as an error.
pub fn sinkhorn_cost<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, epsilon: f64, max_iters: usize, tol: f64) -> Result<SinkhornResult> {
    check_clouds(a, b)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("sinkhorn epsilon {epsilon} must be > 0")));
    }
    let (ka, kb) = (a.rows(), b.rows());
    let av: Vec<Vec<f64>> = (0..ka).map(|i| a.row(i).iter().map(|v| v.f64()).collect()).collect();
    let bv: Vec<Vec<f64>> = (0..kb).map(|j| b.row(j).iter().map(|v| v.f64()).collect()).collect();
    let c: Vec<f64> = (0..ka).flat_map(|i| bv.iter().map(|bj| sq_dist(&av[i], bj)).collect::<Vec<_>>()).collect();
    let (la, lb) = (-(ka as f64).ln(), -(kb as f64).ln());
    let mut f = vec![0.0; ka];
    let mut g = vec![0.0; kb];
    let mut converged = false;
    let mut iterations = 0;
    let mut err = f64::INFINITY;
    // scaled costs, row-major and transposed, so both half-steps stream
    let ce: Vec<f64> = c.iter().map(|v| v / epsilon).collect();
    let mut ct = vec![0.0; ka * kb];
    for i in 0..ka {
        for j in 0..kb {
            ct[j * ka + i] = ce[i * kb + j];
        }
    }
    let mut scratch = vec![0.0; ka.max(kb)];
    for it in 0..max_iters.max(1) {
        for i in 0..ka {
            f[i] = -epsilon * lse(&g, &ce[i * kb..(i + 1) * kb], lb, epsilon, &mut scratch);
        }
        for j in 0..kb {
            g[j] = -epsilon * lse(&f, &ct[j * ka..(j + 1) * ka], la, epsilon, &mut scratch);
        }
        iterations = it + 1;
        // columns are exact after the g half-step; check rows periodically
        if iterations % 5 == 0 || iterations == max_iters.max(1) {
            err = 0.0;
            for i in 0..ka {
                let row = &ce[i * kb..(i + 1) * kb];
                let s: f64 = g.iter().zip(row).map(|(gj, cij)| (la + lb + (f[i] + gj) / epsilon - cij).exp()).sum();
                err += (s - 1.0 / ka as f64).abs();
            }
            if err <= tol {
                converged = true;
                break;
            }
        }
    }
    let mut plan = vec![0.0; ka * kb];
    let mut transport = 0.0;
    let mut kl = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let lp = la + lb + (f[i] + g[j] - c[i * kb + j]) / epsilon;
            let p = lp.exp();
            plan[i * kb + j] = p;
            transport += p * c[i * kb + j];
            if p > 0.0 {
                kl += p * (lp - la - lb);
            }
        }
    }
    Ok(SinkhornResult {
        cost: transport + epsilon * kl,
        plan: Tensor::new(vec![ka, kb], plan)?,
        converged,
        iterations,
        marginal_error: err,
    })
}

/// Gradient of the entropic value with respect to `a` at the returned plan:
/// `Σ_j P_ij · 2(a_i − b_j)`.
pub fn sinkhorn_grad<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, plan: &Tensor<f64>) -> Result<Tensor<T>> {
    let (ka, kb, d) = (a.rows(), b.rows(), a.cols());
    if plan.shape() != [ka, kb] {
        return Err(Error::Shape("plan does not match clouds".into()));
    }
    let mut out = vec![T::zero(); ka * d];
    for i in 0..ka {
        for j in 0..kb {
            let p = plan.data()[i * kb + j];
            if p == 0.0 {
                continue;
            }
            for k in 0..d {
                out[i * d + k] = out[i * d + k] + T::c(2.0 * p * (a.row(i)[k].f64() - b.row(j)[k].f64()));
            }
        }
    }
    Tensor::new(vec![ka, d], out)
}

/// Squared 1-D Wasserstein distance between uniform empirical measures on
/// `x` and `y`, with the gradient with respect to each `x` value. Unequal
/// sizes are matched by integrating the difference of quantile functions
/// over the merged breakpoints.
fn w2_1d(x: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let mut xi: Vec<usize> = (0..x.len()).collect();
    xi.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ys = y.to_vec();
    ys.sort_by(|a, b| a.total_cmp(b));
    let (nx, ny) = (x.len(), y.len());
    let mut grad = vec![0.0; nx];
    let mut cost = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0f64;
    while i < nx && j < ny {
        let ux = (i + 1) as f64 / nx as f64;
        let uy = (j + 1) as f64 / ny as f64;
        let next = ux.min(uy);
        let w = next - u;
        let diff = x[xi[i]] - ys[j];
        cost += w * diff * diff;
        grad[xi[i]] += 2.0 * w * diff;
        u = next;
        // advance whichever quantile step ends first, both on a tie
        let (step_x, step_y) = ((i + 1) * ny <= (j + 1) * nx, (j + 1) * nx <= (i + 1) * ny);
        i += usize::from(step_x);
        j += usize::from(step_y);
    }
    (cost, grad)
}

fn directions(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| loop {
            let mut v = vec![0.0f64; d];
            fill_gaussian(&mut v, &mut r, 1.0);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Mean over `n_projections` random unit directions of the squared 1-D
/// Wasserstein distance between projected clouds, with its gradient with
/// respect to `a`.
pub fn sliced_wasserstein_with_grad<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, n_projections: usize, seed: u64) -> Result<(f64, Tensor<T>)> {
    check_clouds(a, b)?;
    if n_projections == 0 {
        return Err(Error::Config("n_projections must be >= 1".into()));
    }
    let d = a.cols();
    let av: Vec<Vec<f64>> = (0..a.rows()).map(|i| a.row(i).iter().map(|v| v.f64()).collect()).collect();
    let bv: Vec<Vec<f64>> = (0..b.rows()).map(|i| b.row(i).iter().map(|v| v.f64()).collect()).collect();
    let dot = |p: &[f64], t: &[f64]| p.iter().zip(t).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    let mut grad = vec![0.0; a.len()];
    for theta in directions(n_projections, d, seed) {
        let pa: Vec<f64> = av.iter().map(|p| dot(p, &theta)).collect();
        let pb: Vec<f64> = bv.iter().map(|p| dot(p, &theta)).collect();
        let (c, gx) = w2_1d(&pa, &pb);
        total += c;
        for (i, gi) in gx.iter().enumerate() {
            for k in 0..d {
                grad[i * d + k] += gi * theta[k];
            }
        }
    }
    let inv = 1.0 / n_projections as f64;
    let grad = Tensor::new(a.shape().to_vec(), grad.into_iter().map(|v| T::c(v * inv)).collect())?;
    Ok((total * inv, grad))
}

pub fn sliced_wasserstein<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, n_projections: usize, seed: u64) -> Result<f64> {
    Ok(sliced_wasserstein_with_grad(a, b, n_projections, seed)?.0)
}

/// Mean pairwise squared distance between the points of one cloud.
pub fn mean_pairwise_sq_dist<T: Scalar>(a: &Tensor<T>) -> f64 {
    let k = a.rows();
    if k < 2 {
        return 0.0;
    }
    let rows: Vec<Vec<f64>> = (0..k).map(|i| a.row(i).iter().map(|v| v.f64()).collect()).collect();
    let mut s = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            s += sq_dist(&rows[i], &rows[j]);
        }
    }
    s / (k * (k - 1) / 2) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "backend", deny_unknown_fields)]
pub enum OtBackend {
    /// `epsilon = epsilon_scale × mean pairwise squared distance of the
    /// target cloud`, so it does not depend on the points being moved.
    Sinkhorn { epsilon_scale: f64, max_iters: usize, tol: f64 },
    Sliced { n_projections: usize, seed: u64 },
}

impl Default for OtBackend {
    fn default() -> Self {
        OtBackend::Sinkhorn { epsilon_scale: 0.05, max_iters: 200, tol: 1e-6 }
    }
}

impl OtBackend {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sinkhorn" => Ok(Self::default()),
            "sliced" => Ok(OtBackend::Sliced { n_projections: 64, seed: 0 }),
            other => Err(Error::Config(format!("unknown OT backend {other:?} (expected sinkhorn or sliced)"))),
        }
    }

    /// Transport cost of `a` against `b` and its gradient with respect to `a`.
    pub fn cost_and_grad<T: Scalar>(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        match *self {
            OtBackend::Sinkhorn { epsilon_scale, max_iters, tol } => {
                let spread = mean_pairwise_sq_dist(b);
                let eps = (epsilon_scale * spread).max(1e-6);
                let r = sinkhorn_cost(a, b, eps, max_iters, tol)?;
                let grad = sinkhorn_grad(a, b, &r.plan)?;
                Ok((r.cost, grad))
            }
            OtBackend::Sliced { n_projections, seed } => sliced_wasserstein_with_grad(a, b, n_projections, seed),
        }
    }
}

/// `base + weight · OT(A, B)` on the tape. The transport term is attached to
/// `a` through its envelope gradient; `b` is a detached target.
pub fn ot_regularized_loss<T: Scalar>(g: &mut Graph<T>, base: Var, a: Var, b: &Tensor<T>, weight: f64, backend: &OtBackend) -> Result<(Var, f64)> {
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(Error::Config(format!("OT weight {weight} must be >= 0")));
    }
    if weight == 0.0 {
        return Ok((base, 0.0));
    }
    let (cost, grad) = backend.cost_and_grad(g.value(a), b)?;
    let ot = g.linearized(a, T::c(cost), grad)?;
    let ot = g.scale(ot, T::c(weight));
    Ok((g.add(base, ot)?, cost))
}
