//! MetricNet: a learned positive diagonal metric over suffix-slot latents.

use serde::{Deserialize, Serialize};

use crate::autoencoder::ModelDims;
use crate::draftprior::check_like;
use crate::error::{Error, Result};
use crate::layers::{init_linear, init_linear_default, linear, Binder};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

/// Bound on the metric log values before exponentiation.
pub const LOG_BOUND: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct MetricNet<T> {
    pub dims: ModelDims,
    params: ParamStore<T>,
}

/// Per-slot conditioning `[z_t slot, mean-pooled z_p, t, 1]`, `2d + 2` wide.
pub fn metric_features<T: Scalar>(g: &mut Graph<T>, dims: &ModelDims, z_t: Var, t: &[f64], z_p: Var) -> Result<Var> {
    let s = dims.suffix();
    let batch = t.len();
    if g.value(z_t).shape() != [batch * s, dims.d] || g.value(z_p).shape() != [batch * dims.m, dims.d] {
        return Err(Error::Shape(format!(
            "metric inputs {:?} / {:?} for batch {batch}",
            g.value(z_t).shape(),
            g.value(z_p).shape()
        )));
    }
    if let Some(&bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Invalid(format!("flow time {bad} outside [0, 1]")));
    }
    let pooled = g.segment_mean(z_p, dims.m)?;
    let rep: Vec<usize> = (0..batch * s).map(|r| r / s).collect();
    let pooled = g.gather_rows(pooled, &rep)?;
    let tcol: Vec<T> = (0..batch * s).map(|r| T::c(t[r / s])).collect();
    let tv = g.constant(Tensor::new(vec![batch * s, 1], tcol)?);
    let ones = g.constant(Tensor::full(&[batch * s, 1], T::one())?);
    g.concat_cols(&[z_t, pooled, tv, ones])
}

/// `exp(clamp(raw, ±LOG_BOUND))` rescaled to mean 1 within each row.
pub fn bounded_metric<T: Scalar>(g: &mut Graph<T>, raw: Var) -> Result<Var> {
    let d = g.value(raw).cols();
    let c = g.clamp(raw, T::c(-LOG_BOUND), T::c(LOG_BOUND));
    let e = g.exp(c);
    let rs = g.row_sum(e);
    let mean = g.scale(rs, T::one() / T::c(d as f64));
    let bc = g.broadcast_cols(mean, d)?;
    g.div(e, bc)
}

impl<T: Scalar> MetricNet<T> {
    /// MLP `2d+2 → 4d → d`; the output layer starts at zero so the initial
    /// metric is the identity.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut p = ParamStore::new(seed);
        init_linear_default(&mut p, "metric.l1", 2 * dims.d + 2, 4 * dims.d)?;
        init_linear(&mut p, "metric.l2", 4 * dims.d, dims.d, 0.0)?;
        Ok(Self { dims, params: p })
    }

    pub fn from_params(dims: ModelDims, params: ParamStore<T>) -> Result<Self> {
        check_like(Self::new(dims, 0)?.params(), &params, "metric")?;
        Ok(Self { dims, params })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Metric diagonal `[batch·(n−m) × d]`; `t` holds one time per example.
    pub fn forward_var(g: &mut Graph<T>, p: &Binder<T>, dims: &ModelDims, z_t: Var, t: &[f64], z_p: Var) -> Result<Var> {
        let x = metric_features(g, dims, z_t, t, z_p)?;
        let h = linear(g, p, "metric.l1", x)?;
        let h = g.gelu(h);
        let raw = linear(g, p, "metric.l2", h)?;
        bounded_metric(g, raw)
    }

    pub fn metric_diag(&self, z_t: &Tensor<T>, t: &[f64], z_p: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let zt = g.constant(z_t.clone());
        let zp = g.constant(z_p.clone());
        let out = Self::forward_var(&mut g, &Binder::frozen(&self.params), &self.dims, zt, t, zp)?;
        Ok(g.value(out).clone())
    }
}

/// Interval bounds on a mean-normalised entry when every log value lies in
/// `[−LOG_BOUND, LOG_BOUND]`: one entry at an extreme and the rest at the
/// opposite extreme.
pub fn metric_bounds(d: usize) -> (f64, f64) {
    let (lo, hi) = ((-LOG_BOUND).exp(), LOG_BOUND.exp());
    let d = d as f64;
    (d * lo / (lo + (d - 1.0) * hi), d * hi / (hi + (d - 1.0) * lo))
}

/// `Σ (g_i − 1)²` over every entry.
pub fn metric_reg<T: Scalar>(g: &Tensor<T>) -> f64 {
    g.data().iter().map(|&v| (v.f64() - 1.0).powi(2)).sum()
}

/// Graph form of [`metric_reg`], scaled by `scale`.
pub fn metric_reg_var<T: Scalar>(g: &mut Graph<T>, metric: Var, scale: f64) -> Result<Var> {
    let shape = g.value(metric).shape().to_vec();
    let one = g.constant(Tensor::full(&shape, T::one())?);
    let dev = g.sub(metric, one)?;
    let sq = g.mul(dev, dev)?;
    let s = g.sum(sq);
    Ok(g.scale(s, T::c(scale)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Population standard deviation, minimum and maximum over all entries.
pub fn metric_stats<T: Scalar>(g: &Tensor<T>) -> MetricStats {
    let v = g.to_f64_vec();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    MetricStats {
        std: var.sqrt(),
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
        max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}
