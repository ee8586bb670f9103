//! Force fields over suffix latents: the FlowNet, flow paths and their
//! regression losses, ODE integration, the bounded residual refiner and the
//! decoder-aware fused readout.

mod stage2;

pub use stage2::*;

use crate::autoencoder::{join_full_var, suffix_select, Autoencoder, ModelDims};
use crate::corpus::SlotBatch;
use crate::draftprior::check_like;
use crate::error::{Error, Result};
use crate::layers::{block, init_block, init_layer_norm, init_linear, init_linear_default, layer_norm, linear, position_index, Binder, BlockSpec};
use crate::metric::MetricNet;
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

pub const FLOW_LAYERS: usize = 5;
pub const FLOW_CONV: usize = 5;

/// Sinusoidal time features `[batch·len × width]`, one time per example.
pub fn time_embedding<T: Scalar>(t: &[f64], len: usize, width: usize) -> Result<Tensor<T>> {
    let half = width / 2;
    let mut out = Vec::with_capacity(t.len() * len * width);
    for &tv in t {
        let mut row = vec![T::zero(); width];
        for k in 0..half {
            let w = 1000.0 * 10000f64.powf(-(k as f64) / half as f64);
            row[k] = T::c((tv * w).sin());
            row[half + k] = T::c((tv * w).cos());
        }
        for _ in 0..len {
            out.extend_from_slice(&row);
        }
    }
    Tensor::new(vec![t.len() * len, width], out)
}

fn check_times(t: &[f64]) -> Result<()> {
    match t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(bad) => Err(Error::Invalid(format!("flow time {bad} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Force field `f_theta(z, t, z_p)` over suffix slots.
#[derive(Clone, Debug)]
pub struct FlowNet<T> {
    pub dims: ModelDims,
    pub width: usize,
    params: ParamStore<T>,
}

impl<T: Scalar> FlowNet<T> {
    pub fn new(dims: ModelDims, width: usize, seed: u64) -> Result<Self> {
        dims.validate()?;
        if width == 0 || !width.is_multiple_of(dims.heads) || !width.is_multiple_of(2) {
            return Err(Error::Config(format!("flow width {width} must be even and divisible by {} heads", dims.heads)));
        }
        let mut p = ParamStore::new(seed);
        let s = dims.suffix();
        init_linear_default(&mut p, "flow.in", dims.d, width)?;
        init_linear_default(&mut p, "flow.mem", dims.d, width)?;
        init_linear_default(&mut p, "flow.time", width, width)?;
        p.init_normal("flow.pos", &[s, width], 0.1)?;
        let spec = Self::spec(&dims, width);
        for l in 0..FLOW_LAYERS {
            init_block(&mut p, &format!("flow.block{l}"), &spec)?;
        }
        init_layer_norm(&mut p, "flow.ln_f", width)?;
        init_linear(&mut p, "flow.out", width, dims.d, 0.0)?;
        Ok(Self { dims, width, params: p })
    }

    fn spec(dims: &ModelDims, width: usize) -> BlockSpec {
        BlockSpec { width, heads: dims.heads, ffn_hidden: 4 * width, cross: true, conv: Some(FLOW_CONV) }
    }

    pub fn from_params(dims: ModelDims, width: usize, params: ParamStore<T>) -> Result<Self> {
        check_like(Self::new(dims, width, 0)?.params(), &params, "flow")?;
        Ok(Self { dims, width, params })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Force `[batch·(n−m) × d]` at state `z` and per-example times `t`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_var(g: &mut Graph<T>, p: &Binder<T>, dims: &ModelDims, width: usize, z: Var, t: &[f64], z_p: Var) -> Result<Var> {
        let s = dims.suffix();
        let batch = t.len();
        if g.value(z).shape() != [batch * s, dims.d] || g.value(z_p).shape() != [batch * dims.m, dims.d] {
            return Err(Error::Shape(format!(
                "flow inputs {:?} / {:?} for batch {batch}",
                g.value(z).shape(),
                g.value(z_p).shape()
            )));
        }
        check_times(t)?;
        let x = linear(g, p, "flow.in", z)?;
        let pos = p.get(g, "flow.pos")?;
        let pe = g.gather_rows(pos, &position_index(batch, s))?;
        let x = g.add(x, pe)?;
        let te = g.constant(time_embedding(t, s, width)?);
        let te = linear(g, p, "flow.time", te)?;
        let mut x = g.add(x, te)?;
        let mem = linear(g, p, "flow.mem", z_p)?;
        let spec = Self::spec(dims, width);
        for l in 0..FLOW_LAYERS {
            x = block(g, p, &format!("flow.block{l}"), &spec, x, batch, s, Some((mem, dims.m)))?;
        }
        let x = layer_norm(g, p, "flow.ln_f", x)?;
        linear(g, p, "flow.out", x)
    }

    pub fn force(&self, z: &Tensor<T>, t: &[f64], z_p: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let zp = g.constant(z_p.clone());
        let f = Self::forward_var(&mut g, &Binder::frozen(&self.params), &self.dims, self.width, zv, t, zp)?;
        Ok(g.value(f).clone())
    }
}

/// A point on the linear path between a source and a target latent.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<T> {
    pub z_t: Tensor<T>,
    /// One time per example.
    pub t: Vec<f64>,
    pub u_t: Tensor<T>,
}

/// `z_t = (1−t)·z_source + t·z_target`, `u_t = z_target − z_source`.
pub fn sample_flow_state<T: Scalar>(z_source: &Tensor<T>, z_target: &Tensor<T>, t: f64) -> Result<FlowSample<T>> {
    sample_flow_batch(z_source, z_target, &[t])
}

/// Batched form: rows are split evenly over `t.len()` examples.
pub fn sample_flow_batch<T: Scalar>(z_source: &Tensor<T>, z_target: &Tensor<T>, t: &[f64]) -> Result<FlowSample<T>> {
    z_source.same_shape(z_target)?;
    check_times(t)?;
    if t.is_empty() || !z_source.rows().is_multiple_of(t.len()) {
        return Err(Error::Shape(format!("{} rows do not split over {} examples", z_source.rows(), t.len())));
    }
    let per = z_source.rows() / t.len() * z_source.cols();
    let data: Vec<T> = z_source
        .data()
        .iter()
        .zip(z_target.data())
        .enumerate()
        .map(|(i, (&a, &b))| {
            let tv = T::c(t[i / per]);
            (T::one() - tv) * a + tv * b
        })
        .collect();
    Ok(FlowSample { z_t: Tensor::new(z_source.shape().to_vec(), data)?, t: t.to_vec(), u_t: z_target.sub(z_source)? })
}

/// `ρ·(z_s − z_start)`.
pub fn local_target<T: Scalar>(z_s: &Tensor<T>, z_start: &Tensor<T>, rho: f64) -> Result<Tensor<T>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Invalid(format!("rho {rho} outside (0, 1]")));
    }
    Ok(z_s.sub(z_start)?.scale(T::c(rho)))
}

/// `f / g`, elementwise; `g` must be strictly positive.
pub fn natural_velocity<T: Scalar>(f: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    if let Some(bad) = g.data().iter().find(|&&v| !(v > T::zero())) {
        return Err(Error::Invalid(format!("metric entry {} is not positive", bad.f64())));
    }
    f.zip_map(g, |a, b| a / b)
}

/// Mean squared error per coordinate over the rows where `select` holds.
pub fn masked_mse_var<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, select: &[bool]) -> Result<Var> {
    let d = g.value(a).cols();
    let count = select.iter().filter(|&&s| s).count();
    if count == 0 || select.len() != g.value(a).rows() {
        return Err(Error::Invalid(format!("mse over {count} of {} selected rows", select.len())));
    }
    let diff = g.sub(a, b)?;
    let sq = g.mul(diff, diff)?;
    let w: Vec<T> = select.iter().map(|&s| if s { T::c(1.0 / (count * d) as f64) } else { T::zero() }).collect();
    g.weighted_row_sum(sq, &w)
}

/// `‖v_theta(z_t) − u_t‖²` averaged over selected suffix slots and coordinates.
#[allow(clippy::too_many_arguments)]
pub fn flow_matching_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    p: &Binder<T>,
    dims: &ModelDims,
    width: usize,
    sample: &FlowSample<T>,
    z_p: Var,
    select: &[bool],
) -> Result<Var> {
    let zt = g.constant(sample.z_t.clone());
    let f = FlowNet::forward_var(g, p, dims, width, zt, &sample.t, z_p)?;
    let u = g.constant(sample.u_t.clone());
    masked_mse_var(g, f, u, select)
}

/// `‖f_theta(z_t) − g ⊙ u_t‖²` with the metric evaluated at the same state;
/// returns the loss and the metric node.
#[allow(clippy::too_many_arguments)]
pub fn force_matching_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    p: &Binder<T>,
    metric: &Binder<T>,
    dims: &ModelDims,
    width: usize,
    sample: &FlowSample<T>,
    z_p: Var,
    select: &[bool],
) -> Result<(Var, Var)> {
    let zt = g.constant(sample.z_t.clone());
    let f = FlowNet::forward_var(g, p, dims, width, zt, &sample.t, z_p)?;
    let gm = MetricNet::forward_var(g, metric, dims, zt, &sample.t, z_p)?;
    let u = g.constant(sample.u_t.clone());
    let target = g.mul(gm, u)?;
    Ok((masked_mse_var(g, f, target, select)?, gm))
}

pub fn flow_matching_loss<T: Scalar>(flow: &FlowNet<T>, sample: &FlowSample<T>, z_p: &Tensor<T>, select: &[bool]) -> Result<f64> {
    let mut g = Graph::new();
    let zp = g.constant(z_p.clone());
    let l = flow_matching_loss_var(&mut g, &Binder::frozen(flow.params()), &flow.dims, flow.width, sample, zp, select)?;
    Ok(g.scalar(l).f64())
}

pub fn force_matching_loss<T: Scalar>(
    flow: &FlowNet<T>,
    metric: &MetricNet<T>,
    sample: &FlowSample<T>,
    z_p: &Tensor<T>,
    select: &[bool],
) -> Result<f64> {
    let mut g = Graph::new();
    let zp = g.constant(z_p.clone());
    let (l, _) = force_matching_loss_var(
        &mut g,
        &Binder::frozen(flow.params()),
        &Binder::frozen(metric.params()),
        &flow.dims,
        flow.width,
        sample,
        zp,
        select,
    )?;
    Ok(g.scalar(l).f64())
}

/// Parameter views for the field used during integration.
#[derive(Clone, Copy)]
pub struct FieldBinders<'a, 'b, T> {
    pub flow: &'a Binder<'b, T>,
    pub metric: Option<&'a Binder<'b, T>>,
    pub width: usize,
}

/// Graph states `z_0 … z_T` (and the metric at each evaluated step) of `T`
/// Euler steps `z ← z + γ·dt·f/g` with `dt = 1/T` at times `k/T`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_var<T: Scalar>(
    g: &mut Graph<T>,
    field: FieldBinders<'_, '_, T>,
    dims: &ModelDims,
    z_start: Var,
    z_p: Var,
    batch: usize,
    steps: usize,
    gamma: f64,
) -> Result<(Vec<Var>, Vec<Var>)> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Invalid(format!("step scale {gamma} must be positive")));
    }
    let mut states = vec![z_start];
    let mut metrics = Vec::new();
    let mut z = z_start;
    for k in 0..steps {
        let t = vec![k as f64 / steps as f64; batch];
        let f = FlowNet::forward_var(g, field.flow, dims, field.width, z, &t, z_p)?;
        let v = match field.metric {
            Some(mp) => {
                let gm = MetricNet::forward_var(g, mp, dims, z, &t, z_p)?;
                metrics.push(gm);
                g.div(f, gm)?
            }
            None => f,
        };
        let dz = g.scale(v, T::c(gamma / steps as f64));
        z = g.add(z, dz)?;
        if !g.value(z).is_finite() {
            return Err(Error::NonFinite(format!("latent state after integration step {}", k + 1)));
        }
        states.push(z);
    }
    Ok((states, metrics))
}

/// Stored integration path.
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    /// `z_0 = z_start` through `z_T`.
    pub states: Vec<Tensor<T>>,
    /// Metric diagonal at each step when a metric is used.
    pub metrics: Vec<Tensor<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn end(&self) -> &Tensor<T> {
        self.states.last().expect("trajectory holds the start state")
    }
}

/// Integrates a stacked batch from `z_start` with the frozen field.
pub fn integrate<T: Scalar>(
    flow: &FlowNet<T>,
    metric: Option<&MetricNet<T>>,
    z_start: &Tensor<T>,
    z_p: &Tensor<T>,
    batch: usize,
    steps: usize,
    gamma: f64,
) -> Result<Trajectory<T>> {
    let fb = Binder::frozen(flow.params());
    let mb = metric.map(|m| Binder::frozen(m.params()));
    let mut states = vec![z_start.clone()];
    let mut metrics = Vec::new();
    let mut z = z_start.clone();
    for k in 0..steps {
        // One short graph per step keeps memory flat over long trajectories.
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let zp = g.constant(z_p.clone());
        let field = FieldBinders { flow: &fb, metric: mb.as_ref(), width: flow.width };
        let t = vec![k as f64 / steps as f64; batch];
        let f = FlowNet::forward_var(&mut g, field.flow, &flow.dims, flow.width, zv, &t, zp)?;
        let f = g.value(f).clone();
        let v = match field.metric {
            Some(mp) => {
                let gm = MetricNet::forward_var(&mut g, mp, &flow.dims, zv, &t, zp)?;
                let gm = g.value(gm).clone();
                let v = natural_velocity(&f, &gm)?;
                metrics.push(gm);
                v
            }
            None => f,
        };
        z = crate::numerics::euler_step(&z, &v, gamma, 1.0 / steps as f64)?;
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("latent state after integration step {}", k + 1)));
        }
        states.push(z.clone());
    }
    Ok(Trajectory { states, metrics })
}

/// Per-slot refiner `R(z_ode, z_p)`: an MLP over `[slot, pooled prompt]`.
#[derive(Clone, Debug)]
pub struct Refiner<T> {
    pub dims: ModelDims,
    pub lambda: f64,
    params: ParamStore<T>,
}

impl<T: Scalar> Refiner<T> {
    pub fn new(dims: ModelDims, lambda: f64, seed: u64) -> Result<Self> {
        dims.validate()?;
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("residual bound {lambda} must be finite and positive")));
        }
        let mut p = ParamStore::new(seed);
        init_linear_default(&mut p, "res.l1", 2 * dims.d, 4 * dims.d)?;
        init_linear(&mut p, "res.l2", 4 * dims.d, dims.d, 0.0)?;
        Ok(Self { dims, lambda, params: p })
    }

    pub fn from_params(dims: ModelDims, lambda: f64, params: ParamStore<T>) -> Result<Self> {
        check_like(Self::new(dims, lambda, 0)?.params(), &params, "refiner")?;
        Ok(Self { dims, lambda, params })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Raw refiner output before the tanh bound.
    pub fn raw_var(g: &mut Graph<T>, p: &Binder<T>, dims: &ModelDims, z_ode: Var, z_p: Var, batch: usize) -> Result<Var> {
        let s = dims.suffix();
        let pooled = g.segment_mean(z_p, dims.m)?;
        let rep: Vec<usize> = (0..batch * s).map(|r| r / s).collect();
        let pooled = g.gather_rows(pooled, &rep)?;
        let x = g.concat_cols(&[z_ode, pooled])?;
        let h = linear(g, p, "res.l1", x)?;
        let h = g.gelu(h);
        linear(g, p, "res.l2", h)
    }

    /// `z_ode + λ·tanh(R(z_ode, z_p))`.
    #[allow(clippy::too_many_arguments)]
    pub fn apply_var(g: &mut Graph<T>, p: &Binder<T>, dims: &ModelDims, lambda: f64, z_ode: Var, z_p: Var, batch: usize) -> Result<Var> {
        let r = Self::raw_var(g, p, dims, z_ode, z_p, batch)?;
        let r = g.tanh(r);
        let r = g.scale(r, T::c(lambda));
        g.add(z_ode, r)
    }
}

/// `‖z_res − z_ode‖_∞ ≤ λ` by construction.
pub fn bounded_residual<T: Scalar>(z_ode: &Tensor<T>, z_p: &Tensor<T>, refiner: &Refiner<T>, batch: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let z = g.constant(z_ode.clone());
    let zp = g.constant(z_p.clone());
    let out = Refiner::apply_var(&mut g, &Binder::frozen(refiner.params()), &refiner.dims, refiner.lambda, z, zp, batch)?;
    Ok(g.value(out).clone())
}

/// Linear token head `d → V` applied directly to intermediate latents.
#[derive(Clone, Debug)]
pub struct AuxHead<T> {
    pub dims: ModelDims,
    params: ParamStore<T>,
}

impl<T: Scalar> AuxHead<T> {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut p = ParamStore::new(seed);
        init_linear_default(&mut p, "aux.head", dims.d, dims.vocab)?;
        Ok(Self { dims, params: p })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }
}

/// Stacked suffix-row targets and the real-slot selector.
pub fn suffix_targets(targets: &SlotBatch, m: usize) -> (Vec<usize>, Vec<bool>) {
    let n = targets.slots;
    let s = n - m;
    (0..targets.batch * s)
        .map(|r| {
            let i = (r / s) * n + m + r % s;
            (targets.ids[i], targets.mask[i])
        })
        .unzip()
}

fn mean_weights<T: Scalar>(select: &[bool]) -> Result<Vec<T>> {
    let count = select.iter().filter(|&&s| s).count();
    if count == 0 {
        return Err(Error::Invalid("fused loss: empty target mask".into()));
    }
    Ok(select.iter().map(|&s| if s { T::c(1.0 / count as f64) } else { T::zero() }).collect())
}

/// Frozen-decoder CE on `[z_p, z_T]` over real suffix positions.
pub fn decoder_ce_var<T: Scalar>(g: &mut Graph<T>, decoder: &Binder<T>, dims: &ModelDims, z_p: Var, z_end: Var, targets: &SlotBatch) -> Result<Var> {
    let full = join_full_var(g, z_p, z_end, targets.batch, dims.m, dims.n)?;
    let logits = Autoencoder::decode_var(g, decoder, dims, full, targets.batch)?;
    let w = mean_weights::<T>(&suffix_select(targets, dims.m))?;
    g.cross_entropy(logits, &targets.ids, &w)
}

/// `ℓ_decoder(z_T) + β·ℓ_aux(z_mid)` over real suffix positions; returns the
/// total and both terms.
#[allow(clippy::too_many_arguments)]
pub fn fused_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    decoder: &Binder<T>,
    aux: &Binder<T>,
    dims: &ModelDims,
    z_p: Var,
    z_end: Var,
    z_mid: Var,
    targets: &SlotBatch,
    beta: f64,
) -> Result<(Var, Var, Var)> {
    if !(beta >= 0.0) {
        return Err(Error::Invalid(format!("fusion weight {beta} must be >= 0")));
    }
    let dec = decoder_ce_var(g, decoder, dims, z_p, z_end, targets)?;
    let (ids, sel) = suffix_targets(targets, dims.m);
    let logits = linear(g, aux, "aux.head", z_mid)?;
    let aux_ce = g.cross_entropy(logits, &ids, &mean_weights::<T>(&sel)?)?;
    let scaled = g.scale(aux_ce, T::c(beta));
    Ok((g.add(dec, scaled)?, dec, aux_ce))
}
