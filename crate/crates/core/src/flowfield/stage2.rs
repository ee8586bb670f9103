//! Stage-2 refinement variants trained on top of the frozen autoencoder and
//! DraftPrior, and their side-by-side comparison on one validation set.

use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use super::*;
use crate::alignment::{ot_regularized_loss, OtBackend};
use crate::diagnostics::Recoverability;
use crate::draftprior::{encode_level, mix_with_noise, score_suffix, starts_for, DpTrainData, DraftPrior, EncodedBatch, MixSpec};
use crate::metric::{metric_reg_var, metric_stats, MetricNet, MetricStats};
use crate::numerics::rng::{derive_seed, rng, uniform};
use crate::numerics::AdamW;
use crate::train::{train_step, TrainConfig, TrainLog};
use crate::corpus::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Flow matching on the local refinement target.
    RawFlow,
    /// Decoder CE through the integrated trajectory plus the auxiliary head.
    Fused,
    /// Force matching with a learned metric and a transport term on the
    /// integration endpoint.
    MetricOt,
    /// Bounded residual refiner on top of a frozen raw flow.
    Residual,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::RawFlow, Variant::Fused, Variant::MetricOt, Variant::Residual];

    pub fn name(self) -> &'static str {
        match self {
            Variant::RawFlow => "raw_flow",
            Variant::Fused => "fused",
            Variant::MetricOt => "metric_ot",
            Variant::Residual => "residual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage-2 variant {s:?} (expected raw_flow, fused, metric_ot or residual)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    /// FlowNet width; the model width `h` when unset.
    pub flow_width: Option<usize>,
    /// Draft corruption used for both training and evaluation starts.
    pub dropout: f64,
    pub rho: f64,
    pub gamma: f64,
    pub train_ode_steps: usize,
    pub eval_ode_steps: usize,
    /// Trajectory index read by the auxiliary head; `⌊T/2⌋` when unset.
    pub aux_step: Option<usize>,
    pub beta: f64,
    pub metric_reg_weight: f64,
    pub ot_weight: f64,
    pub ot: OtBackend,
    pub residual_lambda: f64,
    pub train: TrainConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            flow_width: None,
            dropout: 0.05,
            rho: 0.05,
            gamma: 0.01,
            train_ode_steps: 2,
            eval_ode_steps: 16,
            aux_step: None,
            beta: 0.1,
            metric_reg_weight: 1e-3,
            ot_weight: 0.1,
            ot: OtBackend::default(),
            residual_lambda: 0.1,
            train: TrainConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        self.train.validate("stage2")?;
        let bad = |what: &str| Err(Error::Config(format!("stage2: {what}")));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad("rho must lie in (0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if self.train_ode_steps == 0 {
            return bad("train_ode_steps must be >= 1");
        }
        if let Some(k) = self.aux_step {
            if k > self.train_ode_steps {
                return bad("aux_step exceeds train_ode_steps");
            }
        }
        if !(self.beta >= 0.0) || !(self.metric_reg_weight >= 0.0) || !(self.ot_weight >= 0.0) {
            return bad("loss weights must be >= 0");
        }
        if !(self.residual_lambda > 0.0 && self.residual_lambda.is_finite()) {
            return bad("residual_lambda must be positive");
        }
        Ok(())
    }

    pub fn width(&self, dims: &ModelDims) -> usize {
        self.flow_width.unwrap_or(dims.h)
    }

    pub fn aux_index(&self) -> usize {
        self.aux_step.unwrap_or(self.train_ode_steps / 2)
    }
}

/// All stage-2 parameters of one variant in a single store: `flow.*` plus
/// `metric.*`, `aux.*` or `res.*` as the variant requires.
#[derive(Clone, Debug)]
pub struct Stage2Model<T> {
    pub variant: Variant,
    pub dims: ModelDims,
    pub width: usize,
    pub lambda: f64,
    params: ParamStore<T>,
}

impl<T: Scalar> Stage2Model<T> {
    /// Fresh parameters. The residual variant starts from a trained raw flow,
    /// whose field it keeps frozen.
    pub fn new(variant: Variant, dims: ModelDims, cfg: &Stage2Config, seed: u64, base: Option<&Stage2Model<T>>) -> Result<Self> {
        let width = cfg.width(&dims);
        let mut params = match (variant, base) {
            (Variant::Residual, Some(b)) if b.variant == Variant::RawFlow => b.params.subset("flow."),
            (Variant::Residual, _) => return Err(Error::MissingPrerequisite("residual variant needs a trained raw_flow model".into())),
            _ => FlowNet::<T>::new(dims, width, derive_seed(seed, 1))?.params().clone(),
        };
        match variant {
            Variant::Fused => params.merge(AuxHead::<T>::new(dims, derive_seed(seed, 2))?.params())?,
            Variant::MetricOt => params.merge(MetricNet::<T>::new(dims, derive_seed(seed, 3))?.params())?,
            Variant::Residual => params.merge(Refiner::<T>::new(dims, cfg.residual_lambda, derive_seed(seed, 4))?.params())?,
            Variant::RawFlow => {}
        }
        params.rng_seed = seed;
        Ok(Self { variant, dims, width, lambda: cfg.residual_lambda, params })
    }

    pub fn from_params(variant: Variant, dims: ModelDims, width: usize, lambda: f64, params: ParamStore<T>) -> Result<Self> {
        let cfg = Stage2Config { flow_width: Some(width), residual_lambda: lambda, ..Default::default() };
        let base = Self::new(Variant::RawFlow, dims, &cfg, 0, None)?;
        let reference = Self::new(variant, dims, &cfg, 0, Some(&base))?;
        check_like(&reference.params, &params, variant.name())?;
        Ok(Self { variant, dims, width, lambda, params })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn has_metric(&self) -> bool {
        self.variant == Variant::MetricOt
    }

    /// Refined suffix latents from `z_start`, with the metric diagonals seen
    /// along the way.
    pub fn refine(&self, z_start: &Tensor<T>, z_p: &Tensor<T>, batch: usize, steps: usize, gamma: f64) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let flow = FlowNet::from_params(self.dims, self.width, self.params.subset("flow."))?;
        let metric = if self.has_metric() { Some(MetricNet::from_params(self.dims, self.params.subset("metric."))?) } else { None };
        let tr = integrate(&flow, metric.as_ref(), z_start, z_p, batch, steps, gamma)?;
        let z = tr.end().clone();
        let z = if self.variant == Variant::Residual {
            let r = Refiner::from_params(self.dims, self.lambda, self.params.subset("res."))?;
            bounded_residual(&z, z_p, &r, batch)?
        } else {
            z
        };
        Ok((z, tr.metrics))
    }
}

/// Training pairs at the stage-2 corruption level.
pub struct Stage2Data<T> {
    pub enc: DpTrainData<T>,
}

impl<T: Scalar> Stage2Data<T> {
    pub fn build(ae: &Autoencoder<T>, train: &[TokenSequence], cfg: &Stage2Config, seed: u64) -> Result<Self> {
        Ok(Self { enc: DpTrainData::build(ae, train, &[cfg.dropout], seed)? })
    }
}

fn real_rows(select: &[bool]) -> Vec<usize> {
    select.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i).collect()
}

fn pick_rows<T: Scalar>(t: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let data: Vec<T> = rows.iter().flat_map(|&r| t.row(r).to_vec()).collect();
    Tensor::new(vec![rows.len(), t.cols()], data)
}

/// Trains one variant against the frozen autoencoder and DraftPrior. Resumes
/// from `opt.step` and stops at `min(cfg.train.steps, stop_at)`.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2<T: Scalar>(
    model: &mut Stage2Model<T>,
    opt: &mut AdamW<T>,
    ae: &Autoencoder<T>,
    dp: &DraftPrior<T>,
    alpha: f64,
    data: &Stage2Data<T>,
    cfg: &Stage2Config,
    seed: u64,
    stop_at: Option<usize>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if !ae.is_frozen() {
        return Err(Error::MissingPrerequisite("frozen stage-1 autoencoder".into()));
    }
    let dims = model.dims;
    let width = model.width;
    let variant = model.variant;
    let lambda = model.lambda;
    let end = stop_at.map_or(cfg.train.steps, |s| s.min(cfg.train.steps));
    let mut log = TrainLog::new(&["step", "loss", "term", "ot_cost"]);
    let (mut sums, mut since) = ([0.0f64; 3], 0usize);
    let dec = ae.binder();
    let steps = cfg.train_ode_steps;
    for step in opt.step as usize..end {
        let b = data.enc.batch(seed, cfg.train.batch_size, step, &dims)?;
        let batch = b.batch();
        let z_t = mix_with_noise(&b.z_draft, &MixSpec::new(alpha, derive_seed(seed ^ 0x57a6e2, step as u64))?)?;
        let z_start = dp.predict_start(&z_t, &b.z_p, alpha, batch)?;
        let sel = b.slot_select(&dims);
        let mut r = rng(derive_seed(seed ^ 0x71e, step as u64));
        let times: Vec<f64> = (0..batch).map(|_| uniform(&mut r)).collect();
        let path = || -> Result<FlowSample<T>> {
            let mut s = sample_flow_batch(&z_start, &b.z_s, &times)?;
            s.u_t = local_target(&b.z_s, &z_start, cfg.rho)?;
            Ok(s)
        };
        let z_ode = if variant == Variant::Residual {
            let flow = FlowNet::from_params(dims, width, model.params.subset("flow."))?;
            Some(integrate(&flow, None, &z_start, &b.z_p, batch, steps, cfg.gamma)?.end().clone())
        } else {
            None
        };
        let mut extra = [0.0f64; 2];
        let (loss, _) = train_step(&mut model.params, opt, step, |g, s| {
            let p = Binder::trainable(s);
            let zp = g.constant(b.z_p.clone());
            match variant {
                Variant::RawFlow => flow_matching_loss_var(g, &p, &dims, width, &path()?, zp, &sel),
                Variant::Fused => {
                    let z0 = g.constant(z_start.clone());
                    let field = FieldBinders { flow: &p, metric: None, width };
                    let (states, _) = integrate_var(g, field, &dims, z0, zp, batch, steps, cfg.gamma)?;
                    let mid = states[cfg.aux_index()];
                    let (total, _, aux) = fused_loss_var(g, &dec, &p, &dims, zp, states[steps], mid, &b.targets, cfg.beta)?;
                    extra[0] = g.scalar(aux).f64();
                    Ok(total)
                }
                Variant::MetricOt => {
                    let (force, gm) = force_matching_loss_var(g, &p, &p, &dims, width, &path()?, zp, &sel)?;
                    let reg = metric_reg_var(g, gm, cfg.metric_reg_weight / g.value(gm).rows() as f64)?;
                    let base = g.add(force, reg)?;
                    extra[0] = g.scalar(force).f64();
                    let z0 = g.constant(z_start.clone());
                    let field = FieldBinders { flow: &p, metric: Some(&p), width };
                    let (states, _) = integrate_var(g, field, &dims, z0, zp, batch, steps, cfg.gamma)?;
                    let rows = real_rows(&sel);
                    let a = g.gather_rows(states[steps], &rows)?;
                    let target = pick_rows(&b.z_s, &rows)?;
                    let (total, cost) = ot_regularized_loss(g, base, a, &target, cfg.ot_weight, &cfg.ot)?;
                    extra[1] = cost;
                    Ok(total)
                }
                Variant::Residual => {
                    let z = g.constant(z_ode.clone().expect("residual start"));
                    let zr = Refiner::apply_var(g, &p, &dims, lambda, z, zp, batch)?;
                    decoder_ce_var(g, &dec, &dims, zp, zr, &b.targets)
                }
            }
        })?;
        sums[0] += loss;
        sums[1] += extra[0];
        sums[2] += extra[1];
        since += 1;
        let done = step + 1;
        if done % cfg.train.eval_every == 0 || done == end {
            let avg: Vec<f64> = sums.iter().map(|s| s / since as f64).collect();
            info!("stage2 {} step {done}: loss {:.5}", variant.name(), avg[0]);
            log.push(vec![done as f64, avg[0], avg[1], avg[2]]);
            sums = [0.0; 3];
            since = 0;
        }
    }
    Ok(log)
}

/// Fixed evaluation starts: the validation set at the stage-2 corruption
/// level with per-example seeds.
pub struct Stage2Eval<T> {
    pub enc: EncodedBatch<T>,
    /// Noise-mixed drafts fed to the DraftPrior.
    pub z_t: Tensor<T>,
    pub z_start: Tensor<T>,
    pub seed: u64,
}

impl<T: Scalar> Stage2Eval<T> {
    pub fn build(ae: &Autoencoder<T>, dp: &DraftPrior<T>, val: &[TokenSequence], alpha: f64, cfg: &Stage2Config, seed: u64) -> Result<Self> {
        let (enc, noise) = encode_level(ae, val, cfg.dropout, seed)?;
        let (z_t, z_start) = starts_for(dp, &enc, alpha, &noise)?;
        Ok(Self { enc, z_t, z_start, seed })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Row {
    pub variant: String,
    pub ce: f64,
    pub p_target: f64,
    pub top1: f64,
    /// Mean L2 distance from the start latent over real suffix slots.
    pub latent_move_l2: f64,
    pub metric_std: f64,
    pub ot_cost: f64,
    pub seed: u64,
    pub metric_min: f64,
    pub metric_max: f64,
}

/// Examples per transport evaluation; the reported cost is the mean over
/// chunks.
pub const OT_CHUNK: usize = 32;

fn mean_move<T: Scalar>(z: &Tensor<T>, z_start: &Tensor<T>, select: &[bool]) -> f64 {
    let rows = real_rows(select);
    let total: f64 = rows
        .iter()
        .map(|&r| z.row(r).iter().zip(z_start.row(r)).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum::<f64>().sqrt())
        .sum();
    total / rows.len() as f64
}

fn chunked_ot<T: Scalar>(z: &Tensor<T>, z_s: &Tensor<T>, select: &[bool], s: usize, backend: &OtBackend) -> Result<f64> {
    let batch = select.len() / s;
    let mut costs = Vec::new();
    for start in (0..batch).step_by(OT_CHUNK) {
        let end = (start + OT_CHUNK).min(batch);
        let rows: Vec<usize> = (start * s..end * s).filter(|&r| select[r]).collect();
        if rows.is_empty() {
            continue;
        }
        let (c, _) = backend.cost_and_grad(&pick_rows(z, &rows)?, &pick_rows(z_s, &rows)?)?;
        costs.push(c);
    }
    Ok(costs.iter().sum::<f64>() / costs.len().max(1) as f64)
}

fn row_for<T: Scalar>(
    name: &str,
    r: Recoverability,
    z: &Tensor<T>,
    ev: &Stage2Eval<T>,
    metric: Option<MetricStats>,
    dims: &ModelDims,
    cfg: &Stage2Config,
) -> Result<Stage2Row> {
    let sel = ev.enc.slot_select(dims);
    let m = metric.unwrap_or(MetricStats { std: 0.0, min: 1.0, max: 1.0 });
    Ok(Stage2Row {
        variant: name.to_string(),
        ce: r.ce,
        p_target: r.p_target,
        top1: r.top1,
        latent_move_l2: mean_move(z, &ev.z_start, &sel),
        metric_std: m.std,
        ot_cost: chunked_ot(z, &ev.enc.z_s, &sel, dims.suffix(), &cfg.ot)?,
        seed: ev.seed,
        metric_min: m.min,
        metric_max: m.max,
    })
}

/// Refined latents for the whole evaluation set, in evaluation chunks.
pub fn refine_set<T: Scalar>(model: &Stage2Model<T>, ev: &Stage2Eval<T>, steps: usize, gamma: f64) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let dims = model.dims;
    let (m, s) = (dims.m, dims.suffix());
    let batch = ev.enc.batch();
    let (mut zs, mut metrics) = (Vec::new(), Vec::new());
    for start in (0..batch).step_by(crate::autoencoder::EVAL_BATCH) {
        let end = (start + crate::autoencoder::EVAL_BATCH).min(batch);
        let z0 = ev.z_start.slice_rows(start * s, end * s)?;
        let zp = ev.enc.z_p.slice_rows(start * m, end * m)?;
        let (z, g) = model.refine(&z0, &zp, end - start, steps, gamma)?;
        zs.push(z);
        metrics.extend(g);
    }
    Ok((Tensor::concat_rows(&zs.iter().collect::<Vec<_>>())?, metrics))
}

/// Metric statistics over real suffix slots of every stored diagonal.
fn metric_summary<T: Scalar>(metrics: &[Tensor<T>]) -> Option<MetricStats> {
    if metrics.is_empty() {
        return None;
    }
    Tensor::concat_rows(&metrics.iter().collect::<Vec<_>>()).ok().map(|t| metric_stats(&t))
}

/// Comparison rows: the DraftPrior start, each trained variant, and the
/// oracle ceiling, all on the same evaluation starts.
pub fn stage2_report<T: Scalar>(
    models: &[&Stage2Model<T>],
    ae: &Autoencoder<T>,
    ev: &Stage2Eval<T>,
    val: &[TokenSequence],
    cfg: &Stage2Config,
) -> Result<Vec<Stage2Row>> {
    let dims = ae.dims;
    let mut rows = Vec::new();
    let r = score_suffix(ae, &ev.enc.z_p, &ev.z_start, &ev.enc.targets)?;
    rows.push(row_for("start", r, &ev.z_start, ev, None, &dims, cfg)?);
    for model in models {
        let (z, metrics) = refine_set(model, ev, cfg.eval_ode_steps, cfg.gamma)?;
        let r = score_suffix(ae, &ev.enc.z_p, &z, &ev.enc.targets)?;
        rows.push(row_for(model.variant.name(), r, &z, ev, metric_summary(&metrics), &dims, cfg)?);
    }
    let r = ae.oracle_eval(val)?;
    rows.push(row_for("oracle", r, &ev.enc.z_s, ev, None, &dims, cfg)?);
    Ok(rows)
}

pub fn stage2_csv(rows: &[Stage2Row]) -> String {
    let mut s = String::from("variant,ce,p_target,top1,latent_move_l2,metric_std,ot_cost,seed,metric_min,metric_max\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.variant, r.ce, r.p_target, r.top1, r.latent_move_l2, r.metric_std, r.ot_cost, r.seed, r.metric_min, r.metric_max
        );
    }
    s
}
