//! DraftPrior: mixes an encoded draft with Gaussian noise and predicts a
//! residual correction toward the real suffix latent.

use log::info;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{join_full_var, split_full, suffix_select, Autoencoder, ModelDims, EVAL_BATCH};
use crate::corpus::{corrupt_draft, CorruptionSpec, SlotBatch, TokenSequence};
use crate::diagnostics::{Recoverability, RecoverabilityAcc};
use crate::error::{Error, Result};
use crate::layers::{block, init_block, init_layer_norm, init_linear, init_linear_default, layer_norm, linear, position_index, Binder};
use crate::numerics::rng::{derive_seed, rng, uniform};
use crate::numerics::{gaussian_sample, AdamW, Graph, ParamStore, Scalar, Tensor, Var};
use crate::train::{batch_indices, train_step, TrainConfig, TrainLog};

pub const DP_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixSpec {
    pub alpha: f64,
    pub seed: u64,
}

impl MixSpec {
    pub fn new(alpha: f64, seed: u64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {alpha} outside (0, 1]")));
        }
        Ok(Self { alpha, seed })
    }
}

/// `α·z_draft + sqrt(1−α²)·ε` with `ε ~ N(0, I)` drawn from `spec.seed`.
pub fn mix_with_noise<T: Scalar>(z_draft: &Tensor<T>, spec: &MixSpec) -> Result<Tensor<T>> {
    MixSpec::new(spec.alpha, spec.seed)?;
    if spec.alpha == 1.0 {
        return Ok(z_draft.clone());
    }
    let eps = gaussian_sample::<T>(z_draft.shape(), spec.seed)?;
    let a = T::c(spec.alpha);
    let b = T::c((1.0 - spec.alpha * spec.alpha).sqrt());
    z_draft.zip_map(&eps, |z, e| a * z + b * e)
}

/// Weights of the combined DraftPrior objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpLossWeights {
    pub mse: f64,
    pub cos: f64,
    pub norm: f64,
}

impl Default for DpLossWeights {
    fn default() -> Self {
        Self { mse: 1.0, cos: 0.5, norm: 0.1 }
    }
}

/// Individual terms of the DraftPrior loss as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct DpLossTerms {
    pub total: Var,
    pub ce: Var,
    pub mse: Var,
    pub cos: Var,
    pub norm: Var,
}

/// Per-slot geometry terms over the rows where `select` holds: mean squared
/// error per coordinate, mean `1 − cos`, and mean squared norm difference.
pub fn geometry_terms<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, select: &[bool]) -> Result<(Var, Var, Var)> {
    let d = g.value(a).cols();
    let count = select.iter().filter(|&&s| s).count();
    if count == 0 {
        return Err(Error::Invalid("geometry terms over zero slots".into()));
    }
    let w = |scale: f64| -> Vec<T> { select.iter().map(|&s| if s { T::c(scale) } else { T::zero() }).collect() };
    let diff = g.sub(a, b)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.weighted_row_sum(sq, &w(1.0 / (count * d) as f64))?;
    let dot = g.row_dot(a, b)?;
    let na = g.row_norm(a);
    let nb = g.row_norm(b);
    let den = g.mul(na, nb)?;
    let cosv = g.div(dot, den)?;
    let mean_cos = g.weighted_row_sum(cosv, &w(1.0 / count as f64))?;
    let one = g.constant(Tensor::scalar(T::one()));
    let cos = g.sub(one, mean_cos)?;
    let dn = g.sub(na, nb)?;
    let dn2 = g.mul(dn, dn)?;
    let norm = g.weighted_row_sum(dn2, &w(1.0 / count as f64))?;
    Ok((mse, cos, norm))
}

/// `L_CE + λ1·MSE + λ2·(1 − cos) + λ3·(‖z_start‖ − ‖z_s‖)²`. CE is read by
/// the frozen decoder from `[z_p, z_start]` over real suffix positions; the
/// geometry terms are per slot over the same positions.
#[allow(clippy::too_many_arguments)]
pub fn draftprior_loss_var<T: Scalar>(
    g: &mut Graph<T>,
    decoder: &Binder<T>,
    dims: &ModelDims,
    z_p: Var,
    z_start: Var,
    z_s: Var,
    targets: &SlotBatch,
    w: &DpLossWeights,
) -> Result<DpLossTerms> {
    let (m, n) = (dims.m, dims.n);
    let batch = targets.batch;
    let full = join_full_var(g, z_p, z_start, batch, m, n)?;
    let logits = Autoencoder::decode_var(g, decoder, dims, full, batch)?;
    let sel = suffix_select(targets, m);
    let count = sel.iter().filter(|&&s| s).count();
    if count == 0 {
        return Err(Error::Invalid("draftprior loss: empty target mask".into()));
    }
    let ce_w: Vec<T> = sel.iter().map(|&s| if s { T::c(1.0 / count as f64) } else { T::zero() }).collect();
    let ce = g.cross_entropy(logits, &targets.ids, &ce_w)?;
    let slot_sel: Vec<bool> = (0..batch * (n - m)).map(|r| targets.mask[(r / (n - m)) * n + m + r % (n - m)]).collect();
    let (mse, cos, norm) = geometry_terms(g, z_start, z_s, &slot_sel)?;
    let a = g.scale(mse, T::c(w.mse));
    let b = g.scale(cos, T::c(w.cos));
    let c = g.scale(norm, T::c(w.norm));
    let t = g.add(ce, a)?;
    let t = g.add(t, b)?;
    let total = g.add(t, c)?;
    Ok(DpLossTerms { total, ce, mse, cos, norm })
}

#[derive(Clone, Debug)]
pub struct DraftPrior<T> {
    pub dims: ModelDims,
    params: ParamStore<T>,
}

impl<T: Scalar> DraftPrior<T> {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut p = ParamStore::new(seed);
        let h = dims.h;
        init_linear_default(&mut p, "dp.in", dims.d, h)?;
        init_linear_default(&mut p, "dp.mem", dims.d, h)?;
        init_linear_default(&mut p, "dp.alpha", 1, h)?;
        p.init_normal("dp.pos", &[dims.suffix(), h], 0.1)?;
        for l in 0..DP_LAYERS {
            init_block(&mut p, &format!("dp.block{l}"), &dims.block_spec(true, None))?;
        }
        init_layer_norm(&mut p, "dp.ln_f", h)?;
        init_linear(&mut p, "dp.out", h, dims.d, 0.0)?;
        Ok(Self { dims, params: p })
    }

    pub fn from_params(dims: ModelDims, params: ParamStore<T>) -> Result<Self> {
        let reference = Self::new(dims, 0)?;
        check_like(reference.params(), &params, "draftprior")?;
        Ok(Self { dims, params })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// `z_t + f_eta(z_t, z_p, α)` for stacked suffix `[batch·(n−m) × d]` and
    /// prompt `[batch·m × d]` latents.
    pub fn forward_var(g: &mut Graph<T>, p: &Binder<T>, dims: &ModelDims, z_t: Var, z_p: Var, alpha: f64, batch: usize) -> Result<Var> {
        let s = dims.suffix();
        if g.value(z_t).shape() != [batch * s, dims.d] || g.value(z_p).shape() != [batch * dims.m, dims.d] {
            return Err(Error::Shape(format!(
                "draftprior inputs {:?} / {:?} for batch {batch}",
                g.value(z_t).shape(),
                g.value(z_p).shape()
            )));
        }
        let x = linear(g, p, "dp.in", z_t)?;
        let pos = p.get(g, "dp.pos")?;
        let pe = g.gather_rows(pos, &position_index(batch, s))?;
        let x = g.add(x, pe)?;
        let a = g.constant(Tensor::full(&[batch * s, 1], T::c(alpha))?);
        let ae = linear(g, p, "dp.alpha", a)?;
        let mut x = g.add(x, ae)?;
        let mem = linear(g, p, "dp.mem", z_p)?;
        let spec = dims.block_spec(true, None);
        for l in 0..DP_LAYERS {
            x = block(g, p, &format!("dp.block{l}"), &spec, x, batch, s, Some((mem, dims.m)))?;
        }
        let x = layer_norm(g, p, "dp.ln_f", x)?;
        let f = linear(g, p, "dp.out", x)?;
        g.add(z_t, f)
    }

    pub fn predict_start(&self, z_t: &Tensor<T>, z_p: &Tensor<T>, alpha: f64, batch: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let zt = g.constant(z_t.clone());
        let zp = g.constant(z_p.clone());
        let out = Self::forward_var(&mut g, &Binder::frozen(&self.params), &self.dims, zt, zp, alpha, batch)?;
        Ok(g.value(out).clone())
    }
}

pub(crate) fn check_like<T: Scalar>(reference: &ParamStore<T>, params: &ParamStore<T>, what: &str) -> Result<()> {
    for (name, t) in reference.iter() {
        match params.get(name) {
            None => return Err(Error::MissingParam(name.clone())),
            Some(p) if p.shape() != t.shape() => {
                return Err(Error::Shape(format!("{name}: {:?} vs expected {:?}", p.shape(), t.shape())))
            }
            _ => {}
        }
    }
    if params.len() != reference.len() {
        return Err(Error::Invalid(format!("unexpected tensors in {what} parameters")));
    }
    Ok(())
}

/// Frozen-encoder view of one example and its draft, stacked over a batch.
#[derive(Clone, Debug)]
pub struct EncodedBatch<T> {
    /// Target sequences (prompt + real continuation); the mask defines the
    /// scored positions.
    pub targets: SlotBatch,
    /// Prompt latents from encoding prompt ⊕ draft, `[batch·m × d]`.
    pub z_p: Tensor<T>,
    /// Draft suffix latents from the same encoding, `[batch·(n−m) × d]`.
    pub z_draft: Tensor<T>,
    /// Oracle suffix latents from encoding prompt ⊕ target.
    pub z_s: Tensor<T>,
    /// Oracle prompt latents from the same encoding.
    pub z_p_oracle: Tensor<T>,
}

impl<T: Scalar> EncodedBatch<T> {
    pub fn batch(&self) -> usize {
        self.targets.batch
    }

    /// Examples `idx` of the batch, in that order.
    pub fn slice(&self, idx: &[usize], dims: &ModelDims) -> Result<Self> {
        let pick = |t: &Tensor<T>, rows: usize| -> Result<Tensor<T>> {
            let data: Vec<T> = idx.iter().flat_map(|&i| t.data()[i * rows * t.cols()..(i + 1) * rows * t.cols()].to_vec()).collect();
            Tensor::new(vec![idx.len() * rows, t.cols()], data)
        };
        let n = self.targets.slots;
        let targets = SlotBatch {
            ids: idx.iter().flat_map(|&i| self.targets.ids[i * n..(i + 1) * n].to_vec()).collect(),
            mask: idx.iter().flat_map(|&i| self.targets.mask[i * n..(i + 1) * n].to_vec()).collect(),
            batch: idx.len(),
            slots: n,
        };
        Ok(Self {
            targets,
            z_p: pick(&self.z_p, dims.m)?,
            z_draft: pick(&self.z_draft, dims.suffix())?,
            z_s: pick(&self.z_s, dims.suffix())?,
            z_p_oracle: pick(&self.z_p_oracle, dims.m)?,
        })
    }

    /// Real suffix slot selector over stacked suffix rows.
    pub fn slot_select(&self, dims: &ModelDims) -> Vec<bool> {
        let (m, n, s) = (dims.m, dims.n, dims.suffix());
        (0..self.batch() * s).map(|r| self.targets.mask[(r / s) * n + m + r % s]).collect()
    }
}

/// Draft obtained by dropping target tokens, re-attached to the prompt.
pub fn draft_sequence(target: &TokenSequence, m: usize, spec: &CorruptionSpec) -> TokenSequence {
    let prompt = target.region(0, m);
    let draft = corrupt_draft(&target.region(m, target.len()), spec);
    prompt.concat(&draft)
}

/// Encodes targets and drafts through the frozen encoder.
pub fn encode_pairs<T: Scalar>(ae: &Autoencoder<T>, targets: &[&TokenSequence], drafts: &[&TokenSequence]) -> Result<EncodedBatch<T>> {
    if targets.len() != drafts.len() {
        return Err(Error::Shape("targets and drafts differ in count".into()));
    }
    let dims = ae.dims;
    let tb = SlotBatch::new(targets)?;
    let db = SlotBatch::new(drafts)?;
    let (z_p_oracle, z_s) = split_full(&ae.encode_batch(&tb)?, tb.batch, dims.m, dims.n)?;
    let (z_p, z_draft) = split_full(&ae.encode_batch(&db)?, db.batch, dims.m, dims.n)?;
    Ok(EncodedBatch { targets: tb, z_p, z_draft, z_s, z_p_oracle })
}

/// Encodes a whole set in evaluation-sized chunks and stacks the result.
pub fn encode_set<T: Scalar>(ae: &Autoencoder<T>, targets: &[TokenSequence], drafts: &[TokenSequence]) -> Result<EncodedBatch<T>> {
    let mut parts = Vec::new();
    for (t, d) in targets.chunks(EVAL_BATCH).zip(drafts.chunks(EVAL_BATCH)) {
        let tr: Vec<&TokenSequence> = t.iter().collect();
        let dr: Vec<&TokenSequence> = d.iter().collect();
        parts.push(encode_pairs(ae, &tr, &dr)?);
    }
    concat_batches(&parts)
}

pub fn concat_batches<T: Scalar>(parts: &[EncodedBatch<T>]) -> Result<EncodedBatch<T>> {
    let first = parts.first().ok_or_else(|| Error::Invalid("no batches".into()))?;
    let cat = |f: &dyn Fn(&EncodedBatch<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
        Tensor::concat_rows(&parts.iter().map(f).collect::<Vec<_>>())
    };
    Ok(EncodedBatch {
        targets: SlotBatch {
            ids: parts.iter().flat_map(|p| p.targets.ids.iter().copied()).collect(),
            mask: parts.iter().flat_map(|p| p.targets.mask.iter().copied()).collect(),
            batch: parts.iter().map(|p| p.batch()).sum(),
            slots: first.targets.slots,
        },
        z_p: cat(&|p| &p.z_p)?,
        z_draft: cat(&|p| &p.z_draft)?,
        z_s: cat(&|p| &p.z_s)?,
        z_p_oracle: cat(&|p| &p.z_p_oracle)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DraftPriorConfig {
    pub alpha: f64,
    /// Sample α ~ U(alpha_min, alpha_max) per batch instead of the fixed α.
    pub sample_alpha: bool,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub loss: DpLossWeights,
    /// Corruption levels mixed uniformly during training.
    pub train_dropouts: Vec<f64>,
    pub train: TrainConfig,
}

impl Default for DraftPriorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            sample_alpha: false,
            alpha_min: 0.5,
            alpha_max: 0.9,
            loss: DpLossWeights::default(),
            train_dropouts: vec![0.0, 0.03, 0.05, 0.10],
            train: TrainConfig::default(),
        }
    }
}

impl DraftPriorConfig {
    pub fn validate(&self) -> Result<()> {
        MixSpec::new(self.alpha, 0)?;
        if self.sample_alpha {
            MixSpec::new(self.alpha_min, 0)?;
            MixSpec::new(self.alpha_max, 0)?;
            if self.alpha_min > self.alpha_max {
                return Err(Error::Config("alpha_min > alpha_max".into()));
            }
        }
        let l = &self.loss;
        if [l.mse, l.cos, l.norm].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("draftprior loss weights must be finite and >= 0".into()));
        }
        if self.train_dropouts.is_empty() {
            return Err(Error::Config("train_dropouts is empty".into()));
        }
        for &p in &self.train_dropouts {
            CorruptionSpec::new(p, 0)?;
        }
        self.train.validate("draftprior")
    }
}

/// Seeds for the corruption and noise of validation example `i`.
pub fn eval_seeds(seed: u64, i: usize) -> (u64, u64) {
    (derive_seed(seed, 2 * i as u64), derive_seed(seed, 2 * i as u64 + 1))
}

/// Encoded training views, one per corruption level in the training grid.
pub struct DpTrainData<T> {
    pub levels: Vec<EncodedBatch<T>>,
}

impl<T: Scalar> DpTrainData<T> {
    /// Each example is corrupted once per level with a per-example seed, so
    /// the dropped sets are nested across levels.
    pub fn build(ae: &Autoencoder<T>, train: &[TokenSequence], dropouts: &[f64], seed: u64) -> Result<Self> {
        let levels = dropouts
            .iter()
            .map(|&p| {
                let drafts: Vec<TokenSequence> = train
                    .iter()
                    .enumerate()
                    .map(|(i, t)| Ok(draft_sequence(t, ae.dims.m, &CorruptionSpec::new(p, derive_seed(seed, i as u64))?)))
                    .collect::<Result<_>>()?;
                encode_set(ae, train, &drafts)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }

    pub fn len(&self) -> usize {
        self.levels[0].batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Training batch for `step`: examples from the shared schedule, each
    /// assigned a corruption level by a per-step stream.
    pub fn batch(&self, seed: u64, batch_size: usize, step: usize, dims: &ModelDims) -> Result<EncodedBatch<T>> {
        let idx = batch_indices(seed, self.len(), batch_size, step);
        let mut r = rng(derive_seed(seed ^ 0x5eed_1e7e1, step as u64));
        let parts = idx
            .iter()
            .map(|&i| {
                let lvl = ((uniform(&mut r) * self.levels.len() as f64) as usize).min(self.levels.len() - 1);
                self.levels[lvl].slice(&[i], dims)
            })
            .collect::<Result<Vec<_>>>()?;
        concat_batches(&parts)
    }
}

/// Trains the DraftPrior against the frozen autoencoder; resumes from
/// `opt.step` and stops at `min(cfg.train.steps, stop_at)`.
#[allow(clippy::too_many_arguments)]
pub fn train_draftprior<T: Scalar>(
    dp: &mut DraftPrior<T>,
    opt: &mut AdamW<T>,
    ae: &Autoencoder<T>,
    data: &DpTrainData<T>,
    val: &[TokenSequence],
    cfg: &DraftPriorConfig,
    seed: u64,
    stop_at: Option<usize>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if !ae.is_frozen() {
        return Err(Error::MissingPrerequisite("frozen stage-1 autoencoder".into()));
    }
    let dims = dp.dims;
    let end = stop_at.map_or(cfg.train.steps, |s| s.min(cfg.train.steps));
    let mut log = TrainLog::new(&["step", "loss", "ce", "mse", "cos", "norm", "val_ce", "val_p_target", "val_top1"]);
    let mut sums = [0.0f64; 5];
    let mut since = 0usize;
    let dec = ae.binder();
    for step in opt.step as usize..end {
        let b = data.batch(seed, cfg.train.batch_size, step, &dims)?;
        let alpha = if cfg.sample_alpha {
            let mut r = rng(derive_seed(seed ^ 0xa1fa, step as u64));
            cfg.alpha_min + (cfg.alpha_max - cfg.alpha_min) * uniform(&mut r)
        } else {
            cfg.alpha
        };
        let z_t = mix_with_noise(&b.z_draft, &MixSpec::new(alpha, derive_seed(seed ^ 0x4015e, step as u64))?)?;
        let mut parts = [0.0f64; 4];
        let (loss, _) = train_step(dp.params_mut(), opt, step, |g, s| {
            let zt = g.constant(z_t.clone());
            let zp = g.constant(b.z_p.clone());
            let zs = g.constant(b.z_s.clone());
            let start = DraftPrior::forward_var(g, &Binder::trainable(s), &dims, zt, zp, alpha, b.batch())?;
            let t = draftprior_loss_var(g, &dec, &dims, zp, start, zs, &b.targets, &cfg.loss)?;
            parts = [g.scalar(t.ce).f64(), g.scalar(t.mse).f64(), g.scalar(t.cos).f64(), g.scalar(t.norm).f64()];
            Ok(t.total)
        })?;
        sums[0] += loss;
        for k in 0..4 {
            sums[k + 1] += parts[k];
        }
        since += 1;
        let done = step + 1;
        if done % cfg.train.eval_every == 0 || done == end {
            let r = evaluate_level(dp, ae, val, 0.0, cfg.alpha, seed)?;
            let avg: Vec<f64> = sums.iter().map(|s| s / since as f64).collect();
            info!("draftprior step {done}: loss {:.4} ce {:.4} val p {:.4}", avg[0], avg[1], r.p_target);
            let mut row = vec![done as f64];
            row.extend(avg);
            row.extend([r.ce, r.p_target, r.top1]);
            log.push(row);
            sums = [0.0; 5];
            since = 0;
        }
    }
    Ok(log)
}

/// Start latents for a stacked encoded set with per-example noise seeds.
pub fn starts_for<T: Scalar>(dp: &DraftPrior<T>, enc: &EncodedBatch<T>, alpha: f64, noise_seeds: &[u64]) -> Result<(Tensor<T>, Tensor<T>)> {
    let dims = dp.dims;
    let s = dims.suffix();
    let mut zt_all = Vec::new();
    let mut start_all = Vec::new();
    let all: Vec<usize> = (0..enc.batch()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let sub = enc.slice(chunk, &dims)?;
        let mut zt = Vec::with_capacity(chunk.len() * s * dims.d);
        for (k, &i) in chunk.iter().enumerate() {
            let rows = sub.z_draft.slice_rows(k * s, (k + 1) * s)?;
            zt.extend_from_slice(mix_with_noise(&rows, &MixSpec::new(alpha, noise_seeds[i])?)?.data());
        }
        let zt = Tensor::new(vec![chunk.len() * s, dims.d], zt)?;
        let start = dp.predict_start(&zt, &sub.z_p, alpha, chunk.len())?;
        zt_all.push(zt);
        start_all.push(start);
    }
    let cat = |v: &[Tensor<T>]| Tensor::concat_rows(&v.iter().collect::<Vec<_>>());
    Ok((cat(&zt_all)?, cat(&start_all)?))
}

/// Decodes `[z_p, suffix]` for a stacked set and scores real suffix tokens.
pub fn score_suffix<T: Scalar>(ae: &Autoencoder<T>, z_p: &Tensor<T>, suffix: &Tensor<T>, targets: &SlotBatch) -> Result<Recoverability> {
    let dims = ae.dims;
    let (m, s) = (dims.m, dims.suffix());
    let mut acc = RecoverabilityAcc::default();
    let n = targets.slots;
    for start in (0..targets.batch).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(targets.batch);
        let b = end - start;
        let zp = z_p.slice_rows(start * m, end * m)?;
        let zs = suffix.slice_rows(start * s, end * s)?;
        let full = crate::autoencoder::join_full(&zp, &zs, b, m, dims.n)?;
        let logits = ae.decode_batch(&full, b)?;
        let sub = SlotBatch {
            ids: targets.ids[start * n..end * n].to_vec(),
            mask: targets.mask[start * n..end * n].to_vec(),
            batch: b,
            slots: n,
        };
        acc.add(&logits, &sub.ids, &suffix_select(&sub, m))?;
    }
    acc.finish()
}

/// Encoded validation set at one corruption level with the fixed
/// per-example seeds of [`eval_seeds`].
pub fn encode_level<T: Scalar>(ae: &Autoencoder<T>, val: &[TokenSequence], dropout: f64, seed: u64) -> Result<(EncodedBatch<T>, Vec<u64>)> {
    let mut drafts = Vec::with_capacity(val.len());
    let mut noise = Vec::with_capacity(val.len());
    for (i, t) in val.iter().enumerate() {
        let (cs, ns) = eval_seeds(seed, i);
        drafts.push(draft_sequence(t, ae.dims.m, &CorruptionSpec::new(dropout, cs)?));
        noise.push(ns);
    }
    Ok((encode_set(ae, val, &drafts)?, noise))
}

/// Recoverability of DraftPrior starts on one corruption level.
pub fn evaluate_level<T: Scalar>(dp: &DraftPrior<T>, ae: &Autoencoder<T>, val: &[TokenSequence], dropout: f64, alpha: f64, seed: u64) -> Result<Recoverability> {
    let (enc, noise) = encode_level(ae, val, dropout, seed)?;
    let (_, start) = starts_for(dp, &enc, alpha, &noise)?;
    score_suffix(ae, &enc.z_p, &start, &enc.targets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub dropout: f64,
    pub ce: f64,
    pub p_target: f64,
    pub top1: f64,
    pub n_examples: usize,
    pub seed: u64,
}

/// One row per dropout level over a fixed validation set and seeds.
pub fn corruption_curve<T: Scalar>(
    dp: &DraftPrior<T>,
    ae: &Autoencoder<T>,
    val: &[TokenSequence],
    dropouts: &[f64],
    alpha: f64,
    seed: u64,
) -> Result<Vec<CurveRow>> {
    if dropouts.is_empty() {
        return Err(Error::Invalid("empty dropout list".into()));
    }
    dropouts
        .iter()
        .map(|&p| {
            let r = evaluate_level(dp, ae, val, p, alpha, seed)?;
            Ok(CurveRow { dropout: p, ce: r.ce, p_target: r.p_target, top1: r.top1, n_examples: val.len(), seed })
        })
        .collect()
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("dropout,ce,p_target,top1,n_examples,seed\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.dropout, r.ce, r.p_target, r.top1, r.n_examples, r.seed));
    }
    s
}
