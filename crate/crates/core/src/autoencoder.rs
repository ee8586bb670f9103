//! Stage-1 latent autoencoder: a bidirectional transformer encoder with a
//! projection to `d`-dimensional slot latents, and a parallel decoder that
//! reads every slot distribution from the latent sequence at once.

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{SlotBatch, TokenSequence};
use crate::diagnostics::{Recoverability, RecoverabilityAcc};
use crate::error::{Error, Result};
use crate::layers::{block, init_block, init_layer_norm, init_linear, init_linear_default, layer_norm, linear, position_index, Binder, BlockSpec};
use crate::numerics::{AdamW, Graph, ParamStore, Scalar, Tensor, Var};
use crate::train::{batch_indices, train_step, TrainConfig, TrainLog};

/// Architecture sizes shared by every stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub vocab: usize,
    /// Latent width.
    pub d: usize,
    /// Transformer width.
    pub h: usize,
    pub heads: usize,
    /// Prompt slots.
    pub m: usize,
    /// Total slots.
    pub n: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 5 || self.d == 0 || self.h == 0 || self.heads == 0 {
            return Err(Error::Config(format!("degenerate dims {self:?}")));
        }
        if !self.h.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("h={} not divisible by heads={}", self.h, self.heads)));
        }
        if self.m == 0 || self.m >= self.n {
            return Err(Error::Config(format!("slot split m={} n={}", self.m, self.n)));
        }
        Ok(())
    }

    pub fn suffix(&self) -> usize {
        self.n - self.m
    }

    pub(crate) fn block_spec(&self, cross: bool, conv: Option<usize>) -> BlockSpec {
        BlockSpec { width: self.h, heads: self.heads, ffn_hidden: 4 * self.h, cross, conv }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Prompt,
    Suffix,
    Full,
}

/// Per-slot latents of one sequence (`rows × d`).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence<T> {
    pub values: Tensor<T>,
    pub region: Region,
}

impl<T: Scalar> LatentSequence<T> {
    pub fn prompt(&self, m: usize) -> Result<Self> {
        self.expect(Region::Full)?;
        Ok(Self { values: self.values.slice_rows(0, m)?, region: Region::Prompt })
    }

    pub fn suffix(&self, m: usize) -> Result<Self> {
        self.expect(Region::Full)?;
        Ok(Self { values: self.values.slice_rows(m, self.values.rows())?, region: Region::Suffix })
    }

    pub fn join(prompt: &Self, suffix: &Self) -> Result<Self> {
        prompt.expect(Region::Prompt)?;
        suffix.expect(Region::Suffix)?;
        Ok(Self { values: Tensor::concat_rows(&[&prompt.values, &suffix.values])?, region: Region::Full })
    }

    fn expect(&self, r: Region) -> Result<()> {
        if self.region != r {
            return Err(Error::Shape(format!("expected {r:?} latents, got {:?}", self.region)));
        }
        Ok(())
    }
}

const ENC_LAYERS: usize = 2;
const DEC_LAYERS: usize = 2;

#[derive(Clone, Debug)]
pub struct Autoencoder<T> {
    pub dims: ModelDims,
    params: ParamStore<T>,
    frozen: bool,
}

fn standardize<T: Scalar>(g: &mut Graph<T>, x: Var, width: usize) -> Result<Var> {
    let ones = g.constant(Tensor::full(&[width], T::one())?);
    let zeros = g.constant(Tensor::zeros(&[width])?);
    g.layer_norm(x, ones, zeros, T::c(1e-5))
}

impl<T: Scalar> Autoencoder<T> {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut p = ParamStore::new(seed);
        let h = dims.h;
        p.init_normal("enc.tok", &[dims.vocab, h], 1.0)?;
        p.init_normal("enc.pos", &[dims.n, h], 0.1)?;
        for l in 0..ENC_LAYERS {
            init_block(&mut p, &format!("enc.block{l}"), &dims.block_spec(false, None))?;
        }
        init_layer_norm(&mut p, "enc.ln_f", h)?;
        init_linear_default(&mut p, "enc.proj", h, dims.d)?;
        init_linear_default(&mut p, "dec.in", dims.d, h)?;
        p.init_normal("dec.pos", &[dims.n, h], 0.1)?;
        for l in 0..DEC_LAYERS {
            init_block(&mut p, &format!("dec.block{l}"), &dims.block_spec(false, None))?;
        }
        init_layer_norm(&mut p, "dec.ln_f", h)?;
        init_linear(&mut p, "dec.head", h, dims.vocab, 0.02)?;
        Ok(Self { dims, params: p, frozen: false })
    }

    /// Wraps loaded parameters; every expected tensor must be present with
    /// the right shape.
    pub fn from_params(dims: ModelDims, params: ParamStore<T>, frozen: bool) -> Result<Self> {
        let reference = Self::new(dims, 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                None => return Err(Error::MissingParam(name.clone())),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Shape(format!("{name}: {:?} vs expected {:?}", p.shape(), t.shape())))
                }
                _ => {}
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Invalid("unexpected tensors in autoencoder parameters".into()));
        }
        Ok(Self { dims, params, frozen })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Mutable access is refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore<T>> {
        if self.frozen {
            return Err(Error::Invalid("autoencoder is frozen".into()));
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Irreversible.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn binder(&self) -> Binder<'_, T> {
        Binder::frozen(&self.params)
    }

    /// Encoder latents `[batch·n × d]` for stacked token ids. The projection
    /// output is standardised per slot, so every latent has zero mean and
    /// unit variance across its `d` coordinates.
    pub fn encode_var(g: &mut Graph<T>, p: &Binder<T>, dims: &ModelDims, ids: &[usize], batch: usize) -> Result<Var> {
        if ids.len() != batch * dims.n {
            return Err(Error::Shape(format!("{} ids for batch {batch} of {} slots", ids.len(), dims.n)));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= dims.vocab) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {}", dims.vocab)));
        }
        let tok = p.get(g, "enc.tok")?;
        let x = g.gather_rows(tok, ids)?;
        let pos = p.get(g, "enc.pos")?;
        let pe = g.gather_rows(pos, &position_index(batch, dims.n))?;
        let mut x = g.add(x, pe)?;
        let spec = dims.block_spec(false, None);
        for l in 0..ENC_LAYERS {
            x = block(g, p, &format!("enc.block{l}"), &spec, x, batch, dims.n, None)?;
        }
        let x = layer_norm(g, p, "enc.ln_f", x)?;
        let z = linear(g, p, "enc.proj", x)?;
        standardize(g, z, dims.d)
    }

    /// Decoder logits `[batch·n × V]` for latents `[batch·n × d]`.
    pub fn decode_var(g: &mut Graph<T>, p: &Binder<T>, dims: &ModelDims, z: Var, batch: usize) -> Result<Var> {
        let zs = g.value(z).shape().to_vec();
        if zs.len() != 2 || zs[0] != batch * dims.n || zs[1] != dims.d {
            return Err(Error::Shape(format!("decoder expects [{} x {}] latents, got {zs:?}", batch * dims.n, dims.d)));
        }
        let x = linear(g, p, "dec.in", z)?;
        let pos = p.get(g, "dec.pos")?;
        let pe = g.gather_rows(pos, &position_index(batch, dims.n))?;
        let mut x = g.add(x, pe)?;
        let spec = dims.block_spec(false, None);
        for l in 0..DEC_LAYERS {
            x = block(g, p, &format!("dec.block{l}"), &spec, x, batch, dims.n, None)?;
        }
        let x = layer_norm(g, p, "dec.ln_f", x)?;
        linear(g, p, "dec.head", x)
    }

    /// Mean NLL over real positions of all slots.
    pub fn ae_loss_var(g: &mut Graph<T>, p: &Binder<T>, dims: &ModelDims, batch: &SlotBatch) -> Result<Var> {
        let count = batch.count(0, batch.slots);
        if count == 0 {
            return Err(Error::Invalid("ae_loss: no real positions".into()));
        }
        let z = Self::encode_var(g, p, dims, &batch.ids, batch.batch)?;
        let logits = Self::decode_var(g, p, dims, z, batch.batch)?;
        let w: Vec<T> = batch.weights(0, batch.slots, 1.0 / count as f64).into_iter().map(T::c).collect();
        g.cross_entropy(logits, &batch.ids, &w)
    }

    pub fn encode_batch(&self, batch: &SlotBatch) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let z = Self::encode_var(&mut g, &self.binder(), &self.dims, &batch.ids, batch.batch)?;
        Ok(g.value(z).clone())
    }

    pub fn decode_batch(&self, z: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let l = Self::decode_var(&mut g, &self.binder(), &self.dims, zv, batch)?;
        Ok(g.value(l).clone())
    }

    pub fn encode(&self, tokens: &TokenSequence) -> Result<LatentSequence<T>> {
        tokens.validate(self.dims.vocab)?;
        let b = SlotBatch::new(&[tokens])?;
        Ok(LatentSequence { values: self.encode_batch(&b)?, region: Region::Full })
    }

    pub fn decode_logits(&self, z: &LatentSequence<T>) -> Result<Tensor<T>> {
        z.expect(Region::Full)?;
        self.decode_batch(&z.values, 1)
    }

    pub fn ae_loss(&self, batch: &SlotBatch) -> Result<f64> {
        let mut g = Graph::new();
        let l = Self::ae_loss_var(&mut g, &self.binder(), &self.dims, batch)?;
        Ok(g.scalar(l).f64())
    }

    /// Recoverability of real latents on real suffix positions: the ceiling
    /// for every generated-latent comparison.
    pub fn oracle_eval(&self, seqs: &[TokenSequence]) -> Result<Recoverability> {
        let mut acc = RecoverabilityAcc::default();
        for chunk in seqs.chunks(EVAL_BATCH) {
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            let b = SlotBatch::new(&refs)?;
            let z = self.encode_batch(&b)?;
            let logits = self.decode_batch(&z, b.batch)?;
            acc.add(&logits, &b.ids, &suffix_select(&b, self.dims.m))?;
        }
        acc.finish()
    }
}

/// Row indices that interleave stacked prompt rows `[batch·m]` and suffix
/// rows `[batch·(n−m)]` (concatenated in that order) into per-example full
/// sequences.
pub fn join_index(batch: usize, m: usize, n: usize) -> Vec<usize> {
    let s = n - m;
    (0..batch)
        .flat_map(|b| (0..m).map(move |i| b * m + i).chain((0..s).map(move |i| batch * m + b * s + i)))
        .collect()
}

/// Splits stacked full latents into stacked prompt and suffix latents.
pub fn split_full<T: Scalar>(z: &Tensor<T>, batch: usize, m: usize, n: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if z.rows() != batch * n {
        return Err(Error::Shape(format!("{} rows for batch {batch} of {n} slots", z.rows())));
    }
    let d = z.cols();
    let (mut p, mut s) = (Vec::with_capacity(batch * m * d), Vec::with_capacity(batch * (n - m) * d));
    for r in 0..z.rows() {
        if r % n < m {
            p.extend_from_slice(z.row(r));
        } else {
            s.extend_from_slice(z.row(r));
        }
    }
    Ok((Tensor::new(vec![batch * m, d], p)?, Tensor::new(vec![batch * (n - m), d], s)?))
}

/// Inverse of [`split_full`].
pub fn join_full<T: Scalar>(prompt: &Tensor<T>, suffix: &Tensor<T>, batch: usize, m: usize, n: usize) -> Result<Tensor<T>> {
    if prompt.rows() != batch * m || suffix.rows() != batch * (n - m) || prompt.cols() != suffix.cols() {
        return Err(Error::Shape("prompt/suffix latent shapes do not match the batch".into()));
    }
    let both = Tensor::concat_rows(&[prompt, suffix])?;
    let d = both.cols();
    let data: Vec<T> = join_index(batch, m, n).into_iter().flat_map(|r| both.row(r).to_vec()).collect();
    Tensor::new(vec![batch * n, d], data)
}

/// Graph version of [`join_full`].
pub fn join_full_var<T: Scalar>(g: &mut Graph<T>, prompt: Var, suffix: Var, batch: usize, m: usize, n: usize) -> Result<Var> {
    if g.value(prompt).rows() != batch * m || g.value(suffix).rows() != batch * (n - m) {
        return Err(Error::Shape("prompt/suffix latent shapes do not match the batch".into()));
    }
    let both = g.concat_rows(&[prompt, suffix])?;
    g.gather_rows(both, &join_index(batch, m, n))
}

pub const EVAL_BATCH: usize = 64;

/// Row selector for real suffix positions.
pub fn suffix_select(b: &SlotBatch, m: usize) -> Vec<bool> {
    (0..b.ids.len()).map(|r| r % b.slots >= m && b.mask[r]).collect()
}

/// Joint stage-1 training of encoder and decoder on full sequences. Resumes
/// from `opt.step`; stops at `min(cfg.steps, stop_at)` and freezes the model
/// only when the full budget is reached.
pub fn train_stage1<T: Scalar>(
    ae: &mut Autoencoder<T>,
    opt: &mut AdamW<T>,
    train: &[TokenSequence],
    val: &[TokenSequence],
    cfg: &TrainConfig,
    seed: u64,
    stop_at: Option<usize>,
) -> Result<TrainLog> {
    cfg.validate("stage1")?;
    if train.len() < 500 {
        return Err(Error::Invalid(format!("stage 1 needs >= 500 training examples, got {}", train.len())));
    }
    if val.is_empty() {
        return Err(Error::Invalid("stage 1 needs validation examples".into()));
    }
    let dims = ae.dims;
    let end = stop_at.map_or(cfg.steps, |s| s.min(cfg.steps));
    let mut log = TrainLog::new(&["step", "train_loss", "val_loss", "val_ce", "val_p_target", "val_top1"]);
    let mut running = 0.0;
    let mut since = 0usize;
    let start = opt.step as usize;
    for step in start..end {
        let idx = batch_indices(seed, train.len(), cfg.batch_size, step);
        let refs: Vec<&TokenSequence> = idx.iter().map(|&i| &train[i]).collect();
        let b = SlotBatch::new(&refs)?;
        let params = ae.params_mut()?;
        let (loss, _) = train_step(params, opt, step, |g, s| {
            Autoencoder::ae_loss_var(g, &Binder::trainable(s), &dims, &b)
        })?;
        running += loss;
        since += 1;
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == end {
            let r = ae.oracle_eval(val)?;
            let vl = mean_ae_loss(ae, val)?;
            info!("stage1 step {done}: loss {:.4} val ce {:.4} p {:.4} top1 {:.4}", running / since as f64, r.ce, r.p_target, r.top1);
            log.push(vec![done as f64, running / since as f64, vl, r.ce, r.p_target, r.top1]);
            running = 0.0;
            since = 0;
        }
    }
    if end == cfg.steps {
        ae.freeze();
    }
    Ok(log)
}

/// Position-weighted mean of [`Autoencoder::ae_loss`] over a sequence set.
pub fn mean_ae_loss<T: Scalar>(ae: &Autoencoder<T>, seqs: &[TokenSequence]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in seqs.chunks(EVAL_BATCH) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let b = SlotBatch::new(&refs)?;
        let c = b.count(0, b.slots);
        if c > 0 {
            total += ae.ae_loss(&b)? * c as f64;
            count += c;
        }
    }
    if count == 0 {
        return Err(Error::Invalid("no real positions".into()));
    }
    Ok(total / count as f64)
}
