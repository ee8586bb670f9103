//! Adversarial search for latents that stay close to a real latent in cosine
//! while the decoder no longer recovers its tokens.

use serde::{Deserialize, Serialize};

use super::RecoverabilityAcc;
use crate::autoencoder::{join_full_var, Autoencoder};
use crate::corpus::SlotBatch;
use crate::error::{Error, Result};
use crate::numerics::rng::{derive_seed, fill_gaussian, rng};
use crate::numerics::{Graph, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub cosine_floor: f64,
    pub steps: usize,
    /// Ascent step length as a fraction of the real latent's norm.
    pub step_size: f64,
    /// Success threshold on `p_target(z_adv) / p_target(z_s)`.
    pub drop_ratio: f64,
    pub chunk: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { cosine_floor: 0.99, steps: 200, step_size: 0.05, drop_ratio: 0.5, chunk: 50, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cosine_floor > 0.9 && self.cosine_floor < 1.0) {
            return Err(Error::Config(format!("probe cosine_floor {} outside (0.9, 1)", self.cosine_floor)));
        }
        if !(self.step_size > 0.0) || !(self.drop_ratio > 0.0 && self.drop_ratio < 1.0) || self.chunk == 0 {
            return Err(Error::Config("probe step_size, drop_ratio or chunk out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeExample {
    pub cosine: f64,
    pub p_oracle: f64,
    pub p_adv: f64,
    /// P_target after a random perturbation of the same norm.
    pub p_random: f64,
    pub success: bool,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub n: usize,
    pub success_rate: f64,
    pub min_cosine: f64,
    pub mean_cosine: f64,
    pub mean_p_oracle: f64,
    pub mean_p_adv: f64,
    pub mean_p_random: f64,
}

#[derive(Clone, Debug)]
pub struct ProbeOutput<T> {
    /// Adversarial suffix latents, stacked like the input.
    pub z_adv: Tensor<T>,
    pub examples: Vec<ProbeExample>,
    pub summary: ProbeSummary,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Moves `z` onto the cone `cos(z, r) ≥ floor` by rescaling its component
/// orthogonal to `r`; points already inside are returned unchanged.
pub fn project_to_cone(z: &[f64], r: &[f64], floor: f64) -> Vec<f64> {
    if cosine(z, r) >= floor {
        return z.to_vec();
    }
    let rn = dot(r, r).sqrt();
    let u: Vec<f64> = r.iter().map(|v| v / rn).collect();
    let mut a = dot(z, &u);
    let w: Vec<f64> = z.iter().zip(&u).map(|(zi, ui)| zi - a * ui).collect();
    if a <= 0.0 {
        a = rn;
    }
    let wn = dot(&w, &w).sqrt();
    let target = a * (1.0 - floor * floor).sqrt() / floor;
    let k = if wn > 0.0 { target / wn } else { 0.0 };
    u.iter().zip(&w).map(|(ui, wi)| a * ui + k * wi).collect()
}

/// Per-example P_target over real suffix positions, plus the gradient of the
/// summed per-example mean CE with respect to the suffix latents.
fn evaluate<T: Scalar>(
    ae: &Autoencoder<T>,
    z_p: &Tensor<T>,
    z: &Tensor<T>,
    targets: &SlotBatch,
    want_grad: bool,
) -> Result<(Vec<f64>, Option<Tensor<T>>)> {
    let dims = ae.dims;
    let (m, n) = (dims.m, dims.n);
    let batch = targets.batch;
    let mut g = Graph::new();
    let zp = g.constant(z_p.clone());
    let zv = g.input(z.clone());
    let full = join_full_var(&mut g, zp, zv, batch, m, n)?;
    let logits = Autoencoder::decode_var(&mut g, &ae.binder(), &dims, full, batch)?;
    let mut weights = vec![T::zero(); batch * n];
    let mut ps = Vec::with_capacity(batch);
    for b in 0..batch {
        let sel: Vec<bool> = (0..batch * n).map(|r| r / n == b && r % n >= m && targets.mask[r]).collect();
        let count = sel.iter().filter(|&&s| s).count();
        if count == 0 {
            return Err(Error::Invalid(format!("probe example {b} has no real suffix positions")));
        }
        let mut acc = RecoverabilityAcc::default();
        acc.add(g.value(logits), &targets.ids, &sel)?;
        ps.push(acc.finish()?.p_target);
        for (r, &s) in sel.iter().enumerate() {
            if s {
                weights[r] = T::c(1.0 / count as f64);
            }
        }
    }
    if !want_grad {
        return Ok((ps, None));
    }
    let loss = g.cross_entropy(logits, &targets.ids, &weights)?;
    let grads = g.backward(loss)?;
    let gz = grads.var(zv).cloned().ok_or_else(|| Error::Invalid("no latent gradient".into()))?;
    Ok((ps, Some(gz)))
}

fn sub_batch(t: &SlotBatch, idx: &[usize]) -> SlotBatch {
    let n = t.slots;
    SlotBatch {
        ids: idx.iter().flat_map(|&i| t.ids[i * n..(i + 1) * n].to_vec()).collect(),
        mask: idx.iter().flat_map(|&i| t.mask[i * n..(i + 1) * n].to_vec()).collect(),
        batch: idx.len(),
        slots: n,
    }
}

fn gather<T: Scalar>(rows: &[Vec<f64>], idx: &[usize], width: usize) -> Result<Tensor<T>> {
    let data: Vec<f64> = idx.iter().flat_map(|&i| rows[i].iter().copied()).collect();
    Tensor::from_f64(vec![data.len() / width, width], &data)
}

/// Normalised gradient ascent on decoder CE from each real suffix latent
/// `z_s`, projected back onto `cos(z, z_s) ≥ floor` after every step. The
/// cosine is taken over an example's whole flattened suffix. An example
/// stops as soon as its P_target falls to `drop_ratio` of the oracle value;
/// running out of steps is reported through `success`, not as an error.
pub fn dissociation_probe<T: Scalar>(
    ae: &Autoencoder<T>,
    z_p: &Tensor<T>,
    z_s: &Tensor<T>,
    targets: &SlotBatch,
    cfg: &ProbeConfig,
) -> Result<ProbeOutput<T>> {
    cfg.validate()?;
    let dims = ae.dims;
    let (m, s, d) = (dims.m, dims.suffix(), dims.d);
    let batch = targets.batch;
    if z_s.shape() != [batch * s, d] || z_p.shape() != [batch * m, d] {
        return Err(Error::Shape(format!("probe latents {:?} / {:?} for batch {batch}", z_s.shape(), z_p.shape())));
    }
    let width = s * d;
    let real: Vec<Vec<f64>> = (0..batch).map(|b| z_s.data()[b * width..(b + 1) * width].iter().map(|v| v.f64()).collect()).collect();
    let prompts: Vec<Vec<f64>> =
        (0..batch).map(|b| z_p.data()[b * m * d..(b + 1) * m * d].iter().map(|v| v.f64()).collect()).collect();
    let mut cur = real.clone();
    let mut examples = vec![ProbeExample { cosine: 1.0, p_oracle: 0.0, p_adv: 0.0, p_random: 0.0, success: false, steps: 0 }; batch];
    // the target cone is slightly inside the floor so rounding to T keeps it
    let floor = cfg.cosine_floor + 1e-5 * (1.0 - cfg.cosine_floor);
    let all: Vec<usize> = (0..batch).collect();
    for chunk in all.chunks(cfg.chunk) {
        let zp = gather::<T>(&prompts, chunk, d)?;
        let tb = sub_batch(targets, chunk);
        let (p0, _) = evaluate(ae, &zp, &gather::<T>(&real, chunk, d)?, &tb, false)?;
        for (k, &i) in chunk.iter().enumerate() {
            examples[i].p_oracle = p0[k];
            examples[i].p_adv = p0[k];
        }
        let mut active: Vec<usize> = chunk.to_vec();
        for step in 0..cfg.steps {
            if active.is_empty() {
                break;
            }
            let zp = gather::<T>(&prompts, &active, d)?;
            let tb = sub_batch(targets, &active);
            let (_, grad) = evaluate(ae, &zp, &gather::<T>(&cur, &active, d)?, &tb, true)?;
            let grad = grad.expect("gradient requested");
            for (k, &i) in active.iter().enumerate() {
                let gk: Vec<f64> = grad.data()[k * width..(k + 1) * width].iter().map(|v| v.f64()).collect();
                let gn = dot(&gk, &gk).sqrt();
                if gn > 0.0 {
                    let len = cfg.step_size * dot(&real[i], &real[i]).sqrt() / gn;
                    let moved: Vec<f64> = cur[i].iter().zip(&gk).map(|(z, g)| z + len * g).collect();
                    let projected = project_to_cone(&moved, &real[i], floor);
                    cur[i] = projected.iter().map(|&v| T::c(v).f64()).collect();
                }
                examples[i].steps = step + 1;
            }
            let (ps, _) = evaluate(ae, &zp, &gather::<T>(&cur, &active, d)?, &tb, false)?;
            let mut still = Vec::new();
            for (k, &i) in active.iter().enumerate() {
                examples[i].p_adv = ps[k];
                if ps[k] <= cfg.drop_ratio * examples[i].p_oracle {
                    examples[i].success = true;
                } else {
                    still.push(i);
                }
            }
            active = still;
        }
        // random perturbations with the same norm as the adversarial one
        let mut rand_rows = Vec::new();
        for &i in chunk {
            let delta_n = cur[i].iter().zip(&real[i]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let mut dir = vec![0.0f64; width];
            fill_gaussian(&mut dir, &mut rng(derive_seed(cfg.seed, i as u64)), 1.0);
            let dn = dot(&dir, &dir).sqrt();
            rand_rows.push(real[i].iter().zip(&dir).map(|(r, v)| r + delta_n * v / dn).collect::<Vec<f64>>());
        }
        let local: Vec<usize> = (0..chunk.len()).collect();
        let (pr, _) = evaluate(ae, &zp, &gather::<T>(&rand_rows, &local, d)?, &tb, false)?;
        for (k, &i) in chunk.iter().enumerate() {
            examples[i].p_random = pr[k];
            examples[i].cosine = cosine(&cur[i], &real[i]);
        }
    }
    let n = batch as f64;
    let mean = |f: &dyn Fn(&ProbeExample) -> f64| examples.iter().map(f).sum::<f64>() / n;
    let summary = ProbeSummary {
        n: batch,
        success_rate: mean(&|e| f64::from(u8::from(e.success))),
        min_cosine: examples.iter().map(|e| e.cosine).fold(f64::INFINITY, f64::min),
        mean_cosine: mean(&|e| e.cosine),
        mean_p_oracle: mean(&|e| e.p_oracle),
        mean_p_adv: mean(&|e| e.p_adv),
        mean_p_random: mean(&|e| e.p_random),
    };
    let z_adv = gather::<T>(&cur, &all, d)?;
    Ok(ProbeOutput { z_adv, examples, summary })
}
