//! Decoder-recoverability metrics and the diagnostics built on them.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{join_full, Autoencoder, EVAL_BATCH};
use crate::corpus::{SlotBatch, EOS, PAD};
use crate::draftprior::score_suffix;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// CE, target-token probability and top-1 accuracy over one position set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recoverability {
    pub ce: f64,
    pub p_target: f64,
    pub top1: f64,
    pub positions: usize,
}

/// Running sums for [`Recoverability`]; positions are pooled, so every
/// scored token counts equally regardless of which example it came from.
#[derive(Clone, Copy, Debug, Default)]
pub struct RecoverabilityAcc {
    nll: f64,
    p: f64,
    hits: usize,
    count: usize,
}

impl RecoverabilityAcc {
    /// Scores rows of `logits` where `select[r]` holds, against `targets[r]`.
    pub fn add<T: Scalar>(&mut self, logits: &Tensor<T>, targets: &[usize], select: &[bool]) -> Result<()> {
        if targets.len() != logits.rows() || select.len() != logits.rows() {
            return Err(Error::Shape(format!(
                "{} logit rows, {} targets, {} selectors",
                logits.rows(),
                targets.len(),
                select.len()
            )));
        }
        for r in (0..logits.rows()).filter(|&r| select[r]) {
            let row = logits.row(r);
            let t = targets[r];
            if t >= row.len() {
                return Err(Error::Shape(format!("target {t} outside vocabulary of {}", row.len())));
            }
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.f64()));
            let lse = row.iter().map(|&v| (v.f64() - mx).exp()).sum::<f64>().ln() + mx;
            let nll = lse - row[t].f64();
            self.nll += nll;
            self.p += (-nll).exp();
            // ties resolve to the lowest id, as argmax decoding does
            let arg = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            self.hits += usize::from(arg == t);
            self.count += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<Recoverability> {
        if self.count == 0 {
            return Err(Error::Invalid("no real target positions to score".into()));
        }
        let n = self.count as f64;
        Ok(Recoverability { ce: self.nll / n, p_target: self.p / n, top1: self.hits as f64 / n, positions: self.count })
    }
}

/// Recoverability of one logit block over the selected rows.
pub fn recoverability_from_logits<T: Scalar>(logits: &Tensor<T>, targets: &[usize], select: &[bool]) -> Result<Recoverability> {
    let mut acc = RecoverabilityAcc::default();
    acc.add(logits, targets, select)?;
    acc.finish()
}

mod probe;
mod sweep;

pub use probe::*;
pub use sweep::*;

/// Decoder recoverability of `[z_p, suffix]` over real suffix positions.
pub fn recoverability<T: Scalar>(ae: &Autoencoder<T>, z_p: &Tensor<T>, suffix: &Tensor<T>, targets: &SlotBatch) -> Result<Recoverability> {
    score_suffix(ae, z_p, suffix, targets)
}

/// Mean decoder probability of the true token over real suffix positions.
pub fn p_target<T: Scalar>(ae: &Autoencoder<T>, z_p: &Tensor<T>, suffix: &Tensor<T>, targets: &SlotBatch) -> Result<f64> {
    Ok(recoverability(ae, z_p, suffix, targets)?.p_target)
}

/// Interpolation coefficients for the latent interpolation diagnostic; this
/// `alpha` is unrelated to the DraftPrior noise mix.
pub const INTERPOLATION_ALPHAS: [f64; 8] = [0.0, 0.01, 0.03, 0.05, 0.10, 0.20, 0.50, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationCurve {
    pub alphas: Vec<f64>,
    pub ce_values: Vec<f64>,
    pub p_values: Vec<f64>,
}

impl InterpolationCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,ce,p_target\n");
        for ((a, c), p) in self.alphas.iter().zip(&self.ce_values).zip(&self.p_values) {
            let _ = writeln!(s, "{a},{c},{p}");
        }
        s
    }
}

fn lerp<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    let (wa, wb) = (T::c(1.0 - alpha), T::c(alpha));
    a.zip_map(b, |x, y| wa * x + wb * y)
}

/// Decoder CE on `z_α = (1−α)·ẑ + α·z` for each α, where the hat latents are
/// generated (`z_p`, `z_hat`) and the others are real (`z_p_real`, `z_s`).
/// Prompt slots are interpolated alongside the suffix, so α = 1 reproduces
/// the oracle evaluation.
#[allow(clippy::too_many_arguments)]
pub fn interpolation_diagnostic<T: Scalar>(
    ae: &Autoencoder<T>,
    z_p: &Tensor<T>,
    z_hat: &Tensor<T>,
    z_p_real: &Tensor<T>,
    z_s: &Tensor<T>,
    targets: &SlotBatch,
    alphas: &[f64],
) -> Result<InterpolationCurve> {
    if alphas.windows(2).any(|w| w[1] <= w[0]) || alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Invalid("interpolation alphas must increase strictly within [0, 1]".into()));
    }
    let (mut ce_values, mut p_values) = (Vec::new(), Vec::new());
    for &a in alphas {
        let r = recoverability(ae, &lerp(z_p, z_p_real, a)?, &lerp(z_hat, z_s, a)?, targets)?;
        ce_values.push(r.ce);
        p_values.push(r.p_target);
    }
    Ok(InterpolationCurve { alphas: alphas.to_vec(), ce_values, p_values })
}

/// Token-level statistics of decoded continuations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMetrics {
    pub distinct1: f64,
    pub distinct2: f64,
    /// Fraction of positions repeating the immediately preceding token.
    pub repetition: f64,
    pub avg_length: f64,
}

/// Non-PAD tokens before the first EOS.
pub fn truncate_at_eos(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().take_while(|&t| t != EOS).filter(|&t| t != PAD).collect()
}

/// Corpus-level surface metrics; each list is truncated at its first EOS.
pub fn surface_metrics(lists: &[Vec<usize>]) -> Result<SurfaceMetrics> {
    if lists.is_empty() {
        return Err(Error::Invalid("surface metrics over an empty list".into()));
    }
    let seqs: Vec<Vec<usize>> = lists.iter().map(|l| truncate_at_eos(l)).collect();
    let mut uni = HashSet::new();
    let mut bi = HashSet::new();
    let (mut n1, mut n2, mut reps) = (0usize, 0usize, 0usize);
    for s in &seqs {
        n1 += s.len();
        uni.extend(s.iter().copied());
        for w in s.windows(2) {
            n2 += 1;
            bi.insert((w[0], w[1]));
            reps += usize::from(w[0] == w[1]);
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(SurfaceMetrics {
        distinct1: ratio(uni.len(), n1),
        distinct2: ratio(bi.len(), n2),
        repetition: ratio(reps, n1),
        avg_length: n1 as f64 / seqs.len() as f64,
    })
}

/// Argmax tokens of the suffix slots for stacked `[z_p, suffix]` latents.
pub fn decode_suffix_tokens<T: Scalar>(ae: &Autoencoder<T>, z_p: &Tensor<T>, suffix: &Tensor<T>, batch: usize) -> Result<Vec<Vec<usize>>> {
    let dims = ae.dims;
    let (m, s) = (dims.m, dims.suffix());
    let mut out = Vec::with_capacity(batch);
    for start in (0..batch).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(batch);
        let full = join_full(&z_p.slice_rows(start * m, end * m)?, &suffix.slice_rows(start * s, end * s)?, end - start, m, dims.n)?;
        let logits = ae.decode_batch(&full, end - start)?;
        for b in 0..end - start {
            out.push(
                (m..dims.n)
                    .map(|i| {
                        let row = logits.row(b * dims.n + i);
                        (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}
