//! Quality against wall-clock cost as the number of refinement steps grows.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{decode_suffix_tokens, recoverability, surface_metrics, truncate_at_eos, SurfaceMetrics};
use crate::autoencoder::Autoencoder;
use crate::corpus::SlotBatch;
use crate::draftprior::DraftPrior;
use crate::error::{Error, Result};
use crate::flowfield::{Stage2Eval, Stage2Model};
use crate::numerics::{Scalar, Tensor};

pub const SWEEP_STEPS: [usize; 6] = [0, 1, 2, 4, 8, 16];

/// Header line of every sweep report.
pub const MAUVE_NOTE: &str = "# mauve omitted: it needs an external embedding model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub ce: f64,
    pub p_target: f64,
    pub top1: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub repetition: f64,
    pub avg_length: f64,
    /// Median seconds per sample at batch size 1.
    pub latency_s: f64,
    pub tokens_per_s: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn first<T: Scalar>(t: &Tensor<T>, rows: usize) -> Result<Tensor<T>> {
    t.slice_rows(0, rows)
}

/// Runs the full start → refine → decode path one sample at a time for each
/// step count over the first `n_samples` evaluation examples. Step count 0
/// is the DraftPrior start alone.
pub fn quality_speed_sweep<T: Scalar>(
    ae: &Autoencoder<T>,
    dp: &DraftPrior<T>,
    model: &Stage2Model<T>,
    ev: &Stage2Eval<T>,
    alpha: f64,
    gamma: f64,
    steps: &[usize],
    n_samples: usize,
) -> Result<Vec<SweepRow>> {
    let dims = ae.dims;
    let (m, s) = (dims.m, dims.suffix());
    if n_samples == 0 || n_samples > ev.enc.batch() {
        return Err(Error::Invalid(format!("sweep needs 1..={} samples, got {n_samples}", ev.enc.batch())));
    }
    let n = ev.enc.targets.slots;
    let targets = SlotBatch {
        ids: ev.enc.targets.ids[..n_samples * n].to_vec(),
        mask: ev.enc.targets.mask[..n_samples * n].to_vec(),
        batch: n_samples,
        slots: n,
    };
    let z_p = first(&ev.enc.z_p, n_samples * m)?;
    let mut rows = Vec::with_capacity(steps.len());
    for &t in steps {
        let mut outs = Vec::with_capacity(n_samples);
        let mut times = Vec::with_capacity(n_samples);
        let mut lengths = Vec::with_capacity(n_samples);
        for i in 0..n_samples {
            let zt = ev.z_t.slice_rows(i * s, (i + 1) * s)?;
            let zp = ev.enc.z_p.slice_rows(i * m, (i + 1) * m)?;
            let clock = Instant::now();
            let start = dp.predict_start(&zt, &zp, alpha, 1)?;
            let (z, _) = model.refine(&start, &zp, 1, t, gamma)?;
            let tokens = decode_suffix_tokens(ae, &zp, &z, 1)?;
            times.push(clock.elapsed().as_secs_f64());
            lengths.push(truncate_at_eos(&tokens[0]).len() as f64);
            outs.push(z);
        }
        let z = Tensor::concat_rows(&outs.iter().collect::<Vec<_>>())?;
        let r = recoverability(ae, &z_p, &z, &targets)?;
        let tokens = decode_suffix_tokens(ae, &z_p, &z, n_samples)?;
        let SurfaceMetrics { distinct1, distinct2, repetition, avg_length } = surface_metrics(&tokens)?;
        let latency_s = median(times);
        let mean_len = lengths.iter().sum::<f64>() / lengths.len() as f64;
        rows.push(SweepRow {
            steps: t,
            ce: r.ce,
            p_target: r.p_target,
            top1: r.top1,
            distinct1,
            distinct2,
            repetition,
            avg_length,
            latency_s,
            tokens_per_s: if latency_s > 0.0 { mean_len / latency_s } else { 0.0 },
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{MAUVE_NOTE}\nsteps,ce,p_target,top1,distinct1,distinct2,repetition,avg_length,latency_s,tokens_per_s\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.steps, r.ce, r.p_target, r.top1, r.distinct1, r.distinct2, r.repetition, r.avg_length, r.latency_s, r.tokens_per_s
        );
    }
    s
}
