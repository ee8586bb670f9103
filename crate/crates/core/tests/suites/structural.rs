//! Exact structural properties: residual bound, identity-metric reduction,
//! metric normalisation, T=0 integration and frozen weights through stage 2.

use draftflow::autoencoder::{Autoencoder, ModelDims};
use draftflow::corpus::TokenSequence;
use draftflow::draftprior::DraftPrior;
use draftflow::flowfield::{
    bounded_residual, flow_matching_loss_var, force_matching_loss_var, integrate, local_target, sample_flow_batch, train_stage2,
    FlowNet, Refiner, Stage2Config, Stage2Data, Stage2Model, Variant,
};
use draftflow::layers::Binder;
use draftflow::metric::{metric_bounds, MetricNet};
use draftflow::numerics::{gaussian_sample, AdamW, Graph, ParamStore, Tensor};

fn dims() -> ModelDims {
    ModelDims { vocab: 11, d: 8, h: 16, heads: 2, m: 3, n: 7 }
}

fn jitter<T: draftflow::numerics::Scalar>(p: &mut ParamStore<T>, seed: u64, scale: f64) {
    for (k, (_, t)) in p.iter_mut().enumerate() {
        let noise: Tensor<T> = gaussian_sample(t.shape(), seed + k as u64).unwrap();
        for (v, e) in t.data_mut().iter_mut().zip(noise.data()) {
            *v = *v + T::c(scale) * *e;
        }
    }
}

/// 10,000 random probes in f64 through a refiner whose weights drive tanh
/// into saturation. The bound allows one rounding of `z + δ − z`.
pub fn residual_bound_holds_on_random_probes() {
    let d = dims();
    let s = d.suffix();
    let lambda = 0.1;
    let mut r = Refiner::<f64>::new(d, lambda, 3).unwrap();
    jitter(r.params_mut(), 70, 3.0);
    let per_batch = 500;
    let mut probes = 0;
    let mut worst: f64 = 0.0;
    for k in 0..10_000 / (per_batch * s) {
        let z: Tensor<f64> = gaussian_sample::<f64>(&[per_batch * s, d.d], 100 + k as u64).unwrap().scale(1.0 + k as f64);
        let zp: Tensor<f64> = gaussian_sample(&[per_batch * d.m, d.d], 900 + k as u64).unwrap();
        let out = bounded_residual(&z, &zp, &r, per_batch).unwrap();
        for (a, b) in out.data().iter().zip(z.data()) {
            let moved = (a - b).abs();
            let slack = f64::EPSILON * b.abs().max(1.0);
            assert!(moved <= lambda + slack, "probe moved {moved}");
            worst = worst.max(moved);
        }
        probes += per_batch * s;
    }
    assert!(probes >= 10_000, "only {probes} probes");
    assert!(worst > 0.9 * lambda, "refiner never approached its bound ({worst})");
}

/// With the metric's output layer at its zero initialisation the metric is
/// exactly 1 and force matching reduces to flow matching bit for bit.
pub fn identity_metric_reduces_force_to_flow_matching() {
    let d = dims();
    let cfg = Stage2Config::default();
    let mut m = Stage2Model::<f32>::new(Variant::MetricOt, d, &cfg, 5, None).unwrap();
    let metric_keys: Vec<String> = m.params().names().filter(|k| k.starts_with("metric.")).cloned().collect();
    let mut flow = m.params().subset("flow.");
    jitter(&mut flow, 30, 0.1);
    for (k, t) in flow.iter() {
        m.params_mut().set(k, t.clone());
    }
    assert!(metric_keys.iter().any(|k| k == "metric.l2.w"));
    let batch = 3;
    let z0: Tensor<f32> = gaussian_sample(&[batch * d.suffix(), d.d], 1).unwrap();
    let z1: Tensor<f32> = gaussian_sample(&[batch * d.suffix(), d.d], 2).unwrap();
    let zp: Tensor<f32> = gaussian_sample(&[batch * d.m, d.d], 3).unwrap();
    let mut sample = sample_flow_batch(&z0, &z1, &[0.1, 0.5, 0.9]).unwrap();
    sample.u_t = local_target(&z1, &z0, 0.05).unwrap();
    let sel: Vec<bool> = (0..batch * d.suffix()).map(|r| r % 4 != 3).collect();
    let w = cfg.width(&d);
    let p = Binder::frozen(m.params());
    let mut g = Graph::new();
    let zpv = g.constant(zp.clone());
    let fm = flow_matching_loss_var(&mut g, &p, &d, w, &sample, zpv, &sel).unwrap();
    let (force, gm) = force_matching_loss_var(&mut g, &p, &p, &d, w, &sample, zpv, &sel).unwrap();
    assert!(g.value(gm).data().iter().all(|&v| v == 1.0));
    assert_eq!(g.scalar(fm).to_bits(), g.scalar(force).to_bits());
}

/// Positivity, mean one per slot to 1e-6 and the interval bound, with large
/// weights so the log clamp is active.
pub fn metric_is_positive_normalised_and_bounded() {
    let d = dims();
    let (lo, hi) = metric_bounds(d.d);
    for (seed, scale) in [(1u64, 0.1), (2, 1.0), (3, 20.0)] {
        let mut net = MetricNet::<f32>::new(d, seed).unwrap();
        jitter(net.params_mut(), 40 + seed, scale);
        let batch = 4;
        let z: Tensor<f32> = gaussian_sample(&[batch * d.suffix(), d.d], seed).unwrap();
        let zp: Tensor<f32> = gaussian_sample(&[batch * d.m, d.d], seed + 9).unwrap();
        let g = net.metric_diag(&z, &[0.0, 0.3, 0.6, 1.0], &zp).unwrap();
        for r in 0..g.rows() {
            let row = g.row(r);
            assert!(row.iter().all(|&v| v > 0.0 && f64::from(v) >= lo * (1.0 - 1e-6) && f64::from(v) <= hi * (1.0 + 1e-6)));
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d.d as f64;
            assert!((mean - 1.0).abs() < 1e-6, "slot mean {mean}");
        }
    }
}

pub fn zero_step_integration_is_identity() {
    let d = dims();
    let mut flow = FlowNet::<f32>::new(d, d.h, 4).unwrap();
    jitter(flow.params_mut(), 12, 0.3);
    let metric = MetricNet::<f32>::new(d, 5).unwrap();
    let z: Tensor<f32> = gaussian_sample(&[2 * d.suffix(), d.d], 6).unwrap();
    let zp: Tensor<f32> = gaussian_sample(&[2 * d.m, d.d], 7).unwrap();
    for m in [None, Some(&metric)] {
        let tr = integrate(&flow, m, &z, &zp, 2, 0, 0.01).unwrap();
        assert_eq!(tr.states.len(), 1);
        assert_eq!(tr.end(), &z);
        assert!(tr.end().data().iter().zip(z.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

fn random_sequences(count: usize, d: &ModelDims, seed: u64) -> Vec<TokenSequence> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = d.m + 1 + (i + seed as usize) % d.suffix();
        let ids: Vec<usize> = (0..len).map(|k| 4 + (k * 7 + i * 3 + seed as usize) % (d.vocab - 4)).collect();
        out.push(TokenSequence::from_tokens(&ids, d.n).unwrap());
    }
    out
}

/// A few optimiser steps of every variant leave the autoencoder, the
/// DraftPrior and (for the residual) the copied flow untouched.
pub fn stage2_leaves_frozen_weights_unchanged() {
    let d = dims();
    let ae = Autoencoder::from_params(d, Autoencoder::<f32>::new(d, 1).unwrap().params().clone(), true).unwrap();
    let dp = DraftPrior::<f32>::new(d, 2).unwrap();
    let mut cfg = Stage2Config::default();
    cfg.train.steps = 3;
    cfg.train.batch_size = 4;
    cfg.train.eval_every = 3;
    let train = random_sequences(24, &d, 3);
    let data = Stage2Data::build(&ae, &train, &cfg, 9).unwrap();
    let (ae_sum, dp_sum) = (ae.params().checksum(), dp.params().checksum());
    let mut raw: Option<Stage2Model<f32>> = None;
    for v in Variant::ALL {
        let mut m = Stage2Model::<f32>::new(v, d, &cfg, 10, raw.as_ref()).unwrap();
        let flow_sum = m.params().subset("flow.").checksum();
        let before = m.params().checksum();
        let mut opt = AdamW::new(cfg.train.optimizer.clone());
        train_stage2(&mut m, &mut opt, &ae, &dp, 0.7, &data, &cfg, 9, None).unwrap();
        assert_eq!(opt.step, 3);
        assert_ne!(m.params().checksum(), before, "{} did not train", v.name());
        if v == Variant::Residual {
            assert_eq!(m.params().subset("flow.").checksum(), flow_sum, "residual changed its frozen flow");
        }
        if v == Variant::RawFlow {
            raw = Some(m);
        }
    }
    assert_eq!(ae.params().checksum(), ae_sum);
    assert_eq!(dp.params().checksum(), dp_sum);
}
