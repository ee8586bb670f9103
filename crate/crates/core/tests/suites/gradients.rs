//! Finite-difference checks of every training objective on small d=8
//! instances in f64. Zero-initialised layers are jittered first so no
//! parameter sits at a point where its gradient vanishes by construction.

use draftflow::alignment::{mean_pairwise_sq_dist, ot_regularized_loss, sinkhorn_cost, OtBackend};
use draftflow::autoencoder::{split_full, Autoencoder, ModelDims};
use draftflow::corpus::{SlotBatch, TokenSequence};
use draftflow::draftprior::{draftprior_loss_var, DpLossWeights, DraftPrior};
use draftflow::flowfield::{
    decoder_ce_var, flow_matching_loss_var, force_matching_loss_var, fused_loss_var, integrate_var, local_target,
    sample_flow_batch, FieldBinders, FlowSample, Refiner, Stage2Config, Stage2Model, Variant,
};
use draftflow::layers::Binder;
use draftflow::metric::{metric_reg_var, MetricNet};
use draftflow::numerics::{gaussian_sample, grad_check_sampled, Graph, ParamStore, Tensor};

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-4;
const PER_TENSOR: Option<usize> = Some(3);

fn dims() -> ModelDims {
    ModelDims { vocab: 11, d: 8, h: 8, heads: 2, m: 3, n: 7 }
}

fn jitter(p: &mut ParamStore<f64>, seed: u64, scale: f64) {
    for (k, (_, t)) in p.iter_mut().enumerate() {
        let noise: Tensor<f64> = gaussian_sample(t.shape(), seed + k as u64).unwrap();
        for (v, e) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += scale * e;
        }
    }
}

/// Two examples; the second has two padded suffix slots.
fn batch() -> SlotBatch {
    let a = TokenSequence::from_tokens(&[4, 5, 6, 7, 8, 9, 10], 7).unwrap();
    let b = TokenSequence::from_tokens(&[5, 4, 2, 9, 6], 7).unwrap();
    SlotBatch::new(&[&a, &b]).unwrap()
}

fn encoded(ae: &Autoencoder<f64>, b: &SlotBatch) -> (Tensor<f64>, Tensor<f64>) {
    let d = ae.dims;
    split_full(&ae.encode_batch(b).unwrap(), b.batch, d.m, d.n).unwrap()
}

fn slot_select(b: &SlotBatch, d: &ModelDims) -> Vec<bool> {
    let s = d.suffix();
    (0..b.batch * s).map(|r| b.mask[(r / s) * d.n + d.m + r % s]).collect()
}

fn frozen_ae() -> Autoencoder<f64> {
    let mut ae = Autoencoder::<f64>::new(dims(), 11).unwrap();
    jitter(ae.params_mut().unwrap(), 500, 0.05);
    Autoencoder::from_params(dims(), ae.params().clone(), true).unwrap()
}

fn assert_close(what: &str, r: draftflow::numerics::GradCheckReport, tol: f64) {
    assert!(r.checked > 0, "{what}: nothing checked");
    assert!(r.max_rel_error < tol, "{what}: max rel error {} at {:?}", r.max_rel_error, r.worst);
}

fn stage2_store(variant: Variant, cfg: &Stage2Config) -> ParamStore<f64> {
    let base = Stage2Model::<f64>::new(Variant::RawFlow, dims(), cfg, 21, None).unwrap();
    let mut m = Stage2Model::<f64>::new(variant, dims(), cfg, 22, Some(&base)).unwrap();
    jitter(m.params_mut(), 900, 0.05);
    m.params().clone()
}

fn flow_sample(ae: &Autoencoder<f64>, b: &SlotBatch) -> (Tensor<f64>, FlowSample<f64>, Tensor<f64>) {
    let (z_p, z_s) = encoded(ae, b);
    let z0: Tensor<f64> = gaussian_sample(z_s.shape(), 31).unwrap();
    let mut s = sample_flow_batch(&z0, &z_s, &[0.3, 0.8]).unwrap();
    s.u_t = local_target(&z_s, &z0, 0.05).unwrap();
    (z_p, s, z0)
}

pub fn autoencoder_loss() {
    let mut ae = Autoencoder::<f64>::new(dims(), 3).unwrap();
    jitter(ae.params_mut().unwrap(), 40, 0.05);
    let b = batch();
    let d = dims();
    let r = grad_check_sampled(|g, p| Autoencoder::ae_loss_var(g, &Binder::trainable(p), &d, &b), ae.params(), EPS, PER_TENSOR).unwrap();
    assert_close("L_AE", r, TOL);
}

pub fn draftprior_loss() {
    let ae = frozen_ae();
    let b = batch();
    let d = dims();
    let (z_p, z_s) = encoded(&ae, &b);
    let z_t: Tensor<f64> = gaussian_sample(z_s.shape(), 8).unwrap();
    let mut dp = DraftPrior::<f64>::new(d, 5).unwrap();
    jitter(dp.params_mut(), 60, 0.05);
    let w = DpLossWeights::default();
    let r = grad_check_sampled(
        |g, p| {
            let zp = g.constant(z_p.clone());
            let zt = g.constant(z_t.clone());
            let zs = g.constant(z_s.clone());
            let start = DraftPrior::forward_var(g, &Binder::trainable(p), &d, zt, zp, 0.7, b.batch)?;
            Ok(draftprior_loss_var(g, &ae.binder(), &d, zp, start, zs, &b, &w)?.total)
        },
        dp.params(),
        EPS,
        PER_TENSOR,
    )
    .unwrap();
    assert_close("L_DP", r, TOL);
}

pub fn flow_matching_loss() {
    let ae = frozen_ae();
    let b = batch();
    let d = dims();
    let cfg = Stage2Config::default();
    let (z_p, s, _) = flow_sample(&ae, &b);
    let sel = slot_select(&b, &d);
    let store = stage2_store(Variant::RawFlow, &cfg);
    let w = cfg.width(&d);
    let r = grad_check_sampled(
        |g, p| {
            let zp = g.constant(z_p.clone());
            flow_matching_loss_var(g, &Binder::trainable(p), &d, w, &s, zp, &sel)
        },
        &store,
        EPS,
        PER_TENSOR,
    )
    .unwrap();
    assert_close("L_FM", r, TOL);
}

pub fn force_matching_and_metric_losses() {
    let ae = frozen_ae();
    let b = batch();
    let d = dims();
    let cfg = Stage2Config::default();
    let (z_p, s, _) = flow_sample(&ae, &b);
    let sel = slot_select(&b, &d);
    let store = stage2_store(Variant::MetricOt, &cfg);
    assert!(store.names().any(|n| n.starts_with("metric.")));
    let w = cfg.width(&d);
    let r = grad_check_sampled(
        |g, p| {
            let zp = g.constant(z_p.clone());
            let b = Binder::trainable(p);
            Ok(force_matching_loss_var(g, &b, &b, &d, w, &s, zp, &sel)?.0)
        },
        &store,
        EPS,
        PER_TENSOR,
    )
    .unwrap();
    assert_close("L_force", r, TOL);

    let metric_only = store.subset("metric.");
    let r = grad_check_sampled(
        |g, p| {
            let zp = g.constant(z_p.clone());
            let zt = g.constant(s.z_t.clone());
            let gm = MetricNet::forward_var(g, &Binder::trainable(p), &d, zt, &s.t, zp)?;
            metric_reg_var(g, gm, 1.0)
        },
        &metric_only,
        EPS,
        PER_TENSOR,
    )
    .unwrap();
    assert_close("L_metric", r, TOL);
}

pub fn fused_loss_never_reaches_the_decoder() {
    let ae = frozen_ae();
    let b = batch();
    let d = dims();
    let cfg = Stage2Config::default();
    let (z_p, _, z0) = flow_sample(&ae, &b);
    let store = stage2_store(Variant::Fused, &cfg);
    let w = cfg.width(&d);
    let steps = cfg.train_ode_steps;
    let build = |g: &mut Graph<f64>, p: &ParamStore<f64>, dec: &Binder<f64>| {
        let pb = Binder::trainable(p);
        let zp = g.constant(z_p.clone());
        let z = g.constant(z0.clone());
        let field = FieldBinders { flow: &pb, metric: None, width: w };
        let (states, _) = integrate_var(g, field, &d, z, zp, b.batch, steps, 0.5)?;
        Ok(fused_loss_var(g, dec, &pb, &d, zp, states[steps], states[cfg.aux_index()], &b, cfg.beta)?.0)
    };
    let r = grad_check_sampled(|g, p| build(g, p, &ae.binder()), &store, EPS, PER_TENSOR).unwrap();
    assert_close("fused", r, TOL);

    let mut g = Graph::new();
    let loss = build(&mut g, &store, &ae.binder()).unwrap();
    let grads = g.backward(loss).unwrap().into_param_grads(&store);
    assert!(grads.keys().all(|k| !k.starts_with("enc.") && !k.starts_with("dec.")));
    assert!(grads.keys().any(|k| k.starts_with("aux.")) && grads.keys().any(|k| k.starts_with("flow.")));
}

pub fn residual_refiner_loss() {
    let ae = frozen_ae();
    let b = batch();
    let d = dims();
    let cfg = Stage2Config::default();
    let (z_p, _, z0) = flow_sample(&ae, &b);
    let store = stage2_store(Variant::Residual, &cfg).subset("res.");
    let r = grad_check_sampled(
        |g, p| {
            let zp = g.constant(z_p.clone());
            let z = g.constant(z0.clone());
            let zr = Refiner::apply_var(g, &Binder::trainable(p), &d, cfg.residual_lambda, z, zp, b.batch)?;
            decoder_ce_var(g, &ae.binder(), &d, zp, zr, &b)
        },
        &store,
        EPS,
        PER_TENSOR,
    )
    .unwrap();
    assert_close("residual", r, TOL);
}

pub fn ot_regularized_loss_through_sinkhorn() {
    let ae = frozen_ae();
    let b = batch();
    let d = dims();
    let mut cfg = Stage2Config::default();
    // the envelope gradient is exact only at the Sinkhorn fixed point, so
    // the check runs where the iteration provably converges
    cfg.ot = OtBackend::Sinkhorn { epsilon_scale: 0.5, max_iters: 5000, tol: 1e-13 };
    let (z_p, s, _) = flow_sample(&ae, &b);
    let (_, z_s) = encoded(&ae, &b);
    let noise: Tensor<f64> = gaussian_sample(z_s.shape(), 77).unwrap();
    let z0 = z_s.add(&noise.scale(0.3)).unwrap();
    let sel = slot_select(&b, &d);
    let rows: Vec<usize> = sel.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
    let pick = |t: &Tensor<f64>| {
        let parts: Vec<Tensor<f64>> = rows.iter().map(|&r| t.slice_rows(r, r + 1).unwrap()).collect();
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>()).unwrap()
    };
    let target = pick(&z_s);
    let spread = mean_pairwise_sq_dist(&target);
    assert!(sinkhorn_cost(&pick(&z0), &target, 0.5 * spread, 5000, 1e-13).unwrap().converged);
    let store = stage2_store(Variant::MetricOt, &cfg);
    let w = cfg.width(&d);
    let steps = cfg.train_ode_steps;
    let r = grad_check_sampled(
        |g, p| {
            let pb = Binder::trainable(p);
            let zp = g.constant(z_p.clone());
            let (force, gm) = force_matching_loss_var(g, &pb, &pb, &d, w, &s, zp, &sel)?;
            let reg = metric_reg_var(g, gm, cfg.metric_reg_weight / g.value(gm).rows() as f64)?;
            let base = g.add(force, reg)?;
            let z = g.constant(z0.clone());
            let field = FieldBinders { flow: &pb, metric: Some(&pb), width: w };
            let (states, _) = integrate_var(g, field, &d, z, zp, b.batch, steps, 0.5)?;
            let a = g.gather_rows(states[steps], &rows)?;
            Ok(ot_regularized_loss(g, base, a, &target, 1.0, &cfg.ot)?.0)
        },
        &store,
        EPS,
        PER_TENSOR,
    )
    .unwrap();
    assert_close("OT-regularised", r, 1e-3);
}
