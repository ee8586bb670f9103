//! End-to-end acceptance run. Trains the default d=32 pipeline and a d=8
//! comparison in a scratch directory, evaluates every report and prints one
//! PASS/FAIL line per criterion. Exits non-zero if any criterion fails.
//!
//! `ACCEPTANCE_DIR` keeps the run outputs in a fixed directory instead of a
//! temporary one.

mod suites;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use draftflow::checkpoint::{load_checkpoint, save_checkpoint, MANIFEST, PAYLOAD};
use draftflow::corpus::SlotBatch;
use draftflow::diagnostics::{recoverability, Recoverability};
use draftflow::flowfield::{Stage2Eval, Variant};
use draftflow::pipeline::{cmd_eval, cmd_generate_corpus, cmd_train, load_ae, load_corpus, load_dp, Report, ReportKind, RunConfig, RunPaths, Stage};
use serde_json::Value;
use suites::{alignment, gradients, structural};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into())
}

fn run_suite(tests: &[(&str, fn())]) -> Check {
    let mut failed = Vec::new();
    for (name, f) in tests {
        if let Err(p) = catch_unwind(*f) {
            failed.push(format!("{name}: {}", panic_text(p)));
        }
    }
    ensure(failed.is_empty(), if failed.is_empty() { format!("{} checks", tests.len()) } else { failed.join("; ") })
}

const GRADIENTS: &[(&str, fn())] = &[
    ("autoencoder_loss", gradients::autoencoder_loss),
    ("draftprior_loss", gradients::draftprior_loss),
    ("flow_matching_loss", gradients::flow_matching_loss),
    ("force_matching_and_metric_losses", gradients::force_matching_and_metric_losses),
    ("fused_loss_never_reaches_the_decoder", gradients::fused_loss_never_reaches_the_decoder),
    ("residual_refiner_loss", gradients::residual_refiner_loss),
    ("ot_regularized_loss_through_sinkhorn", gradients::ot_regularized_loss_through_sinkhorn),
];

const ALIGNMENT: &[(&str, fn())] = &[
    ("sinkhorn_matches_permutation_oracle_on_three_points", alignment::sinkhorn_matches_permutation_oracle_on_three_points),
    ("sinkhorn_single_points_cost_the_squared_offset", alignment::sinkhorn_single_points_cost_the_squared_offset),
    ("sliced_wasserstein_fixtures", alignment::sliced_wasserstein_fixtures),
    ("sliced_wasserstein_gaussian_offset", alignment::sliced_wasserstein_gaussian_offset),
    ("costs_are_symmetric_and_translation_invariant", alignment::costs_are_symmetric_and_translation_invariant),
    ("gradient_through_sinkhorn", alignment::gradient_through_sinkhorn),
    ("gradient_through_sliced", alignment::gradient_through_sliced),
];

const STRUCTURAL: &[(&str, fn())] = &[
    ("residual_bound_holds_on_random_probes", structural::residual_bound_holds_on_random_probes),
    ("identity_metric_reduces_force_to_flow_matching", structural::identity_metric_reduces_force_to_flow_matching),
    ("metric_is_positive_normalised_and_bounded", structural::metric_is_positive_normalised_and_bounded),
    ("zero_step_integration_is_identity", structural::zero_step_integration_is_identity),
    ("stage2_leaves_frozen_weights_unchanged", structural::stage2_leaves_frozen_weights_unchanged),
];

fn config(out: &Path, d: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dims.d = d;
    cfg.paths.out = out.to_path_buf();
    cfg
}

fn payload_hash(cfg: &RunConfig, name: &str) -> draftflow::Result<String> {
    Ok(load_checkpoint(&RunPaths::new(cfg).checkpoint(name), None)?.manifest.payload_sha256)
}

/// Corpus, stage 1 and the DraftPrior, with the corruption curve.
struct Base {
    cfg: RunConfig,
    stage1_secs: f64,
    oracle: Recoverability,
    curve: Report,
}

fn base_run(out: &Path, d: usize) -> draftflow::Result<Base> {
    let cfg = config(out, d);
    cfg.validate()?;
    cmd_generate_corpus(&cfg)?;
    let clock = Instant::now();
    cmd_train(Stage::Ae, &cfg, None)?;
    let stage1_secs = clock.elapsed().as_secs_f64();
    let corpus = load_corpus(&cfg)?;
    let oracle = load_ae(&cfg, corpus.dims)?.0.oracle_eval(&corpus.val)?;
    cmd_train(Stage::DraftPrior, &cfg, None)?;
    let curve = cmd_eval(ReportKind::CorruptionCurve, &cfg)?;
    Ok(Base { cfg, stage1_secs, oracle, curve })
}

struct Stage2Run {
    frozen_before: (String, String),
    frozen_after: (String, String),
    reports: BTreeMap<&'static str, Report>,
    probe_secs: f64,
}

fn stage2_run(cfg: &RunConfig) -> draftflow::Result<Stage2Run> {
    let frozen = || -> draftflow::Result<(String, String)> { Ok((payload_hash(cfg, "ae")?, payload_hash(cfg, "draftprior")?)) };
    let frozen_before = frozen()?;
    cmd_train(Stage::Flow, cfg, None)?;
    let frozen_after = frozen()?;
    let mut reports = BTreeMap::new();
    let mut probe_secs = 0.0;
    for kind in ReportKind::ALL {
        let clock = Instant::now();
        let r = cmd_eval(kind, cfg)?;
        if kind == ReportKind::Dissociation {
            probe_secs = clock.elapsed().as_secs_f64();
        }
        reports.insert(kind.name(), r);
    }
    Ok(Stage2Run { frozen_before, frozen_after, reports, probe_secs })
}

fn col(rows: &Value, key: &str) -> Vec<f64> {
    rows.as_array().map(|a| a.iter().filter_map(|r| r[key].as_f64()).collect()).unwrap_or_default()
}

fn by_variant<'a>(rows: &'a Value, name: &str) -> Result<&'a Value, String> {
    rows.as_array().and_then(|a| a.iter().find(|r| r["variant"] == name)).ok_or_else(|| format!("no {name} row"))
}

fn at_dropout(rows: &Value, p: f64) -> Result<(f64, f64), String> {
    rows.as_array()
        .and_then(|a| a.iter().find(|r| r["dropout"].as_f64().is_some_and(|d| (d - p).abs() < 1e-12)))
        .map(|r| (r["ce"].as_f64().unwrap_or(f64::NAN), r["p_target"].as_f64().unwrap_or(f64::NAN)))
        .ok_or_else(|| format!("no row at dropout {p}"))
}

fn criterion_2(b: &Base) -> Check {
    let o = &b.oracle;
    ensure(
        o.ce <= 0.3 && o.p_target >= 0.9 && o.top1 >= 0.9 && b.stage1_secs <= 300.0,
        format!("oracle ce {:.4} p {:.4} top1 {:.4}, stage 1 {:.0}s", o.ce, o.p_target, o.top1, b.stage1_secs),
    )
}

fn criterion_3(d32: &Base, d8: &Base) -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for p in [0.0, 0.03, 0.05] {
        let (ce32, p32) = at_dropout(d32.curve.rows(), p)?;
        let (ce8, p8) = at_dropout(d8.curve.rows(), p)?;
        ok &= ce8 > ce32 && p8 < p32;
        parts.push(format!("{p}: ce {ce8:.3}>{ce32:.3} p {p8:.3}<{p32:.3}"));
    }
    ensure(ok, parts.join(", "))
}

fn criterion_4(b: &Base) -> Check {
    let rows = b.curve.rows();
    let (drop, ce, p) = (col(rows, "dropout"), col(rows, "ce"), col(rows, "p_target"));
    let n = col(rows, "n_examples").into_iter().fold(f64::INFINITY, f64::min);
    let sorted = drop.windows(2).all(|w| w[0] < w[1]);
    let mono = ce.windows(2).all(|w| w[1] > w[0]) && p.windows(2).all(|w| w[1] < w[0]);
    let clean = p.first().copied().unwrap_or(0.0);
    ensure(
        sorted && mono && clean >= 0.8 && n >= 200.0 && drop.len() >= 4,
        format!("ce {ce:.3?} p {p:.3?} over {n} examples"),
    )
}

fn criterion_5(b: &Base, s: &Stage2Run) -> Check {
    let rows = s.reports["interpolation"].rows();
    let (alpha, ce) = (col(rows, "alpha"), col(rows, "ce"));
    let start = by_variant(s.reports["stage2_matrix"].rows(), "start")?["ce"].as_f64().unwrap_or(f64::NAN);
    let (first, last) = (ce.first().copied().unwrap_or(f64::NAN), ce.last().copied().unwrap_or(f64::NAN));
    let mono = ce.windows(2).all(|w| w[1] <= w[0]);
    let ends = alpha.first() == Some(&0.0) && alpha.last() == Some(&1.0);
    ensure(
        mono && ends && (first - start).abs() <= 1e-6 && (last - b.oracle.ce).abs() <= 1e-6,
        format!("ce {first:.6} -> {last:.6}, start {start:.6}, oracle {:.6}", b.oracle.ce),
    )
}

fn criterion_6(s: &Stage2Run) -> Check {
    let rows = s.reports["stage2_matrix"].rows();
    let get = |v: &str, k: &str| -> Result<f64, String> { by_variant(rows, v).map(|r| r[k].as_f64().unwrap_or(f64::NAN)) };
    let start = get("start", "ce")?;
    let (raw, fused, res) = (get("raw_flow", "ce")?, get("fused", "ce")?, get("residual", "ce")?);
    let (raw_move, res_move) = (get("raw_flow", "latent_move_l2")?, get("residual", "latent_move_l2")?);
    let metric = (get("metric_ot", "ce")?, get("metric_ot", "metric_std")?);
    ensure(
        fused <= start && (raw - start).abs() <= 0.1 * start && res_move > raw_move,
        format!(
            "start {start:.5} raw {raw:.5} fused {fused:.5} residual {res:.5} metric_ot {:.5} (std {:.3}); move raw {raw_move:.4} residual {res_move:.4}",
            metric.0, metric.1
        ),
    )
}

fn criterion_7(s: &Stage2Run) -> Check {
    let sm = &s.reports["dissociation"].json["summary"];
    let f = |k: &str| sm[k].as_f64().unwrap_or(f64::NAN);
    let n = sm["n"].as_u64().unwrap_or(0);
    ensure(
        n >= 100 && f("success_rate") >= 0.9 && f("min_cosine") >= 0.99 && s.probe_secs <= 120.0,
        format!(
            "{n} examples, success {:.2}, min cos {:.6}, p_adv {:.3} vs random {:.3}, {:.0}s",
            f("success_rate"),
            f("min_cosine"),
            f("mean_p_adv"),
            f("mean_p_random"),
            s.probe_secs
        ),
    )
}

fn criterion_9(s: &Stage2Run) -> Check {
    let suite = run_suite(STRUCTURAL);
    let frozen = s.frozen_before == s.frozen_after;
    match suite {
        Ok(d) if frozen => Ok(format!("{d}, ae and draftprior checkpoints unchanged by flow training")),
        Ok(d) => Err(format!("{d}, but frozen checkpoints changed: {:?} -> {:?}", s.frozen_before, s.frozen_after)),
        Err(e) => Err(e),
    }
}

/// Step 0 of the sweep against the DraftPrior start computed for the whole
/// batch at once, scored on the same samples.
fn direct_start(cfg: &RunConfig) -> draftflow::Result<Recoverability> {
    let corpus = load_corpus(cfg)?;
    let dims = corpus.dims;
    let (ae, _) = load_ae(cfg, dims)?;
    let (dp, _) = load_dp(cfg, dims)?;
    let ev = Stage2Eval::build(&ae, &dp, &corpus.val, cfg.draftprior.alpha, &cfg.flow, cfg.eval_seed())?;
    let n = cfg.eval.sweep_samples.min(corpus.val.len());
    let slots = ev.enc.targets.slots;
    let targets = SlotBatch {
        ids: ev.enc.targets.ids[..n * slots].to_vec(),
        mask: ev.enc.targets.mask[..n * slots].to_vec(),
        batch: n,
        slots,
    };
    let z_p = ev.enc.z_p.slice_rows(0, n * dims.m)?;
    let z = ev.z_start.slice_rows(0, n * dims.suffix())?;
    recoverability(&ae, &z_p, &z, &targets)
}

fn criterion_10(cfg: &RunConfig, s: &Stage2Run) -> Check {
    let r = &s.reports["sweep"];
    let rows = r.rows();
    let steps: Vec<u64> = rows.as_array().map(|a| a.iter().filter_map(|r| r["steps"].as_u64()).collect()).unwrap_or_default();
    let lat = col(rows, "latency_s");
    let at = |k: usize| steps.iter().position(|&t| t == k as u64).map(|i| lat[i]).unwrap_or(f64::NAN);
    let header = r.csv.lines().find(|l| l.starts_with("steps,")).unwrap_or("");
    let note = r.csv.lines().any(|l| l.starts_with("# mauve")) && r.json["note"].is_string();
    let direct = direct_start(cfg).map_err(err)?;
    let row0 = &rows[0];
    let diff = ["ce", "p_target", "top1"]
        .iter()
        .zip([direct.ce, direct.p_target, direct.top1])
        .map(|(k, v)| (row0[*k].as_f64().unwrap_or(f64::NAN) - v).abs())
        .fold(0.0, f64::max);
    ensure(
        steps == [0, 1, 2, 4, 8, 16] && at(16) > at(1) && diff <= 1e-6 && !header.contains("mauve") && note,
        format!("latency 1 {:.4}s 16 {:.4}s, step-0 gap {diff:.1e}, mauve note {note}", at(1), at(16)),
    )
}

const TIMING_KEYS: [&str; 2] = ["latency_s", "tokens_per_s"];

/// Largest numeric gap between two JSON values; structural mismatches are
/// infinite. Timing fields are skipped.
fn gap(a: &Value, b: &Value) -> f64 {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => (x.as_f64().unwrap_or(f64::NAN) - y.as_f64().unwrap_or(f64::NAN)).abs(),
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => x.iter().zip(y).map(|(p, q)| gap(p, q)).fold(0.0, f64::max),
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => x
            .iter()
            .filter(|(k, _)| !TIMING_KEYS.contains(&k.as_str()))
            .map(|(k, v)| y.get(k).map_or(f64::INFINITY, |w| gap(v, w)))
            .fold(0.0, f64::max),
        _ if a == b => 0.0,
        _ => f64::INFINITY,
    }
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> draftflow::Result<bool> {
    for n in names {
        let (x, y) = (a.join(n), b.join(n));
        if fs::read(&x).map_err(|e| draftflow::Error::io(&x, e))? != fs::read(&y).map_err(|e| draftflow::Error::io(&y, e))? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = config(out, 8);
    cfg.dims.h = 16;
    cfg.dims.heads = 2;
    cfg.corpus.train_size = 500;
    cfg.corpus.val_size = 40;
    cfg.variants = vec![Variant::RawFlow, Variant::Residual];
    cfg.stage1.steps = 6;
    cfg.stage1.eval_every = 2;
    cfg.draftprior.train.steps = 4;
    cfg.draftprior.train.eval_every = 2;
    cfg.flow.train.steps = 4;
    cfg.flow.train.eval_every = 2;
    cfg
}

/// Trains every stage of the tiny config, optionally stopping half way and
/// resuming, and returns the final checkpoint hashes.
fn tiny_run(out: &Path, interrupt: bool) -> draftflow::Result<Vec<(String, String)>> {
    let cfg = tiny_config(out);
    cfg.validate()?;
    cmd_generate_corpus(&cfg)?;
    let mut hashes = Vec::new();
    for (stage, steps) in [(Stage::Ae, cfg.stage1.steps), (Stage::DraftPrior, cfg.draftprior.train.steps), (Stage::Flow, cfg.flow.train.steps)] {
        if interrupt {
            for s in cmd_train(stage, &cfg, Some(steps / 2))? {
                if s.complete {
                    return Err(draftflow::Error::Invalid(format!("{} finished before its stop point", s.checkpoint)));
                }
            }
        }
        hashes.extend(cmd_train(stage, &cfg, None)?.into_iter().map(|s| (s.checkpoint, s.hash)));
    }
    Ok(hashes)
}

fn criterion_11(root: &Path, cfg: &RunConfig, s: &Stage2Run) -> Check {
    let mut notes = Vec::new();
    let mut ok = true;

    let mut regen = cfg.clone();
    regen.paths.out = root.join("regen");
    cmd_generate_corpus(&regen).map_err(err)?;
    let corpus_same =
        same_files(&RunPaths::new(cfg).corpus_dir(), &RunPaths::new(&regen).corpus_dir(), &["train.tsv", "val.tsv", "vocab.txt"]).map_err(err)?;
    ok &= corpus_same;
    notes.push(format!("corpus identical {corpus_same}"));

    let mut worst: f64 = 0.0;
    for kind in ReportKind::ALL {
        let again = cmd_eval(kind, cfg).map_err(err)?;
        let first = &s.reports[kind.name()].json;
        let prov = ["config_hash", "seed", "eval_seed", "checkpoints"].iter().all(|k| !first[*k].is_null() && first[*k] == again.json[*k]);
        worst = worst.max(gap(first, &again.json));
        ok &= prov;
    }
    ok &= worst <= 1e-6;
    notes.push(format!("report re-run gap {worst:.1e}"));

    let src = RunPaths::new(cfg).checkpoint("ae");
    let ck = load_checkpoint(&src, Some("ae")).map_err(err)?;
    let copy = root.join("roundtrip");
    let h = save_checkpoint(&copy, &ck.manifest.stage, &ck.params, ck.manifest.meta.clone(), ck.config.as_deref()).map_err(err)?;
    let back = load_checkpoint(&copy, Some("ae")).map_err(err)?;
    let round = h == ck.manifest.payload_sha256
        && back.params.checksum() == ck.params.checksum()
        && same_files(&src, &copy, &[MANIFEST, PAYLOAD]).unwrap_or(false);
    ok &= round;
    notes.push(format!("checkpoint round trip {round}"));

    let straight = tiny_run(&root.join("tiny_straight"), false).map_err(err)?;
    let resumed = tiny_run(&root.join("tiny_resumed"), true).map_err(err)?;
    let resume = straight == resumed && !straight.is_empty();
    ok &= resume;
    notes.push(format!("resume matches uninterrupted {resume} ({} checkpoints)", straight.len()));

    ensure(ok, notes.join(", "))
}

struct Line {
    id: usize,
    name: &'static str,
    outcome: Check,
    secs: f64,
}

fn timed(id: usize, name: &'static str, f: impl FnOnce() -> Check) -> Line {
    let clock = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| Err(panic_text(p)));
    let line = Line { id, name, outcome, secs: clock.elapsed().as_secs_f64() };
    print_line(&line);
    line
}

fn print_line(l: &Line) {
    let (tag, detail) = match &l.outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {:>2} {tag} {} [{:.0}s]: {detail}", l.id, l.name, l.secs);
}

fn main() -> ExitCode {
    let keep = std::env::var_os("ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = if keep.is_none() { Some(tempfile::tempdir().expect("temporary directory")) } else { None };
    let root = keep.unwrap_or_else(|| tmp.as_ref().map(|t| t.path().to_path_buf()).unwrap_or_default());
    fs::create_dir_all(&root).expect("acceptance directory");

    let mut lines = vec![timed(1, "gradient integrity", || run_suite(GRADIENTS))];

    eprintln!("acceptance: training the d=32 pipeline under {}", root.display());
    let clock = Instant::now();
    let d32 = catch_unwind(|| base_run(&root.join("d32"), 32)).unwrap_or_else(|p| Err(draftflow::Error::Invalid(panic_text(p))));
    let s2 = match &d32 {
        Ok(b) => stage2_run(&b.cfg),
        Err(e) => Err(draftflow::Error::Invalid(format!("d=32 base run failed: {e}"))),
    };
    let pipeline_secs = clock.elapsed().as_secs_f64();
    eprintln!("acceptance: training the d=8 comparison");
    let d8 = base_run(&root.join("d8"), 8);

    let missing = |what: &str, e: &draftflow::Error| -> Check { Err(format!("{what} unavailable: {e}")) };
    lines.push(timed(2, "stage-1 oracle recoverability", || d32.as_ref().map_or_else(|e| missing("d=32 run", e), criterion_2)));
    lines.push(timed(3, "latent width comparison", || match (&d32, &d8) {
        (Ok(a), Ok(b)) => criterion_3(a, b),
        (Err(e), _) | (_, Err(e)) => missing("base run", e),
    }));
    lines.push(timed(4, "corruption curve", || d32.as_ref().map_or_else(|e| missing("d=32 run", e), criterion_4)));
    lines.push(timed(5, "interpolation", || match (&d32, &s2) {
        (Ok(b), Ok(s)) => criterion_5(b, s),
        (Err(e), _) | (_, Err(e)) => missing("stage-2 run", e),
    }));
    lines.push(timed(6, "stage-2 matrix", || s2.as_ref().map_or_else(|e| missing("stage-2 run", e), criterion_6)));
    lines.push(timed(7, "dissociation probe", || s2.as_ref().map_or_else(|e| missing("stage-2 run", e), criterion_7)));
    lines.push(timed(8, "optimal transport fixtures", || run_suite(ALIGNMENT)));
    lines.push(timed(9, "structural guarantees", || s2.as_ref().map_or_else(|e| missing("stage-2 run", e), criterion_9)));
    lines.push(timed(10, "quality-speed sweep", || match (&d32, &s2) {
        (Ok(b), Ok(s)) => criterion_10(&b.cfg, s),
        (Err(e), _) | (_, Err(e)) => missing("stage-2 run", e),
    }));
    lines.push(timed(11, "determinism and resume", || match (&d32, &s2) {
        (Ok(b), Ok(s)) => criterion_11(&root, &b.cfg, s),
        (Err(e), _) | (_, Err(e)) => missing("stage-2 run", e),
    }));

    let failed: Vec<usize> = lines.iter().filter(|l| l.outcome.is_err()).map(|l| l.id).collect();
    println!("acceptance: {}/{} passed, d=32 pipeline {pipeline_secs:.0}s", lines.len() - failed.len(), lines.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
