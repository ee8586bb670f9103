//! Orchestration of the full experiment: corpus files, stage training with
//! resumable checkpoints, table-shaped reports and single-example inference.

mod config;

pub use config::*;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use crate::autoencoder::{split_full, train_stage1, Autoencoder, ModelDims};
use crate::checkpoint::{load_checkpoint, save_checkpoint, split_optimizer, stage_dir, with_optimizer, Checkpoint};
use crate::corpus::{
    generate_corpus, pad_to_slots, read_corpus_file, write_corpus_file, GrammarConfig, SlotBatch, StoryExample, TokenSequence,
    Vocabulary, EOS, PAD, UNK,
};
use crate::diagnostics::{
    decode_suffix_tokens, dissociation_probe, interpolation_diagnostic, quality_speed_sweep, recoverability, sweep_csv,
    truncate_at_eos, Recoverability, MAUVE_NOTE,
};
use crate::draftprior::{
    corruption_curve, curve_csv, encode_pairs, mix_with_noise, train_draftprior, DpTrainData, DraftPrior, MixSpec,
};
use crate::error::{Error, Result};
use crate::flowfield::{stage2_csv, stage2_report, train_stage2, Stage2Data, Stage2Eval, Stage2Model, Variant};
use crate::numerics::{AdamW, AdamWConfig, ParamStore, Tensor};
use crate::train::TrainLog;

/// Directory layout under a run root.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.paths.out.clone() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn train_file(&self) -> PathBuf {
        self.corpus_dir().join("train.tsv")
    }

    pub fn val_file(&self) -> PathBuf {
        self.corpus_dir().join("val.tsv")
    }

    pub fn vocab_file(&self) -> PathBuf {
        self.corpus_dir().join("vocab.txt")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        stage_dir(&self.root, name)
    }

    pub fn log_file(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.csv"))
    }

    pub fn report(&self, name: &str, ext: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.{ext}"))
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub train: usize,
    pub val: usize,
    pub skipped: usize,
    pub vocab_size: usize,
}

fn load_grammar(cfg: &RunConfig) -> Result<GrammarConfig> {
    match &cfg.corpus.grammar {
        None => Ok(GrammarConfig::default_grammar()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("grammar {}: {e}", p.display())))?;
            GrammarConfig::from_toml(&text).map_err(|e| Error::Config(format!("grammar {}: {e}", p.display())))
        }
    }
}

/// Writes `train.tsv`, `val.tsv` and `vocab.txt` under the run's corpus
/// directory. Grammar splits use disjoint seeds; a text corpus is split by
/// position.
pub fn cmd_generate_corpus(cfg: &RunConfig) -> Result<CorpusSummary> {
    let paths = RunPaths::new(cfg);
    let grammar = load_grammar(cfg)?;
    let vocab = grammar.vocabulary();
    let (m, n) = (cfg.dims.m, cfg.dims.n);
    let c = &cfg.corpus;
    let (train, val, skipped) = match &c.text_file {
        Some(p) => {
            let r = crate::corpus::ingest_text_corpus(p, &vocab, m, n, c.append_eos)?;
            if r.examples.len() <= c.val_size {
                return Err(Error::Invalid(format!("{}: {} usable examples for {} validation", p.display(), r.examples.len(), c.val_size)));
            }
            let cut = r.examples.len() - c.val_size;
            let mut ex = r.examples;
            let val = ex.split_off(cut);
            (ex, val, r.skipped)
        }
        None => (
            generate_corpus(cfg.train_seed(), c.train_size, &grammar, m, n, c.append_eos)?,
            generate_corpus(cfg.val_seed(), c.val_size, &grammar, m, n, c.append_eos)?,
            0,
        ),
    };
    fs::create_dir_all(paths.corpus_dir()).map_err(|e| Error::io(paths.corpus_dir(), e))?;
    write_corpus_file(&paths.train_file(), &train)?;
    write_corpus_file(&paths.val_file(), &val)?;
    write_file(&paths.vocab_file(), &vocab.to_text())?;
    info!("corpus: {} train / {} val examples, vocabulary {}", train.len(), val.len(), vocab.size());
    Ok(CorpusSummary { train: train.len(), val: val.len(), skipped, vocab_size: vocab.size() })
}

/// Corpus files of a run, padded to the slot layout.
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Vec<TokenSequence>,
    pub val: Vec<TokenSequence>,
    pub dims: ModelDims,
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let paths = RunPaths::new(cfg);
    for p in [paths.vocab_file(), paths.train_file(), paths.val_file()] {
        if !p.exists() {
            return Err(Error::MissingPrerequisite(format!("corpus file {} (run generate-corpus)", p.display())));
        }
    }
    let text = fs::read_to_string(paths.vocab_file()).map_err(|e| Error::io(paths.vocab_file(), e))?;
    let vocab = Vocabulary::from_text(&text)?;
    let (m, n) = (cfg.dims.m, cfg.dims.n);
    let pad = |ex: Vec<StoryExample>| -> Result<Vec<TokenSequence>> { ex.iter().map(|e| pad_to_slots(e, m, n)).collect() };
    let train = pad(read_corpus_file(&paths.train_file(), &vocab, m, n, cfg.corpus.append_eos)?)?;
    let val = pad(read_corpus_file(&paths.val_file(), &vocab, m, n, cfg.corpus.append_eos)?)?;
    let dims = cfg.dims.model(vocab.size())?;
    Ok(Corpus { vocab, train, val, dims })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ae,
    DraftPrior,
    Flow,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ae" => Ok(Stage::Ae),
            "draftprior" => Ok(Stage::DraftPrior),
            "flow" => Ok(Stage::Flow),
            other => Err(Error::Config(format!("unknown stage {other:?} (expected ae, draftprior or flow)"))),
        }
    }
}

fn flow_name(v: Variant) -> String {
    format!("flow_{}", v.name())
}

/// A stored stage: parameters, optimiser state and progress.
struct Stored {
    params: ParamStore<f32>,
    opt: AdamW<f32>,
    complete: bool,
    hash: String,
}

fn read_stage(paths: &RunPaths, name: &str, tag: &str, opt_cfg: &AdamWConfig) -> Result<Option<Stored>> {
    let dir = paths.checkpoint(name);
    if !dir.join(crate::checkpoint::MANIFEST).exists() {
        return Ok(None);
    }
    let c: Checkpoint = load_checkpoint(&dir, Some(tag))?;
    let step = c.manifest.meta["step"].as_u64().unwrap_or(0);
    let complete = c.manifest.meta["complete"].as_bool().unwrap_or(false);
    let (params, opt) = split_optimizer(&c.params, opt_cfg.clone(), step);
    Ok(Some(Stored { params, opt, complete, hash: c.manifest.payload_sha256 }))
}

fn require(paths: &RunPaths, name: &str, tag: &str, what: &str) -> Result<Stored> {
    match read_stage(paths, name, tag, &AdamWConfig::default())? {
        Some(s) if s.complete => Ok(s),
        Some(_) => Err(Error::MissingPrerequisite(format!("{what} checkpoint {} is incomplete", paths.checkpoint(name).display()))),
        None => Err(Error::MissingPrerequisite(format!("{what} checkpoint {}", paths.checkpoint(name).display()))),
    }
}

#[allow(clippy::too_many_arguments)]
fn write_stage(
    cfg: &RunConfig,
    paths: &RunPaths,
    name: &str,
    tag: &str,
    params: &ParamStore<f32>,
    opt: &AdamW<f32>,
    complete: bool,
    extra: Value,
) -> Result<String> {
    let meta = json!({
        "step": opt.step,
        "complete": complete,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "extra": extra,
    });
    save_checkpoint(&paths.checkpoint(name), tag, &with_optimizer(params, opt)?, meta, Some(&cfg.to_toml()))
}

/// Appends log rows, writing the header only for a fresh file.
fn append_log(paths: &RunPaths, name: &str, log: &TrainLog, fresh: bool) -> Result<()> {
    let path = paths.log_file(name);
    let csv = log.to_csv();
    let text = if fresh || !path.exists() {
        csv
    } else {
        let old = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        old + csv.split_once('\n').map_or("", |(_, rows)| rows)
    };
    write_file(&path, &text)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub checkpoint: String,
    pub hash: String,
    pub step: u64,
    pub complete: bool,
    pub last_loss: Option<f64>,
}

pub fn load_ae(cfg: &RunConfig, dims: ModelDims) -> Result<(Autoencoder<f32>, String)> {
    let s = require(&RunPaths::new(cfg), "ae", "ae", "stage-1 autoencoder (run train --stage ae)")?;
    Ok((Autoencoder::from_params(dims, s.params, true)?, s.hash))
}

pub fn load_dp(cfg: &RunConfig, dims: ModelDims) -> Result<(DraftPrior<f32>, String)> {
    let s = require(&RunPaths::new(cfg), "draftprior", "draftprior", "DraftPrior (run train --stage draftprior)")?;
    Ok((DraftPrior::from_params(dims, s.params)?, s.hash))
}

pub fn load_flow(cfg: &RunConfig, dims: ModelDims, v: Variant) -> Result<(Stage2Model<f32>, String)> {
    let name = flow_name(v);
    let s = require(&RunPaths::new(cfg), &name, "flow", &format!("stage-2 {} (run train --stage flow)", v.name()))?;
    let m = Stage2Model::from_params(v, dims, cfg.flow.width(&dims), cfg.flow.residual_lambda, s.params)?;
    Ok((m, s.hash))
}

/// Trains one stage, resuming a partial checkpoint when present. `stop_at`
/// halts early and leaves a resumable checkpoint. Later stages require the
/// complete checkpoints of earlier ones.
pub fn cmd_train(stage: Stage, cfg: &RunConfig, stop_at: Option<usize>) -> Result<Vec<TrainSummary>> {
    let paths = RunPaths::new(cfg);
    let corpus = load_corpus(cfg)?;
    let dims = corpus.dims;
    match stage {
        Stage::Ae => {
            let t = &cfg.stage1;
            let (mut ae, mut opt, fresh) = match read_stage(&paths, "ae", "ae", &t.optimizer)? {
                Some(s) if s.complete => {
                    info!("stage-1 checkpoint already complete");
                    return Ok(vec![TrainSummary { checkpoint: "ae".into(), hash: s.hash, step: s.opt.step, complete: true, last_loss: None }]);
                }
                Some(s) => (Autoencoder::from_params(dims, s.params, false)?, s.opt, false),
                None => (Autoencoder::new(dims, cfg.init_seed("ae"))?, AdamW::new(t.optimizer.clone()), true),
            };
            let log = train_stage1(&mut ae, &mut opt, &corpus.train, &corpus.val, t, cfg.seed, stop_at)?;
            append_log(&paths, "ae", &log, fresh)?;
            let complete = ae.is_frozen();
            let hash = write_stage(cfg, &paths, "ae", "ae", ae.params(), &opt, complete, json!({"oracle": ae.oracle_eval(&corpus.val)?}))?;
            Ok(vec![TrainSummary { checkpoint: "ae".into(), hash, step: opt.step, complete, last_loss: log.last("train_loss") }])
        }
        Stage::DraftPrior => {
            let (ae, ae_hash) = load_ae(cfg, dims)?;
            let c = &cfg.draftprior;
            let (mut dp, mut opt, fresh) = match read_stage(&paths, "draftprior", "draftprior", &c.train.optimizer)? {
                Some(s) if s.complete => {
                    return Ok(vec![TrainSummary { checkpoint: "draftprior".into(), hash: s.hash, step: s.opt.step, complete: true, last_loss: None }]);
                }
                Some(s) => (DraftPrior::from_params(dims, s.params)?, s.opt, false),
                None => (DraftPrior::new(dims, cfg.init_seed("draftprior"))?, AdamW::new(c.train.optimizer.clone()), true),
            };
            let data = DpTrainData::build(&ae, &corpus.train, &c.train_dropouts, cfg.seed)?;
            let log = train_draftprior(&mut dp, &mut opt, &ae, &data, &corpus.val, c, cfg.seed, stop_at)?;
            append_log(&paths, "draftprior", &log, fresh)?;
            let complete = opt.step as usize >= c.train.steps;
            let hash = write_stage(cfg, &paths, "draftprior", "draftprior", dp.params(), &opt, complete, json!({"ae": ae_hash}))?;
            Ok(vec![TrainSummary { checkpoint: "draftprior".into(), hash, step: opt.step, complete, last_loss: log.last("loss") }])
        }
        Stage::Flow => {
            let (ae, ae_hash) = load_ae(cfg, dims)?;
            let (dp, dp_hash) = load_dp(cfg, dims)?;
            let c = &cfg.flow;
            let data = Stage2Data::build(&ae, &corpus.train, c, cfg.seed)?;
            let mut out = Vec::new();
            let mut trained: BTreeMap<&'static str, Stage2Model<f32>> = BTreeMap::new();
            for v in Variant::ALL.into_iter().filter(|v| cfg.variants.contains(v)) {
                let name = flow_name(v);
                let width = c.width(&dims);
                let existing = read_stage(&paths, &name, "flow", &c.train.optimizer)?;
                let (mut model, mut opt, fresh) = match existing {
                    Some(s) if s.complete => {
                        let m = Stage2Model::from_params(v, dims, width, c.residual_lambda, s.params)?;
                        trained.insert(v.name(), m);
                        out.push(TrainSummary { checkpoint: name, hash: s.hash, step: s.opt.step, complete: true, last_loss: None });
                        continue;
                    }
                    Some(s) => (Stage2Model::from_params(v, dims, width, c.residual_lambda, s.params)?, s.opt, false),
                    None => {
                        let base = trained.get(Variant::RawFlow.name());
                        (Stage2Model::new(v, dims, c, cfg.init_seed(&name), base)?, AdamW::new(c.train.optimizer.clone()), true)
                    }
                };
                let log = train_stage2(&mut model, &mut opt, &ae, &dp, cfg.draftprior.alpha, &data, c, cfg.seed, stop_at)?;
                append_log(&paths, &name, &log, fresh)?;
                let complete = opt.step as usize >= c.train.steps;
                let extra = json!({"ae": ae_hash, "draftprior": dp_hash, "variant": v.name()});
                let hash = write_stage(cfg, &paths, &name, "flow", model.params(), &opt, complete, extra)?;
                out.push(TrainSummary { checkpoint: name, hash, step: opt.step, complete, last_loss: log.last("loss") });
                if !complete {
                    // later variants may depend on this one
                    break;
                }
                trained.insert(v.name(), model);
            }
            Ok(out)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportKind {
    CorruptionCurve,
    Stage2Matrix,
    Interpolation,
    Sweep,
    Dissociation,
}

impl ReportKind {
    pub const ALL: [ReportKind; 5] =
        [ReportKind::CorruptionCurve, ReportKind::Stage2Matrix, ReportKind::Interpolation, ReportKind::Sweep, ReportKind::Dissociation];

    pub fn name(self) -> &'static str {
        match self {
            ReportKind::CorruptionCurve => "corruption_curve",
            ReportKind::Stage2Matrix => "stage2_matrix",
            ReportKind::Interpolation => "interpolation",
            ReportKind::Sweep => "sweep",
            ReportKind::Dissociation => "dissociation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown report {s:?} (expected one of corruption_curve, stage2_matrix, interpolation, sweep, dissociation)")))
    }
}

/// One emitted report: CSV text plus a JSON mirror carrying provenance.
#[derive(Clone, Debug)]
pub struct Report {
    pub csv: String,
    pub json: Value,
}

impl Report {
    pub fn rows(&self) -> &Value {
        &self.json["rows"]
    }
}

fn provenance(cfg: &RunConfig, report: ReportKind, checkpoints: &[(&str, &str)], rows: Value) -> Value {
    let ck: BTreeMap<&str, &str> = checkpoints.iter().copied().collect();
    json!({
        "report": report.name(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "eval_seed": cfg.eval_seed(),
        "checkpoints": ck,
        "rows": rows,
    })
}

fn with_header(cfg: &RunConfig, csv: String) -> String {
    format!("# config_hash {} seed {} eval_seed {}\n{csv}", cfg.hash(), cfg.seed, cfg.eval_seed())
}

fn to_value<S: Serialize>(v: &S) -> Value {
    serde_json::to_value(v).expect("report rows serialise")
}

/// Computes one report from the run's checkpoints and writes
/// `reports/<name>.csv` and `reports/<name>.json`.
pub fn cmd_eval(report: ReportKind, cfg: &RunConfig) -> Result<Report> {
    let paths = RunPaths::new(cfg);
    let corpus = load_corpus(cfg)?;
    let dims = corpus.dims;
    let val = &corpus.val;
    let seed = cfg.eval_seed();
    let alpha = cfg.draftprior.alpha;
    let (ae, ae_hash) = load_ae(cfg, dims)?;
    let (csv, json) = match report {
        ReportKind::CorruptionCurve => {
            let (dp, dp_hash) = load_dp(cfg, dims)?;
            let rows = corruption_curve(&dp, &ae, val, &cfg.eval.dropouts, alpha, seed)?;
            (with_header(cfg, curve_csv(&rows)), provenance(cfg, report, &[("ae", &ae_hash), ("draftprior", &dp_hash)], to_value(&rows)))
        }
        ReportKind::Stage2Matrix => {
            let (dp, dp_hash) = load_dp(cfg, dims)?;
            let ev = Stage2Eval::build(&ae, &dp, val, alpha, &cfg.flow, seed)?;
            let mut models = Vec::new();
            let mut hashes = vec![("ae".to_string(), ae_hash.clone()), ("draftprior".to_string(), dp_hash)];
            for v in Variant::ALL.into_iter().filter(|v| cfg.variants.contains(v)) {
                let (m, h) = load_flow(cfg, dims, v)?;
                hashes.push((flow_name(v), h));
                models.push(m);
            }
            let refs: Vec<&Stage2Model<f32>> = models.iter().collect();
            let rows = stage2_report(&refs, &ae, &ev, val, &cfg.flow)?;
            let hv: Vec<(&str, &str)> = hashes.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            (with_header(cfg, stage2_csv(&rows)), provenance(cfg, report, &hv, to_value(&rows)))
        }
        ReportKind::Interpolation => {
            let (dp, dp_hash) = load_dp(cfg, dims)?;
            let ev = Stage2Eval::build(&ae, &dp, val, alpha, &cfg.flow, seed)?;
            let e = &ev.enc;
            let curve = interpolation_diagnostic(&ae, &e.z_p, &ev.z_start, &e.z_p_oracle, &e.z_s, &e.targets, &cfg.eval.interpolation_alphas)?;
            let rows: Vec<Value> = curve
                .alphas
                .iter()
                .zip(&curve.ce_values)
                .zip(&curve.p_values)
                .map(|((a, c), p)| json!({"alpha": a, "ce": c, "p_target": p}))
                .collect();
            (with_header(cfg, curve.to_csv()), provenance(cfg, report, &[("ae", &ae_hash), ("draftprior", &dp_hash)], Value::Array(rows)))
        }
        ReportKind::Sweep => {
            let (dp, dp_hash) = load_dp(cfg, dims)?;
            let v = cfg.eval.sweep_variant;
            let (model, fh) = load_flow(cfg, dims, v)?;
            let ev = Stage2Eval::build(&ae, &dp, val, alpha, &cfg.flow, seed)?;
            let n = cfg.eval.sweep_samples.min(val.len());
            let rows = quality_speed_sweep(&ae, &dp, &model, &ev, alpha, cfg.flow.gamma, &cfg.eval.sweep_steps, n)?;
            let name = flow_name(v);
            let mut j = provenance(cfg, report, &[("ae", &ae_hash), ("draftprior", &dp_hash), (&name, &fh)], to_value(&rows));
            j["note"] = json!(MAUVE_NOTE.trim_start_matches("# "));
            (with_header(cfg, sweep_csv(&rows)), j)
        }
        ReportKind::Dissociation => {
            let n = cfg.eval.probe_examples.min(val.len());
            let refs: Vec<&TokenSequence> = val[..n].iter().collect();
            let b = SlotBatch::new(&refs)?;
            let (z_p, z_s) = split_full(&ae.encode_batch(&b)?, n, dims.m, dims.n)?;
            let out = dissociation_probe(&ae, &z_p, &z_s, &b, &cfg.eval.probe)?;
            let mut csv = String::from("example,cosine,p_oracle,p_adv,p_random,success,steps\n");
            for (i, e) in out.examples.iter().enumerate() {
                csv.push_str(&format!("{i},{},{},{},{},{},{}\n", e.cosine, e.p_oracle, e.p_adv, e.p_random, e.success, e.steps));
            }
            let mut j = provenance(cfg, report, &[("ae", &ae_hash)], to_value(&out.examples));
            j["summary"] = to_value(&out.summary);
            (with_header(cfg, csv), j)
        }
    };
    write_file(&paths.report(report.name(), "csv"), &csv)?;
    write_file(&paths.report(report.name(), "json"), &serde_json::to_string_pretty(&json).expect("json"))?;
    Ok(Report { csv, json })
}

#[derive(Clone, Debug, Serialize)]
pub struct InferOutput {
    pub tokens: Vec<String>,
    pub text: String,
    /// Decoder probability of each emitted suffix token.
    pub probs: Vec<f64>,
    pub steps: usize,
    pub latency_s: f64,
    pub recoverability: Option<Recoverability>,
    /// The draft was empty, so the start is noise mixed with an encoding of
    /// padding alone.
    pub empty_draft: bool,
    pub unknown_words: usize,
}

/// Runs draft encoding, the DraftPrior start, `steps` refinement steps of
/// `variant` (none for 0) and decoding for a single prompt and draft.
pub fn cmd_infer(cfg: &RunConfig, prompt: &str, draft: &str, reference: Option<&str>, steps: usize, variant: Option<Variant>) -> Result<InferOutput> {
    let corpus_dir = RunPaths::new(cfg).vocab_file();
    let text = fs::read_to_string(&corpus_dir).map_err(|_| Error::MissingPrerequisite(format!("vocabulary {}", corpus_dir.display())))?;
    let vocab = Vocabulary::from_text(&text)?;
    let dims = cfg.dims.model(vocab.size())?;
    let (m, n, s) = (dims.m, dims.n, dims.suffix());
    let (ae, _) = load_ae(cfg, dims)?;
    let (dp, _) = load_dp(cfg, dims)?;
    let model = if steps > 0 { Some(load_flow(cfg, dims, variant.unwrap_or(cfg.eval.sweep_variant))?.0) } else { None };
    let p_ids = vocab.encode(prompt);
    let d_ids = vocab.encode(draft);
    let unknown_words = p_ids.iter().chain(&d_ids).filter(|&&i| i == UNK).count();
    if p_ids.len() > m {
        return Err(Error::Invalid(format!("prompt has {} tokens; the budget is {m}", p_ids.len())));
    }
    if d_ids.len() > s {
        return Err(Error::Invalid(format!("draft has {} tokens; the budget is {s}", d_ids.len())));
    }
    let prompt_seq = TokenSequence::from_tokens(&p_ids, m)?;
    let slots = |ids: &[usize]| -> Result<TokenSequence> { Ok(prompt_seq.concat(&TokenSequence::from_tokens(ids, s)?)) };
    let draft_seq = slots(&d_ids)?;
    let reference_seq = match reference {
        Some(r) => {
            let mut ids = vocab.encode(r);
            if cfg.corpus.append_eos {
                ids.push(EOS);
            }
            if ids.len() > s {
                return Err(Error::Invalid(format!("reference has {} tokens; the budget is {s}", ids.len())));
            }
            Some(slots(&ids)?)
        }
        None => None,
    };
    let clock = Instant::now();
    let target_for_encoding = reference_seq.clone().unwrap_or_else(|| draft_seq.clone());
    let enc = encode_pairs(&ae, &[&target_for_encoding], &[&draft_seq])?;
    let z_t = mix_with_noise(&enc.z_draft, &MixSpec::new(cfg.draftprior.alpha, cfg.seed)?)?;
    let start = dp.predict_start(&z_t, &enc.z_p, cfg.draftprior.alpha, 1)?;
    let z = match &model {
        Some(m) => m.refine(&start, &enc.z_p, 1, steps, cfg.flow.gamma)?.0,
        None => start,
    };
    let tokens = decode_suffix_tokens(&ae, &enc.z_p, &z, 1)?.remove(0);
    let latency_s = clock.elapsed().as_secs_f64();
    let full = crate::autoencoder::join_full(&enc.z_p, &z, 1, m, n)?;
    let probs_all = crate::numerics::softmax_rows(&ae.decode_batch(&full, 1)?);
    let kept = truncate_at_eos(&tokens);
    let probs: Vec<f64> = tokens
        .iter()
        .enumerate()
        .take(kept.len())
        .map(|(i, &t)| probs_all.row(m + i)[t].f64_value())
        .collect();
    let recov = match &reference_seq {
        Some(r) => Some(recoverability(&ae, &enc.z_p, &z, &SlotBatch::new(&[r])?)?),
        None => None,
    };
    let words: Vec<String> = kept.iter().filter(|&&t| t != PAD).map(|&t| vocab.token(t).to_string()).collect();
    Ok(InferOutput {
        text: vocab.decode(&kept),
        tokens: words,
        probs,
        steps,
        latency_s,
        recoverability: recov,
        empty_draft: d_ids.is_empty(),
        unknown_words,
    })
}

trait F64Value {
    fn f64_value(self) -> f64;
}

impl F64Value for f32 {
    fn f64_value(self) -> f64 {
        f64::from(self)
    }
}

/// Stacks suffix rows for tests and tools.
pub fn suffix_of(t: &Tensor<f32>, batch: usize, dims: &ModelDims) -> Result<Tensor<f32>> {
    Ok(split_full(t, batch, dims.m, dims.n)?.1)
}
