//! Run configuration: one TOML file with a table per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::ModelDims;
use crate::diagnostics::{ProbeConfig, INTERPOLATION_ALPHAS, SWEEP_STEPS};
use crate::draftprior::DraftPriorConfig;
use crate::error::{Error, Result};
use crate::flowfield::{Stage2Config, Variant};
use crate::numerics::hex;
use crate::numerics::rng::derive_seed;
use crate::train::TrainConfig;

/// Output root override; paths only, never hyperparameters.
pub const ENV_OUT: &str = "DRAFTFLOW_OUT";
/// Grammar file override.
pub const ENV_GRAMMAR: &str = "DRAFTFLOW_GRAMMAR";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DimsConfig {
    pub d: usize,
    pub h: usize,
    pub heads: usize,
    pub m: usize,
    pub n: usize,
}

impl Default for DimsConfig {
    fn default() -> Self {
        Self { d: 32, h: 64, heads: 8, m: 16, n: 32 }
    }
}

impl DimsConfig {
    pub fn model(&self, vocab: usize) -> Result<ModelDims> {
        let dims = ModelDims { vocab, d: self.d, h: self.h, heads: self.heads, m: self.m, n: self.n };
        dims.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(dims)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Grammar TOML; the built-in grammar when unset.
    pub grammar: Option<PathBuf>,
    /// Tab-separated `prompt<TAB>target` file used instead of the grammar;
    /// its last `val_size` examples form the validation split.
    pub text_file: Option<PathBuf>,
    pub train_size: usize,
    pub val_size: usize,
    pub train_seed: Option<u64>,
    pub val_seed: Option<u64>,
    pub append_eos: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { grammar: None, text_file: None, train_size: 2000, val_size: 200, train_seed: None, val_seed: None, append_eos: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: Option<u64>,
    pub dropouts: Vec<f64>,
    pub interpolation_alphas: Vec<f64>,
    pub probe: ProbeConfig,
    pub probe_examples: usize,
    pub sweep_steps: Vec<usize>,
    pub sweep_samples: usize,
    pub sweep_variant: Variant,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: None,
            dropouts: vec![0.0, 0.03, 0.05, 0.10],
            interpolation_alphas: INTERPOLATION_ALPHAS.to_vec(),
            probe: ProbeConfig::default(),
            probe_examples: 100,
            sweep_steps: SWEEP_STEPS.to_vec(),
            sweep_samples: 100,
            sweep_variant: Variant::Fused,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out: PathBuf::from("runs/default") }
    }
}

fn stage_train(steps: usize, eval_every: usize) -> TrainConfig {
    let mut t = TrainConfig { steps, eval_every, ..Default::default() };
    t.optimizer.lr = 1e-3;
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Stage-2 variants trained by `train --stage flow`.
    pub variants: Vec<Variant>,
    pub dims: DimsConfig,
    pub corpus: CorpusConfig,
    pub stage1: TrainConfig,
    pub draftprior: DraftPriorConfig,
    pub flow: Stage2Config,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let draftprior = DraftPriorConfig { train: stage_train(1500, 250), ..Default::default() };
        let flow = Stage2Config { train: stage_train(200, 100), ..Default::default() };
        Self {
            seed: 1337,
            variants: Variant::ALL.to_vec(),
            dims: DimsConfig::default(),
            corpus: CorpusConfig::default(),
            stage1: stage_train(600, 200),
            draftprior,
            flow,
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.model(crate::corpus::RESERVED.len() + 1)?;
        let c = &self.corpus;
        if c.train_size == 0 || c.val_size == 0 {
            return Err(Error::Config("corpus sizes must be >= 1".into()));
        }
        if self.train_seed() == self.val_seed() {
            return Err(Error::Config("train and validation corpus seeds must differ".into()));
        }
        self.stage1.validate("stage1")?;
        self.draftprior.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.flow.validate()?;
        if self.variants.is_empty() {
            return Err(Error::Config("variants must name at least one stage-2 variant".into()));
        }
        if self.variants.contains(&Variant::Residual) && !self.variants.contains(&Variant::RawFlow) {
            return Err(Error::Config("the residual variant builds on raw_flow; list both".into()));
        }
        let e = &self.eval;
        if e.dropouts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("eval dropouts must lie in [0, 1]".into()));
        }
        if e.probe_examples == 0 || e.sweep_samples == 0 || e.sweep_steps.is_empty() {
            return Err(Error::Config("eval probe_examples, sweep_samples and sweep_steps must be non-empty".into()));
        }
        e.probe.validate()?;
        Ok(())
    }

    pub fn train_seed(&self) -> u64 {
        self.corpus.train_seed.unwrap_or(self.seed)
    }

    pub fn val_seed(&self) -> u64 {
        self.corpus.val_seed.unwrap_or_else(|| derive_seed(self.seed, 0x7a1))
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval.seed.unwrap_or_else(|| derive_seed(self.seed, 0xe7a1))
    }

    /// Initialisation seed for one stage.
    pub fn init_seed(&self, stage: &str) -> u64 {
        let k = stage.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
        derive_seed(self.seed, k)
    }

    /// SHA-256 of the canonical configuration with paths excluded, so moving
    /// a run directory keeps its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        c.corpus.grammar = None;
        c.corpus.text_file = None;
        hex(&Sha256::digest(c.to_toml().as_bytes()))
    }

    /// Applies the environment and command-line path overrides, in that order.
    pub fn resolve_paths(&mut self, out: Option<PathBuf>) {
        if let Ok(v) = std::env::var(ENV_OUT) {
            self.paths.out = PathBuf::from(v);
        }
        if let Ok(v) = std::env::var(ENV_GRAMMAR) {
            self.corpus.grammar = Some(PathBuf::from(v));
        }
        if let Some(o) = out {
            self.paths.out = o;
        }
    }
}
