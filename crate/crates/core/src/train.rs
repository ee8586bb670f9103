//! Shared optimisation plumbing for every training stage.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{derive_seed, permutation};
use crate::numerics::{AdamW, AdamWConfig, Graph, ParamStore, Scalar, Var};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 1000, batch_size: 32, eval_every: 250, optimizer: AdamWConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{what}: batch_size must be >= 1")));
        }
        if self.eval_every == 0 {
            return Err(Error::Config(format!("{what}: eval_every must be >= 1")));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config(format!("{what}: invalid optimizer settings")));
        }
        Ok(())
    }
}

/// Example indices for optimisation step `step`. Each epoch is a fresh
/// permutation drawn from `(seed, epoch)`, and a trailing partial batch is
/// dropped, so the schedule is a pure function of the step index and a
/// resumed run sees the same data as an uninterrupted one.
pub fn batch_indices(seed: u64, n_items: usize, batch_size: usize, step: usize) -> Vec<usize> {
    let bs = batch_size.min(n_items).max(1);
    let per_epoch = n_items / bs;
    let epoch = step / per_epoch;
    let k = step % per_epoch;
    let perm = permutation(n_items, derive_seed(seed, epoch as u64));
    perm[k * bs..(k + 1) * bs].to_vec()
}

/// Builds one loss, back-propagates, checks for divergence and applies an
/// optimiser update to the trainable parameters bound inside `f`. Returns the
/// loss value and the pre-clip gradient norm.
pub fn train_step<T: Scalar>(
    store: &mut ParamStore<T>,
    opt: &mut AdamW<T>,
    step: usize,
    f: impl FnOnce(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let value = g.scalar(loss).f64();
    if !value.is_finite() {
        return Err(Error::Diverged { step, what: format!("loss is {value}") });
    }
    let grads = g.backward(loss)?.into_param_grads(store);
    if grads.values().any(|t| !t.is_finite()) {
        return Err(Error::Diverged { step, what: "non-finite gradient".into() });
    }
    let norm = opt.update(store, &grads);
    if !store.all_finite() {
        return Err(Error::Diverged { step, what: "non-finite parameters after update".into() });
    }
    Ok((value, norm))
}

/// Rows of named numeric columns, emitted as CSV.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TrainLog {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn last(&self, column: &str) -> Option<f64> {
        let i = self.columns.iter().position(|c| c == column)?;
        self.rows.last().map(|r| r[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }
}
