//! Epoch loop with per-step logging and lowest-validation-perplexity
//! checkpoint selection.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::perplexity;
use crate::fusion::{PrccfModel, PreparedSample};
use crate::nn::{Adam, AdamConfig, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many steps have run.
    pub max_steps: Option<u64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            eval_batch_size: 16,
            epochs: 10,
            max_steps: None,
        }
    }
}

impl TrainingConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("training.lr must be positive (got {})", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            v.push("training.beta1 and training.beta2 must be in [0, 1)".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            v.push("training.batch_size and training.eval_batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            v.push("training.epochs must be >= 1".into());
        }
        v
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub ppl: f64,
    pub lr: f64,
    pub stage_delta: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub log: Vec<LogRecord>,
    /// Validation perplexity after each epoch.
    pub validation_ppl: Vec<f64>,
    pub best_epoch: usize,
    pub best_store: ParamStore,
    pub steps: u64,
    /// Sum over steps of each tensor's mean |Δparam|, by name.
    pub cumulative_delta: BTreeMap<String, f64>,
}

/// Trains `model` in place and leaves it holding the parameters of the
/// epoch with the lowest validation perplexity. Each log record is also
/// written to `sink` as a JSON line.
pub fn train(
    model: &mut PrccfModel,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    cfg: &TrainingConfig,
    seed: u64,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainingOutcome> {
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    if train_set.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let mut adam = Adam::new(cfg.adam(), &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut validation_ppl = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0u64;
    let mut cumulative_delta: BTreeMap<String, f64> = BTreeMap::new();
    let exhausted = |step: u64| cfg.max_steps.is_some_and(|m| step >= m);
    for epoch in 1..=cfg.epochs {
        if exhausted(step) {
            break;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if exhausted(step) {
                break;
            }
            let batch: Vec<PreparedSample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let stats = model.train_step(&mut adam, &batch)?;
            step += 1;
            for (name, d) in &stats.tensor_delta {
                *cumulative_delta.entry(name.clone()).or_default() += d;
            }
            let rec = LogRecord {
                step,
                epoch,
                loss: stats.loss,
                ppl: stats.loss.exp(),
                lr: cfg.lr,
                stage_delta: stats.stage_delta,
            };
            if let Some(w) = sink.as_deref_mut() {
                let line = serde_json::to_string(&rec).expect("log record serializes");
                writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
            }
            log.push(rec);
        }
        let ppl = if val_set.is_empty() {
            f64::INFINITY
        } else {
            perplexity(model, val_set)?
        };
        log::info!("epoch {epoch}: validation ppl {ppl:.3}");
        validation_ppl.push(ppl);
        if best.as_ref().is_none_or(|(b, _, _)| ppl < *b) {
            best = Some((ppl, epoch, model.store.clone()));
        }
    }
    let (best_store, best_epoch) = match best {
        Some((_, e, s)) => (s, e),
        None => (model.store.clone(), 0),
    };
    model.store = best_store.clone();
    Ok(TrainingOutcome {
        log,
        validation_ppl,
        best_epoch,
        best_store,
        steps: step,
        cumulative_delta,
    })
}
