//! Loss, training loop, evaluation and multi-seed aggregation.

mod metrics;

pub use metrics::{
    bearing_deg, compute_report, ioa, rmse, speed, wrap_deg, MetricReport, Pooling,
    QuantityMetrics, ScoredForecast,
};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{NormStats, VarType};
use crate::model::{BatchForecast, Model};
use crate::ndiff::{seeded_rng, Adam, AdamConfig, Matrix, ParamStore, StepOutcome, Tape, Var};
use crate::sampler::Snapshot;

/// Differentiable `Σ_type mean(1 - IoA)` over every `(node, label column)`
/// with at least two points and non-constant truth. `None` when nothing in
/// the batch is scorable.
pub fn ioa_loss(tape: &Tape, forecast: &BatchForecast, snapshots: &[&Snapshot]) -> Option<Var> {
    let mut per_type: BTreeMap<&VarType, Vec<Var>> = BTreeMap::new();
    for (s, row) in snapshots.iter().zip(&forecast.per_snapshot) {
        for (n, pred) in s.nodes.iter().zip(row) {
            let (Some(y), Some(pred)) = (&n.y, pred) else { continue };
            for c in 0..y.cols() {
                let col = y.column(c);
                if let Some(term) = ioa_term(tape, *pred, c, &col) {
                    per_type.entry(&n.node.var_type).or_default().push(term);
                }
            }
        }
    }
    let mut total: Option<Var> = None;
    for terms in per_type.values() {
        let sum = terms[1..].iter().fold(terms[0], |acc, &t| tape.add(acc, t));
        let mean = tape.scale(sum, 1.0 / terms.len() as f64);
        total = Some(match total {
            None => mean,
            Some(t) => tape.add(t, mean),
        });
    }
    total
}

/// `Σ(ŷ - y)² / Σ(|ŷ - ȳ| + |y - ȳ|)²` for column `c` of `pred`.
fn ioa_term(tape: &Tape, pred: Var, c: usize, y: &[f64]) -> Option<Var> {
    if y.len() < 2 || y.iter().all(|&v| v == y[0]) {
        return None;
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let p = tape.slice_cols(pred, c, c + 1);
    let num = tape.sum(tape.square(tape.sub(p, tape.constant(Matrix::column_vector(y)))));
    let spread: Vec<f64> = y.iter().map(|v| (v - mean).abs()).collect();
    let dev = tape.abs(tape.affine(p, 1.0, -mean));
    let den = tape.sum(tape.square(tape.add(dev, tape.constant(Matrix::column_vector(&spread)))));
    Some(tape.div(num, den))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 8,
            max_epochs: 200,
            patience: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub adam_steps: u64,
    pub skipped_steps: usize,
    /// Training batches without any scorable target.
    pub empty_batches: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for r in &self.history {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
        }
        s
    }
}

/// Mean batch loss over `snapshots` without touching parameters.
pub fn dataset_loss(model: &Model, snapshots: &[Snapshot], batch: usize) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in snapshots.chunks(batch.max(1)) {
        let tape = Tape::new();
        let refs: Vec<&Snapshot> = chunk.iter().collect();
        let f = model.forward(&tape, &refs, None)?;
        if let Some(l) = ioa_loss(&tape, &f, &refs) {
            total += tape.value(l).item();
            batches += 1;
        }
    }
    Ok((batches > 0).then(|| total / batches as f64))
}

/// Adam over shuffled mini-batches with early stopping on validation loss.
/// On return the model holds the parameters of the best validation epoch.
pub fn train(
    model: &mut Model,
    train_set: &[Snapshot],
    val_set: &[Snapshot],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainState> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Sampling("training and validation sets must be non-empty".into()));
    }
    let mut rng = seeded_rng(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut adam = Adam::new(cfg.adam, &model.params)?;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut state = TrainState {
        epochs_run: 0,
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        adam_steps: 0,
        skipped_steps: 0,
        empty_batches: 0,
        history: Vec::new(),
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&Snapshot> = idx.iter().map(|&i| &train_set[i]).collect();
            let tape = Tape::new();
            let f = model.forward(&tape, &refs, Some(&mut rng))?;
            let Some(loss) = ioa_loss(&tape, &f, &refs) else {
                state.empty_batches += 1;
                continue;
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            let grads = tape.backward(loss)?.dense(&model.params);
            if adam.step(&mut model.params, &grads)? == StepOutcome::SkippedNonFinite {
                state.skipped_steps += 1;
            }
            loss_sum += value;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::NoScorableTarget);
        }
        let train_loss = loss_sum / batches as f64;
        let val_loss = dataset_loss(model, val_set, cfg.batch_size)?.ok_or(Error::NoScorableTarget)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        state.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        state.epochs_run = epoch;
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, model.params.clone()));
        } else if epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
            log::info!("early stop at epoch {epoch}");
            break;
        }
    }
    let (loss, epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    state.best_val_loss = loss;
    state.best_epoch = epoch;
    state.adam_steps = adam.timestep();
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub forecasts: Vec<ScoredForecast>,
}

/// Scores a model on `snapshots` in physical units. `locations` restricts
/// scoring to target nodes at those stations; inputs still come from every
/// node.
pub fn evaluate(
    model: &Model,
    snapshots: &[Snapshot],
    stats: &NormStats,
    locations: Option<&[String]>,
    pooling: Pooling,
    seed: Option<u64>,
) -> Result<Evaluation> {
    let preds = model.predict(snapshots, 8)?;
    let registry = &model.spec.registry;
    let mut forecasts = Vec::new();
    for (s, row) in snapshots.iter().zip(preds) {
        for (n, pred) in s.nodes.iter().zip(row) {
            let (Some(y), Some(pred)) = (&n.y, pred) else { continue };
            if locations.is_some_and(|l| !l.contains(&n.node.location)) {
                continue;
            }
            let spec = registry.require_spec(&n.node.var_type)?;
            let denorm = |m: &Matrix| {
                Matrix::from_fn(m.rows(), m.cols(), |r, c| {
                    stats.denormalize(&n.node, spec.labels[c], m.get(r, c))
                })
            };
            forecasts.push(ScoredForecast {
                reference_time: s.reference_time,
                node: n.node.clone(),
                offsets: n.future_offsets.clone(),
                truth: denorm(y),
                forecast: denorm(&pred),
            });
        }
    }
    if forecasts.is_empty() {
        return Err(Error::NoTarget);
    }
    Ok(Evaluation {
        report: compute_report(&forecasts, registry, pooling, seed),
        forecasts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub per_seed: Vec<MetricReport>,
    pub mean: BTreeMap<String, f64>,
    /// Sample standard deviation (zero for a single seed).
    pub std: BTreeMap<String, f64>,
    pub failures: Vec<SeedFailure>,
    pub partial: bool,
}

impl MultiSeedReport {
    pub fn from_reports(per_seed: Vec<MetricReport>, failures: Vec<SeedFailure>) -> Self {
        let flat: Vec<BTreeMap<String, f64>> = per_seed.iter().map(MetricReport::flatten).collect();
        let mut keys: Vec<&String> = flat.iter().flat_map(|f| f.keys()).collect();
        keys.sort();
        keys.dedup();
        let mut mean = BTreeMap::new();
        let mut std = BTreeMap::new();
        for k in keys {
            let vals: Vec<f64> = flat.iter().filter_map(|f| f.get(k).copied()).collect();
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let s = if vals.len() > 1 {
                (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            mean.insert(k.clone(), m);
            std.insert(k.clone(), s);
        }
        let partial = !failures.is_empty();
        MultiSeedReport {
            per_seed,
            mean,
            std,
            failures,
            partial,
        }
    }

    /// One row per seed plus `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let keys: Vec<&String> = self.mean.keys().collect();
        let mut s = String::from("seed");
        for k in &keys {
            s.push(',');
            s.push_str(k);
        }
        s.push('\n');
        let fmt = |v: Option<&f64>| v.map_or(String::new(), |v| format!("{v}"));
        for r in &self.per_seed {
            let flat = r.flatten();
            s.push_str(&r.seed.map_or(String::new(), |v| v.to_string()));
            for k in &keys {
                s.push(',');
                s.push_str(&fmt(flat.get(*k)));
            }
            s.push('\n');
        }
        for (name, map) in [("mean", &self.mean), ("std", &self.std)] {
            s.push_str(name);
            for k in &keys {
                s.push(',');
                s.push_str(&fmt(map.get(*k)));
            }
            s.push('\n');
        }
        s
    }
}

/// Runs `run` for every seed and aggregates the reports. Failed seeds are
/// recorded and flag the report as partial.
pub fn multi_seed(
    seeds: &[u64],
    mut run: impl FnMut(u64) -> Result<MetricReport>,
) -> Result<MultiSeedReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for &seed in seeds {
        match run(seed) {
            Ok(mut r) => {
                r.seed = Some(seed);
                reports.push(r);
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                failures.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    if reports.is_empty() {
        return Err(Error::SeedsFailed(failures[0].error.clone()));
    }
    Ok(MultiSeedReport::from_reports(reports, failures))
}

#[cfg(test)]
mod tests;
