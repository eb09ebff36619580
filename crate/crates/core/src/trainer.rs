//! Adam with step decay, the epoch loop and evaluation.

use std::io::Write;
use std::ops::ControlFlow;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::error::{RaglError, Result};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::{Batch, ForwardMode, Forecaster, ParameterSet};
use crate::tape::{Gradients, NamedTensors};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub seed: u64,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Halve the batch until the estimated tape size fits.
    pub memory_budget_bytes: Option<u64>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            lr0: 0.002,
            decay: 0.5,
            decay_every: 40,
            seed: 0,
            clip_norm: Some(5.0),
            memory_budget_bytes: None,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(RaglError::Config("epochs, batch size and decay interval must be positive".into()));
        }
        if !(self.lr0 > 0.0) || !(self.decay > 0.0) {
            return Err(RaglError::Config("learning rate and decay factor must be positive".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(RaglError::Config("clipping norm must be positive".into()));
        }
        Ok(())
    }
}

/// `lr0 · decay^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, sched: &TrainSchedule) -> f64 {
    sched.lr0 * sched.decay.powi((epoch / sched.decay_every) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: NamedTensors,
    pub v: NamedTensors,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros: NamedTensors = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut ParameterSet, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.is_finite() {
            return Err(RaglError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    for name in names {
        let g = grads
            .get(&name)
            .ok_or_else(|| RaglError::Precondition(format!("no gradient for `{name}`")))?;
        let m = state.m.get_mut(&name).expect("moments mirror parameters");
        let v = state.v.get_mut(&name).expect("moments mirror parameters");
        let p = params.get_mut(&name)?;
        for (((pi, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let step = lr * (*mi / c1) / ((*vi / c2).sqrt() + state.eps);
            if step != 0.0 {
                *pi -= step;
            }
        }
    }
    Ok(())
}

fn clip(grads: Gradients, max_norm: f64) -> Gradients {
    let norm = grads.global_norm();
    if norm <= max_norm {
        return grads;
    }
    grads.scaled(max_norm / norm)
}

/// Rough size of the tape for one batch: every intermediate `(B·N) × d₀`
/// activation and its adjoint.
pub fn estimate_batch_bytes(model: &Forecaster, batch_size: usize) -> u64 {
    let cfg = &model.cfg;
    let rows = (batch_size * cfg.n_nodes) as u64;
    let per_layer = 8 + 4 * (cfg.diffusion_steps as u64 + 1);
    let per_row = cfg.d0() as u64 * (3 + per_layer * cfg.layers as u64) + 4 * cfg.output_width() as u64;
    rows * per_row * 8 * 2
}

pub fn fit_batch_size(model: &Forecaster, sched: &TrainSchedule) -> usize {
    let mut b = sched.batch_size;
    if let Some(budget) = sched.memory_budget_bytes {
        while b > 1 && estimate_batch_bytes(model, b) > budget {
            b /= 2;
        }
        if b != sched.batch_size {
            log::warn!("batch size reduced from {} to {b} to fit the memory budget", sched.batch_size);
        }
    }
    b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mae: f64,
    pub wall_seconds: f64,
}

pub fn write_history<W: Write>(records: &[EpochRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r).map_err(|e| RaglError::Parse(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_history(text: &str) -> Result<Vec<EpochRecord>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| RaglError::Parse(e.to_string())))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MAE.
    pub best: Forecaster,
    pub best_epoch: usize,
    pub last: Forecaster,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_val_mae(&self) -> f64 {
        self.history[self.best_epoch].val_mae
    }
}

/// Trains in place from `model`'s current parameters. `on_epoch` sees every
/// record as it is produced and may end training by returning `Break`.
pub fn train(
    model: Forecaster,
    sched: &TrainSchedule,
    train_set: &WindowSet,
    val_set: &WindowSet,
    mut on_epoch: impl FnMut(&EpochRecord, &Forecaster) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    sched.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(RaglError::Precondition("training and validation sets must be nonempty".into()));
    }
    let batch_size = fit_batch_size(&model, sched);
    let mut model = model;
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(sched.epochs);
    let mut best: Option<(usize, f64, Forecaster)> = None;
    let start = Instant::now();

    for epoch in 0..sched.epochs {
        let lr = lr_at(epoch, sched);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut weight = 0usize;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let batch = Batch::from_set(train_set, chunk)?;
            let mode = ForwardMode::Training { seed: rng.next_u64() };
            let (loss, grads) = match model.loss_and_gradients(&batch, &mode) {
                Ok(r) => r,
                Err(RaglError::NonFinite(_)) | Err(RaglError::NonFiniteGradient(_)) => {
                    return Err(RaglError::Diverged { epoch, batch: b })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(RaglError::Diverged { epoch, batch: b });
            }
            let grads = match sched.clip_norm {
                Some(c) => clip(grads, c),
                None => grads,
            };
            adam_step(&mut model.params, &grads, &mut state, lr)?;
            loss_sum += loss * chunk.len() as f64;
            weight += chunk.len();
        }
        let val_mae = validation_mae(&model, val_set, batch_size)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / weight as f64,
            val_mae,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.6} train {:.4} val MAE {val_mae:.4}",
            record.train_loss
        );
        if best.as_ref().map_or(true, |(_, v, _)| val_mae < *v) {
            best = Some((epoch, val_mae, model.clone()));
        }
        let flow = on_epoch(&record, &model);
        history.push(record);
        if flow.is_break() {
            break;
        }
    }
    let (best_epoch, _, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        history,
    })
}

fn accumulate(model: &Forecaster, set: &WindowSet, batch_size: usize) -> Result<MetricsAccumulator> {
    let mut acc = MetricsAccumulator::new(model.cfg.horizon_out, model.cfg.channels);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = Batch::from_set(set, chunk)?;
        let pred = model.predict(&batch, &ForwardMode::Evaluation)?;
        acc.add(&pred, &batch.target, chunk.len())?;
    }
    Ok(acc)
}

/// Mean absolute error over every forecast step, raw scale.
pub fn validation_mae(model: &Forecaster, set: &WindowSet, batch_size: usize) -> Result<f64> {
    Ok(accumulate(model, set, batch_size)?.average_mae())
}

pub fn evaluate(model: &Forecaster, set: &WindowSet, horizons: &[usize]) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(RaglError::Precondition("evaluation set has no windows".into()));
    }
    let (t_in, t_out) = set.horizons();
    let cfg = &model.cfg;
    if t_in != cfg.horizon_in
        || t_out != cfg.horizon_out
        || set.series().n_nodes() != cfg.n_nodes
        || set.series().channels() != cfg.channels
    {
        return Err(RaglError::Config(format!(
            "data has {} nodes, {} channels, horizons {t_in}/{t_out}; checkpoint expects {}, {}, {}/{}",
            set.series().n_nodes(),
            set.series().channels(),
            cfg.n_nodes,
            cfg.channels,
            cfg.horizon_in,
            cfg.horizon_out
        )));
    }
    accumulate(model, set, 64)?.report(horizons)
}
