//! Training, fine-tuning and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, NodeId, Tape, Tensor};
use crate::data::AudioBatch;
use crate::error::{Error, Result};
use crate::metrics::{improvements, Improvement};
use crate::model::{bind_params, forward_on_tape, BoundParams, Checkpoint, CheckpointMeta, GroupMasks, ModelGraph};
use crate::profiler::profile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best before the learning rate halves.
    pub plateau_patience: usize,
    /// Epochs without a new best before training stops.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 1,
            max_epochs: 30,
            plateau_patience: 15,
            early_stop_patience: 30,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::invalid("batch size and patience values must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleEvent {
    Improved,
    Waiting,
    Halved,
    Stop,
}

/// Halve-on-plateau learning rate with early stopping, driven only by the
/// sequence of validation scores (higher is better).
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    lr: f64,
    best: Option<f64>,
    since_best: usize,
    since_change: usize,
    plateau_patience: usize,
    early_stop_patience: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, plateau_patience: usize, early_stop_patience: usize) -> Self {
        Self {
            lr,
            best: None,
            since_best: 0,
            since_change: 0,
            plateau_patience,
            early_stop_patience,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, metric: f64) -> ScheduleEvent {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.since_best = 0;
            self.since_change = 0;
            return ScheduleEvent::Improved;
        }
        self.since_best += 1;
        self.since_change += 1;
        if self.since_best >= self.early_stop_patience {
            return ScheduleEvent::Stop;
        }
        if self.since_change >= self.plateau_patience {
            self.since_change = 0;
            self.lr *= 0.5;
            return ScheduleEvent::Halved;
        }
        ScheduleEvent::Waiting
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_sisdri: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("epoch,train_loss,val_sisdri,lr\n");
    for r in rows {
        writeln!(s, "{},{:.6},{:.6},{:e}", r.epoch, r.train_loss, r.val_sisdri, r.lr).unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Best-validation weights.
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

fn sources_f64(batch: &AudioBatch) -> Tensor<f64> {
    batch.sources.cast()
}

/// Negative PIT SI-SDR of the model on one batch, recorded on `tape`.
pub fn batch_loss(
    tape: &mut Tape<f32>,
    model: &ModelGraph,
    params: &BoundParams,
    batch: &AudioBatch,
    masks: &BTreeMap<usize, NodeId>,
) -> Result<NodeId> {
    if batch.speakers() != model.speakers() {
        return Err(Error::invalid(format!(
            "batch has {} sources, model separates {}",
            batch.speakers(),
            model.speakers()
        )));
    }
    let x = tape.constant(batch.mixture.clone())?;
    let y = forward_on_tape(tape, model, params, x, masks)?;
    tape.pit_neg_sisdr(y, &batch.sources)
}

/// Parameter handles in the order of `model.params`.
pub(crate) fn param_order(model: &ModelGraph, params: &BoundParams) -> Result<Vec<NodeId>> {
    model.params.keys().map(|k| params.get(k)).collect()
}

/// Applies one Adam update to `model` from the gradients on `tape`.
pub(crate) fn adam_update(
    model: &mut ModelGraph,
    tape: &Tape<f32>,
    ids: &[NodeId],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let grads: Vec<Vec<f32>> = ids
        .iter()
        .zip(model.params.values())
        .map(|(&id, t)| tape.grad(id).map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec))
        .collect();
    let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
    let mut slots: Vec<&mut [f32]> = model.params.values_mut().map(|t| t.data_mut()).collect();
    adam_step(&mut slots, &grad_refs, state, lr)
}

pub(crate) fn new_adam(model: &ModelGraph, cfg: AdamConfig) -> AdamState {
    AdamState::new(model.params.values().map(Tensor::numel), cfg)
}

fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::NumericFailure { op, detail } => Error::NumericFailure {
            op,
            detail: format!("epoch {epoch}: {detail}"),
        },
        other => other,
    }
}

/// Adam on every parameter with validation-driven schedule and best-model
/// selection by mean SI-SDRi.
pub fn train(model: &ModelGraph, train_set: &[AudioBatch], val_set: &[AudioBatch], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation splits"));
    }
    let mut current = model.clone();
    let mut best = Checkpoint {
        model: model.clone(),
        meta: CheckpointMeta::default(),
    };
    let mut log = Vec::new();
    let mut sched = PlateauSchedule::new(cfg.lr, cfg.plateau_patience, cfg.early_stop_patience);
    let mut adam = new_adam(&current, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut tape = Tape::<f32>::new();

    for epoch in 1..=cfg.max_epochs {
        let lr = sched.lr();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&AudioBatch> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = AudioBatch::stack(&items)?;
            tape.clear();
            let params = bind_params(&mut tape, &current, true)?;
            let loss = batch_loss(&mut tape, &current, &params, &batch, &BTreeMap::new())
                .map_err(|e| with_epoch(e, epoch))?;
            tape.backward(loss).map_err(|e| with_epoch(e, epoch))?;
            total += tape.value(loss).data()[0] as f64;
            batches += 1;
            let ids = param_order(&current, &params)?;
            adam_update(&mut current, &tape, &ids, &mut adam, lr)?;
        }
        let train_loss = total / batches as f64;
        if !train_loss.is_finite() {
            return Err(Error::NumericFailure {
                op: "train",
                detail: format!("epoch {epoch}: training loss diverged"),
            });
        }
        let val = evaluate(&current, val_set, None)?.mean_si_sdri;
        log.push(LogRow {
            epoch,
            train_loss,
            val_sisdri: val,
            lr,
        });
        let event = sched.observe(val);
        log::debug!("epoch {epoch}: loss {train_loss:.4}, val SI-SDRi {val:.3} dB, {event:?}");
        if event == ScheduleEvent::Improved {
            best = Checkpoint {
                model: current.clone(),
                meta: CheckpointMeta {
                    epoch: Some(epoch),
                    best_val_sisdri: Some(val),
                    ..Default::default()
                },
            };
        }
        if event == ScheduleEvent::Stop {
            break;
        }
    }
    Ok(TrainOutcome { checkpoint: best, log })
}

/// Continues training a (pruned) model for `epochs` epochs with fresh
/// optimizer state.
pub fn finetune(
    model: &ModelGraph,
    train_set: &[AudioBatch],
    val_set: &[AudioBatch],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        max_epochs: epochs,
        ..cfg.clone()
    };
    train(model, train_set, val_set, &cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub params: u64,
    pub macs: u64,
    pub sdri: Vec<f64>,
    pub si_sdri: Vec<f64>,
    pub mean_sdri: f64,
    pub mean_si_sdri: f64,
}

impl EvalRecord {
    pub fn from_improvements(model: &str, params: u64, macs: u64, imps: &[Improvement]) -> Self {
        let sdri: Vec<f64> = imps.iter().map(|i| i.sdri).collect();
        let si_sdri: Vec<f64> = imps.iter().map(|i| i.si_sdri).collect();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        Self {
            model: model.into(),
            params,
            macs,
            mean_sdri: mean(&sdri),
            mean_si_sdri: mean(&si_sdri),
            sdri,
            si_sdri,
        }
    }

    pub fn per_utterance_csv(&self) -> String {
        let mut s = String::from("utterance,sdri,si_sdri\n");
        for (i, (a, b)) in self.sdri.iter().zip(&self.si_sdri).enumerate() {
            writeln!(s, "{i},{a:.6},{b:.6}").unwrap();
        }
        s
    }
}

pub const EVAL_HEADER: &str = "Method,Params,MACs,SDRi,SI-SDRi";

impl EvalRecord {
    pub fn table_row(&self) -> String {
        format!(
            "{},{},{},{:.2},{:.2}",
            self.model, self.params, self.macs, self.mean_sdri, self.mean_si_sdri
        )
    }
}

fn utterance_improvement(model: &ModelGraph, u: &AudioBatch, masks: Option<&GroupMasks>) -> Result<Improvement> {
    let est: Tensor<f32> = model.separate(&u.mixture, masks)?;
    let (c, t) = (u.speakers(), u.len());
    let rows = |d: &[f32]| -> Vec<Vec<f64>> {
        (0..c).map(|k| d[k * t..(k + 1) * t].iter().map(|&v| v as f64).collect()).collect()
    };
    let mix: Vec<f64> = u.mixture.data().iter().map(|&v| v as f64).collect();
    improvements(&mix, &rows(u.sources.data()), &rows(est.data()))
}

/// Best-permutation SDRi and SI-SDRi per utterance, in dataset order.
pub fn evaluate(model: &ModelGraph, set: &[AudioBatch], masks: Option<&GroupMasks>) -> Result<EvalRecord> {
    if set.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    if set.iter().any(|u| u.batch_size() != 1) {
        return Err(Error::invalid("evaluation expects single-utterance batches"));
    }
    let imps = set
        .par_iter()
        .map(|u| utterance_improvement(model, u, masks))
        .collect::<Result<Vec<_>>>()?;
    let report = profile(model, set[0].len())?;
    Ok(EvalRecord::from_improvements(
        &model.desc.name,
        report.total_params,
        report.total_macs,
        &imps,
    ))
}

/// Mean PIT negative SI-SDR over `set`, optionally under masks.
pub fn mean_loss(model: &ModelGraph, set: &[AudioBatch], masks: Option<&GroupMasks>) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("loss needs a non-empty set"));
    }
    let losses = set
        .par_iter()
        .map(|u| {
            let est: Tensor<f64> = model.separate(&u.mixture.cast(), masks)?;
            let refs = sources_f64(u);
            crate::metrics::pit_neg_sisdr(refs.data(), est.data(), u.batch_size(), u.speakers(), u.len())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_utterance, SynthParams};
    use crate::model::{build_toy_sepnet, SepNetConfig};

    fn tiny() -> ModelGraph {
        let cfg = SepNetConfig {
            channels: 4,
            blocks: 1,
            block_channels: 6,
            ..SepNetConfig::default()
        };
        build_toy_sepnet(&cfg, 2).unwrap()
    }

    fn set(seeds: std::ops::Range<u64>) -> Vec<AudioBatch> {
        seeds.map(|s| synth_utterance(s, 400, &SynthParams::default()).unwrap()).collect()
    }

    #[test]
    fn frozen_metric_halves_at_16_and_stops_at_31() {
        let mut s = PlateauSchedule::new(1e-3, 15, 30);
        let mut halved = Vec::new();
        let mut stop = None;
        for epoch in 1..=100 {
            match s.observe(1.0) {
                ScheduleEvent::Halved => halved.push(epoch),
                ScheduleEvent::Stop => {
                    stop = Some(epoch);
                    break;
                }
                _ => {}
            }
        }
        assert_eq!(halved, vec![16]);
        assert_eq!(stop, Some(31));
        assert_eq!(s.lr(), 5e-4);
    }

    #[test]
    fn improvement_resets_both_counters() {
        let mut s = PlateauSchedule::new(1.0, 2, 4);
        assert_eq!(s.observe(0.0), ScheduleEvent::Improved);
        assert_eq!(s.observe(0.0), ScheduleEvent::Waiting);
        assert_eq!(s.observe(0.0), ScheduleEvent::Halved);
        assert_eq!(s.observe(1.0), ScheduleEvent::Improved);
        assert_eq!(s.observe(1.0), ScheduleEvent::Waiting);
        assert_eq!(s.observe(1.0), ScheduleEvent::Halved);
        assert_eq!(s.observe(1.0), ScheduleEvent::Waiting);
        assert_eq!(s.observe(1.0), ScheduleEvent::Stop);
        assert_eq!(s.lr(), 0.25);
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let m = tiny();
        let out = train(&m, &set(0..2), &set(10..11), &TrainConfig { max_epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(out.checkpoint.model, m);
        assert!(out.log.is_empty());
        let ft = finetune(&m, &set(0..2), &set(10..11), &TrainConfig::default(), 0).unwrap();
        assert_eq!(ft.checkpoint.model.params, m.params);
    }

    #[test]
    fn training_is_reproducible_and_logs_each_epoch() {
        let m = tiny();
        let cfg = TrainConfig {
            max_epochs: 2,
            batch_size: 2,
            seed: 4,
            ..Default::default()
        };
        let (tr, va) = (set(0..3), set(10..12));
        let a = train(&m, &tr, &va, &cfg).unwrap();
        let b = train(&m, &tr, &va, &cfg).unwrap();
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log.len(), 2);
        assert_ne!(a.checkpoint.model.params, m.params);
    }

    #[test]
    fn empty_splits_are_rejected() {
        let m = tiny();
        assert!(train(&m, &[], &set(0..1), &TrainConfig::default()).is_err());
        assert!(evaluate(&m, &[], None).is_err());
        let bad = TrainConfig { lr: 0.0, ..Default::default() };
        assert!(train(&m, &set(0..1), &set(1..2), &bad).is_err());
    }

    #[test]
    fn evaluation_is_repeatable_and_means_match() {
        let m = tiny();
        let v = set(20..24);
        let a = evaluate(&m, &v, None).unwrap();
        assert_eq!(a, evaluate(&m, &v, None).unwrap());
        let hand = a.si_sdri.iter().sum::<f64>() / 4.0;
        assert_eq!(a.mean_si_sdri, hand);
        assert!(a.sdri.iter().chain(&a.si_sdri).all(|v| v.is_finite()));
        assert_eq!(a.params as usize, m.param_count());
    }
}
