use std::ops::ControlFlow;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::{clip_grad_norm, Adam, AdamConfig};
use crate::autodiff::Tape;
use crate::backbone::{LossBreakdown, Model, Pass};
use crate::data::{batch_iter, Batch, Example, Phase, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, MetricsReport};
use crate::hymoe::GateUsage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Seeds initialization, shuffling and dropout.
    pub seed: u64,
    pub epochs: u64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Epochs without a validation NDCG@10 improvement before stopping.
    pub patience: u64,
    pub exclude_seen: bool,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 200,
            batch_size: 128,
            eval_batch_size: 256,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            patience: 10,
            exclude_seen: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::Config(format!("invalid optimizer settings {a:?}")));
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return Err(Error::Config("clip_norm must be >= 0".into()));
        }
        Ok(())
    }
}

/// Running sums over the current epoch, kept in the state so a resumed
/// epoch reports the same totals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochAccum {
    pub ce_sum: f64,
    pub lb_sum: f64,
    pub batches: u64,
    pub examples: u64,
    pub usage: Vec<GateUsage>,
}

impl EpochAccum {
    fn new(n_layers: usize, n_experts: usize) -> Self {
        Self {
            ce_sum: 0.0,
            lb_sum: 0.0,
            batches: 0,
            examples: 0,
            usage: vec![GateUsage::new(n_experts); n_layers],
        }
    }
}

/// Training counters. Every random stream is derived from these plus the
/// seed, so they are all a checkpoint needs to resume exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub epoch: u64,
    /// Batches of the current epoch already trained on.
    pub batch_cursor: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<u64>,
    pub bad_epochs: u64,
    pub accum: EpochAccum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u64,
    pub batch: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    pub step: u64,
    pub mean_ce: f64,
    pub mean_lb: f64,
    /// Mean gate vector per hybrid layer over the epoch's tokens.
    pub usage: Vec<Vec<f64>>,
    pub usage_entropy: Vec<f64>,
    /// Training examples per second over the batches run in this process.
    pub throughput: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochBudget,
    EarlyStopped,
    MaxSteps,
    Interrupted,
}

pub enum Event<'a> {
    Step(&'a StepReport),
    Epoch {
        report: &'a EpochReport,
        valid: &'a MetricsReport,
        improved: bool,
    },
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub state: TrainState,
    pub config: TrainConfig,
    examples: Vec<Example>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, split: &Split) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(config.adam, &model.params);
        let state = TrainState {
            step: 0,
            epoch: 0,
            batch_cursor: 0,
            best_metric: None,
            best_epoch: None,
            bad_epochs: 0,
            accum: fresh_accum(&model),
        };
        Self::resume(model, optimizer, state, config, split)
    }

    /// Continues from restored parts (see [`super::Checkpoint`]).
    pub fn resume(model: Model, optimizer: Adam, state: TrainState, config: TrainConfig, split: &Split) -> Result<Self> {
        config.validate()?;
        let examples = split.examples(Phase::Train);
        if examples.is_empty() {
            return Err(Error::Data("no training examples (every user has a single training item)".into()));
        }
        if let Some(&bad) = examples
            .iter()
            .flat_map(|e| e.input.iter().chain([&e.target]))
            .find(|&&i| i >= model.config.vocab_size)
        {
            return Err(Error::Data(format!(
                "item id {bad} exceeds the model vocabulary of {}",
                model.config.vocab_size
            )));
        }
        Ok(Self {
            model,
            optimizer,
            state,
            config,
            examples,
        })
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            batch_size: self.config.eval_batch_size,
            exclude_seen: self.config.exclude_seen,
            step: self.state.step,
        }
    }

    /// Forward at the current step, backward, clip, Adam, then `t += 1`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        let step = self.state.step;
        let (breakdown, grad_norm) = self.update(batch).map_err(|e| match e {
            Error::NonFinite { context } => Error::NonFinite {
                context: format!(
                    "{context} at step {step}, epoch {}, batch {}",
                    self.state.epoch, self.state.batch_cursor
                ),
            },
            other => other,
        })?;
        let report = StepReport {
            step,
            epoch: self.state.epoch,
            batch: self.state.batch_cursor,
            loss: breakdown,
            grad_norm,
        };
        let acc = &mut self.state.accum;
        acc.ce_sum += report.loss.ce;
        acc.lb_sum += report.loss.lb;
        acc.batches += 1;
        acc.examples += batch.batch_size as u64;
        for ((u, g), &n) in acc.usage.iter_mut().zip(&report.loss.mean_gates).zip(&report.loss.token_counts) {
            u.add(g, n);
        }
        self.state.step += 1;
        self.state.batch_cursor += 1;
        Ok(report)
    }

    fn update(&mut self, batch: &Batch) -> Result<(LossBreakdown, f64)> {
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape, true);
        let (loss, breakdown, _) = self
            .model
            .loss(&mut tape, &p, batch, Pass::train(self.state.step, self.config.seed))?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss (ce={} lb={})", breakdown.ce, breakdown.lb),
            });
        }
        tape.backward(loss)?;
        let mut grads = p.grads(&tape);
        drop(tape);
        let grad_norm = clip_grad_norm(&self.model.params, &mut grads, self.config.clip_norm);
        self.optimizer.step(&mut self.model.params, &grads)?;
        Ok((breakdown, grad_norm))
    }

    fn epoch_batches(&self) -> Result<Vec<Batch>> {
        batch_iter(
            &self.examples,
            self.model.config.max_len,
            self.config.batch_size,
            self.config.seed,
            self.state.epoch,
        )
    }

    fn step_cap_reached(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// Closes the current epoch: reports its sums and advances the counters.
    fn finish_epoch(&mut self, seen: u64, started: Instant) -> EpochReport {
        let acc = std::mem::replace(&mut self.state.accum, fresh_accum(&self.model));
        let n = acc.batches.max(1) as f64;
        let report = EpochReport {
            epoch: self.state.epoch,
            step: self.state.step,
            mean_ce: acc.ce_sum / n,
            mean_lb: acc.lb_sum / n,
            usage: acc.usage.iter().map(GateUsage::mean).collect(),
            usage_entropy: acc.usage.iter().map(GateUsage::entropy).collect(),
            throughput: seen as f64 / started.elapsed().as_secs_f64().max(1e-9),
        };
        self.state.epoch += 1;
        self.state.batch_cursor = 0;
        report
    }

    /// Runs the remaining batches of the current epoch. Returns `None` when
    /// `on_step` breaks or the step cap is hit first; the state then points
    /// at the next batch.
    pub fn train_epoch(&mut self, on_step: &mut dyn FnMut(&StepReport) -> ControlFlow<()>) -> Result<Option<EpochReport>> {
        let batches = self.epoch_batches()?;
        let started = Instant::now();
        let mut seen = 0;
        while self.state.batch_cursor < batches.len() {
            if self.step_cap_reached() {
                return Ok(None);
            }
            let batch = &batches[self.state.batch_cursor];
            let report = self.train_step(batch)?;
            seen += batch.batch_size as u64;
            if on_step(&report).is_break() {
                return Ok(None);
            }
        }
        Ok(Some(self.finish_epoch(seen, started)))
    }

    /// Trains until the epoch budget, early stopping, the step cap, or an
    /// observer break. After each epoch the model is scored on the
    /// validation targets (NDCG@10 drives early stopping) and `observer`
    /// sees the result.
    pub fn fit(
        &mut self,
        split: &Split,
        observer: &mut dyn FnMut(&Trainer, Event) -> Result<ControlFlow<()>>,
    ) -> Result<StopReason> {
        loop {
            if self.state.bad_epochs >= self.config.patience.max(1) {
                return Ok(StopReason::EarlyStopped);
            }
            if self.state.epoch >= self.config.epochs {
                return Ok(StopReason::EpochBudget);
            }
            let batches = self.epoch_batches()?;
            let started = Instant::now();
            let mut seen = 0;
            while self.state.batch_cursor < batches.len() {
                if self.step_cap_reached() {
                    return Ok(StopReason::MaxSteps);
                }
                let batch = &batches[self.state.batch_cursor];
                let report = self.train_step(batch)?;
                seen += batch.batch_size as u64;
                if observer(self, Event::Step(&report))?.is_break() {
                    return Ok(StopReason::Interrupted);
                }
            }
            let report = self.finish_epoch(seen, started);
            let valid = evaluate(&self.model, split, Phase::Valid, self.eval_options())?;
            let improved = self.state.best_metric.is_none_or(|b| valid.ndcg10 > b);
            if improved {
                self.state.best_metric = Some(valid.ndcg10);
                self.state.best_epoch = Some(report.epoch);
                self.state.bad_epochs = 0;
            } else {
                self.state.bad_epochs += 1;
            }
            let event = Event::Epoch {
                report: &report,
                valid: &valid,
                improved,
            };
            if observer(self, event)?.is_break() {
                return Ok(StopReason::Interrupted);
            }
        }
    }
}

fn fresh_accum(model: &Model) -> EpochAccum {
    let n_layers = model.hybrid_blocks().count();
    EpochAccum::new(n_layers, model.config.n_experts)
}
