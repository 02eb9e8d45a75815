//! Losses, training loop, metrics and the bootstrap evaluation protocol.

pub mod baseline;
pub mod bootstrap;
pub mod loss;
pub mod metrics;

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use bootstrap::{bootstrap_eval, BootstrapConfig, EvalReport, MetricSummary};
pub use loss::{loss_bce, loss_mixed, loss_multi};
pub use metrics::{evaluate, MetricSet, VisitEval};

use crate::ehr::{Adjacency, PatientRecord};
use crate::error::{Error, Result};
use crate::medicine_encoder::GraphContext;
use crate::model::{AcdNet, Architecture};
use crate::nn::Dropout;
use crate::optim::{Adam, AdamConfig, AdamState};
use crate::tape::{Tape, Var};
use crate::tensor::ParamRegistry;

/// When the optimiser steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    #[default]
    PerPatient,
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the cross-entropy term against the margin term.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub threshold: f64,
    pub schedule: StepSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.97,
            lr: 0.0015,
            epochs: 30,
            seed: 0,
            threshold: 0.5,
            schedule: StepSchedule::PerPatient,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Summed loss over every visit of one patient, each visit predicted from
/// the visits before it. `medicines` is rebuilt on this tape when `None`.
pub fn patient_loss(
    arch: &Architecture,
    tape: &mut Tape<'_>,
    ctx: &GraphContext,
    record: &PatientRecord,
    lambda: f64,
    dropout: &mut Dropout,
) -> Result<Var> {
    let m = arch.medicine_matrix(tape, ctx)?;
    let outs = arch.forward_patient(tape, &record.visits, m, dropout)?;
    let mut total: Option<Var> = None;
    for (out, visit) in outs.iter().zip(&record.visits) {
        let l = loss_mixed(tape, out.decision.probs, &visit.medications, lambda)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    total.ok_or(Error::EmptySequence("patient has no visits"))
}

/// Scores every visit of every record against frozen parameters.
pub fn score_records(model: &AcdNet, ctx: &GraphContext, records: &[PatientRecord]) -> Result<Vec<Vec<VisitEval>>> {
    let scorer = model.scorer(ctx)?;
    records
        .iter()
        .map(|r| {
            let scores = scorer.score_patient(&r.visits)?;
            Ok(scores
                .into_iter()
                .zip(&r.visits)
                .map(|(s, v)| VisitEval {
                    scores: s.probs,
                    truth: v.medications.clone(),
                })
                .collect())
        })
        .collect()
}

/// Plain metrics over all visits of `records`.
pub fn evaluate_records(
    model: &AcdNet,
    ctx: &GraphContext,
    records: &[PatientRecord],
    threshold: f64,
    ddi: &Adjacency,
) -> Result<MetricSet> {
    let visits: Vec<VisitEval> = score_records(model, ctx, records)?.into_iter().flatten().collect();
    evaluate(&visits, threshold, ddi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over patients of each patient's summed visit loss.
    pub loss: f64,
    pub val_jaccard: Option<f64>,
}

/// Training state that survives a restart.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: AcdNet,
    pub optimizer: Adam,
    /// Epochs completed so far.
    pub epoch: usize,
    pub logs: Vec<EpochLog>,
    /// `(epoch, val jaccard, params)` of the best validation score.
    pub best: Option<(usize, f64, ParamRegistry)>,
}

impl Trainer {
    pub fn new(model: AcdNet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: Adam::new(config.adam()),
            config,
            model,
            epoch: 0,
            logs: Vec::new(),
            best: None,
        })
    }

    pub fn resume(model: AcdNet, config: TrainConfig, adam: AdamState, epoch: usize, logs: Vec<EpochLog>, best: Option<(usize, f64, ParamRegistry)>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: Adam::with_state(config.adam(), adam),
            config,
            model,
            epoch,
            logs,
            best,
        })
    }

    fn dropout(&self, patient: usize) -> Dropout {
        let rate = self.model.config.encoder.dropout;
        if rate > 0.0 {
            let seed = self.config.seed ^ ((self.epoch as u64) << 32) ^ patient as u64;
            Dropout::training(rate, seed)
        } else {
            Dropout::disabled()
        }
    }

    /// One pass over `train` in order; returns the mean patient loss.
    pub fn train_epoch(&mut self, ctx: &GraphContext, train: &[PatientRecord]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::EmptySequence("training set"));
        }
        let mut sum = 0.0;
        for (i, record) in train.iter().enumerate() {
            let mut dropout = self.dropout(i);
            let grads = {
                let mut tape = Tape::with_params(&self.model.params);
                let loss = patient_loss(&self.model.arch, &mut tape, ctx, record, self.config.lambda, &mut dropout)?;
                let value = tape.scalar_value(loss);
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        value,
                        context: format!("epoch {}, patient {}", self.epoch + 1, record.patient_id),
                    });
                }
                sum += value;
                tape.backward(loss)?
            };
            self.model.params.accumulate(&grads)?;
            if self.config.schedule == StepSchedule::PerPatient {
                self.optimizer.step(&mut self.model.params)?;
            }
        }
        if self.config.schedule == StepSchedule::PerEpoch {
            self.optimizer.step(&mut self.model.params)?;
        }
        Ok(sum / train.len() as f64)
    }

    /// Trains one epoch, scores the validation set if given and keeps the
    /// best parameters by validation Jaccard.
    pub fn run_epoch(&mut self, ctx: &GraphContext, train: &[PatientRecord], val: &[PatientRecord], ddi: &Adjacency) -> Result<EpochLog> {
        let loss = self.train_epoch(ctx, train)?;
        self.epoch += 1;
        let val_jaccard = if val.is_empty() {
            None
        } else {
            Some(evaluate_records(&self.model, ctx, val, self.config.threshold, ddi)?.jaccard)
        };
        if let Some(j) = val_jaccard {
            if self.best.as_ref().is_none_or(|b| j > b.1) {
                self.best = Some((self.epoch, j, self.model.params.clone()));
            }
        }
        let log = EpochLog {
            epoch: self.epoch,
            loss,
            val_jaccard,
        };
        self.logs.push(log);
        Ok(log)
    }

    /// The best model by validation score, or the current one.
    pub fn best_model(&self) -> Result<AcdNet> {
        match &self.best {
            Some((_, _, params)) => AcdNet::from_params(self.model.config, params),
            None => Ok(self.model.clone()),
        }
    }
}
