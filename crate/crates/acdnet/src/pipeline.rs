//! The experiment workflow shared by the commands: split, train with
//! validation-based selection, bootstrap evaluation, ablation and
//! per-patient prediction.

use std::collections::BTreeSet;

use acdnet_core::ehr::{split_records, Dataset, KnowledgeGraphs, PatientRecord, Split, Vocab};
use acdnet_core::medicine_encoder::GraphContext;
use acdnet_core::model::{AcdNet, ModelConfig, Variant};
use acdnet_core::train_eval::metrics::ranking;
use acdnet_core::train_eval::{
    bootstrap_eval, evaluate, score_records, BootstrapConfig, EpochLog, EvalReport, MetricSet, Trainer,
};
use acdnet_core::decision_head::predict_set;
use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Provenance};
use crate::config::RunConfig;
use crate::error::FormatError;

/// A dataset cut into splits, with the co-prescription graph rebuilt from
/// the training patients only.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocab,
    pub split: Split,
    pub graphs: KnowledgeGraphs,
    pub ctx: GraphContext,
}

impl Prepared {
    pub fn new(data: &Dataset, ratios: [usize; 3], seed: u64) -> anyhow::Result<Self> {
        data.validate()?;
        let split = split_records(&data.records, ratios, seed)?;
        let mut graphs = data.graphs.clone();
        graphs.ehr = KnowledgeGraphs::ehr_from_records(data.vocab.medications, &split.train)?;
        let ctx = GraphContext::new(&graphs)?;
        Ok(Self {
            vocab: data.vocab.clone(),
            split,
            graphs,
            ctx,
        })
    }

    pub fn from_run(data: &Dataset, run: &RunConfig) -> anyhow::Result<Self> {
        Self::new(data, run.split, run.seed)
    }

    pub fn part(&self, name: SplitName) -> &[PatientRecord] {
        match name {
            SplitName::Train => &self.split.train,
            SplitName::Val => &self.split.val,
            SplitName::Test => &self.split.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

pub fn model_config(run: &RunConfig, vocab: &Vocab, atom_vocab: usize, variant: Variant) -> ModelConfig {
    ModelConfig::for_vocab(vocab, atom_vocab, run.encoder, variant, run.seed)
}

pub fn new_trainer(run: &RunConfig, prepared: &Prepared, variant: Variant) -> anyhow::Result<Trainer> {
    let cfg = model_config(run, &prepared.vocab, prepared.graphs.atom_vocab, variant);
    Ok(Trainer::new(AcdNet::new(cfg)?, run.train_config())?)
}

/// Runs epochs until `trainer` has completed `run.train.epochs`, calling
/// `on_epoch` after each one.
pub fn train(
    trainer: &mut Trainer,
    prepared: &Prepared,
    run: &RunConfig,
    mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> anyhow::Result<()>,
) -> anyhow::Result<()> {
    while trainer.epoch < run.train.epochs {
        let log = trainer
            .run_epoch(&prepared.ctx, &prepared.split.train, &prepared.split.val, &prepared.graphs.ddi)
            .with_context(|| format!("training epoch {}", trainer.epoch + 1))?;
        on_epoch(trainer, &log)?;
    }
    Ok(())
}

/// The best-by-validation model packaged with its provenance.
pub fn best_checkpoint(trainer: &Trainer, run: &RunConfig, graphs: &KnowledgeGraphs) -> anyhow::Result<Checkpoint> {
    Ok(Checkpoint {
        model: trainer.best_model()?,
        run: run.clone(),
        graphs: graphs.clone(),
        provenance: Some(Provenance {
            epochs_run: trainer.epoch,
            selected_epoch: trainer.best.as_ref().map(|b| b.0),
            val_jaccard: trainer.best.as_ref().map(|b| b.1),
        }),
    })
}

/// Rejects a dataset whose vocabulary differs from the checkpoint's.
pub fn check_compatible(model: &ModelConfig, vocab: &Vocab, atom_vocab: usize) -> Result<(), FormatError> {
    model
        .check_vocab(vocab, atom_vocab)
        .map_err(|e| FormatError::Incompatible(e.to_string()))
}

/// Bootstrap report over `records`.
pub fn evaluate_model(
    model: &AcdNet,
    graphs: &KnowledgeGraphs,
    records: &[PatientRecord],
    threshold: f64,
    bootstrap: &BootstrapConfig,
) -> anyhow::Result<EvalReport> {
    let ctx = GraphContext::new(graphs)?;
    let scored = score_records(model, &ctx, records)?;
    Ok(bootstrap_eval(&scored, bootstrap, threshold, &graphs.ddi)?)
}

/// Plain (non-resampled) metrics over `records`.
pub fn metrics(model: &AcdNet, graphs: &KnowledgeGraphs, records: &[PatientRecord], threshold: f64) -> anyhow::Result<MetricSet> {
    let ctx = GraphContext::new(graphs)?;
    let visits: Vec<_> = score_records(model, &ctx, records)?.into_iter().flatten().collect();
    Ok(evaluate(&visits, threshold, &graphs.ddi)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub selected_epoch: Option<usize>,
    pub val_jaccard: Option<f64>,
    pub report: EvalReport,
}

/// Trains and evaluates each variant from the same seed and split.
pub fn ablate(
    prepared: &Prepared,
    run: &RunConfig,
    variants: &[Variant],
    mut on_epoch: impl FnMut(Variant, &EpochLog) -> anyhow::Result<()>,
) -> anyhow::Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        log::info!("ablation: training {}", variant.label());
        let mut trainer = new_trainer(run, prepared, variant)?;
        train(&mut trainer, prepared, run, |_, log| on_epoch(variant, log))?;
        let best = trainer.best_model()?;
        let report = evaluate_model(&best, &prepared.graphs, &prepared.split.test, run.eval.threshold, &run.bootstrap())?;
        rows.push(AblationRow {
            variant,
            label: variant.label().to_owned(),
            selected_epoch: trainer.best.as_ref().map(|b| b.0),
            val_jaccard: trainer.best.as_ref().map(|b| b.1),
            report,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub selected_epoch: Option<usize>,
    pub val: MetricSet,
}

/// One training run per loss weight, each scored on validation.
pub fn lambda_sweep(
    prepared: &Prepared,
    run: &RunConfig,
    lambdas: &[f64],
    mut on_epoch: impl FnMut(f64, &EpochLog) -> anyhow::Result<()>,
) -> anyhow::Result<Vec<SweepRow>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let mut cfg = run.clone();
            cfg.train.lambda = lambda;
            cfg.validate()?;
            let mut trainer = new_trainer(&cfg, prepared, cfg.variant)?;
            train(&mut trainer, prepared, &cfg, |_, log| on_epoch(lambda, log))?;
            let val = metrics(&trainer.best_model()?, &prepared.graphs, &prepared.split.val, cfg.eval.threshold)?;
            Ok(SweepRow {
                lambda,
                selected_epoch: trainer.best.as_ref().map(|b| b.0),
                val,
            })
        })
        .collect()
}

/// Predicted medicines split against the recorded ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    /// Predicted and prescribed.
    pub correct: Vec<usize>,
    /// Predicted but not prescribed.
    pub unseen: Vec<usize>,
    /// Prescribed but not predicted.
    pub missed: Vec<usize>,
}

impl Partition {
    pub fn of(predicted: &[usize], truth: &BTreeSet<usize>) -> Self {
        let pred: BTreeSet<usize> = predicted.iter().copied().collect();
        Self {
            correct: pred.intersection(truth).copied().collect(),
            unseen: pred.difference(truth).copied().collect(),
            missed: truth.difference(&pred).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitPrediction {
    pub visit: usize,
    pub predicted: Vec<usize>,
    /// `(medicine, score)` in descending score order, cut to the requested length.
    pub ranked: Vec<(usize, f64)>,
    pub scores: Vec<f64>,
    /// Direct scorer output.
    pub o1: Vec<f64>,
    /// History-based scorer output, absent for variants without it.
    pub o2: Option<Vec<f64>>,
    /// Present only when the visit records medications.
    pub partition: Option<Partition>,
}

pub fn predict(
    model: &AcdNet,
    graphs: &KnowledgeGraphs,
    record: &PatientRecord,
    threshold: f64,
    top: usize,
) -> anyhow::Result<Vec<VisitPrediction>> {
    let ctx = GraphContext::new(graphs)?;
    let scores = model.scorer(&ctx)?.score_patient(&record.visits)?;
    Ok(scores
        .into_iter()
        .zip(&record.visits)
        .enumerate()
        .map(|(t, (s, visit))| {
            let predicted = predict_set(&s.probs, threshold);
            let ranked = ranking(&s.probs).into_iter().take(top).map(|i| (i, s.probs[i])).collect();
            let partition = (!visit.medications.is_empty()).then(|| Partition::of(&predicted, &visit.medications));
            VisitPrediction {
                visit: t,
                predicted,
                ranked,
                scores: s.probs,
                o1: s.o1,
                o2: s.o2,
                partition,
            }
        })
        .collect())
}
