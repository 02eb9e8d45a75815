use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acdnet_core::ehr::{generate_synthetic, split_records, Dataset, GenConfig, Vocab};
use acdnet_core::gradcheck::{composite_check, primitive_suite, CheckOutcome, GradcheckOptions};
use acdnet_core::model::Variant;
use acdnet_core::train_eval::{EpochLog, EvalReport};
use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{resume_path, Checkpoint, ResumeState};
use crate::config::{Overrides, RunConfig};
use crate::dataset::{load_dataset, load_patients, save_dataset};
use crate::error::FormatError;
use crate::pipeline::{self, Prepared, SplitName};

/// Loss weights tried by `train --lambda-sweep`.
pub const SWEEP_LAMBDAS: [f64; 4] = [0.90, 0.95, 0.97, 0.99];

#[derive(Debug, Parser)]
#[command(name = "acdnet", version, about = "Medication recommendation from synthetic EHR sequences")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Where the command's records go; standard output if omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Model variant; repeat to choose the variants compared by `ablate`.
    #[arg(long, global = true, value_name = "NAME", value_parser = parse_variant)]
    pub variant: Vec<Variant>,
    #[arg(long, global = true)]
    pub rounds: Option<usize>,
    #[arg(long, global = true)]
    pub fraction: Option<f64>,
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    #[arg(long, global = true)]
    pub no_positional_encoding: bool,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

impl Common {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            dataset: self.dataset.clone(),
            checkpoint: self.checkpoint.clone(),
            out: self.out.clone(),
            variants: self.variant.clone(),
            rounds: self.rounds,
            fraction: self.fraction,
            threshold: self.threshold,
            epochs: self.epochs,
            lr: self.lr,
            lambda: self.lambda,
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            no_positional_encoding: self.no_positional_encoding,
        }
    }

    fn resolve(&self) -> anyhow::Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    /// 50 noise-free patients.
    Easy,
    /// Noisy profiles with persistent history.
    Hard,
}

impl Preset {
    pub fn config(self) -> GenConfig {
        match self {
            Preset::Default => GenConfig::default(),
            Preset::Easy => GenConfig::easy(),
            Preset::Hard => GenConfig::hard(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into --out and print its summary.
    GenData {
        /// Replace the configured generator settings with a preset.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Train on the dataset's training split, keeping the best model by
    /// validation Jaccard in --checkpoint.
    Train {
        /// Continue from the resume file saved beside --checkpoint.
        #[arg(long)]
        resume: bool,
        /// Train once per loss weight in {0.90, 0.95, 0.97, 0.99} and report
        /// validation metrics instead of writing a checkpoint.
        #[arg(long, conflicts_with = "resume")]
        lambda_sweep: bool,
    },
    /// Bootstrap evaluation of a checkpoint on one split of --dataset.
    Eval {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Train and test every selected variant under one seed.
    Ablate,
    /// Ranked recommendations for the patients of a file.
    Predict {
        /// Patient file (or full dataset); defaults to --dataset.
        #[arg(long, value_name = "PATH")]
        patients: Option<PathBuf>,
        /// Only this patient id.
        #[arg(long, value_name = "ID")]
        patient: Option<String>,
        /// Length of the ranked list per visit.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Finite-difference check of every primitive and of a full model.
    Gradcheck {
        /// Break the matmul backward pass to show the check catches it.
        #[arg(long, hide = true)]
        corrupt_matmul: bool,
    },
}

/// Line-delimited JSON records headed by the effective configuration.
pub struct Records {
    out: Box<dyn Write>,
}

impl Records {
    pub fn open(path: Option<&Path>) -> anyhow::Result<Self> {
        let out: Box<dyn Write> = match path {
            Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| FormatError::io(p, e))?)),
            None => Box::new(std::io::stdout().lock()),
        };
        Ok(Self { out })
    }

    pub fn start(path: Option<&Path>, command: &str, run: &RunConfig) -> anyhow::Result<Self> {
        let mut r = Self::open(path)?;
        r.emit("config", &json!({ "command": command, "config": run }))?;
        Ok(r)
    }

    /// Writes `value` with a `kind` field added.
    pub fn emit(&mut self, kind: &str, value: &impl Serialize) -> anyhow::Result<()> {
        let mut record = serde_json::Map::new();
        record.insert("kind".into(), Value::String(kind.into()));
        match serde_json::to_value(value)? {
            Value::Object(fields) => record.extend(fields),
            other => {
                record.insert("value".into(), other);
            }
        }
        serde_json::to_writer(&mut self.out, &record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    path.as_deref().ok_or_else(|| anyhow!("{flag} is required (or set it under [paths] in the config)"))
}

/// Settings for commands that start from a checkpoint: its stored run,
/// then the config file's `[eval]` section, then flags. Flags that would
/// change the model are rejected.
fn checkpoint_config(stored: &RunConfig, common: &Common) -> anyhow::Result<RunConfig> {
    let mut eff = stored.clone();
    if let Some(p) = &common.config {
        eff.eval = RunConfig::load(p)?.eval;
    }
    eff.apply(&common.overrides());
    if eff.encoder != stored.encoder || eff.variant != stored.variant {
        return Err(FormatError::Incompatible(
            "encoder and variant come from the checkpoint and cannot be overridden".into(),
        )
        .into());
    }
    eff.validate()?;
    Ok(eff)
}

fn epoch_record(log: &EpochLog) -> Value {
    json!({ "epoch": log.epoch, "loss": log.loss, "val_jaccard": log.val_jaccard })
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let common = &cli.common;
    match cli.command {
        Command::GenData { preset, patients } => gen_data(common, preset, patients),
        Command::Train { resume, lambda_sweep } => {
            if lambda_sweep {
                sweep(common)
            } else {
                train(common, resume)
            }
        }
        Command::Eval { split } => eval(common, split),
        Command::Ablate => ablate(common),
        Command::Predict { patients, patient, top } => predict(common, patients, patient, top),
        Command::Gradcheck { corrupt_matmul } => gradcheck(common, corrupt_matmul),
    }
}

fn gen_data(common: &Common, preset: Option<Preset>, patients: Option<usize>) -> anyhow::Result<ExitCode> {
    let mut run = common.resolve()?;
    if let Some(p) = preset {
        run.generator = p.config();
    }
    if let Some(n) = patients {
        run.generator.patients = n;
    }
    run.validate()?;
    let out = run.paths.out.clone().or_else(|| run.paths.dataset.clone());
    let out = required(&out, "--out")?;
    let data = generate_synthetic(&run.generator, run.seed)?;
    save_dataset(out, &data, Some(run.seed))?;
    log::info!("wrote {} patients to {}", data.records.len(), out.display());
    let mut records = Records::start(None, "gen-data", &run)?;
    records.emit("summary", &data.summary())?;
    Ok(ExitCode::SUCCESS)
}

/// The run configuration and the dataset it names. A generated dataset's
/// generator settings replace the configured ones so the echo describes the
/// data actually used.
fn run_and_data(common: &Common) -> anyhow::Result<(RunConfig, Dataset)> {
    let mut run = common.resolve()?;
    let data = load_dataset(required(&run.paths.dataset, "--dataset")?)?;
    if let Some(g) = &data.generator {
        run.generator = g.clone();
    }
    Ok((run, data))
}

fn train(common: &Common, resume: bool) -> anyhow::Result<ExitCode> {
    let (run, data) = run_and_data(common)?;
    let ckpt_path = required(&run.paths.checkpoint, "--checkpoint")?.to_owned();
    let prepared = Prepared::from_run(&data, &run)?;
    let state_path = resume_path(&ckpt_path);
    let mut trainer = if resume {
        let state = ResumeState::load(&state_path)?;
        let comparable = |r: &RunConfig| {
            let mut r = r.clone();
            r.train.epochs = 0;
            r.paths = Default::default();
            r.ablation.clear();
            r
        };
        if comparable(&state.run) != comparable(&run) {
            bail!("the resume file {} was written under a different configuration", state_path.display());
        }
        if state.graphs != prepared.graphs {
            bail!("the resume file {} belongs to a different dataset", state_path.display());
        }
        let mut t = state.trainer;
        t.config.epochs = run.train.epochs;
        log::info!("resuming after epoch {}", t.epoch);
        t
    } else {
        pipeline::new_trainer(&run, &prepared, run.variant)?
    };
    let mut records = Records::start(run.paths.out.as_deref(), "train", &run)?;
    pipeline::train(&mut trainer, &prepared, &run, |t, log| {
        log::info!("epoch {} loss {:.4} val jaccard {:?}", log.epoch, log.loss, log.val_jaccard);
        records.emit("epoch", &epoch_record(log))?;
        ResumeState {
            trainer: t.clone(),
            run: run.clone(),
            graphs: prepared.graphs.clone(),
        }
        .save(&state_path)?;
        Ok(())
    })?;
    let ckpt = pipeline::best_checkpoint(&trainer, &run, &prepared.graphs)?;
    ckpt.save(&ckpt_path)?;
    records.emit(
        "checkpoint",
        &json!({ "path": ckpt_path, "provenance": ckpt.provenance }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn sweep(common: &Common) -> anyhow::Result<ExitCode> {
    let (run, data) = run_and_data(common)?;
    let prepared = Prepared::from_run(&data, &run)?;
    let mut records = Records::start(run.paths.out.as_deref(), "train --lambda-sweep", &run)?;
    let rows = pipeline::lambda_sweep(&prepared, &run, &SWEEP_LAMBDAS, |lambda, log| {
        let mut rec = epoch_record(log);
        rec["lambda"] = json!(lambda);
        records.emit("epoch", &rec)
    })?;
    for row in &rows {
        records.emit("sweep", row)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(common: &Common, split: SplitName) -> anyhow::Result<ExitCode> {
    let ckpt_path = common.checkpoint.clone().or(common.resolve()?.paths.checkpoint);
    let ckpt = Checkpoint::load(required(&ckpt_path, "--checkpoint")?)?;
    let run = checkpoint_config(&ckpt.run, common)?;
    let data = load_dataset(required(&run.paths.dataset, "--dataset")?)?;
    pipeline::check_compatible(&ckpt.model.config, &data.vocab, data.graphs.atom_vocab)?;
    let parts = split_records(&data.records, ckpt.run.split, ckpt.run.seed)?;
    let records = match split {
        SplitName::Train => &parts.train,
        SplitName::Val => &parts.val,
        SplitName::Test => &parts.test,
    };
    let report = pipeline::evaluate_model(&ckpt.model, &ckpt.graphs, records, run.eval.threshold, &run.bootstrap())?;
    let mut out = Records::start(run.paths.out.as_deref(), "eval", &run)?;
    out.emit("report", &json!({ "split": split, "summary": summary_columns(&report), "report": report }))?;
    Ok(ExitCode::SUCCESS)
}

/// `mean ± std` strings for the metrics of a comparison row.
pub fn summary_columns(report: &EvalReport) -> serde_json::Map<String, Value> {
    report
        .metrics
        .iter()
        .map(|m| (m.metric.clone(), Value::String(format!("{:.4} ± {:.4}", m.mean, m.std))))
        .collect()
}

fn ablate(common: &Common) -> anyhow::Result<ExitCode> {
    let (run, data) = run_and_data(common)?;
    let prepared = Prepared::from_run(&data, &run)?;
    let mut variants = run.ablation_variants();
    if !variants.contains(&Variant::Full) {
        variants.insert(0, Variant::Full);
    }
    let mut records = Records::start(run.paths.out.as_deref(), "ablate", &run)?;
    let rows = pipeline::ablate(&prepared, &run, &variants, |variant, log| {
        let mut rec = epoch_record(log);
        rec["variant"] = json!(variant.name());
        records.emit("epoch", &rec)
    })?;
    for row in &rows {
        let pick = |name: &str| {
            row.report
                .get(name)
                .map(|m| json!({ "mean": m.mean, "std": m.std }))
                .unwrap_or(Value::Null)
        };
        records.emit(
            "ablation",
            &json!({
                "variant": row.variant.name(),
                "label": row.label,
                "selected_epoch": row.selected_epoch,
                "val_jaccard": row.val_jaccard,
                "jaccard": pick("jaccard"),
                "prauc": pick("prauc"),
                "f1": pick("f1"),
                "ddi_rate": pick("ddi_rate"),
                "avg_med": pick("avg_med"),
                "summary": summary_columns(&row.report),
            }),
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn predict(common: &Common, patients: Option<PathBuf>, only: Option<String>, top: usize) -> anyhow::Result<ExitCode> {
    let ckpt_path = common.checkpoint.clone().or(common.resolve()?.paths.checkpoint);
    let ckpt = Checkpoint::load(required(&ckpt_path, "--checkpoint")?)?;
    let run = checkpoint_config(&ckpt.run, common)?;
    let source = patients.or_else(|| run.paths.dataset.clone());
    let source = required(&source, "--patients")?;
    let m = &ckpt.model.config;
    let vocab = Vocab::new(m.diagnoses, m.procedures, m.medications);
    let mut people = load_patients(source, &vocab)?;
    if let Some(id) = &only {
        people.retain(|p| &p.patient_id == id);
        if people.is_empty() {
            bail!("no patient {id:?} in {}", source.display());
        }
    }
    let mut rows = Vec::new();
    for p in &people {
        for v in pipeline::predict(&ckpt.model, &ckpt.graphs, p, run.eval.threshold, top)
            .with_context(|| format!("patient {}", p.patient_id))?
        {
            let counts = v.partition.as_ref().map(|part| {
                json!({ "correct": part.correct.len(), "unseen": part.unseen.len(), "missed": part.missed.len() })
            });
            rows.push(json!({ "patient": p.patient_id, "prediction": v, "counts": counts }));
        }
    }
    let mut out = Records::start(run.paths.out.as_deref(), "predict", &run)?;
    for r in &rows {
        out.emit("visit", r)?;
    }
    Ok(ExitCode::SUCCESS)
}

/// The check with the largest error relative to its tolerance.
pub fn worst(outcomes: &[CheckOutcome]) -> Option<&CheckOutcome> {
    let ratio = |o: &CheckOutcome| if o.rel_err.is_finite() { o.rel_err / o.tol } else { f64::INFINITY };
    outcomes.iter().max_by(|a, b| ratio(a).total_cmp(&ratio(b)))
}

fn gradcheck(common: &Common, corrupt_matmul: bool) -> anyhow::Result<ExitCode> {
    let run = common.resolve()?;
    let defaults = GradcheckOptions::default();
    let opts = GradcheckOptions {
        seed: common.seed.unwrap_or(defaults.seed),
        corrupt_matmul,
        ..defaults
    };
    let mut outcomes = primitive_suite(&opts)?;
    outcomes.extend(composite_check(&opts)?);
    let mut out = Records::start(run.paths.out.as_deref(), "gradcheck", &run)?;
    for o in &outcomes {
        out.emit("check", &json!({ "name": o.name, "rel_err": o.rel_err, "tol": o.tol, "passed": o.passed() }))?;
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
    let w = worst(&outcomes);
    out.emit(
        "summary",
        &json!({
            "checks": outcomes.len(),
            "failed": failed,
            "worst": w.map(|o| json!({ "name": o.name, "rel_err": o.rel_err, "tol": o.tol })),
        }),
    )?;
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        if let Some(w) = w {
            log::error!("gradient check failed; worst {} at {:e} (tolerance {:e})", w.name, w.rel_err, w.tol);
        }
        Ok(ExitCode::FAILURE)
    }
}
