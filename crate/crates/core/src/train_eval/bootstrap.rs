use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, MetricSet, VisitEval};
use crate::ehr::Adjacency;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub rounds: usize,
    pub fraction: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            fraction: 0.8,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("bootstrap needs at least one round".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(alloc::format!("sample fraction {} outside (0, 1]", self.fraction)));
        }
        Ok(())
    }

    /// Patients drawn per round out of `n`; at least one.
    pub fn sample_size(&self, n: usize) -> usize {
        ((self.fraction * n as f64 + 1e-9) as usize).clamp(1, n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    /// Population standard deviation across rounds.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rounds: usize,
    pub fraction: f64,
    pub sample_size: usize,
    pub patients: usize,
    pub metrics: Vec<MetricSummary>,
    pub per_round: Vec<MetricSet>,
}

impl EvalReport {
    pub fn get(&self, metric: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == metric)
    }

    pub fn mean(&self, metric: &str) -> f64 {
        self.get(metric).map_or(f64::NAN, |m| m.mean)
    }
}

/// Repeated evaluation on random patient subsets drawn without replacement.
pub fn bootstrap_eval(
    patients: &[Vec<VisitEval>],
    cfg: &BootstrapConfig,
    threshold: f64,
    ddi: &Adjacency,
) -> Result<EvalReport> {
    cfg.validate()?;
    if patients.is_empty() {
        return Err(Error::EmptySequence("bootstrap test set"));
    }
    let n = patients.len();
    let size = cfg.sample_size(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_round = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let mut chosen = rand::seq::index::sample(&mut rng, n, size).into_vec();
        chosen.sort_unstable();
        let visits: Vec<VisitEval> = chosen.iter().flat_map(|&i| patients[i].iter().cloned()).collect();
        per_round.push(evaluate(&visits, threshold, ddi)?);
    }
    let metrics = MetricSet::NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let xs: Vec<f64> = per_round.iter().map(|m| m.values()[k]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
            MetricSummary {
                metric: String::from(*name),
                mean,
                std: libm::sqrt(var),
                min: xs.iter().copied().fold(f64::INFINITY, f64::min),
                max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Ok(EvalReport {
        rounds: cfg.rounds,
        fraction: cfg.fraction,
        sample_size: size,
        patients: n,
        metrics,
        per_round,
    })
}
