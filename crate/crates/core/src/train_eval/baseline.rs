//! Reference recommenders that ignore the patient.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::metrics::{ranking, VisitEval};
use crate::ehr::PatientRecord;

/// Independent uniform scores for every medicine.
pub fn random_scores(records: &[PatientRecord], medications: usize, seed: u64) -> Vec<Vec<VisitEval>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records
        .iter()
        .map(|p| {
            p.visits
                .iter()
                .map(|v| VisitEval {
                    scores: (0..medications).map(|_| rng.random::<f64>()).collect(),
                    truth: v.medications.clone(),
                })
                .collect()
        })
        .collect()
}

/// Always recommends the `k` medicines prescribed most often in training.
#[derive(Debug, Clone, PartialEq)]
pub struct MostFrequent {
    pub counts: Vec<usize>,
    pub k: usize,
    scores: Vec<f64>,
}

impl MostFrequent {
    /// `k` defaults to the rounded mean medication count per training visit.
    pub fn fit(train: &[PatientRecord], medications: usize, k: Option<usize>) -> Self {
        let mut counts = vec![0usize; medications];
        let (mut visits, mut total) = (0usize, 0usize);
        for v in train.iter().flat_map(|p| &p.visits) {
            visits += 1;
            total += v.medications.len();
            for &m in &v.medications {
                counts[m] += 1;
            }
        }
        let mean = if visits == 0 { 1.0 } else { total as f64 / visits as f64 };
        let k = k.unwrap_or(libm::round(mean) as usize).clamp(1, medications.max(1));
        // Ranked scores: the top k sit above 0.5, the rest below, so the
        // thresholded set is exactly the top k.
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let order = ranking(&freq);
        let mut scores = vec![0.0; medications];
        for (rank, &m) in order.iter().enumerate() {
            let spread = 0.49 * (1.0 - rank as f64 / medications as f64);
            scores[m] = if rank < k { 0.51 + spread } else { spread };
        }
        Self { counts, k, scores }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn evaluate(&self, records: &[PatientRecord]) -> Vec<Vec<VisitEval>> {
        records
            .iter()
            .map(|p| {
                p.visits
                    .iter()
                    .map(|v| VisitEval {
                        scores: self.scores.clone(),
                        truth: v.medications.clone(),
                    })
                    .collect()
            })
            .collect()
    }
}
