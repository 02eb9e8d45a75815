//! Per-visit recommendation metrics, averaged over visits.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decision_head::predict_set;
use crate::ehr::Adjacency;
use crate::error::{contract, Result};

pub fn jaccard(pred: &[usize], truth: &BTreeSet<usize>) -> f64 {
    let inter = pred.iter().filter(|i| truth.contains(i)).count();
    let union = pred.len() + truth.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Harmonic mean of precision and recall, computed as `2|P∩T| / (|P|+|T|)`
/// so that it is a single rounding of an exact ratio. `0` when either set
/// is empty or they do not meet.
pub fn f1(pred: &[usize], truth: &BTreeSet<usize>) -> f64 {
    if pred.is_empty() || truth.is_empty() {
        return 0.0;
    }
    let inter = pred.iter().filter(|i| truth.contains(i)).count();
    (2 * inter) as f64 / (pred.len() + truth.len()) as f64
}

/// Indices ordered by descending score, ascending index on ties.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut ix: Vec<usize> = (0..scores.len()).collect();
    ix.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ix
}

/// Average precision. Tied scores enter together, so the result does not
/// depend on how ties are ordered. `0` without positives.
pub fn average_precision(scores: &[f64], truth: &BTreeSet<usize>) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let order = ranking(scores);
    let total = truth.len() as f64;
    let (mut seen, mut hits, mut ap) = (0usize, 0usize, 0.0);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let mut group_hits = 0;
        while k < order.len() && scores[order[k]] == s {
            group_hits += usize::from(truth.contains(&order[k]));
            seen += 1;
            k += 1;
        }
        if group_hits > 0 {
            hits += group_hits;
            ap += (group_hits as f64 / total) * (hits as f64 / seen as f64);
        }
    }
    ap
}

/// Fraction of unordered predicted pairs that interact, or `None` for sets
/// with fewer than two medicines.
pub fn ddi_rate_visit(pred: &[usize], ddi: &Adjacency) -> Option<f64> {
    if pred.len() < 2 {
        return None;
    }
    let (mut bad, mut all) = (0usize, 0usize);
    for (a, &i) in pred.iter().enumerate() {
        for &j in &pred[a + 1..] {
            all += 1;
            bad += usize::from(ddi.has_edge(i, j));
        }
    }
    Some(bad as f64 / all as f64)
}

/// Mean visit DDI rate over visits with at least two predictions.
pub fn ddi_rate(preds: &[Vec<usize>], ddi: &Adjacency) -> f64 {
    let rates: Vec<f64> = preds.iter().filter_map(|p| ddi_rate_visit(p, ddi)).collect();
    if rates.is_empty() {
        0.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    }
}

/// Precision and nDCG at `k` with binary relevance.
pub fn top_k(scores: &[f64], truth: &BTreeSet<usize>, k: usize) -> Result<(f64, f64)> {
    if k == 0 || k > scores.len() {
        return Err(contract("top_k", alloc::format!("k = {k} outside 1..={}", scores.len())));
    }
    if truth.is_empty() {
        return Ok((0.0, 0.0));
    }
    let order = ranking(scores);
    let gain = |rank: usize| 1.0 / libm::log2(rank as f64 + 1.0);
    let (mut hits, mut dcg) = (0usize, 0.0);
    for (r, i) in order[..k].iter().enumerate() {
        if truth.contains(i) {
            hits += 1;
            dcg += gain(r + 1);
        }
    }
    let ideal: f64 = (1..=k.min(truth.len())).map(gain).sum();
    Ok((hits as f64 / k as f64, dcg / ideal))
}

/// One visit's scores and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitEval {
    pub scores: Vec<f64>,
    pub truth: BTreeSet<usize>,
}

/// Metric values in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSet {
    pub jaccard: f64,
    pub prauc: f64,
    pub f1: f64,
    pub ddi_rate: f64,
    pub avg_med: f64,
    pub precision_at_5: f64,
    pub precision_at_10: f64,
    pub ndcg_at_5: f64,
    pub ndcg_at_10: f64,
}

impl MetricSet {
    pub const NAMES: [&'static str; 9] = [
        "jaccard",
        "prauc",
        "f1",
        "ddi_rate",
        "avg_med",
        "precision@5",
        "precision@10",
        "ndcg@5",
        "ndcg@10",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.jaccard,
            self.prauc,
            self.f1,
            self.ddi_rate,
            self.avg_med,
            self.precision_at_5,
            self.precision_at_10,
            self.ndcg_at_5,
            self.ndcg_at_10,
        ]
    }

    pub fn from_values(v: [f64; 9]) -> Self {
        Self {
            jaccard: v[0],
            prauc: v[1],
            f1: v[2],
            ddi_rate: v[3],
            avg_med: v[4],
            precision_at_5: v[5],
            precision_at_10: v[6],
            ndcg_at_5: v[7],
            ndcg_at_10: v[8],
        }
    }
}

/// All metrics over `visits`. Top-k metrics are skipped (left at 0) when a
/// visit has fewer than `k` medicines.
pub fn evaluate(visits: &[VisitEval], threshold: f64, ddi: &Adjacency) -> Result<MetricSet> {
    if visits.is_empty() {
        return Err(crate::Error::EmptySequence("no visits to evaluate"));
    }
    let n = visits.len() as f64;
    let mut acc = [0.0; 9];
    let mut preds = Vec::with_capacity(visits.len());
    for v in visits {
        let pred = predict_set(&v.scores, threshold);
        acc[0] += jaccard(&pred, &v.truth);
        acc[1] += average_precision(&v.scores, &v.truth);
        acc[2] += f1(&pred, &v.truth);
        acc[4] += pred.len() as f64;
        for (slot, k) in [(5, 5), (6, 10)] {
            if v.scores.len() >= k {
                let (p, g) = top_k(&v.scores, &v.truth, k)?;
                acc[slot] += p;
                acc[slot + 2] += g;
            }
        }
        preds.push(pred);
    }
    let mut out = acc.map(|x| x / n);
    out[3] = ddi_rate(&preds, ddi);
    Ok(MetricSet::from_values(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn set(ix: &[usize]) -> BTreeSet<usize> {
        ix.iter().copied().collect()
    }

    #[test]
    fn set_metric_hand_case() {
        // pred {B,C,D}, truth {A,B,C}
        let (pred, truth) = (vec![1, 2, 3], set(&[0, 1, 2]));
        assert_eq!(jaccard(&pred, &truth), 0.5);
        assert!((f1(&pred, &truth) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&[], &set(&[])), 0.0);
        assert_eq!(f1(&[], &set(&[1])), 0.0);
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let scores = [0.9, 0.1, 0.8, 0.2];
        assert_eq!(average_precision(&scores, &set(&[0, 2])), 1.0);
        assert_eq!(top_k(&[0.9, 0.8, 0.7, 0.1, 0.0], &set(&[0, 1, 2, 3, 4]), 5).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn ties_enter_as_one_group() {
        // both items tied: precision 1/2 at full recall
        assert_eq!(average_precision(&[0.5, 0.5], &set(&[1])), 0.5);
    }

    #[test]
    fn top_k_edges() {
        let s = [0.9, 0.8, 0.1, 0.05, 0.0, 0.3];
        assert_eq!(top_k(&s, &set(&[2, 3]), 2).unwrap(), (0.0, 0.0));
        assert!(top_k(&s, &set(&[2]), 0).is_err());
        assert!(top_k(&s, &set(&[2]), 7).is_err());
        assert_eq!(top_k(&s, &set(&[]), 3).unwrap(), (0.0, 0.0));
        // equal scores resolve toward the lower index
        assert_eq!(top_k(&[0.5, 0.5, 0.5], &set(&[0]), 1).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn ddi_rate_cases() {
        let ddi = Adjacency::from_edges(4, [(0, 1)]).unwrap();
        assert_eq!(ddi_rate_visit(&[0, 1], &ddi), Some(1.0));
        assert_eq!(ddi_rate_visit(&[2], &ddi), None);
        assert_eq!(ddi_rate(&[vec![0, 1, 2], vec![3]], &ddi), 1.0 / 3.0);
        assert_eq!(ddi_rate(&[vec![0, 1, 2, 3]], &Adjacency::empty(4)), 0.0);
    }

    #[test]
    fn evaluate_averages_per_visit() {
        let ddi = Adjacency::empty(6);
        let visits = vec![
            VisitEval { scores: vec![0.9, 0.8, 0.1, 0.1, 0.1, 0.1], truth: set(&[0, 1]) },
            VisitEval { scores: vec![0.1, 0.1, 0.7, 0.1, 0.1, 0.2], truth: set(&[3]) },
        ];
        let m = evaluate(&visits, 0.5, &ddi).unwrap();
        assert_eq!(m.jaccard, 0.5);
        assert_eq!(m.f1, 0.5);
        assert_eq!(m.avg_med, 1.5);
        assert!(evaluate(&[], 0.5, &ddi).is_err());
    }

    #[test]
    fn f1_matches_jaccard_identity() {
        let truth = set(&[0, 3, 5]);
        for pred in [vec![0], vec![0, 3], vec![1, 2], vec![0, 3, 5, 6], vec![5]] {
            let j = jaccard(&pred, &truth);
            assert!((f1(&pred, &truth) - 2.0 * j / (1.0 + j)).abs() < 1e-15);
        }
    }
}
