//! Metrics checked against brute-force reference implementations: every
//! prediction/truth pair over small vocabularies, then random cases at the
//! full medicine vocabulary size.

use std::collections::BTreeSet;

use acdnet_core::ehr::Adjacency;
use acdnet_core::train_eval::metrics::{average_precision, ddi_rate, ddi_rate_visit, f1, jaccard, top_k};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RANK_TOL: f64 = 1e-9;

fn members(mask: u32, n: usize) -> Vec<usize> {
    (0..n).filter(|i| mask >> i & 1 == 1).collect()
}

fn set_of(ix: &[usize]) -> BTreeSet<usize> {
    ix.iter().copied().collect()
}

/// Fraction in lowest terms, enough for the set metrics.
#[derive(Clone, Copy)]
struct Frac(u64, u64);

impl Frac {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            Self::gcd(b, a % b)
        }
    }
    fn new(n: u64, d: u64) -> Self {
        let g = Self::gcd(n, d).max(1);
        Frac(n / g, d / g)
    }
    fn mul(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.0, self.1 * o.1)
    }
    fn add(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }
    fn div(self, o: Frac) -> Frac {
        Frac::new(self.0 * o.1, self.1 * o.0)
    }
    fn value(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

/// Membership counts `(|P|, |T|, |P∩T|, |P∪T|)` by scanning the vocabulary.
fn counts(pred: &[usize], truth: &[usize], n: usize) -> (u64, u64, u64, u64) {
    let (mut np, mut nt, mut ni, mut nu) = (0, 0, 0, 0);
    for i in 0..n {
        let (a, b) = (pred.contains(&i), truth.contains(&i));
        np += u64::from(a);
        nt += u64::from(b);
        ni += u64::from(a && b);
        nu += u64::from(a || b);
    }
    (np, nt, ni, nu)
}

fn jaccard_oracle(c: (u64, u64, u64, u64)) -> f64 {
    let (_, _, inter, union) = c;
    if union == 0 {
        return 0.0;
    }
    Frac::new(inter, union).value()
}

fn f1_oracle(c: (u64, u64, u64, u64)) -> f64 {
    let (np, nt, ni, _) = c;
    if np == 0 || nt == 0 || ni == 0 {
        return 0.0;
    }
    let precision = Frac::new(ni, np);
    let recall = Frac::new(ni, nt);
    Frac::new(2, 1).mul(precision).mul(recall).div(precision.add(recall)).value()
}

/// Mean over positives of the precision among everything scoring at least
/// as high as that positive.
fn ap_oracle(scores: &[f64], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &i in truth {
        let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
        let hits = above.iter().filter(|j| truth.contains(j)).count();
        total += hits as f64 / above.len() as f64;
    }
    total / truth.len() as f64
}

/// Top `k` by repeated selection of the highest score, lowest index first.
fn top_k_order(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

fn top_k_oracle(scores: &[f64], truth: &[usize], k: usize) -> (f64, f64) {
    if truth.is_empty() {
        return (0.0, 0.0);
    }
    let order = top_k_order(scores, k);
    let hits = order.iter().filter(|i| truth.contains(i)).count();
    let dcg: f64 = order
        .iter()
        .enumerate()
        .filter(|(_, i)| truth.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(truth.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    (hits as f64 / k as f64, dcg / idcg)
}

fn ddi_oracle(pred: &[usize], dense: &[bool], n: usize) -> Option<f64> {
    let mut bad = 0u64;
    let mut pairs = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            if pred.contains(&i) && pred.contains(&j) {
                pairs += 1;
                bad += u64::from(dense[i * n + j]);
            }
        }
    }
    (pairs > 0).then(|| Frac::new(bad, pairs).value())
}

#[test]
fn set_metrics_exhaustive_up_to_eight() {
    check_set_metrics_exhaustive_up_to_eight();
}

pub fn check_set_metrics_exhaustive_up_to_eight() {
    for n in 0..=8usize {
        for p in 0..1u32 << n {
            let pred = members(p, n);
            for t in 0..1u32 << n {
                let truth = members(t, n);
                let ts = set_of(&truth);
                let c = counts(&pred, &truth, n);
                assert_eq!(jaccard(&pred, &ts), jaccard_oracle(c), "n={n} p={p:b} t={t:b}");
                assert_eq!(f1(&pred, &ts), f1_oracle(c), "n={n} p={p:b} t={t:b}");
            }
        }
    }
}

/// Every score vector over a three-level grid, so ties of every shape
/// appear, against every truth set.
#[test]
fn ranking_metrics_exhaustive_up_to_eight() {
    check_ranking_metrics_exhaustive_up_to_eight();
}

pub fn check_ranking_metrics_exhaustive_up_to_eight() {
    let grid = [0.0, 0.5, 1.0];
    for n in 1..=8usize {
        let configs = 3usize.pow(n as u32);
        for c in 0..configs {
            let mut code = c;
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    let v = grid[code % 3];
                    code /= 3;
                    v
                })
                .collect();
            for t in 0..1u32 << n {
                let truth = members(t, n);
                let ts = set_of(&truth);
                let ap = average_precision(&scores, &ts);
                assert!((ap - ap_oracle(&scores, &truth)).abs() < RANK_TOL, "{scores:?} {truth:?}");
                for k in [1, n.div_ceil(2), n] {
                    let (p, g) = top_k(&scores, &ts, k).unwrap();
                    let (po, go) = top_k_oracle(&scores, &truth, k);
                    assert!((p - po).abs() < RANK_TOL && (g - go).abs() < RANK_TOL, "{scores:?} {truth:?} k={k}");
                }
            }
        }
    }
}

#[test]
fn ddi_rate_exhaustive_up_to_five() {
    check_ddi_rate_exhaustive_up_to_five();
}

pub fn check_ddi_rate_exhaustive_up_to_five() {
    for n in 0..=5usize {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        for g in 0..1u32 << pairs.len() {
            let edges: Vec<(usize, usize)> = members(g, pairs.len()).into_iter().map(|e| pairs[e]).collect();
            let adj = Adjacency::from_edges(n, edges.iter().copied()).unwrap();
            let mut dense = vec![false; n * n];
            for &(i, j) in &edges {
                dense[i * n + j] = true;
                dense[j * n + i] = true;
            }
            for p in 0..1u32 << n {
                let pred = members(p, n);
                assert_eq!(ddi_rate_visit(&pred, &adj), ddi_oracle(&pred, &dense, n));
            }
        }
    }
}

#[test]
fn ddi_rate_random_graphs_up_to_eight() {
    check_ddi_rate_random_graphs_up_to_eight();
}

pub fn check_ddi_rate_random_graphs_up_to_eight() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 6..=8usize {
        for _ in 0..50 {
            let mut dense = vec![false; n * n];
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random_bool(0.4) {
                        dense[i * n + j] = true;
                        dense[j * n + i] = true;
                        edges.push((i, j));
                    }
                }
            }
            let adj = Adjacency::from_edges(n, edges).unwrap();
            for p in 0..1u32 << n {
                let pred = members(p, n);
                assert_eq!(ddi_rate_visit(&pred, &adj), ddi_oracle(&pred, &dense, n));
            }
        }
    }
}

#[test]
fn random_cases_at_full_vocabulary() {
    check_random_cases_at_full_vocabulary();
}

pub fn check_random_cases_at_full_vocabulary() {
    const N: usize = 131;
    let mut rng = ChaCha8Rng::seed_from_u64(131);
    let mut dense = vec![false; N * N];
    let mut edges = Vec::new();
    while edges.len() < 448 {
        let (i, j) = (rng.random_range(0..N), rng.random_range(0..N));
        if i != j && !dense[i * N + j] {
            dense[i * N + j] = true;
            dense[j * N + i] = true;
            edges.push((i.min(j), i.max(j)));
        }
    }
    let adj = Adjacency::from_edges(N, edges).unwrap();
    let mut preds = Vec::new();
    let mut oracle_rates = Vec::new();
    for case in 0..1000 {
        // coarse rounding on half the cases forces ties
        let coarse = case % 2 == 0;
        let scores: Vec<f64> = (0..N)
            .map(|_| {
                let s: f64 = rng.random();
                if coarse {
                    (s * 20.0).round() / 20.0
                } else {
                    s
                }
            })
            .collect();
        let truth_size = rng.random_range(0..=30);
        let truth: Vec<usize> = rand::seq::index::sample(&mut rng, N, truth_size).into_vec();
        let ts = set_of(&truth);
        let pred: Vec<usize> = (0..N).filter(|&i| scores[i] >= 0.7).collect();

        let c = counts(&pred, &truth, N);
        assert_eq!(jaccard(&pred, &ts), jaccard_oracle(c));
        assert_eq!(f1(&pred, &ts), f1_oracle(c));
        assert!((average_precision(&scores, &ts) - ap_oracle(&scores, &truth)).abs() < RANK_TOL);
        for k in [5, 10] {
            let (p, g) = top_k(&scores, &ts, k).unwrap();
            let (po, go) = top_k_oracle(&scores, &truth, k);
            assert!((p - po).abs() < RANK_TOL && (g - go).abs() < RANK_TOL, "case {case} k={k}");
        }
        let rate = ddi_rate_visit(&pred, &adj);
        let oracle = ddi_oracle(&pred, &dense, N);
        assert_eq!(rate, oracle);
        oracle_rates.extend(oracle);
        preds.push(pred);
    }
    let mean = oracle_rates.iter().sum::<f64>() / oracle_rates.len() as f64;
    assert!((ddi_rate(&preds, &adj) - mean).abs() < 1e-12);
}
