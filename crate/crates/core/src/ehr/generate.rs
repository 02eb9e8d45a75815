//! Synthetic EHR corpus shaped after the MIMIC-III summary statistics.
//!
//! Each patient follows latent disease profiles. A profile owns a diagnosis
//! pool, a procedure pool and a medication pool. A visit draws its code sets
//! from the active profile's pools; with probability `1 - purity` a code is
//! replaced by uniform noise, so `purity` controls how predictable the
//! medications are from the diagnoses.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{Adjacency, Dataset, KnowledgeGraphs, Molecule, PatientRecord, Visit, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub diagnoses: usize,
    pub procedures: usize,
    pub medications: usize,
    pub ddi_pairs: usize,
    pub patients: usize,
    pub mean_visits: f64,
    pub max_visits: usize,
    pub mean_diagnoses: f64,
    pub mean_procedures: f64,
    pub mean_medications: f64,
    pub profiles: usize,
    /// Probability that a drawn code comes from the active profile's pool.
    pub purity: f64,
    /// Probability that a visit keeps the previous visit's profile.
    pub persist: f64,
    /// Fraction of DDI pairs placed on co-prescribed medication pairs.
    pub ddi_ehr_overlap: f64,
    pub atom_types: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    /// Extra-bond probability on top of a random spanning tree.
    pub bond_prob: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            diagnoses: 100,
            procedures: 60,
            medications: 131,
            ddi_pairs: 448,
            patients: 600,
            mean_visits: 2.4,
            max_visits: 29,
            mean_diagnoses: 10.0,
            mean_procedures: 4.0,
            mean_medications: 11.0,
            profiles: 24,
            purity: 0.8,
            persist: 0.7,
            ddi_ehr_overlap: 0.3,
            atom_types: 8,
            min_atoms: 4,
            max_atoms: 30,
            bond_prob: 0.1,
        }
    }
}

impl GenConfig {
    /// Small, noise-free corpus that a model should be able to memorise.
    pub fn easy() -> Self {
        Self {
            patients: 50,
            purity: 1.0,
            ..Self::default()
        }
    }

    /// Noisy corpus where history and attention matter. Purity stays above
    /// one half so a profile medication remains more likely than not, which
    /// keeps calibrated scores away from the usual 0.5 decision threshold.
    pub fn hard() -> Self {
        Self {
            purity: 0.6,
            persist: 0.9,
            ..Self::default()
        }
    }

    fn pool_size(mean: f64, factor: f64, vocab: usize) -> usize {
        (libm::ceil(mean * factor) as usize).clamp(1, vocab)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if self.diagnoses == 0 || self.procedures == 0 || self.medications == 0 {
            return err("vocabulary sizes must be at least 1");
        }
        if self.patients == 0 || self.profiles == 0 || self.max_visits == 0 {
            return err("patients, profiles and max_visits must be at least 1");
        }
        for (name, v) in [
            ("mean_visits", self.mean_visits),
            ("mean_diagnoses", self.mean_diagnoses),
            ("mean_procedures", self.mean_procedures),
            ("mean_medications", self.mean_medications),
        ] {
            if !(v >= 1.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 1, got {v}")));
            }
        }
        for (name, p) in [
            ("purity", self.purity),
            ("persist", self.persist),
            ("ddi_ehr_overlap", self.ddi_ehr_overlap),
            ("bond_prob", self.bond_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let max_pairs = self.medications * (self.medications - 1) / 2;
        if self.ddi_pairs > max_pairs {
            return Err(Error::Config(format!(
                "{} DDI pairs requested but only {max_pairs} medication pairs exist",
                self.ddi_pairs
            )));
        }
        if self.atom_types == 0 || self.min_atoms == 0 || self.min_atoms > self.max_atoms {
            return err("atom settings need atom_types >= 1 and 1 <= min_atoms <= max_atoms");
        }
        Ok(())
    }
}

struct Profile {
    diagnoses: Vec<usize>,
    procedures: Vec<usize>,
    medications: Vec<usize>,
}

/// `1 + Poisson(mean - 1)`, capped.
fn count(rng: &mut ChaCha8Rng, mean: f64, cap: usize) -> usize {
    let extra = if mean > 1.0 {
        Poisson::new(mean - 1.0).expect("positive rate").sample(rng) as usize
    } else {
        0
    };
    (1 + extra).min(cap)
}

fn draw_codes(rng: &mut ChaCha8Rng, pool: &[usize], vocab: usize, n: usize, purity: f64) -> BTreeSet<usize> {
    let mut set = BTreeSet::new();
    let mut attempts = 0;
    while set.len() < n && attempts < 64 * n {
        attempts += 1;
        let code = if rng.random_bool(purity) {
            pool[rng.random_range(0..pool.len())]
        } else {
            rng.random_range(0..vocab)
        };
        set.insert(code);
    }
    set
}

fn draw_medications(rng: &mut ChaCha8Rng, pool: &[usize], vocab: usize, purity: f64) -> BTreeSet<usize> {
    let mut set: BTreeSet<usize> = pool.iter().copied().filter(|_| rng.random_bool(purity)).collect();
    let noise_rate = (1.0 - purity) * pool.len() as f64;
    if noise_rate > 0.0 {
        let noise = Poisson::new(noise_rate).expect("positive rate").sample(rng) as usize;
        for _ in 0..noise {
            set.insert(rng.random_range(0..vocab));
        }
    }
    if set.is_empty() {
        set.insert(pool[rng.random_range(0..pool.len())]);
    }
    set
}

fn random_molecule(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> Result<Molecule> {
    let n = rng.random_range(cfg.min_atoms..=cfg.max_atoms);
    let types = (0..n).map(|_| rng.random_range(0..cfg.atom_types)).collect();
    let mut bonds = Adjacency::empty(n);
    for k in 1..n {
        let j = rng.random_range(0..k);
        bonds.add_edge(j, k)?;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if !bonds.has_edge(i, j) && rng.random_bool(cfg.bond_prob) {
                bonds.add_edge(i, j)?;
            }
        }
    }
    Molecule::new(types, bonds)
}

fn ddi_graph(rng: &mut ChaCha8Rng, cfg: &GenConfig, ehr: &Adjacency) -> Result<Adjacency> {
    let m = cfg.medications;
    let (co, other): (Vec<_>, Vec<_>) = (0..m)
        .flat_map(|i| ((i + 1)..m).map(move |j| (i, j)))
        .partition(|&(i, j)| ehr.has_edge(i, j));
    let want_co = libm::round(cfg.ddi_ehr_overlap * cfg.ddi_pairs as f64) as usize;
    let mut take_co = want_co.min(co.len());
    let mut take_other = cfg.ddi_pairs - take_co;
    if take_other > other.len() {
        take_other = other.len();
        take_co = cfg.ddi_pairs - take_other;
    }
    let mut ddi = Adjacency::empty(m);
    for idx in sample(rng, co.len(), take_co) {
        ddi.add_edge(co[idx].0, co[idx].1)?;
    }
    for idx in sample(rng, other.len(), take_other) {
        ddi.add_edge(other[idx].0, other[idx].1)?;
    }
    Ok(ddi)
}

/// Deterministic synthetic dataset for `seed`.
pub fn generate_synthetic(cfg: &GenConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool_d = GenConfig::pool_size(cfg.mean_diagnoses, 2.0, cfg.diagnoses);
    let pool_p = GenConfig::pool_size(cfg.mean_procedures, 2.0, cfg.procedures);
    let pool_m = GenConfig::pool_size(libm::round(cfg.mean_medications), 1.0, cfg.medications);
    let profiles: Vec<Profile> = (0..cfg.profiles)
        .map(|_| Profile {
            diagnoses: sample(&mut rng, cfg.diagnoses, pool_d).into_vec(),
            procedures: sample(&mut rng, cfg.procedures, pool_p).into_vec(),
            medications: sample(&mut rng, cfg.medications, pool_m).into_vec(),
        })
        .collect();

    let width = libm::log10(cfg.patients as f64) as usize + 1;
    let mut records = Vec::with_capacity(cfg.patients);
    for p in 0..cfg.patients {
        let t = count(&mut rng, cfg.mean_visits, cfg.max_visits);
        let mut profile = rng.random_range(0..profiles.len());
        let mut visits = Vec::with_capacity(t);
        for k in 0..t {
            if k > 0 && !rng.random_bool(cfg.persist) {
                profile = rng.random_range(0..profiles.len());
            }
            let pr = &profiles[profile];
            let nd = count(&mut rng, cfg.mean_diagnoses, pool_d);
            let np = count(&mut rng, cfg.mean_procedures, pool_p);
            visits.push(Visit {
                diagnoses: draw_codes(&mut rng, &pr.diagnoses, cfg.diagnoses, nd, cfg.purity),
                procedures: draw_codes(&mut rng, &pr.procedures, cfg.procedures, np, cfg.purity),
                medications: draw_medications(&mut rng, &pr.medications, cfg.medications, cfg.purity),
            });
        }
        records.push(PatientRecord::new(format!("p{p:0width$}"), visits)?);
    }

    let ehr = KnowledgeGraphs::ehr_from_records(cfg.medications, &records)?;
    let ddi = ddi_graph(&mut rng, cfg, &ehr)?;
    let molecules = (0..cfg.medications)
        .map(|_| random_molecule(&mut rng, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        vocab: Vocab::new(cfg.diagnoses, cfg.procedures, cfg.medications),
        records,
        graphs: KnowledgeGraphs {
            ehr,
            ddi,
            molecules,
            atom_vocab: cfg.atom_types,
        },
        generator: Some(cfg.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn within(actual: f64, target: f64, frac: f64) -> bool {
        (actual - target).abs() <= frac * target
    }

    #[test]
    fn default_corpus_matches_table_shape() {
        let ds = generate_synthetic(&GenConfig::default(), 1).unwrap();
        ds.validate().unwrap();
        let s = ds.summary();
        assert_eq!(s.medicines, 131);
        assert_eq!(s.ddi_pairs, 448);
        assert_eq!(s.patients, 600);
    }

    #[test]
    fn generator_means_land_near_config() {
        let cfg = GenConfig::default();
        let s = generate_synthetic(&cfg, 3).unwrap().summary();
        assert!(within(s.visits.mean, cfg.mean_visits, 0.15), "{:?}", s.visits);
        assert!(within(s.diagnoses_per_visit.mean, cfg.mean_diagnoses, 0.15));
        assert!(within(s.procedures_per_visit.mean, cfg.mean_procedures, 0.15));
        assert!(within(s.medicines_per_visit.mean, cfg.mean_medications, 0.15));
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = GenConfig {
            patients: 40,
            ..GenConfig::default()
        };
        assert_eq!(generate_synthetic(&cfg, 9).unwrap(), generate_synthetic(&cfg, 9).unwrap());
        assert_ne!(generate_synthetic(&cfg, 9).unwrap(), generate_synthetic(&cfg, 10).unwrap());
    }

    #[test]
    fn single_visit_corpus_has_edges_only_within_that_visit() {
        let cfg = GenConfig {
            patients: 1,
            mean_visits: 1.0,
            ddi_pairs: 3,
            ..GenConfig::default()
        };
        let ds = generate_synthetic(&cfg, 5).unwrap();
        assert_eq!(ds.records.len(), 1);
        assert_eq!(ds.records[0].visits.len(), 1);
        let meds = &ds.records[0].visits[0].medications;
        for (i, j) in ds.graphs.ehr.edges() {
            assert!(meds.contains(&i) && meds.contains(&j));
        }
        let n = meds.len();
        assert_eq!(ds.graphs.ehr.edge_count(), n * (n - 1) / 2);
    }

    #[test]
    fn every_ehr_edge_is_witnessed() {
        let cfg = GenConfig {
            patients: 80,
            ..GenConfig::default()
        };
        let ds = generate_synthetic(&cfg, 11).unwrap();
        for (i, j) in ds.graphs.ehr.edges() {
            assert!(ds
                .records
                .iter()
                .flat_map(|r| &r.visits)
                .any(|v| v.medications.contains(&i) && v.medications.contains(&j)));
        }
    }

    #[test]
    fn molecules_are_connected_and_sized() {
        let ds = generate_synthetic(&GenConfig { patients: 10, ..GenConfig::default() }, 2).unwrap();
        for m in &ds.graphs.molecules {
            assert!((4..=30).contains(&m.num_atoms()));
            let mut seen = alloc::vec![false; m.num_atoms()];
            let mut stack = alloc::vec![0];
            seen[0] = true;
            while let Some(u) = stack.pop() {
                for v in m.bonds.neighbors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn infeasible_ddi_count_is_a_config_error() {
        let cfg = GenConfig {
            medications: 4,
            ddi_pairs: 7,
            ..GenConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn easy_corpus_repeats_profile_medications() {
        let ds = generate_synthetic(&GenConfig::easy(), 4).unwrap();
        let distinct: BTreeSet<_> = ds.records.iter().flat_map(|r| &r.visits).map(|v| v.medications.clone()).collect();
        assert!(distinct.len() <= GenConfig::easy().profiles);
    }
}
