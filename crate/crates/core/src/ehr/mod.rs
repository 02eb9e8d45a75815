//! Patients, visits, code vocabularies and the medicine knowledge graphs.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

mod generate;
mod split;

pub use generate::{generate_synthetic, GenConfig};
pub use split::{split_records, split_sizes, Split};

/// One admission: code sets indexed into the vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Visit {
    pub diagnoses: BTreeSet<usize>,
    pub procedures: BTreeSet<usize>,
    pub medications: BTreeSet<usize>,
}

impl Visit {
    pub fn new(
        diagnoses: impl IntoIterator<Item = usize>,
        procedures: impl IntoIterator<Item = usize>,
        medications: impl IntoIterator<Item = usize>,
    ) -> Self {
        Self {
            diagnoses: diagnoses.into_iter().collect(),
            procedures: procedures.into_iter().collect(),
            medications: medications.into_iter().collect(),
        }
    }
}

/// Chronologically ordered visits of one patient (at least one).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn new(patient_id: impl Into<String>, visits: Vec<Visit>) -> Result<Self> {
        let patient_id = patient_id.into();
        if visits.is_empty() {
            return Err(contract("PatientRecord", format!("patient `{patient_id}` has no visits")));
        }
        Ok(Self { patient_id, visits })
    }

    pub fn num_visits(&self) -> usize {
        self.visits.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLabels {
    pub diagnoses: Vec<String>,
    pub procedures: Vec<String>,
    pub medications: Vec<String>,
}

/// Sizes of the diagnosis, procedure and medication code sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub diagnoses: usize,
    pub procedures: usize,
    pub medications: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<VocabLabels>,
}

impl Vocab {
    pub fn new(diagnoses: usize, procedures: usize, medications: usize) -> Self {
        Self {
            diagnoses,
            procedures,
            medications,
            labels: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.diagnoses == 0 || self.procedures == 0 || self.medications == 0 {
            return Err(Error::Config(String::from("vocabulary sizes must be at least 1")));
        }
        if let Some(l) = &self.labels {
            if l.diagnoses.len() != self.diagnoses
                || l.procedures.len() != self.procedures
                || l.medications.len() != self.medications
            {
                return Err(contract("Vocab", "labels must cover every index"));
            }
        }
        Ok(())
    }

    /// Checks every code of `visit` against the vocabulary bounds.
    pub fn check_visit(&self, visit: &Visit) -> Result<()> {
        let check = |set: &BTreeSet<usize>, bound: usize, what: &'static str| {
            match set.iter().next_back() {
                Some(&max) if max >= bound => Err(Error::OutOfBounds {
                    what,
                    index: max,
                    bound,
                }),
                _ => Ok(()),
            }
        };
        check(&visit.diagnoses, self.diagnoses, "diagnosis code")?;
        check(&visit.procedures, self.procedures, "procedure code")?;
        check(&visit.medications, self.medications, "medication code")?;
        if visit.diagnoses.is_empty() && visit.procedures.is_empty() {
            return Err(contract("Visit", "visit needs at least one diagnosis or procedure code"));
        }
        Ok(())
    }

    pub fn check_record(&self, record: &PatientRecord) -> Result<()> {
        if record.visits.is_empty() {
            return Err(contract(
                "PatientRecord",
                format!("patient `{}` has no visits", record.patient_id),
            ));
        }
        record.visits.iter().try_for_each(|v| self.check_visit(v))
    }
}

/// Undirected simple graph stored as a dense symmetric 0/1 matrix with a
/// zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Adjacency {
    n: usize,
    bits: Vec<bool>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut a = Self::empty(n);
        for (i, j) in edges {
            a.add_edge(i, j)?;
        }
        Ok(a)
    }

    /// Builds from a dense row-major matrix, rejecting asymmetric input,
    /// self-loops and non-binary entries.
    pub fn from_dense(n: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != n * n {
            return Err(crate::error::shape_err("Adjacency::from_dense", &[n, n], &[dense.len()]));
        }
        let mut a = Self::empty(n);
        for i in 0..n {
            for j in 0..n {
                let v = dense[i * n + j];
                if v != 0.0 && v != 1.0 {
                    return Err(contract("Adjacency", format!("entry ({i},{j}) = {v} is not 0/1")));
                }
                if v != dense[j * n + i] {
                    return Err(contract("Adjacency", format!("asymmetric at ({i},{j})")));
                }
                if v == 1.0 {
                    if i == j {
                        return Err(contract("Adjacency", format!("self-loop at {i}")));
                    }
                    a.bits[i * n + j] = true;
                }
            }
        }
        Ok(a)
    }

    pub fn add_edge(&mut self, i: usize, j: usize) -> Result<()> {
        for k in [i, j] {
            if k >= self.n {
                return Err(Error::OutOfBounds {
                    what: "graph node",
                    index: k,
                    bound: self.n,
                });
            }
        }
        if i == j {
            return Err(contract("Adjacency", format!("self-loop at {i}")));
        }
        self.bits[i * self.n + j] = true;
        self.bits[j * self.n + i] = true;
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    /// Edges `(i, j)` with `i < j`, in row-major order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| ((i + 1)..self.n).filter(move |&j| self.has_edge(i, j)).map(move |j| (i, j)))
    }

    /// Number of nonzero upper-triangle entries.
    pub fn edge_count(&self) -> usize {
        self.edges().count()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.has_edge(i, j))
    }

    pub fn to_dense(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Same graph with nodes relabelled: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut out = Self::empty(self.n);
        for (i, j) in self.edges() {
            out.add_edge(perm[i], perm[j])?;
        }
        Ok(out)
    }
}

/// Atom graph of one medicine.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Molecule {
    pub atom_types: Vec<usize>,
    pub bonds: Adjacency,
}

impl Molecule {
    pub fn new(atom_types: Vec<usize>, bonds: Adjacency) -> Result<Self> {
        if atom_types.is_empty() {
            return Err(contract("Molecule", "molecule needs at least one atom"));
        }
        if bonds.size() != atom_types.len() {
            return Err(crate::error::shape_err(
                "Molecule",
                &[atom_types.len()],
                &[bonds.size()],
            ));
        }
        Ok(Self { atom_types, bonds })
    }

    pub fn num_atoms(&self) -> usize {
        self.atom_types.len()
    }

    /// Relabels atoms: atom `i` moves to position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut types = vec![0; self.atom_types.len()];
        for (i, &p) in perm.iter().enumerate() {
            types[p] = self.atom_types[i];
        }
        Self::new(types, self.bonds.permuted(perm)?)
    }
}

/// EHR co-prescription graph, drug-drug interaction graph and per-medicine
/// molecular graphs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraphs {
    pub ehr: Adjacency,
    pub ddi: Adjacency,
    pub molecules: Vec<Molecule>,
    /// Number of distinct atom types; every `atom_types` entry is below it.
    pub atom_vocab: usize,
}

impl KnowledgeGraphs {
    /// Co-prescription graph: an edge for every medication pair sharing a visit.
    pub fn ehr_from_records<'a>(
        n_medications: usize,
        records: impl IntoIterator<Item = &'a PatientRecord>,
    ) -> Result<Adjacency> {
        let mut a = Adjacency::empty(n_medications);
        for r in records {
            for v in &r.visits {
                let meds: Vec<usize> = v.medications.iter().copied().collect();
                for (k, &i) in meds.iter().enumerate() {
                    for &j in &meds[k + 1..] {
                        a.add_edge(i, j)?;
                    }
                }
            }
        }
        Ok(a)
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let m = vocab.medications;
        if self.ehr.size() != m || self.ddi.size() != m {
            return Err(crate::error::shape_err(
                "KnowledgeGraphs",
                &[m],
                &[self.ehr.size(), self.ddi.size()],
            ));
        }
        if self.molecules.len() != m {
            return Err(contract(
                "KnowledgeGraphs",
                format!("{} molecules for {m} medications", self.molecules.len()),
            ));
        }
        if self.atom_vocab == 0 {
            return Err(contract("KnowledgeGraphs", "atom vocabulary is empty"));
        }
        for mol in &self.molecules {
            if let Some(&t) = mol.atom_types.iter().find(|&&t| t >= self.atom_vocab) {
                return Err(Error::OutOfBounds {
                    what: "atom type",
                    index: t,
                    bound: self.atom_vocab,
                });
            }
        }
        Ok(())
    }
}

/// Vocabulary, patient records and graphs bundled together.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub records: Vec<PatientRecord>,
    pub graphs: KnowledgeGraphs,
    /// Generator settings when the data is synthetic.
    pub generator: Option<GenConfig>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        self.records.iter().try_for_each(|r| self.vocab.check_record(r))?;
        self.graphs.validate(&self.vocab)
    }

    pub fn num_visits(&self) -> usize {
        self.records.iter().map(PatientRecord::num_visits).sum()
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary::of(&self.vocab, &self.records, &self.graphs)
    }

    /// Same vocabulary and graphs with a different patient set.
    pub fn with_records(&self, records: Vec<PatientRecord>) -> Self {
        Self {
            vocab: self.vocab.clone(),
            records,
            graphs: self.graphs.clone(),
            generator: self.generator.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountStat {
    pub mean: f64,
    pub max: usize,
}

impl CountStat {
    fn of(values: impl Iterator<Item = usize>) -> Self {
        let (mut n, mut sum, mut max) = (0usize, 0usize, 0usize);
        for v in values {
            n += 1;
            sum += v;
            max = max.max(v);
        }
        Self {
            mean: if n == 0 { 0.0 } else { sum as f64 / n as f64 },
            max,
        }
    }
}

/// Dataset statistics in the layout of the usual MIMIC summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub patients: usize,
    pub clinical_events: usize,
    pub diagnoses: usize,
    pub procedures: usize,
    pub medicines: usize,
    pub visits: CountStat,
    pub diagnoses_per_visit: CountStat,
    pub procedures_per_visit: CountStat,
    pub medicines_per_visit: CountStat,
    pub ddi_pairs: usize,
    pub ehr_edges: usize,
}

impl DatasetSummary {
    pub fn of(vocab: &Vocab, records: &[PatientRecord], graphs: &KnowledgeGraphs) -> Self {
        let visits = || records.iter().flat_map(|r| r.visits.iter());
        Self {
            patients: records.len(),
            clinical_events: visits().count(),
            diagnoses: vocab.diagnoses,
            procedures: vocab.procedures,
            medicines: vocab.medications,
            visits: CountStat::of(records.iter().map(PatientRecord::num_visits)),
            diagnoses_per_visit: CountStat::of(visits().map(|v| v.diagnoses.len())),
            procedures_per_visit: CountStat::of(visits().map(|v| v.procedures.len())),
            medicines_per_visit: CountStat::of(visits().map(|v| v.medications.len())),
            ddi_pairs: graphs.ddi.edge_count(),
            ehr_edges: graphs.ehr.edge_count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_is_symmetric_with_zero_diagonal() {
        let a = Adjacency::from_edges(4, [(0, 1), (2, 1), (3, 0)]).unwrap();
        for i in 0..4 {
            assert!(!a.has_edge(i, i));
            for j in 0..4 {
                assert_eq!(a.has_edge(i, j), a.has_edge(j, i));
            }
        }
        assert_eq!(a.edge_count(), 3);
        assert_eq!(a.edges().collect::<Vec<_>>(), [(0, 1), (0, 3), (1, 2)]);
        assert!(Adjacency::from_edges(3, [(1, 1)]).is_err());
        assert!(Adjacency::from_edges(3, [(0, 3)]).is_err());
    }

    #[test]
    fn dense_adjacency_rejects_asymmetry() {
        assert!(Adjacency::from_dense(2, &[0.0, 1.0, 0.0, 0.0]).is_err());
        assert!(Adjacency::from_dense(2, &[0.0, 1.0, 1.0, 0.0]).is_ok());
    }

    #[test]
    fn empty_visit_list_is_rejected() {
        assert!(PatientRecord::new("p", Vec::new()).is_err());
    }

    #[test]
    fn out_of_bounds_medication_is_rejected() {
        let vocab = Vocab::new(3, 3, 2);
        let v = Visit::new([0], [1], [2]);
        assert!(matches!(
            vocab.check_visit(&v),
            Err(Error::OutOfBounds { index: 2, bound: 2, .. })
        ));
    }

    #[test]
    fn ehr_graph_edges_come_from_co_prescriptions() {
        let r = PatientRecord::new("p", vec![Visit::new([0], [0], [0, 2, 3]), Visit::new([1], [], [1])]).unwrap();
        let a = KnowledgeGraphs::ehr_from_records(5, [&r]).unwrap();
        assert_eq!(a.edges().collect::<Vec<_>>(), [(0, 2), (0, 3), (2, 3)]);
    }
}
