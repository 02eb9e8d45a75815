//! The assembled recommender and its ablation variants.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decision_head::{Decision, DecisionHead};
use crate::ehr::{Visit, Vocab};
use crate::error::{Error, Result};
use crate::medicine_encoder::{GraphContext, MedicineEncoder, MedicineEncoderOptions};
use crate::nn::{Dropout, Init};
use crate::patient_encoder::{
    EmbeddingTables, EncoderConfig, PatientEncoder, PatientEncoderOptions, PatientState, PoolKind, SequenceKind,
    SummaryInputs,
};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamRegistry, Tensor};

/// Architecture variants used in ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Without the co-prescription and interaction graph blocks.
    #[serde(rename = "no-graphs")]
    NoGraphs,
    #[serde(rename = "no-mol")]
    NoMolecules,
    /// Attention pools replaced by means.
    #[serde(rename = "no-att")]
    NoAttention,
    /// Health summary built from the encoded sequence alone.
    #[serde(rename = "no-seq-att")]
    NoLocalSequence,
    /// Health summary built from the local visit vectors alone.
    #[serde(rename = "no-seq-tr")]
    NoGlobalSequence,
    #[serde(rename = "gru")]
    Gru,
    #[serde(rename = "rnn")]
    Rnn,
    /// Direct scorer only: no medication history, similarity or indirect scorer.
    #[serde(rename = "only-o1")]
    DirectOnly,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::NoGraphs,
        Variant::NoMolecules,
        Variant::NoAttention,
        Variant::NoLocalSequence,
        Variant::NoGlobalSequence,
        Variant::Gru,
        Variant::Rnn,
        Variant::DirectOnly,
    ];

    /// Short command-line name.
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGraphs => "no-graphs",
            Variant::NoMolecules => "no-mol",
            Variant::NoAttention => "no-att",
            Variant::NoLocalSequence => "no-seq-att",
            Variant::NoGlobalSequence => "no-seq-tr",
            Variant::Gru => "gru",
            Variant::Rnn => "rnn",
            Variant::DirectOnly => "only-o1",
        }
    }

    /// Row label for comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "ACDNet",
            Variant::NoGraphs => "ACDNet w/o M_e,M_d",
            Variant::NoMolecules => "ACDNet w/o M_mol",
            Variant::NoAttention => "ACDNet w/o att",
            Variant::NoLocalSequence => "ACDNet w/o seq_e^att",
            Variant::NoGlobalSequence => "ACDNet w/o seq_e^tr",
            Variant::Gru => "ACDNet w GRU",
            Variant::Rnn => "ACDNet w RNN",
            Variant::DirectOnly => "ACDNet w o_1",
        }
    }

    pub fn patient_options(self) -> PatientEncoderOptions {
        let mut o = PatientEncoderOptions::full();
        match self {
            Variant::NoAttention => o.pool = PoolKind::Mean,
            Variant::NoLocalSequence => o.summary = SummaryInputs::GlobalOnly,
            Variant::NoGlobalSequence => o.summary = SummaryInputs::LocalOnly,
            Variant::Gru => o.sequence = SequenceKind::Gru,
            Variant::Rnn => o.sequence = SequenceKind::Rnn,
            Variant::DirectOnly => o.medication_history = false,
            Variant::Full | Variant::NoGraphs | Variant::NoMolecules => {}
        }
        o
    }

    pub fn medicine_options(self) -> MedicineEncoderOptions {
        MedicineEncoderOptions {
            graphs: self != Variant::NoGraphs,
            molecules: self != Variant::NoMolecules,
        }
    }

    /// Whether the medicine matrix and indirect scorer exist at all.
    pub fn uses_medicine_matrix(self) -> bool {
        self != Variant::DirectOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        let v = match key.as_str() {
            "full" | "acdnet" => Variant::Full,
            "nographs" | "womemd" | "wogcn" => Variant::NoGraphs,
            "nomol" | "nomolecules" | "womol" | "wommol" => Variant::NoMolecules,
            "noatt" | "noattention" | "woatt" => Variant::NoAttention,
            "noseqatt" | "woseqatt" | "woseqeatt" => Variant::NoLocalSequence,
            "noseqtr" | "woseqtr" | "woseqetr" => Variant::NoGlobalSequence,
            "gru" | "wgru" => Variant::Gru,
            "rnn" | "wrnn" => Variant::Rnn,
            "onlyo1" | "wo1" | "directonly" => Variant::DirectOnly,
            _ => {
                let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                return Err(Error::Config(format!("unknown variant {s:?}; expected one of {}", known.join(", "))));
            }
        };
        Ok(v)
    }
}

/// Everything needed to rebuild the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub diagnoses: usize,
    pub procedures: usize,
    pub medications: usize,
    pub atom_vocab: usize,
    pub encoder: EncoderConfig,
    pub variant: Variant,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn for_vocab(vocab: &Vocab, atom_vocab: usize, encoder: EncoderConfig, variant: Variant, init_seed: u64) -> Self {
        Self {
            diagnoses: vocab.diagnoses,
            procedures: vocab.procedures,
            medications: vocab.medications,
            atom_vocab,
            encoder,
            variant,
            init_seed,
        }
    }

    /// Rejects a dataset whose vocabulary differs from the model's.
    pub fn check_vocab(&self, vocab: &Vocab, atom_vocab: usize) -> Result<()> {
        let model = (self.diagnoses, self.procedures, self.medications, self.atom_vocab);
        let data = (vocab.diagnoses, vocab.procedures, vocab.medications, atom_vocab);
        if model != data {
            return Err(Error::Config(format!(
                "model vocabulary (diagnoses, procedures, medications, atom types) {model:?} \
                 is incompatible with dataset {data:?}"
            )));
        }
        Ok(())
    }
}

/// Structure of the network, independent of parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub patient: PatientEncoder,
    pub medicine: Option<MedicineEncoder>,
    pub head: DecisionHead,
}

/// Per-visit forward result.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitForward {
    pub state: PatientState,
    pub decision: Decision,
}

/// Plain values of one visit's recommendation.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitScores {
    pub probs: Vec<f64>,
    pub o1: Vec<f64>,
    pub o2: Option<Vec<f64>>,
}

impl Architecture {
    pub fn build(cfg: &ModelConfig, params: &mut ParamRegistry) -> Result<Self> {
        cfg.encoder.validate()?;
        let dim = cfg.encoder.dim;
        let mut init = Init::new(params, cfg.init_seed);
        let tables = EmbeddingTables::new(&mut init, [cfg.diagnoses, cfg.procedures, cfg.medications], dim)?;
        let patient = PatientEncoder::new(&mut init, tables, &cfg.encoder, cfg.variant.patient_options())?;
        let medicine = if cfg.variant.uses_medicine_matrix() {
            Some(MedicineEncoder::new(
                &mut init,
                tables.medications,
                cfg.medications,
                cfg.atom_vocab,
                dim,
                cfg.encoder.heads,
                cfg.variant.medicine_options(),
            )?)
        } else {
            None
        };
        let head = DecisionHead::new(&mut init, dim, cfg.medications, cfg.variant.uses_medicine_matrix())?;
        Ok(Self { patient, medicine, head })
    }

    /// Medicine matrix node, or `None` for the direct-only model.
    pub fn medicine_matrix(&self, tape: &mut Tape<'_>, ctx: &GraphContext) -> Result<Option<Var>> {
        match &self.medicine {
            Some(m) => Ok(Some(m.forward(tape, ctx)?.fused)),
            None => Ok(None),
        }
    }

    /// Recommendations for every visit of one patient, each made from the
    /// visits before it. `medicines` is the (possibly constant) medicine
    /// matrix node.
    pub fn forward_patient(
        &self,
        tape: &mut Tape<'_>,
        visits: &[Visit],
        medicines: Option<Var>,
        dropout: &mut Dropout,
    ) -> Result<Vec<VisitForward>> {
        let states = self.patient.encode_prefixes(tape, visits, dropout)?;
        states
            .into_iter()
            .map(|state| {
                let decision = self.head.forward(tape, state.r_p, state.r_m, medicines)?;
                Ok(VisitForward { state, decision })
            })
            .collect()
    }
}

/// A model: its configuration, structure and parameter values.
#[derive(Debug, Clone)]
pub struct AcdNet {
    pub config: ModelConfig,
    pub params: ParamRegistry,
    pub arch: Architecture,
}

impl AcdNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut params = ParamRegistry::new();
        let arch = Architecture::build(&config, &mut params)?;
        Ok(Self { config, params, arch })
    }

    /// Rebuilds the structure for `config` and installs `values`, which must
    /// carry exactly the expected names and shapes.
    pub fn from_params(config: ModelConfig, values: &ParamRegistry) -> Result<Self> {
        let mut model = Self::new(config)?;
        if values.len() != model.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                values.len()
            )));
        }
        model.params.copy_values_from(values)?;
        Ok(model)
    }

    /// Frozen medicine matrix values.
    pub fn medicine_values(&self, ctx: &GraphContext) -> Result<Option<Tensor>> {
        let mut tape = Tape::with_params(&self.params);
        let m = self.arch.medicine_matrix(&mut tape, ctx)?;
        Ok(m.map(|v| tape.to_tensor(v)))
    }

    /// Frozen-parameter scorer that computes the medicine matrix once.
    pub fn scorer(&self, ctx: &GraphContext) -> Result<Scorer<'_>> {
        Ok(Scorer {
            model: self,
            medicines: self.medicine_values(ctx)?,
        })
    }
}

/// Inference against frozen parameters; shareable across threads.
#[derive(Debug, Clone)]
pub struct Scorer<'m> {
    model: &'m AcdNet,
    medicines: Option<Tensor>,
}

impl Scorer<'_> {
    /// Scores every visit of the patient from its preceding history.
    pub fn score_patient(&self, visits: &[Visit]) -> Result<Vec<VisitScores>> {
        let mut tape = Tape::with_params(&self.model.params);
        let m = self.medicines.as_ref().map(|t| tape.constant(t.clone()));
        let out = self.model.arch.forward_patient(&mut tape, visits, m, &mut Dropout::disabled())?;
        Ok(out
            .iter()
            .map(|f| VisitScores {
                probs: tape.value(f.decision.probs).to_vec(),
                o1: tape.value(f.decision.o1).to_vec(),
                o2: f.decision.o2.map(|v| tape.value(v).to_vec()),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{generate_synthetic, GenConfig};

    fn tiny() -> (ModelConfig, crate::ehr::Dataset) {
        let gen = GenConfig {
            diagnoses: 12,
            procedures: 8,
            medications: 6,
            ddi_pairs: 3,
            patients: 6,
            mean_diagnoses: 3.0,
            mean_procedures: 2.0,
            mean_medications: 2.0,
            profiles: 3,
            max_atoms: 6,
            ..GenConfig::default()
        };
        let data = generate_synthetic(&gen, 1).unwrap();
        let enc = EncoderConfig {
            dim: 8,
            heads: 2,
            layers: 1,
            ..EncoderConfig::default()
        };
        let cfg = ModelConfig::for_vocab(&data.vocab, data.graphs.atom_vocab, enc, Variant::Full, 3);
        (cfg, data)
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("w/o seq_e^att".parse::<Variant>().unwrap(), Variant::NoLocalSequence);
        assert_eq!("w o_1".parse::<Variant>().unwrap(), Variant::DirectOnly);
        assert!(matches!("transformer-xl".parse::<Variant>(), Err(Error::Config(_))));
    }

    #[test]
    fn every_variant_scores_every_visit() {
        let (cfg, data) = tiny();
        let ctx = GraphContext::new(&data.graphs).unwrap();
        for v in Variant::ALL {
            let model = AcdNet::new(ModelConfig { variant: v, ..cfg }).unwrap();
            let scorer = model.scorer(&ctx).unwrap();
            for p in &data.records {
                let scores = scorer.score_patient(&p.visits).unwrap();
                assert_eq!(scores.len(), p.visits.len());
                for s in scores {
                    assert_eq!(s.probs.len(), 6);
                    assert!(s.probs.iter().all(|&x| x > 0.0 && x < 1.0));
                    assert_eq!(s.o2.is_some(), v != Variant::DirectOnly);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let (cfg, _) = tiny();
        let a = AcdNet::new(cfg).unwrap();
        let b = AcdNet::new(cfg).unwrap();
        for ((_, na, ta), (_, nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn reload_reproduces_scores() {
        let (cfg, data) = tiny();
        let ctx = GraphContext::new(&data.graphs).unwrap();
        let a = AcdNet::new(cfg).unwrap();
        let b = AcdNet::from_params(ModelConfig { init_seed: 99, ..cfg }, &a.params).unwrap();
        let visits = &data.records[0].visits;
        assert_eq!(
            a.scorer(&ctx).unwrap().score_patient(visits).unwrap(),
            b.scorer(&ctx).unwrap().score_patient(visits).unwrap()
        );
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let (cfg, data) = tiny();
        let a = AcdNet::new(cfg).unwrap();
        assert!(AcdNet::from_params(ModelConfig { variant: Variant::DirectOnly, ..cfg }, &a.params).is_err());
        let mut other = data.vocab.clone();
        other.medications += 1;
        assert!(cfg.check_vocab(&other, data.graphs.atom_vocab).is_err());
        assert!(cfg.check_vocab(&data.vocab, data.graphs.atom_vocab).is_ok());
    }
}
