//! Patient representation: per-visit code embeddings, local attention
//! pooling, and global sequence encoding over visits and medication history.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ehr::Visit;
use crate::error::{Error, Result};
use crate::nn::{Dropout, Init, LayerNorm, Linear};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, Tensor};

/// Shape of the attention and sequence encoders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Hidden width of the feedforward block; `0` means `4 * dim`.
    pub ff_width: usize,
    pub positional_encoding: bool,
    pub dropout: f64,
    pub layernorm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 8,
            layers: 6,
            ff_width: 0,
            positional_encoding: true,
            dropout: 0.0,
            layernorm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn ff_hidden(&self) -> usize {
        if self.ff_width == 0 {
            4 * self.dim
        } else {
            self.ff_width
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(Error::Config("layernorm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Which recurrent or attention model runs over visit sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    #[default]
    Transformer,
    Gru,
    Rnn,
}

/// How a set of rows is collapsed into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    #[default]
    Attention,
    Mean,
}

/// Which sequences feed the final health representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryInputs {
    /// Local visit vectors stacked with the encoded average sequence.
    #[default]
    Both,
    LocalOnly,
    GlobalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatientEncoderOptions {
    pub sequence: SequenceKind,
    pub pool: PoolKind,
    pub summary: SummaryInputs,
    /// Without it no medication-history representation is produced.
    pub medication_history: bool,
}

impl PatientEncoderOptions {
    pub fn full() -> Self {
        Self {
            medication_history: true,
            ..Self::default()
        }
    }
}

/// Row-wise embedding tables for diagnoses, procedures and medications.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingTables {
    pub diagnoses: ParamId,
    pub procedures: ParamId,
    pub medications: ParamId,
}

impl EmbeddingTables {
    pub fn new(init: &mut Init<'_>, sizes: [usize; 3], dim: usize) -> Result<Self> {
        init.scoped("embedding", |i| {
            Ok(Self {
                diagnoses: i.xavier("diagnoses", sizes[0], dim)?,
                procedures: i.xavier("procedures", sizes[1], dim)?,
                medications: i.xavier("medications", sizes[2], dim)?,
            })
        })
    }
}

/// Looks up and concatenates the code embeddings of one visit and returns
/// them with their mean row. Medications are skipped unless `with_meds`.
pub fn embed_visit(tape: &mut Tape<'_>, tables: &EmbeddingTables, visit: &Visit, with_meds: bool) -> Result<(Var, Var)> {
    let mut blocks = Vec::with_capacity(3);
    let mut push = |tape: &mut Tape<'_>, table: ParamId, codes: &alloc::collections::BTreeSet<usize>| -> Result<()> {
        if codes.is_empty() {
            return Ok(());
        }
        let ix: Vec<usize> = codes.iter().copied().collect();
        let t = tape.param(table);
        blocks.push(tape.gather(t, &ix)?);
        Ok(())
    };
    push(tape, tables.diagnoses, &visit.diagnoses)?;
    push(tape, tables.procedures, &visit.procedures)?;
    if with_meds {
        push(tape, tables.medications, &visit.medications)?;
    }
    if blocks.is_empty() {
        return Err(Error::EmptySequence("visit has no codes to embed"));
    }
    let e = if blocks.len() == 1 { blocks[0] } else { tape.concat(&blocks, 0)? };
    let ave = tape.mean_axis(e, 0)?;
    Ok((e, ave))
}

/// Additive attention pooling `softmax(tanh(v W1) W2)^T v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionPool {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl AttentionPool {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Result<Self> {
        init.scoped(name, |i| {
            Ok(Self {
                w1: i.xavier("w1", dim, dim)?,
                w2: i.xavier("w2", dim, 1)?,
            })
        })
    }

    /// Pools the rows of `v` (`[L × dim]`). Returns the pooled vector and,
    /// in attention mode, the weight vector node.
    pub fn forward(&self, tape: &mut Tape<'_>, v: Var, kind: PoolKind) -> Result<(Var, Option<Var>)> {
        let rows = match tape.shape(v) {
            [0, _] => return Err(Error::EmptySequence("attention pool")),
            [l, _] => *l,
            sh => return Err(crate::error::shape_err("attention_pool", sh, &[0, 0])),
        };
        if kind == PoolKind::Mean {
            return Ok((tape.mean_axis(v, 0)?, None));
        }
        let w1 = tape.param(self.w1);
        let w2 = tape.param(self.w2);
        let h = tape.matmul(v, w1)?;
        let h = tape.tanh(h);
        let logits = tape.matmul(h, w2)?;
        let logits = tape.reshape(logits, &[rows])?;
        let a = tape.softmax(logits)?;
        Ok((tape.matmul(a, v)?, Some(a)))
    }
}

/// Sinusoidal position table `[len × dim]`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) * 2;
            let angle = pos as f64 / libm::pow(10000.0, pair as f64 / dim as f64);
            data[pos * dim + i] = if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) };
        }
    }
    Tensor::new([len, dim], data).expect("nonzero positional table")
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

/// Output of one sequence-encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub out: Var,
    /// Multi-head attention nodes, one per layer (empty for recurrent models).
    pub attention: Vec<Var>,
}

/// Post-norm bidirectional Transformer whose result is the normalised sum
/// of the input and every layer output.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerEncoder {
    cfg: EncoderConfig,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

impl TransformerEncoder {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let eps = cfg.layernorm_eps;
        init.scoped(name, |i| {
            let layers = (0..cfg.layers)
                .map(|l| {
                    i.scoped(&format!("layer{l}"), |i| {
                        Ok(EncoderLayer {
                            q: Linear::new(i, "q", d, d)?,
                            k: Linear::new(i, "k", d, d)?,
                            v: Linear::new(i, "v", d, d)?,
                            o: Linear::new(i, "o", d, d)?,
                            norm1: LayerNorm::new(i, "norm1", d, eps)?,
                            ff1: Linear::new(i, "ff1", d, cfg.ff_hidden())?,
                            ff2: Linear::new(i, "ff2", cfg.ff_hidden(), d)?,
                            norm2: LayerNorm::new(i, "norm2", d, eps)?,
                        })
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Self {
                cfg: *cfg,
                layers,
                final_norm: LayerNorm::new(i, "final_norm", d, eps)?,
            })
        })
    }

    /// Parameters of each layer's attention output projection.
    pub fn output_projections(&self) -> impl Iterator<Item = (ParamId, ParamId)> + '_ {
        self.layers.iter().map(|l| (l.o.weight, l.o.bias))
    }

    /// Parameters of each layer's second feedforward map.
    pub fn feedforward_outputs(&self) -> impl Iterator<Item = (ParamId, ParamId)> + '_ {
        self.layers.iter().map(|l| (l.ff2.weight, l.ff2.bias))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, seq: Var, dropout: &mut Dropout) -> Result<Encoded> {
        let (s, d) = match tape.shape(seq) {
            [s, d] if *d == self.cfg.dim => (*s, *d),
            sh => return Err(crate::error::shape_err("transformer_encoder", sh, &[0, self.cfg.dim])),
        };
        let x0 = if self.cfg.positional_encoding {
            let pe = tape.constant(positional_encoding(s, d));
            tape.add(seq, pe)?
        } else {
            seq
        };
        let mut x = x0;
        let mut acc = x0;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let q = layer.q.forward(tape, x)?;
            let k = layer.k.forward(tape, x)?;
            let v = layer.v.forward(tape, x)?;
            let att = tape.multi_head_attention(q, k, v, self.cfg.heads)?;
            attention.push(att);
            let a = layer.o.forward(tape, att)?;
            let a = dropout.apply(tape, a)?;
            let z = tape.add(a, x)?;
            let z = layer.norm1.forward(tape, z)?;
            let f = layer.ff1.forward(tape, z)?;
            let f = tape.relu(f);
            let f = layer.ff2.forward(tape, f)?;
            let f = dropout.apply(tape, f)?;
            let f = tape.add(f, z)?;
            let f = layer.norm2.forward(tape, f)?;
            acc = tape.add(acc, f)?;
            x = f;
        }
        let out = self.final_norm.forward(tape, acc)?;
        Ok(Encoded { out, attention })
    }
}

/// Single-layer GRU or Elman RNN whose final hidden state is repeated at
/// every position.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentEncoder {
    gated: bool,
    dim: usize,
    /// `(input map, hidden map)` per gate; one pair for the plain RNN,
    /// update/reset/candidate for the GRU.
    gates: Vec<(Linear, ParamId)>,
}

impl RecurrentEncoder {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, gated: bool) -> Result<Self> {
        let names: &[&str] = if gated { &["update", "reset", "candidate"] } else { &["cell"] };
        init.scoped(name, |i| {
            let gates = names
                .iter()
                .map(|g| i.scoped(g, |i| Ok((Linear::new(i, "input", dim, dim)?, i.xavier("hidden", dim, dim)?))))
                .collect::<Result<Vec<_>>>()?;
            Ok(Self { gated, dim, gates })
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, seq: Var) -> Result<Encoded> {
        let s = match tape.shape(seq) {
            [s, d] if *d == self.dim => *s,
            sh => return Err(crate::error::shape_err("recurrent_encoder", sh, &[0, self.dim])),
        };
        let projected = self
            .gates
            .iter()
            .map(|(lin, _)| lin.forward(tape, seq))
            .collect::<Result<Vec<_>>>()?;
        let hidden: Vec<Var> = self.gates.iter().map(|&(_, u)| tape.param(u)).collect();
        let mut h = tape.constant(Tensor::zeros([self.dim]));
        for t in 0..s {
            let xs = projected
                .iter()
                .map(|&p| tape.row(p, t))
                .collect::<Result<Vec<_>>>()?;
            h = if self.gated {
                let hz = tape.matmul(h, hidden[0])?;
                let z = tape.add(xs[0], hz)?;
                let z = tape.sigmoid(z);
                let hr = tape.matmul(h, hidden[1])?;
                let r = tape.add(xs[1], hr)?;
                let r = tape.sigmoid(r);
                let rh = tape.mul(r, h)?;
                let hn = tape.matmul(rh, hidden[2])?;
                let n = tape.add(xs[2], hn)?;
                let n = tape.tanh(n);
                let diff = tape.sub(h, n)?;
                let gated = tape.mul(z, diff)?;
                tape.add(n, gated)?
            } else {
                let hh = tape.matmul(h, hidden[0])?;
                let a = tape.add(xs[0], hh)?;
                tape.tanh(a)
            };
        }
        let rows = vec![h; s];
        Ok(Encoded {
            out: tape.stack_rows(&rows)?,
            attention: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SequenceEncoder {
    Transformer(TransformerEncoder),
    Recurrent(RecurrentEncoder),
}

impl SequenceEncoder {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &EncoderConfig, kind: SequenceKind) -> Result<Self> {
        Ok(match kind {
            SequenceKind::Transformer => Self::Transformer(TransformerEncoder::new(init, name, cfg)?),
            SequenceKind::Gru => Self::Recurrent(RecurrentEncoder::new(init, name, cfg.dim, true)?),
            SequenceKind::Rnn => Self::Recurrent(RecurrentEncoder::new(init, name, cfg.dim, false)?),
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, seq: Var, dropout: &mut Dropout) -> Result<Encoded> {
        match self {
            Self::Transformer(t) => t.forward(tape, seq, dropout),
            Self::Recurrent(r) => r.forward(tape, seq),
        }
    }
}

/// Every intermediate of one patient encoding up to a current visit.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientState {
    /// Visit count `T` including the current visit.
    pub visits: usize,
    pub visit_codes: Vec<Var>,
    pub visit_means: Vec<Var>,
    pub visit_local: Vec<Var>,
    pub seq_local: Var,
    pub seq_mean: Var,
    pub seq_global: Var,
    /// `T - 1` rows; absent for a first visit or without medication history.
    pub seq_meds: Option<Var>,
    pub seq_meds_global: Option<Var>,
    pub r_p: Var,
    /// Absent only when medication history is disabled.
    pub r_m: Option<Var>,
    /// Softmax weight nodes of every attention pool used.
    pub pool_weights: Vec<Var>,
    /// Multi-head attention nodes of every encoder layer used.
    pub encoder_attention: Vec<Var>,
}

struct VisitFeatures {
    codes: Var,
    mean: Var,
    local: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientEncoder {
    pub cfg: EncoderConfig,
    pub options: PatientEncoderOptions,
    pub tables: EmbeddingTables,
    visit_pool: AttentionPool,
    patient_pool: AttentionPool,
    visit_seq: SequenceEncoder,
    med: Option<(AttentionPool, SequenceEncoder, ParamId)>,
}

impl PatientEncoder {
    pub fn new(
        init: &mut Init<'_>,
        tables: EmbeddingTables,
        cfg: &EncoderConfig,
        options: PatientEncoderOptions,
    ) -> Result<Self> {
        cfg.validate()?;
        init.scoped("patient", |i| {
            let visit_pool = AttentionPool::new(i, "visit_pool", cfg.dim)?;
            let patient_pool = AttentionPool::new(i, "patient_pool", cfg.dim)?;
            let visit_seq = SequenceEncoder::new(i, "visit_encoder", cfg, options.sequence)?;
            let med = if options.medication_history {
                let pool = AttentionPool::new(i, "med_pool", cfg.dim)?;
                let enc = SequenceEncoder::new(i, "med_encoder", cfg, options.sequence)?;
                let none = i.xavier("no_history", 1, cfg.dim)?;
                Some((pool, enc, none))
            } else {
                None
            };
            Ok(Self {
                cfg: *cfg,
                options,
                tables,
                visit_pool,
                patient_pool,
                visit_seq,
                med,
            })
        })
    }

    /// Learnable stand-in for an empty medication history (`[1 × dim]`).
    pub fn no_history(&self) -> Option<ParamId> {
        self.med.as_ref().map(|m| m.2)
    }

    pub fn visit_encoder(&self) -> &SequenceEncoder {
        &self.visit_seq
    }

    fn features(&self, tape: &mut Tape<'_>, visit: &Visit, with_meds: bool, weights: &mut Vec<Var>) -> Result<VisitFeatures> {
        let (codes, mean) = embed_visit(tape, &self.tables, visit, with_meds)?;
        let (local, w) = self.visit_pool.forward(tape, codes, self.options.pool)?;
        weights.extend(w);
        Ok(VisitFeatures { codes, mean, local })
    }

    fn med_row(&self, tape: &mut Tape<'_>, visit: &Visit, none: ParamId) -> Result<Var> {
        if visit.medications.is_empty() {
            let p = tape.param(none);
            return tape.reshape(p, &[self.cfg.dim]);
        }
        let ix: Vec<usize> = visit.medications.iter().copied().collect();
        let t = tape.param(self.tables.medications);
        let rows = tape.gather(t, &ix)?;
        tape.mean_axis(rows, 0)
    }

    /// Encodes the patient once per visit: entry `t` treats visit `t` as the
    /// current visit (its medications unseen) and visits before it as history.
    pub fn encode_prefixes(&self, tape: &mut Tape<'_>, visits: &[Visit], dropout: &mut Dropout) -> Result<Vec<PatientState>> {
        if visits.is_empty() {
            return Err(Error::EmptySequence("patient has no visits"));
        }
        let n = visits.len();
        let mut shared_weights = Vec::new();
        let history = visits[..n - 1]
            .iter()
            .map(|v| self.features(tape, v, true, &mut shared_weights))
            .collect::<Result<Vec<_>>>()?;
        let med_rows = match &self.med {
            Some((_, _, none)) => visits[..n - 1]
                .iter()
                .map(|v| self.med_row(tape, v, *none))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let mut states = Vec::with_capacity(n);
        for t in 0..n {
            let mut weights = shared_weights.clone();
            let current = self.features(tape, &visits[t], false, &mut weights)?;
            let past = &history[..t];
            let visit_codes: Vec<Var> = past.iter().map(|f| f.codes).chain([current.codes]).collect();
            let visit_means: Vec<Var> = past.iter().map(|f| f.mean).chain([current.mean]).collect();
            let visit_local: Vec<Var> = past.iter().map(|f| f.local).chain([current.local]).collect();
            states.push(self.assemble(tape, visit_codes, visit_means, visit_local, &med_rows[..t.min(med_rows.len())], weights, dropout)?);
        }
        Ok(states)
    }

    /// State for the last visit of `visits`.
    pub fn encode_patient(&self, tape: &mut Tape<'_>, visits: &[Visit], dropout: &mut Dropout) -> Result<PatientState> {
        if visits.is_empty() {
            return Err(Error::EmptySequence("patient has no visits"));
        }
        let n = visits.len();
        let mut weights = Vec::new();
        let mut feats = visits[..n - 1]
            .iter()
            .map(|v| self.features(tape, v, true, &mut weights))
            .collect::<Result<Vec<_>>>()?;
        feats.push(self.features(tape, &visits[n - 1], false, &mut weights)?);
        let med_rows = match &self.med {
            Some((_, _, none)) => visits[..n - 1]
                .iter()
                .map(|v| self.med_row(tape, v, *none))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        self.assemble(
            tape,
            feats.iter().map(|f| f.codes).collect(),
            feats.iter().map(|f| f.mean).collect(),
            feats.iter().map(|f| f.local).collect(),
            &med_rows,
            weights,
            dropout,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        &self,
        tape: &mut Tape<'_>,
        visit_codes: Vec<Var>,
        visit_means: Vec<Var>,
        visit_local: Vec<Var>,
        med_rows: &[Var],
        mut pool_weights: Vec<Var>,
        dropout: &mut Dropout,
    ) -> Result<PatientState> {
        let visits = visit_codes.len();
        let seq_local = tape.stack_rows(&visit_local)?;
        let seq_mean = tape.stack_rows(&visit_means)?;
        let global = self.visit_seq.forward(tape, seq_mean, dropout)?;
        let mut encoder_attention = global.attention;
        let summary_in = match self.options.summary {
            SummaryInputs::Both => tape.concat(&[seq_local, global.out], 0)?,
            SummaryInputs::LocalOnly => seq_local,
            SummaryInputs::GlobalOnly => global.out,
        };
        let (r_p, w) = self.patient_pool.forward(tape, summary_in, self.options.pool)?;
        pool_weights.extend(w);

        let (mut seq_meds, mut seq_meds_global, mut r_m) = (None, None, None);
        if let Some((pool, enc, none)) = &self.med {
            if med_rows.is_empty() {
                let p = tape.param(*none);
                r_m = Some(tape.reshape(p, &[self.cfg.dim])?);
            } else {
                let sm = tape.stack_rows(med_rows)?;
                let enc_out = enc.forward(tape, sm, dropout)?;
                encoder_attention.extend(enc_out.attention);
                let (rm, w) = pool.forward(tape, enc_out.out, self.options.pool)?;
                pool_weights.extend(w);
                seq_meds = Some(sm);
                seq_meds_global = Some(enc_out.out);
                r_m = Some(rm);
            }
        }
        Ok(PatientState {
            visits,
            visit_codes,
            visit_means,
            visit_local,
            seq_local,
            seq_mean,
            seq_global: global.out,
            seq_meds,
            seq_meds_global,
            r_p,
            r_m,
            pool_weights,
            encoder_attention,
        })
    }
}
