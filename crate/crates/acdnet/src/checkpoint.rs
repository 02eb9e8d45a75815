//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes   "ACDNETCK" (model) or "ACDNETRS" (resume state)
//! version  u32
//! length   u64       byte length of the JSON header
//! header   JSON      configuration, parameter manifest, graphs
//! payload  f64 LE    parameter values in manifest order, then (resume
//!                    files only) best parameters and optimiser moments
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so loading and saving again
//! reproduces the file byte for byte.

use std::io::{Read, Write};
use std::path::Path;

use acdnet_core::ehr::{Adjacency, KnowledgeGraphs, Molecule};
use acdnet_core::model::{AcdNet, ModelConfig};
use acdnet_core::optim::{AdamConfig, AdamState};
use acdnet_core::train_eval::{EpochLog, TrainConfig, Trainer};
use acdnet_core::ParamRegistry;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::FormatError;

pub const MODEL_MAGIC: &[u8; 8] = b"ACDNETCK";
pub const RESUME_MAGIC: &[u8; 8] = b"ACDNETRS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredMolecule {
    pub atom_types: Vec<usize>,
    pub bonds: Vec<(usize, usize)>,
}

/// Knowledge graphs the model was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredGraphs {
    pub medications: usize,
    pub atom_vocab: usize,
    pub ehr: Vec<(usize, usize)>,
    pub ddi: Vec<(usize, usize)>,
    pub molecules: Vec<StoredMolecule>,
}

impl StoredGraphs {
    pub fn from_graphs(g: &KnowledgeGraphs) -> Self {
        Self {
            medications: g.ehr.size(),
            atom_vocab: g.atom_vocab,
            ehr: g.ehr.edges().collect(),
            ddi: g.ddi.edges().collect(),
            molecules: g
                .molecules
                .iter()
                .map(|m| StoredMolecule {
                    atom_types: m.atom_types.clone(),
                    bonds: m.bonds.edges().collect(),
                })
                .collect(),
        }
    }

    pub fn to_graphs(&self) -> Result<KnowledgeGraphs, FormatError> {
        let bad = |e: acdnet_core::Error| FormatError::checkpoint(format!("stored graphs: {e}"));
        let molecules = self
            .molecules
            .iter()
            .map(|m| Molecule::new(m.atom_types.clone(), Adjacency::from_edges(m.atom_types.len(), m.bonds.iter().copied())?))
            .collect::<Result<Vec<_>, _>>()
            .map_err(bad)?;
        Ok(KnowledgeGraphs {
            ehr: Adjacency::from_edges(self.medications, self.ehr.iter().copied()).map_err(bad)?,
            ddi: Adjacency::from_edges(self.medications, self.ddi.iter().copied()).map_err(bad)?,
            molecules,
            atom_vocab: self.atom_vocab,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Where the stored parameters came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub epochs_run: usize,
    pub selected_epoch: Option<usize>,
    pub val_jaccard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model: ModelConfig,
    pub run: RunConfig,
    pub graphs: StoredGraphs,
    pub provenance: Option<Provenance>,
    pub tensors: Vec<TensorEntry>,
}

/// A trained model with everything needed to score new patients.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: AcdNet,
    pub run: RunConfig,
    pub graphs: KnowledgeGraphs,
    pub provenance: Option<Provenance>,
}

fn manifest(params: &ParamRegistry) -> Vec<TensorEntry> {
    params
        .iter()
        .map(|(_, name, t)| TensorEntry {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

fn write_frame(out: &mut impl Write, magic: &[u8; 8], header: &impl Serialize) -> std::io::Result<()> {
    let json = serde_json::to_vec(header)?;
    out.write_all(magic)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)
}

fn write_values(out: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

fn write_params(out: &mut impl Write, params: &ParamRegistry) -> std::io::Result<()> {
    for (_, _, t) in params.iter() {
        write_values(out, t.data())?;
    }
    Ok(())
}

/// Cursor over an in-memory file.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn values(&mut self, n: usize, what: &str) -> Result<Vec<f64>, FormatError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| FormatError::checkpoint("size overflow"))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn frame<H: for<'de> Deserialize<'de>>(&mut self, magic: &[u8; 8]) -> Result<H, FormatError> {
        let m = self.take(8, "magic")?;
        if m != magic {
            return Err(FormatError::checkpoint(format!(
                "not a {} file (magic {:?})",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(m)
            )));
        }
        let version = self.u32("version")?;
        if version != VERSION {
            return Err(FormatError::checkpoint(format!("unsupported version {version}")));
        }
        let len = self.u64("header length")? as usize;
        let json = self.take(len, "header")?;
        serde_json::from_slice(json).map_err(|e| FormatError::checkpoint(format!("header: {e}")))
    }

    fn params_into(&mut self, params: &mut ParamRegistry, what: &str) -> Result<(), FormatError> {
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let n = params.get(id).len();
            let vals = self.values(n, what)?;
            params.get_mut(id).data_mut().copy_from_slice(&vals);
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), FormatError> {
        if self.pos != self.bytes.len() {
            return Err(FormatError::checkpoint(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// Rebuilds the model skeleton from `config` and checks that the stored
/// manifest matches it exactly.
fn skeleton(config: ModelConfig, tensors: &[TensorEntry]) -> Result<AcdNet, FormatError> {
    let model = AcdNet::new(config).map_err(|e| FormatError::checkpoint(format!("model config: {e}")))?;
    let expected = manifest(&model.params);
    if expected.len() != tensors.len() {
        return Err(FormatError::checkpoint(format!(
            "{} stored tensors, model has {}",
            tensors.len(),
            expected.len()
        )));
    }
    if let Some((e, s)) = expected.iter().zip(tensors).find(|(e, s)| e != s) {
        return Err(FormatError::checkpoint(format!(
            "tensor `{}` {:?} does not match stored `{}` {:?}",
            e.name, e.shape, s.name, s.shape
        )));
    }
    Ok(model)
}

impl Checkpoint {
    fn header(&self) -> Header {
        Header {
            model: self.model.config,
            run: self.run.clone(),
            graphs: StoredGraphs::from_graphs(&self.graphs),
            provenance: self.provenance,
            tensors: manifest(&self.model.params),
        }
    }

    pub fn write(&self, out: &mut impl Write) -> std::io::Result<()> {
        write_frame(out, MODEL_MAGIC, &self.header())?;
        write_params(out, &self.model.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let header: Header = r.frame(MODEL_MAGIC)?;
        let mut model = skeleton(header.model, &header.tensors)?;
        r.params_into(&mut model.params, "parameters")?;
        r.finish()?;
        let graphs = header.graphs.to_graphs()?;
        Ok(Self {
            model,
            run: header.run,
            graphs,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let bytes = std::fs::read(path).map_err(|e| FormatError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}

/// Writes to a sibling temporary file and renames, so a crash never
/// leaves a half-written checkpoint behind.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp).map_err(|e| FormatError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| FormatError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| FormatError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResumeHeader {
    model: ModelConfig,
    run: RunConfig,
    graphs: StoredGraphs,
    tensors: Vec<TensorEntry>,
    train: TrainConfig,
    adam: AdamConfig,
    adam_step: u64,
    epoch: usize,
    logs: Vec<EpochLog>,
    best: Option<(usize, f64)>,
}

/// Everything needed to continue an interrupted training run.
#[derive(Debug, Clone)]
pub struct ResumeState {
    pub trainer: Trainer,
    pub run: RunConfig,
    pub graphs: KnowledgeGraphs,
}

/// Path of the resume file kept next to a checkpoint.
pub fn resume_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".resume");
    s.into()
}

impl ResumeState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let t = &self.trainer;
        let header = ResumeHeader {
            model: t.model.config,
            run: self.run.clone(),
            graphs: StoredGraphs::from_graphs(&self.graphs),
            tensors: manifest(&t.model.params),
            train: t.config,
            adam: t.optimizer.config,
            adam_step: t.optimizer.state().step,
            epoch: t.epoch,
            logs: t.logs.clone(),
            best: t.best.as_ref().map(|(e, j, _)| (*e, *j)),
        };
        let mut buf = Vec::new();
        let io = |r: std::io::Result<()>| r.expect("writing to memory");
        io(write_frame(&mut buf, RESUME_MAGIC, &header));
        io(write_params(&mut buf, &t.model.params));
        if let Some((_, _, best)) = &t.best {
            io(write_params(&mut buf, best));
        }
        let moments = &t.optimizer.state().moments;
        // Slots past the end of `moments` have not been stepped yet.
        for i in 0..t.model.params.len() {
            match moments.get(i).and_then(Option::as_ref) {
                Some((m, v)) => {
                    buf.push(1);
                    io(write_values(&mut buf, m));
                    io(write_values(&mut buf, v));
                }
                None => buf.push(0),
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let h: ResumeHeader = r.frame(RESUME_MAGIC)?;
        let mut model = skeleton(h.model, &h.tensors)?;
        r.params_into(&mut model.params, "parameters")?;
        let best = match h.best {
            Some((epoch, score)) => {
                let mut params = model.params.clone();
                r.params_into(&mut params, "best parameters")?;
                Some((epoch, score, params))
            }
            None => None,
        };
        let mut moments = Vec::with_capacity(model.params.len());
        for (_, name, t) in model.params.iter() {
            moments.push(match r.u8("moment flag")? {
                0 => None,
                1 => Some((r.values(t.len(), name)?, r.values(t.len(), name)?)),
                f => return Err(FormatError::checkpoint(format!("bad moment flag {f} for `{name}`"))),
            });
        }
        r.finish()?;
        let adam = AdamState {
            step: h.adam_step,
            moments,
        };
        let mut trainer = Trainer::resume(model, h.train, adam, h.epoch, h.logs, best)
            .map_err(|e| FormatError::checkpoint(format!("training state: {e}")))?;
        trainer.optimizer.config = h.adam;
        Ok(Self {
            trainer,
            run: h.run,
            graphs: h.graphs.to_graphs()?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| FormatError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}
