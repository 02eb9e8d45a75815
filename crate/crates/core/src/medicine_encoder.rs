//! Medicine representation: base embeddings, graph convolutions over the
//! co-prescription and interaction graphs, molecular GCN + GAT encodings,
//! and their fusion into one matrix with a row per medicine.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ehr::{Adjacency, KnowledgeGraphs};
use crate::error::{contract, Result};
use crate::nn::{Init, Linear};
use crate::sparse::CsrMatrix;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamId, Tensor};

/// LeakyReLU slope inside graph attention scores.
pub const GAT_SLOPE: f64 = 0.2;

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &Adjacency) -> CsrMatrix {
    let n = a.size();
    let degree: Vec<f64> = (0..n).map(|i| (a.neighbors(i).count() + 1) as f64).collect();
    let mut dense = vec![0.0; n * n];
    for i in 0..n {
        dense[i * n + i] = 1.0 / degree[i];
        for j in a.neighbors(i) {
            dense[i * n + j] = 1.0 / libm::sqrt(degree[i] * degree[j]);
        }
    }
    CsrMatrix::from_dense(n, n, &dense).expect("square dense buffer")
}

/// Validating form of [`normalize_adjacency`] for a raw row-major 0/1 matrix.
pub fn normalize_dense(n: usize, dense: &[f64]) -> Result<CsrMatrix> {
    Ok(normalize_adjacency(&Adjacency::from_dense(n, dense)?))
}

/// Sparsity pattern of `A + I` with unit values.
pub fn self_loop_pattern(a: &Adjacency) -> CsrMatrix {
    let n = a.size();
    let mut dense = vec![0.0; n * n];
    for i in 0..n {
        dense[i * n + i] = 1.0;
        for j in a.neighbors(i) {
            dense[i * n + j] = 1.0;
        }
    }
    CsrMatrix::from_dense(n, n, &dense).expect("square dense buffer")
}

/// Two-stage graph convolution `A σ(A H W1) W2` with ReLU as `σ`. When `h`
/// is `None` the node features are the identity, so the first stage is
/// `A W1`.
pub fn gcn_encode(tape: &mut Tape<'_>, a: &Arc<CsrMatrix>, h: Option<Var>, w1: Var, w2: Var) -> Result<Var> {
    let hw = match h {
        Some(h) => tape.matmul(h, w1)?,
        None => w1,
    };
    let x = tape.spmm(a, hw)?;
    let x = tape.relu(x);
    let x = tape.spmm(a, x)?;
    tape.matmul(x, w2)
}

/// Learnable weights of one graph attention layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatParams {
    pub weight: ParamId,
    /// Per-head source and target halves of the attention vector, laid out
    /// as `heads` consecutive blocks of `dim / heads`.
    pub attn_src: ParamId,
    pub attn_dst: ParamId,
    pub heads: usize,
}

impl GatParams {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        init.scoped(name, |i| {
            let weight = i.xavier("weight", dim, dim)?;
            let src = i.xavier("attn_src", 1, dim)?;
            let dst = i.xavier("attn_dst", 1, dim)?;
            Ok(Self {
                weight,
                attn_src: src,
                attn_dst: dst,
                heads,
            })
        })
    }
}

/// `[dim × heads]` 0/1 matrix summing each head's column block.
pub fn head_groups(dim: usize, heads: usize) -> Tensor {
    let dh = dim / heads;
    let mut g = vec![0.0; dim * heads];
    for c in 0..dim {
        g[c * heads + c / dh] = 1.0;
    }
    Tensor::new([dim, heads], g).expect("nonzero head grouping")
}

/// Multi-head graph attention over `pattern` (which must include self-loops);
/// head outputs are concatenated and no output activation is applied.
pub fn gat_layer(tape: &mut Tape<'_>, h: Var, pattern: &Arc<CsrMatrix>, params: &GatParams, groups: Var) -> Result<Var> {
    let w = tape.param(params.weight);
    let wh = tape.matmul(h, w)?;
    let a_src = tape.param(params.attn_src);
    let a_dst = tape.param(params.attn_dst);
    let dim = tape.shape(a_src)[1];
    let a_src = tape.reshape(a_src, &[dim])?;
    let a_dst = tape.reshape(a_dst, &[dim])?;
    let s = tape.mul(wh, a_src)?;
    let src = tape.matmul(s, groups)?;
    let d = tape.mul(wh, a_dst)?;
    let dst = tape.matmul(d, groups)?;
    tape.graph_attention(wh, src, dst, params.heads, GAT_SLOPE, pattern)
}

/// Mean over the rows of `h`.
pub fn readout(tape: &mut Tape<'_>, h: Var) -> Result<Var> {
    tape.mean_axis(h, 0)
}

/// Which medicine blocks are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MedicineEncoderOptions {
    /// Co-prescription and interaction graph encodings.
    pub graphs: bool,
    pub molecules: bool,
}

impl Default for MedicineEncoderOptions {
    fn default() -> Self {
        Self {
            graphs: true,
            molecules: true,
        }
    }
}

/// Constant graph structure, precomputed once per dataset.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub medications: usize,
    pub ehr: Arc<CsrMatrix>,
    pub ddi: Arc<CsrMatrix>,
    /// Block-diagonal normalised bond matrix over all atoms.
    pub atoms: Arc<CsrMatrix>,
    /// Block-diagonal `A + I` pattern for attention.
    pub atom_pattern: Arc<CsrMatrix>,
    /// `[medications × atoms]` averaging matrix.
    pub pooling: Arc<CsrMatrix>,
    pub atom_types: Vec<usize>,
    pub atom_vocab: usize,
}

impl GraphContext {
    pub fn new(graphs: &KnowledgeGraphs) -> Result<Self> {
        let m = graphs.molecules.len();
        if graphs.ehr.size() != m || graphs.ddi.size() != m {
            return Err(contract(
                "GraphContext",
                alloc::format!(
                    "graph sizes {} / {} disagree with {m} molecules",
                    graphs.ehr.size(),
                    graphs.ddi.size()
                ),
            ));
        }
        let norm: Vec<CsrMatrix> = graphs.molecules.iter().map(|g| normalize_adjacency(&g.bonds)).collect();
        let pats: Vec<CsrMatrix> = graphs.molecules.iter().map(|g| self_loop_pattern(&g.bonds)).collect();
        let total: usize = graphs.molecules.iter().map(|g| g.num_atoms()).sum();
        let mut pool = vec![0.0; m * total];
        let mut off = 0;
        for (i, g) in graphs.molecules.iter().enumerate() {
            let n = g.num_atoms();
            for a in 0..n {
                pool[i * total + off + a] = 1.0 / n as f64;
            }
            off += n;
        }
        Ok(Self {
            medications: m,
            ehr: Arc::new(normalize_adjacency(&graphs.ehr)),
            ddi: Arc::new(normalize_adjacency(&graphs.ddi)),
            atoms: Arc::new(CsrMatrix::block_diagonal(&norm)),
            atom_pattern: Arc::new(CsrMatrix::block_diagonal(&pats)),
            pooling: Arc::new(CsrMatrix::from_dense(m, total, &pool)?),
            atom_types: graphs.molecules.iter().flat_map(|g| g.atom_types.iter().copied()).collect(),
            atom_vocab: graphs.atom_vocab,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct GcnParams {
    w1: ParamId,
    w2: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct MoleculeParams {
    atom_embedding: ParamId,
    gcn: GcnParams,
    gat: GatParams,
}

/// The medicine blocks and their fusion, each `[medications × dim]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MedicineMatrix {
    pub base: Var,
    pub ehr: Option<Var>,
    pub ddi: Option<Var>,
    pub molecules: Option<Var>,
    pub fused: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedicineEncoder {
    pub dim: usize,
    pub options: MedicineEncoderOptions,
    base: ParamId,
    graphs: Option<(GcnParams, GcnParams)>,
    molecules: Option<MoleculeParams>,
    fusion: Linear,
    heads: usize,
}

impl MedicineEncoder {
    /// `base` is the medication embedding table shared with the patient side.
    pub fn new(
        init: &mut Init<'_>,
        base: ParamId,
        medications: usize,
        atom_vocab: usize,
        dim: usize,
        heads: usize,
        options: MedicineEncoderOptions,
    ) -> Result<Self> {
        init.scoped("medicine", |i| {
            let gcn = |i: &mut Init<'_>, name: &str, rows: usize| {
                i.scoped(name, |i| {
                    Ok(GcnParams {
                        w1: i.xavier("w1", rows, dim)?,
                        w2: i.xavier("w2", dim, dim)?,
                    })
                })
            };
            let graphs = if options.graphs {
                Some((gcn(i, "ehr", medications)?, gcn(i, "ddi", medications)?))
            } else {
                None
            };
            let molecules = if options.molecules {
                Some(i.scoped("molecule", |i| {
                    Ok(MoleculeParams {
                        atom_embedding: i.xavier("atom_embedding", atom_vocab, dim)?,
                        gcn: gcn(i, "gcn", dim)?,
                        gat: GatParams::new(i, "gat", dim, heads)?,
                    })
                })?)
            } else {
                None
            };
            let blocks = 1 + 2 * usize::from(options.graphs) + usize::from(options.molecules);
            Ok(Self {
                dim,
                options,
                base,
                graphs,
                molecules,
                fusion: Linear::new(i, "fusion", blocks * dim, dim)?,
                heads,
            })
        })
    }

    /// Molecular block only: GCN, GAT and mean readout per molecule.
    pub fn encode_molecules(&self, tape: &mut Tape<'_>, ctx: &GraphContext) -> Result<Option<Var>> {
        let Some(mol) = &self.molecules else { return Ok(None) };
        let table = tape.param(mol.atom_embedding);
        let w1 = tape.param(mol.gcn.w1);
        let w2 = tape.param(mol.gcn.w2);
        // Row lookup commutes with the right product, so project the small
        // type table once instead of every atom.
        let projected = tape.matmul(table, w1)?;
        let hw = tape.gather(projected, &ctx.atom_types)?;
        let h = gcn_encode(tape, &ctx.atoms, None, hw, w2)?;
        let groups = tape.constant(head_groups(self.dim, self.heads));
        let h = gat_layer(tape, h, &ctx.atom_pattern, &mol.gat, groups)?;
        Ok(Some(tape.spmm(&ctx.pooling, h)?))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, ctx: &GraphContext) -> Result<MedicineMatrix> {
        let base = tape.param(self.base);
        if tape.shape(base) != [ctx.medications, self.dim] {
            return Err(crate::error::shape_err("medicine_matrix", tape.shape(base), &[ctx.medications, self.dim]));
        }
        let mut blocks = vec![base];
        let (mut ehr, mut ddi) = (None, None);
        if let Some((e, d)) = &self.graphs {
            let (w1, w2) = (tape.param(e.w1), tape.param(e.w2));
            let me = gcn_encode(tape, &ctx.ehr, None, w1, w2)?;
            let (w1, w2) = (tape.param(d.w1), tape.param(d.w2));
            let md = gcn_encode(tape, &ctx.ddi, None, w1, w2)?;
            blocks.extend([me, md]);
            ehr = Some(me);
            ddi = Some(md);
        }
        let molecules = self.encode_molecules(tape, ctx)?;
        blocks.extend(molecules);
        let cat = if blocks.len() == 1 { base } else { tape.concat(&blocks, 1)? };
        let fused = self.fusion.forward(tape, cat)?;
        let fused = tape.relu(fused);
        Ok(MedicineMatrix {
            base,
            ehr,
            ddi,
            molecules,
            fused,
        })
    }
}
