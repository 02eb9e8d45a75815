//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Node
//! values are owned by the tape, except parameter leaves which borrow the
//! [`ParamRegistry`] they came from, so building a graph never copies weights.
//! [`Tape::backward`] walks the tape in reverse and returns [`Gradients`],
//! which can then be folded into the registry.
//!
//! Broadcasting is limited to tensor-with-scalar and matrix-with-row.

use alloc::borrow::Cow;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, shape_err, Error, Result};
use crate::sparse::CsrMatrix;
use crate::tensor::{numel, ParamId, ParamRegistry, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var, bc: Bcast },
    Mul { a: Var, b: Var, bc: Bcast },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Tanh(Var),
    Relu(Var),
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid(Var),
    Ln(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
    Gather { x: Var, indices: Vec<usize> },
    Cosine {
        a: Var,
        b: Var,
        norm_a: f64,
        a_clamped: bool,
        norm_b: Vec<f64>,
        b_clamped: Vec<bool>,
    },
    OuterAdd { a: Var, b: Var },
    Spmm { s: Arc<CsrMatrix>, x: Var },
    MultiHead {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Gat {
        wh: Var,
        src: Var,
        dst: Var,
        heads: usize,
        slope: f64,
        pattern: Arc<CsrMatrix>,
        alpha: Vec<f64>,
        pre: Vec<f64>,
    },
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<'p> {
    params: Option<&'p ParamRegistry>,
    param_nodes: Vec<Option<Var>>,
    nodes: Vec<Node<'p>>,
    corrupt_matmul: bool,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    /// A tape with no parameter registry attached.
    pub fn new() -> Self {
        Tape {
            params: None,
            param_nodes: Vec::new(),
            nodes: Vec::new(),
            corrupt_matmul: false,
        }
    }
}

impl<'p> Tape<'p> {
    pub fn with_params(params: &'p ParamRegistry) -> Self {
        Tape {
            params: Some(params),
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
            corrupt_matmul: false,
        }
    }

    /// Test fixture: perturbs the matmul backward rule so gradient checks
    /// can demonstrate they catch a wrong derivative.
    #[doc(hidden)]
    pub fn corrupt_matmul_backward(mut self, on: bool) -> Self {
        self.corrupt_matmul = on;
        self
    }

    /// Smallest distance of any ReLU, LeakyReLU or clamp input to its
    /// kink; `INFINITY` when the tape has none.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for n in &self.nodes {
            let (x, kinks) = match &n.op {
                Op::Relu(x) | Op::LeakyRelu { x, .. } => (*x, [0.0, 0.0]),
                Op::Clamp { x, lo, hi } => (*x, [*lo, *hi]),
                _ => continue,
            };
            for v in self.nodes[x.0].value.iter() {
                for k in kinks {
                    m = m.min((v - k).abs());
                }
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shapes are valid")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- leaves -------------------------------------------------------

    /// Inserts a tensor, tracking gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn variable(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Leaf borrowing a registry parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let params = self.params.expect("param() needs a registry");
        let t = params.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    // ---- linear algebra -----------------------------------------------

    /// Matrix product. A 1-D left operand is treated as a single row and
    /// yields a 1-D result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, vec_lhs) = match sa {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let n = match sb {
            [k2, n] if *k2 == k => *n,
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let out = gemm(self.value(a), self.value(b), m, k, n);
        let shape = if vec_lhs { vec![n] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = match self.shape(x) {
            [m, n] => (*m, *n),
            s => return Err(shape_err("transpose", s, &[0, 0])),
        };
        let v = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, m], out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Sparse constant times dense: `s · x` where `x` is `[cols × d]`.
    pub fn spmm(&mut self, s: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let (r, d) = match self.shape(x) {
            [r, d] => (*r, *d),
            sh => return Err(shape_err("spmm", &[s.rows(), s.cols()], sh)),
        };
        if r != s.cols() {
            return Err(shape_err("spmm", &[s.rows(), s.cols()], &[r, d]));
        }
        let out = s.mul_dense(self.value(x), d);
        let rg = self.rg(x);
        Ok(self.push(vec![s.rows(), d], out, Op::Spmm { s: s.clone(), x }, rg))
    }

    // ---- elementwise --------------------------------------------------

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if numel(sb) == 1 {
            Ok(Bcast::Scalar)
        } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            Ok(Bcast::Row)
        } else {
            Err(shape_err(op, sa, sb))
        }
    }

    fn binary(&mut self, a: Var, b: Var, bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (self.value(a), self.value(b));
        match bc {
            Bcast::Same => va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect(),
            Bcast::Scalar => va.iter().map(|x| f(*x, vb[0])).collect(),
            Bcast::Row => {
                let n = vb.len();
                va.iter().enumerate().map(|(i, x)| f(*x, vb[i % n])).collect()
            }
        }
    }

    /// `a + b`; `b` may be a scalar or, for matrix `a`, a row vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.bcast("add", a, b)?;
        let out = self.binary(a, b, bc, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b, bc }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.bcast("mul", a, b)?;
        let out = self.binary(a, b, bc, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b, bc }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::AddScalar { x }, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|v| f(*v)).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, libm::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu { x, slope },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, libm::log, Op::Ln(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    // ---- normalisation ------------------------------------------------

    fn last_axis(&self, op: &'static str, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&l) => Ok(l),
            None => Err(shape_err(op, self.shape(x), &[1])),
        }
    }

    /// Softmax along the last axis, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let l = self.last_axis("softmax", x)?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(l) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Softmax(x), rg))
    }

    /// Softmax along the last axis restricted to `mask == true`; masked entries
    /// come out as exactly zero. Every row needs at least one unmasked entry.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let l = self.last_axis("masked_softmax", x)?;
        if mask.len() != self.value(x).len() {
            return Err(shape_err("masked_softmax", self.shape(x), &[mask.len()]));
        }
        let mut out = self.value(x).to_vec();
        for (row, m) in out.chunks_mut(l).zip(mask.chunks(l)) {
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(contract("masked_softmax", "row with every entry masked"));
            }
            let mut sum = 0.0;
            for (v, &keep) in row.iter_mut().zip(m) {
                *v = if keep { libm::exp(*v - max) } else { 0.0 };
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        // Same backward rule as softmax: masked outputs are zero.
        Ok(self.push(shape, out, Op::Softmax(x), rg))
    }

    /// Layer normalisation over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.last_axis("layernorm", x)?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layernorm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- reductions and reshaping ---------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::SumAll(x), rg)
    }

    fn axis_dims(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, Vec<usize>)> {
        match (self.shape(x), axis) {
            ([n], 0) => Ok((1, *n, Vec::new())),
            ([m, n], 0) => Ok((*m, *n, vec![*n])),
            ([m, n], 1) => Ok((*m, *n, vec![*m])),
            (s, _) => Err(contract(op, format!("axis {axis} invalid for shape {s:?}"))),
        }
    }

    fn reduce_axis(&self, x: Var, m: usize, n: usize, axis: usize) -> Vec<f64> {
        let v = self.value(x);
        if axis == 0 && self.shape(x).len() == 2 {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += v[i * n + j];
                }
            }
            out
        } else if axis == 0 {
            vec![v.iter().sum()]
        } else {
            v.chunks(n).map(|r| r.iter().sum()).collect()
        }
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n, shape) = self.axis_dims("sum_axis", x, axis)?;
        let out = self.reduce_axis(x, m, n, axis);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n, shape) = self.axis_dims("mean_axis", x, axis)?;
        let count = if axis == 0 && self.shape(x).len() == 2 { m } else { n };
        let mut out = self.reduce_axis(x, m, n, axis);
        out.iter_mut().for_each(|v| *v /= count as f64);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::MeanAxis { x, axis }, rg))
    }

    /// Concatenation of 1-D tensors (axis 0) or 2-D tensors (axis 0 or 1).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptySequence("concat"))?;
        let s0 = self.shape(first).to_vec();
        let shape = match (s0.len(), axis) {
            (1, 0) => {
                let mut total = 0;
                for &p in parts {
                    match self.shape(p) {
                        [n] => total += n,
                        s => return Err(shape_err("concat", &s0, s)),
                    }
                }
                vec![total]
            }
            (2, 0) | (2, 1) => {
                let keep = 1 - axis;
                let mut total = 0;
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != 2 || s[keep] != s0[keep] {
                        return Err(shape_err("concat", &s0, s));
                    }
                    total += s[axis];
                }
                let mut sh = s0.clone();
                sh[axis] = total;
                sh
            }
            _ => return Err(contract("concat", format!("axis {axis} invalid for shape {s0:?}"))),
        };
        let mut out = Vec::with_capacity(numel(&shape));
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
        } else {
            for r in 0..shape[0] {
                for &p in parts {
                    let c = self.shape(p)[1];
                    out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
                }
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stacks equal-length 1-D tensors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let mut reshaped = Vec::with_capacity(rows.len());
        for &r in rows {
            let n = match self.shape(r) {
                [n] => *n,
                s => return Err(shape_err("stack_rows", s, &[0])),
            };
            reshaped.push(self.reshape(r, &[1, n])?);
        }
        self.concat(&reshaped, 0)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || axis >= s.len() || s.len() > 2 || start + len > s[axis] {
            return Err(contract("slice", format!("[{start}, {start}+{len}) on axis {axis} of {s:?}")));
        }
        let v = self.value(x);
        let (shape, out) = if s.len() == 1 {
            (vec![len], v[start..start + len].to_vec())
        } else if axis == 0 {
            let c = s[1];
            (vec![len, c], v[start * c..(start + len) * c].to_vec())
        } else {
            let c = s[1];
            let mut out = Vec::with_capacity(s[0] * len);
            for r in 0..s[0] {
                out.extend_from_slice(&v[r * c + start..r * c + start + len]);
            }
            (vec![s[0], len], out)
        };
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Slice { x, axis, start }, rg))
    }

    /// Row `i` of a matrix as a 1-D tensor.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let r = self.slice(x, 0, i, 1)?;
        let n = self.shape(r)[1];
        self.reshape(r, &[n])
    }

    /// Selects rows (or entries of a vector) by index; gradients scatter-add.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::EmptySequence("gather"));
        }
        let s = self.shape(x).to_vec();
        let (rows, width) = match s.as_slice() {
            [n] => (*n, 1),
            [n, d] => (*n, *d),
            _ => return Err(shape_err("gather", &s, &[indices.len()])),
        };
        let v = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(Error::OutOfBounds {
                    what: "gather",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&v[i * width..(i + 1) * width]);
        }
        let shape = if s.len() == 1 {
            vec![indices.len()]
        } else {
            vec![indices.len(), width]
        };
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            out,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i][j] = a[i] + b[j]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, n) = match (self.shape(a), self.shape(b)) {
            ([p], [n]) => (*p, *n),
            (sa, sb) => return Err(shape_err("outer_add", sa, sb)),
        };
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(p * n);
        for x in va {
            for y in vb {
                out.push(x + y);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![p, n], out, Op::OuterAdd { a, b }, rg))
    }

    /// Cosine similarity between vector `a` and every row of `b`.
    /// Norms are floored at `eps`; with `eps == 0` a zero norm is an error.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (d, n) = match (self.shape(a), self.shape(b)) {
            ([d], [n, d2]) if d == d2 => (*d, *n),
            (sa, sb) => return Err(shape_err("cosine_rows", sa, sb)),
        };
        let (va, vb) = (self.value(a), self.value(b));
        let raw_a = libm::sqrt(va.iter().map(|x| x * x).sum::<f64>());
        let guard = |norm: f64, what: &str| -> Result<(f64, bool)> {
            if norm > eps {
                Ok((norm, false))
            } else if eps > 0.0 {
                Ok((eps, true))
            } else {
                Err(Error::NumericGuard {
                    op: "cosine_rows",
                    detail: format!("zero norm {what} without eps"),
                })
            }
        };
        let (norm_a, a_clamped) = guard(raw_a, "query")?;
        let mut norm_b = Vec::with_capacity(n);
        let mut b_clamped = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let row = &vb[r * d..(r + 1) * d];
            let raw = libm::sqrt(row.iter().map(|x| x * x).sum::<f64>());
            let (nb, c) = guard(raw, "row")?;
            let dot: f64 = row.iter().zip(va).map(|(x, y)| x * y).sum();
            out.push(dot / (norm_a * nb));
            norm_b.push(nb);
            b_clamped.push(c);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![n],
            out,
            Op::Cosine {
                a,
                b,
                norm_a,
                a_clamped,
                norm_b,
                b_clamped,
            },
            rg,
        ))
    }

    // ---- fused attention kernels ----------------------------------------

    /// Scaled dot-product attention over `heads` column blocks of `q`, `k`,
    /// `v` (each `[S × dim]`), returning the concatenated head outputs.
    /// No mask is applied.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (s, dim) = match self.shape(q) {
            [s, d] => (*s, *d),
            sh => return Err(shape_err("multi_head_attention", sh, &[0, 0])),
        };
        if self.shape(k) != [s, dim] || self.shape(v) != [s, dim] {
            return Err(shape_err("multi_head_attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(contract("multi_head_attention", format!("{dim} not divisible by {heads} heads")));
        }
        let dk = dim / heads;
        let scale = 1.0 / libm::sqrt(dk as f64);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * s * s];
        let mut out = vec![0.0; s * dim];
        for h in 0..heads {
            let off = h * dk;
            let p = &mut probs[h * s * s..(h + 1) * s * s];
            for i in 0..s {
                for j in 0..s {
                    let mut dot = 0.0;
                    for c in 0..dk {
                        dot += qv[i * dim + off + c] * kv[j * dim + off + c];
                    }
                    p[i * s + j] = dot * scale;
                }
                softmax_in_place(&mut p[i * s..(i + 1) * s]);
                for j in 0..s {
                    let w = p[i * s + j];
                    for c in 0..dk {
                        out[i * dim + off + c] += w * vv[j * dim + off + c];
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            vec![s, dim],
            out,
            Op::MultiHead {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Per-head attention probabilities `[heads × S × S]` recorded by a
    /// [`Tape::multi_head_attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], usize)> {
        match &self.nodes[v.0].op {
            Op::MultiHead { probs, heads, .. } => Some((probs, *heads)),
            _ => None,
        }
    }

    /// Graph attention aggregation. `wh` is `[n × dim]` split into `heads`
    /// column blocks; `src`/`dst` are `[n × heads]` per-node score halves.
    /// For each node `u` and each `v` in `pattern`'s row `u`, the logit is
    /// `LeakyReLU(src[u,h] + dst[v,h])`, softmax-normalised over the row.
    pub fn graph_attention(
        &mut self,
        wh: Var,
        src: Var,
        dst: Var,
        heads: usize,
        slope: f64,
        pattern: &Arc<CsrMatrix>,
    ) -> Result<Var> {
        let (n, dim) = match self.shape(wh) {
            [n, d] => (*n, *d),
            sh => return Err(shape_err("graph_attention", sh, &[0, 0])),
        };
        if heads == 0 || dim % heads != 0 {
            return Err(contract("graph_attention", format!("{dim} not divisible by {heads} heads")));
        }
        if self.shape(src) != [n, heads] || self.shape(dst) != [n, heads] {
            return Err(shape_err("graph_attention", &[n, heads], self.shape(src)));
        }
        if pattern.rows() != n || pattern.cols() != n {
            return Err(shape_err("graph_attention", &[n, n], &[pattern.rows(), pattern.cols()]));
        }
        let dh = dim / heads;
        let nnz = pattern.nnz();
        let (whv, sv, dv) = (self.value(wh), self.value(src), self.value(dst));
        let mut alpha = vec![0.0; nnz * heads];
        let mut pre = vec![0.0; nnz * heads];
        let mut out = vec![0.0; n * dim];
        let mut base = 0;
        for u in 0..n {
            let nbrs: Vec<usize> = pattern.row(u).map(|(c, _)| c).collect();
            if nbrs.is_empty() {
                return Err(contract("graph_attention", format!("node {u} has no neighbours")));
            }
            for h in 0..heads {
                let mut logits: Vec<f64> = nbrs
                    .iter()
                    .enumerate()
                    .map(|(e, &v)| {
                        let z = sv[u * heads + h] + dv[v * heads + h];
                        pre[(base + e) * heads + h] = z;
                        if z > 0.0 {
                            z
                        } else {
                            slope * z
                        }
                    })
                    .collect();
                softmax_in_place(&mut logits);
                for (e, &v) in nbrs.iter().enumerate() {
                    let a = logits[e];
                    alpha[(base + e) * heads + h] = a;
                    for c in 0..dh {
                        out[u * dim + h * dh + c] += a * whv[v * dim + h * dh + c];
                    }
                }
            }
            base += nbrs.len();
        }
        let rg = self.rg(wh) || self.rg(src) || self.rg(dst);
        Ok(self.push(
            vec![n, dim],
            out,
            Op::Gat {
                wh,
                src,
                dst,
                heads,
                slope,
                pattern: pattern.clone(),
                alpha,
                pre,
            },
            rg,
        ))
    }

    /// Attention coefficients `[nnz × heads]` (row-major over the pattern)
    /// recorded by a [`Tape::graph_attention`] node.
    pub fn graph_attention_coefficients(&self, v: Var) -> Option<(&[f64], usize)> {
        match &self.nodes[v.0].op {
            Op::Gat { alpha, heads, .. } => Some((alpha, *heads)),
            _ => None,
        }
    }

    // ---- backward -----------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut adj);
            }
            adj[i] = Some(g);
        }
        let params = self
            .param_nodes
            .iter()
            .enumerate()
            .filter_map(|(pid, v)| v.map(|v| (ParamId(pid), v)))
            .collect();
        Ok(Gradients { adj, params })
    }

    fn backprop_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let shp = |v: Var| -> &[usize] { &self.nodes[v.0].shape };
        // Accumulates into the adjoint of `v` if it tracks gradients.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (shp(*a), shp(*b));
                let k = if sa.len() == 1 { sa[0] } else { sa[1] };
                let n = sb[1];
                if k == 0 || n == 0 {
                    return;
                }
                let corrupt = if self.corrupt_matmul { 1.05 } else { 1.0 };
                acc(*a, &mut |ga| {
                    // ga += g · bᵀ, as row updates over the transposed operand
                    let bt = transpose_dense(val(*b), k, n);
                    for (gr, dst) in g.chunks_exact(n).zip(ga.chunks_exact_mut(k)) {
                        for (&x, bt_row) in gr.iter().zip(bt.chunks_exact(k)) {
                            if x == 0.0 {
                                continue;
                            }
                            let x = x * corrupt;
                            for (d, y) in dst.iter_mut().zip(bt_row) {
                                *d += x * y;
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (ar, gr) in val(*a).chunks_exact(k).zip(g.chunks_exact(n)) {
                        for (&x, row) in ar.iter().zip(gb.chunks_exact_mut(n)) {
                            if x == 0.0 {
                                continue;
                            }
                            for (dst, gv) in row.iter_mut().zip(gr) {
                                *dst += x * gv;
                            }
                        }
                    }
                });
            }
            Op::Add { a, b, bc } => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| reduce_bcast(gb, g, *bc, None));
            }
            Op::Mul { a, b, bc } => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| match bc {
                    Bcast::Same => ga.iter_mut().zip(g).zip(bv).for_each(|((d, x), y)| *d += x * y),
                    Bcast::Scalar => ga.iter_mut().zip(g).for_each(|(d, x)| *d += x * bv[0]),
                    Bcast::Row => {
                        let n = bv.len();
                        ga.iter_mut()
                            .zip(g)
                            .enumerate()
                            .for_each(|(j, (d, x))| *d += x * bv[j % n]);
                    }
                });
                acc(*b, &mut |gb| reduce_bcast(gb, g, *bc, Some(av)));
            }
            Op::Scale { x, c } => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v)),
            Op::AddScalar { x } | Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for ((d, gv), y) in gx.iter_mut().zip(g).zip(out.iter()) {
                    *d += gv * (1.0 - y * y);
                }
            }),
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((d, gv), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *d += gv;
                        }
                    }
                })
            }
            Op::LeakyRelu { x, slope } => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((d, gv), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *d += if *xi > 0.0 { *gv } else { slope * gv };
                    }
                })
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((d, gv), y) in gx.iter_mut().zip(g).zip(out.iter()) {
                    *d += gv * y * (1.0 - y);
                }
            }),
            Op::Ln(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((d, gv), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *d += gv / xi;
                    }
                })
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for ((d, gv), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi >= *lo && *xi <= *hi {
                            *d += gv;
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let l = *node.shape.last().unwrap();
                acc(*x, &mut |gx| {
                    for ((dr, gr), yr) in gx.chunks_mut(l).zip(g.chunks(l)).zip(out.chunks(l)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (gv - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *node.shape.last().unwrap();
                let gv = val(*gain);
                acc(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, ((dr, gr), hr)) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let gh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_ghh: f64 = gh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            dr[j] += scale * (d as f64 * gh[j] - sum_gh - hr[j] * sum_ghh);
                        }
                    }
                })
            }
            Op::SumAll(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let s = shp(*x);
                let mean = matches!(node.op, Op::MeanAxis { .. });
                let (m, n) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
                let count = if s.len() == 1 || *axis == 1 { n } else { m };
                let f = if mean { 1.0 / count as f64 } else { 1.0 };
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            let src = if s.len() == 1 {
                                g[0]
                            } else if *axis == 0 {
                                g[j]
                            } else {
                                g[i]
                            };
                            gx[i * n + j] += f * src;
                        }
                    }
                })
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        acc(p, &mut |gp| add_into(gp, &g[off..off + len]));
                        off += len;
                    }
                } else {
                    let rows = node.shape[0];
                    let total = node.shape[1];
                    let mut col = 0;
                    for &p in parts {
                        let c = shp(p)[1];
                        acc(p, &mut |gp| {
                            for r in 0..rows {
                                add_into(
                                    &mut gp[r * c..(r + 1) * c],
                                    &g[r * total + col..r * total + col + c],
                                );
                            }
                        });
                        col += c;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let s = shp(*x);
                acc(*x, &mut |gx| {
                    if s.len() == 1 {
                        add_into(&mut gx[*start..*start + g.len()], g);
                    } else if *axis == 0 {
                        let c = s[1];
                        add_into(&mut gx[start * c..start * c + g.len()], g);
                    } else {
                        let c = s[1];
                        let len = node.shape[1];
                        for r in 0..s[0] {
                            add_into(
                                &mut gx[r * c + start..r * c + start + len],
                                &g[r * len..(r + 1) * len],
                            );
                        }
                    }
                })
            }
            Op::Transpose(x) => {
                let (m, n) = (shp(*x)[0], shp(*x)[1]);
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                })
            }
            Op::Gather { x, indices } => {
                let width = if shp(*x).len() == 1 { 1 } else { shp(*x)[1] };
                acc(*x, &mut |gx| {
                    for (k, &i) in indices.iter().enumerate() {
                        add_into(
                            &mut gx[i * width..(i + 1) * width],
                            &g[k * width..(k + 1) * width],
                        );
                    }
                })
            }
            Op::Cosine {
                a,
                b,
                norm_a,
                a_clamped,
                norm_b,
                b_clamped,
            } => {
                let (av, bv) = (val(*a), val(*b));
                let d = av.len();
                acc(*a, &mut |ga| {
                    for (r, (gr, s)) in g.iter().zip(out.iter()).enumerate() {
                        let row = &bv[r * d..(r + 1) * d];
                        let denom = norm_a * norm_b[r];
                        for j in 0..d {
                            let mut v = row[j] / denom;
                            if !a_clamped {
                                v -= s * av[j] / (norm_a * norm_a);
                            }
                            ga[j] += gr * v;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (r, (gr, s)) in g.iter().zip(out.iter()).enumerate() {
                        let row = &bv[r * d..(r + 1) * d];
                        let nb = norm_b[r];
                        let denom = norm_a * nb;
                        for j in 0..d {
                            let mut v = av[j] / denom;
                            if !b_clamped[r] {
                                v -= s * row[j] / (nb * nb);
                            }
                            gb[r * d + j] += gr * v;
                        }
                    }
                });
            }
            Op::OuterAdd { a, b } => {
                let (p, n) = (node.shape[0], node.shape[1]);
                acc(*a, &mut |ga| {
                    for i in 0..p {
                        ga[i] += g[i * n..(i + 1) * n].iter().sum::<f64>();
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..p {
                        add_into(gb, &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::Spmm { s, x } => {
                let d = node.shape[1];
                acc(*x, &mut |gx| s.mul_dense_transposed_into(g, d, gx));
            }
            Op::MultiHead {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (s, dim) = (node.shape[0], node.shape[1]);
                let dk = dim / heads;
                let scale = 1.0 / libm::sqrt(dk as f64);
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut gq = vec![0.0; s * dim];
                let mut gk = vec![0.0; s * dim];
                let mut gvv = vec![0.0; s * dim];
                for h in 0..*heads {
                    let off = h * dk;
                    let p = &probs[h * s * s..(h + 1) * s * s];
                    for i in 0..s {
                        // dP_ij = gO_i · V_j
                        let mut dp = vec![0.0; s];
                        for j in 0..s {
                            let mut dot = 0.0;
                            for c in 0..dk {
                                let go = g[i * dim + off + c];
                                dot += go * vv[j * dim + off + c];
                                gvv[j * dim + off + c] += p[i * s + j] * go;
                            }
                            dp[j] = dot;
                        }
                        let rowdot: f64 = (0..s).map(|j| dp[j] * p[i * s + j]).sum();
                        for j in 0..s {
                            let ds = p[i * s + j] * (dp[j] - rowdot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dk {
                                gq[i * dim + off + c] += ds * kv[j * dim + off + c];
                                gk[j * dim + off + c] += ds * qv[i * dim + off + c];
                            }
                        }
                    }
                }
                acc(*q, &mut |d| add_into(d, &gq));
                acc(*k, &mut |d| add_into(d, &gk));
                acc(*v, &mut |d| add_into(d, &gvv));
            }
            Op::Gat {
                wh,
                src,
                dst,
                heads,
                slope,
                pattern,
                alpha,
                pre,
            } => {
                let (n, dim) = (node.shape[0], node.shape[1]);
                let dh = dim / heads;
                let whv = val(*wh);
                let mut gwh = vec![0.0; n * dim];
                let mut gs = vec![0.0; n * heads];
                let mut gd = vec![0.0; n * heads];
                let mut base = 0;
                for u in 0..n {
                    let nbrs: Vec<usize> = pattern.row(u).map(|(c, _)| c).collect();
                    for h in 0..*heads {
                        let mut da = Vec::with_capacity(nbrs.len());
                        for (e, &v) in nbrs.iter().enumerate() {
                            let a = alpha[(base + e) * heads + h];
                            let mut dot = 0.0;
                            for c in 0..dh {
                                let go = g[u * dim + h * dh + c];
                                dot += go * whv[v * dim + h * dh + c];
                                gwh[v * dim + h * dh + c] += a * go;
                            }
                            da.push(dot);
                        }
                        let rowdot: f64 = nbrs
                            .iter()
                            .enumerate()
                            .map(|(e, _)| da[e] * alpha[(base + e) * heads + h])
                            .sum();
                        for (e, &v) in nbrs.iter().enumerate() {
                            let idx = (base + e) * heads + h;
                            let de = alpha[idx] * (da[e] - rowdot);
                            let dz = if pre[idx] > 0.0 { de } else { slope * de };
                            gs[u * heads + h] += dz;
                            gd[v * heads + h] += dz;
                        }
                    }
                    base += nbrs.len();
                }
                acc(*wh, &mut |d| add_into(d, &gwh));
                acc(*src, &mut |d| add_into(d, &gs));
                acc(*dst, &mut |d| add_into(d, &gd));
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a node, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.adj.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(parameter, gradient)` pairs for every parameter used on the tape.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.adj[v.0].as_deref().map(|g| (*id, g)))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Reduces an output gradient onto a broadcast operand; `other` is the
/// broadcast partner's value for products.
fn reduce_bcast(gb: &mut [f64], g: &[f64], bc: Bcast, other: Option<&[f64]>) {
    let term = |i: usize| other.map_or(g[i], |o| g[i] * o[i]);
    match bc {
        Bcast::Same => (0..g.len()).for_each(|i| gb[i] += term(i)),
        Bcast::Scalar => gb[0] += (0..g.len()).map(term).sum::<f64>(),
        Bcast::Row => {
            let n = gb.len();
            (0..g.len()).for_each(|i| gb[i % n] += term(i));
        }
    }
}

fn transpose_dense(v: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (i, row) in v.chunks_exact(n).enumerate() {
        for (j, x) in row.iter().enumerate() {
            out[j * m + i] = *x;
        }
    }
    out
}

pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if k == 0 || n == 0 {
        return out;
    }
    for (ar, dst) in a.chunks_exact(k).take(m).zip(out.chunks_exact_mut(n)) {
        for (&x, br) in ar.iter().zip(b.chunks_exact(n)) {
            if x == 0.0 {
                continue;
            }
            for (d, y) in dst.iter_mut().zip(br) {
                *d += x * y;
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let sel = t.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let col = t.constant(Tensor::matrix(2, 1, vec![7.5, -2.0]).unwrap());
        let p = t.matmul(sel, col).unwrap();
        assert_eq!(t.value(p), &[7.5]);
        assert_eq!(t.shape(p), &[1, 1]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        match t.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = t.softmax(x).unwrap();
        assert!(close(t.value(y), &[1.0 / 3.0; 3], 1e-15));
        let x = t.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y), &[0.5, 0.5]);
        let x = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = t.softmax(x).unwrap();
        let z: f64 = [-2.0f64, -1.0, 0.0].iter().map(|v| libm::exp(*v)).sum();
        let expect: Vec<f64> = [-2.0f64, -1.0, 0.0].iter().map(|v| libm::exp(*v) / z).collect();
        assert!(close(t.value(y), &expect, 1e-15));
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 2, vec![3.0, 1.0, 2.0, 2.0]).unwrap());
        let y = t.masked_softmax(x, &[true, false, true, true]).unwrap();
        assert_eq!(t.value(y), &[1.0, 0.0, 0.5, 0.5]);
        assert!(t.masked_softmax(x, &[false, false, true, true]).is_err());
    }

    #[test]
    fn layernorm_examples() {
        let mut t = Tape::new();
        let gain = t.constant(Tensor::full(vec![3], 1.0));
        let bias = t.constant(Tensor::zeros(vec![3]));
        let x = t.constant(Tensor::vector(vec![2.5, 2.5, 2.5]));
        let y = t.layernorm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0, 0.0]);

        let g2 = t.constant(Tensor::full(vec![2], 1.0));
        let b2 = t.constant(Tensor::zeros(vec![2]));
        let x = t.constant(Tensor::vector(vec![1.0, -1.0]));
        let y = t.layernorm(x, g2, b2, 1e-12).unwrap();
        assert!(close(t.value(y), &[1.0, -1.0], 1e-9));

        let row = Tensor::vector(vec![0.3, -1.2, 4.0, 0.7, 2.2, -0.5]);
        let g6 = t.constant(Tensor::full(vec![6], 1.0));
        let b6 = t.constant(Tensor::zeros(vec![6]));
        let x = t.constant(row);
        let y = t.layernorm(x, g6, b6, 1e-5).unwrap();
        let v = t.value(y);
        let mean = v.iter().sum::<f64>() / 6.0;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn cosine_rows_parallel_and_antiparallel() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(vec![1.0, 2.0, -0.5]));
        let b = t
            .constant(Tensor::matrix(2, 3, vec![1.0, 2.0, -0.5, -1.0, -2.0, 0.5]).unwrap());
        let s = t.cosine_rows(v, b, 1e-8).unwrap();
        assert!(close(t.value(s), &[1.0, -1.0], 1e-12));
    }

    #[test]
    fn cosine_rows_zero_norm_needs_eps() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let b = t.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        assert!(matches!(t.cosine_rows(v, b, 0.0), Err(Error::NumericGuard { .. })));
        let s = t.cosine_rows(v, b, 1e-8).unwrap();
        assert_eq!(t.value(s), &[0.0]);
    }

    #[test]
    fn small_reductions() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 2, vec![2.0, 4.0]).unwrap());
        let m = t.mean_axis(x, 1).unwrap();
        assert_eq!(t.value(m), &[3.0]);
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z);
        assert_eq!(t.value(s), &[0.5]);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let loss = t.sum(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.variable(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn unreachable_nodes_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::vector(vec![1.0, 2.0]));
        let y = t.variable(Tensor::vector(vec![3.0, 4.0]));
        let _unused = t.tanh(y);
        let loss = t.sum(x);
        let g = t.backward(loss).unwrap();
        assert!(g.wrt(y).is_none());
    }

    #[test]
    fn registry_accumulates_across_backward_calls() {
        let mut reg = ParamRegistry::new();
        let id = reg.insert("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let grads = {
            let mut t = Tape::with_params(&reg);
            let w = t.param(id);
            let sq = t.mul(w, w).unwrap();
            let loss = t.sum(sq);
            t.backward(loss).unwrap()
        };
        reg.accumulate(&grads).unwrap();
        let first = reg.get(id).grad().unwrap().to_vec();
        reg.accumulate(&grads).unwrap();
        assert_eq!(reg.get(id).grad().unwrap(), &[4.0, -8.0]);
        reg.zero_grad();
        reg.accumulate(&grads).unwrap();
        assert_eq!(reg.get(id).grad().unwrap(), first.as_slice());
    }

    #[test]
    fn multi_head_rows_are_distributions() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..12).map(|i| libm::sin(i as f64)).collect();
        let q = t.constant(Tensor::matrix(3, 4, data).unwrap());
        let o = t.multi_head_attention(q, q, q, 2).unwrap();
        let (probs, heads) = t.attention_probs(o).unwrap();
        assert_eq!(heads, 2);
        for row in probs.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn single_position_attention_is_identity_weight() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let o = t.multi_head_attention(q, q, q, 2).unwrap();
        assert_eq!(t.attention_probs(o).unwrap().0, &[1.0, 1.0]);
        assert_eq!(t.value(o), t.value(q));
    }
}
