//! Dense row-major `f64` tensors and the named parameter registry.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};

/// Number of elements implied by a shape. The empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A dense tensor. `data` is row-major and always has `numel(shape)` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(contract("Tensor::new", "zero-sized dimension"));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self {
            shape: vec![n],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let n = self.data.len();
        let g = self.grad.get_or_insert_with(|| vec![0.0; n]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += *b;
        }
        Ok(())
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    /// Element `(r, c)` of a 2-D tensor.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }
}

/// Handle to a parameter inside a [`ParamRegistry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered map from unique names to trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamRegistry {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: BTreeMap<String, usize>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = self.tensors.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.lookup
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Drops every gradient buffer (as opposed to zeroing it).
    pub fn clear_grad(&mut self) {
        self.tensors.iter_mut().for_each(|t| {
            t.take_grad();
        });
    }

    /// Adds the parameter gradients from a backward pass.
    pub fn accumulate(&mut self, grads: &crate::tape::Gradients) -> Result<()> {
        for (id, g) in grads.params() {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Replaces the values of every parameter with those of `other`.
    /// Both registries must hold the same names and shapes in the same order.
    pub fn copy_values_from(&mut self, other: &ParamRegistry) -> Result<()> {
        if self.names != other.names {
            return Err(contract("copy_values_from", "parameter sets differ"));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape != src.shape {
                return Err(Error::Shape {
                    op: "copy_values_from",
                    lhs: dst.shape.clone(),
                    rhs: src.shape.clone(),
                });
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}
