//! Parameter initialisation and the small layers shared by the encoders.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{numel, ParamId, ParamRegistry, Tensor};

/// Registers freshly initialised parameters under a name prefix.
pub struct Init<'a> {
    reg: &'a mut ParamRegistry,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(reg: &'a mut ParamRegistry, seed: u64) -> Self {
        Self {
            reg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            String::from(name)
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Runs `f` with `scope` appended to the name prefix.
    pub fn scoped<T>(&mut self, scope: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let saved = self.prefix.clone();
        self.prefix = self.full_name(scope);
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn tensor(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        let n = self.full_name(name);
        self.reg.insert(n, t)
    }

    /// Glorot-uniform matrix.
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let a = libm::sqrt(6.0 / (rows + cols) as f64);
        let data = (0..rows * cols).map(|_| self.rng.random_range(-a..a)).collect();
        self.tensor(name, Tensor::new([rows, cols], data)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| crate::Error::Config(format!("{e}")))?;
        let data = (0..numel(shape)).map(|_| dist.sample(&mut self.rng)).collect();
        self.tensor(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::full(shape.to_vec(), 1.0))
    }
}

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        init.scoped(name, |i| {
            Ok(Self {
                weight: i.xavier("weight", inputs, outputs)?,
                bias: i.zeros("bias", &[outputs])?,
                inputs,
                outputs,
            })
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        init.scoped(name, |i| {
            Ok(Self {
                gain: i.ones("gain", &[dim])?,
                bias: i.zeros("bias", &[dim])?,
                eps,
            })
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layernorm(x, g, b, self.eps)
    }
}

/// Inverted dropout; a no-op unless a rate and an RNG are both set.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn training(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..tape.value(x).len())
            .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        let m = tape.constant(Tensor::new(tape.shape(x).to_vec(), mask)?);
        tape.mul(x, m)
    }
}
