//! Medication recommendation with an attention-guided collaborative decision
//! network, built on a small reverse-mode autodiff engine.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command-line
//! tool and parallel evaluation live in the `acdnet` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod decision_head;
pub mod ehr;
pub mod error;
pub mod gradcheck;
pub mod medicine_encoder;
pub mod model;
pub mod nn;
pub mod optim;
pub mod patient_encoder;
pub mod sparse;
pub mod tape;
pub mod tensor;
pub mod train_eval;

pub use error::{Error, Result};
pub use sparse::CsrMatrix;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamId, ParamRegistry, Tensor};
