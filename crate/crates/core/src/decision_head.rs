//! Collaborative decision: a direct scorer from the health representation,
//! an indirect scorer driven by history-to-medicine similarity, and a gated
//! sigmoid blend of the two.

use alloc::vec::Vec;

use crate::error::Result;
use crate::nn::{Init, Linear};
use crate::tape::{Tape, Var};
use crate::tensor::ParamId;

/// Floor of the norms inside the similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionHead {
    pub direct: Linear,
    /// `None` for the direct-only model.
    pub indirect: Option<Linear>,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub medications: usize,
}

/// Branch values of one decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub o1: Var,
    pub similarity: Option<Var>,
    pub o2: Option<Var>,
    pub probs: Var,
}

impl DecisionHead {
    pub fn new(init: &mut Init<'_>, dim: usize, medications: usize, indirect: bool) -> Result<Self> {
        init.scoped("head", |i| {
            let direct = Linear::new(i, "direct", dim, medications)?;
            let indirect = if indirect {
                Some(Linear::new(i, "indirect", 2 * medications, medications)?)
            } else {
                None
            };
            Ok(Self {
                direct,
                indirect,
                alpha: i.ones("alpha", &[1])?,
                beta: i.ones("beta", &[1])?,
                w1: i.ones("w1", &[medications])?,
                w2: i.ones("w2", &[medications])?,
                medications,
            })
        })
    }

    pub fn direct_scores(&self, tape: &mut Tape<'_>, r_p: Var) -> Result<Var> {
        self.direct.forward(tape, r_p)
    }

    pub fn indirect_scores(&self, tape: &mut Tape<'_>, o1: Var, similarity: Var) -> Result<Option<Var>> {
        let Some(lin) = &self.indirect else { return Ok(None) };
        let alpha = tape.param(self.alpha);
        let beta = tape.param(self.beta);
        let a = tape.mul(o1, alpha)?;
        let b = tape.mul(similarity, beta)?;
        let cat = tape.concat(&[a, b], 0)?;
        Ok(Some(lin.forward(tape, cat)?))
    }

    /// `sigmoid(w1 * o1 + w2 * o2)`, or `sigmoid(w1 * o1)` without `o2`.
    pub fn combine(&self, tape: &mut Tape<'_>, o1: Var, o2: Option<Var>) -> Result<Var> {
        let w1 = tape.param(self.w1);
        let mut z = tape.mul(w1, o1)?;
        if let Some(o2) = o2 {
            let w2 = tape.param(self.w2);
            let g = tape.mul(w2, o2)?;
            z = tape.add(z, g)?;
        }
        Ok(tape.sigmoid(z))
    }

    /// Full decision. `history` and `medicines` are skipped by the
    /// direct-only model; otherwise both must be present.
    pub fn forward(&self, tape: &mut Tape<'_>, r_p: Var, history: Option<Var>, medicines: Option<Var>) -> Result<Decision> {
        let o1 = self.direct_scores(tape, r_p)?;
        let (similarity, o2) = match (&self.indirect, history, medicines) {
            (Some(_), Some(r_m), Some(m)) => {
                let s = history_similarity(tape, r_m, m)?;
                (Some(s), self.indirect_scores(tape, o1, s)?)
            }
            (Some(_), _, _) => {
                return Err(crate::error::contract(
                    "decision_head",
                    "indirect scorer needs both a history vector and a medicine matrix",
                ))
            }
            (None, _, _) => (None, None),
        };
        let probs = self.combine(tape, o1, o2)?;
        Ok(Decision {
            o1,
            similarity,
            o2,
            probs,
        })
    }
}

/// Cosine similarity between `r_m` and every row of `medicines`.
pub fn history_similarity(tape: &mut Tape<'_>, r_m: Var, medicines: Var) -> Result<Var> {
    tape.cosine_rows(r_m, medicines, COSINE_EPS)
}

/// Indices scoring at least `threshold`; never empty, falling back to the
/// single best index (the lowest one on ties).
pub fn predict_set(probs: &[f64], threshold: f64) -> Vec<usize> {
    let picked: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] >= threshold).collect();
    if !picked.is_empty() || probs.is_empty() {
        return picked;
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    alloc::vec![best]
}
