use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

fn check_len(tape: &Tape<'_>, probs: Var, truth: &BTreeSet<usize>) -> Result<usize> {
    let n = match tape.shape(probs) {
        [n] => *n,
        sh => return Err(shape_err("loss", sh, &[0])),
    };
    if let Some(&last) = truth.iter().next_back() {
        if last >= n {
            return Err(crate::Error::OutOfBounds {
                what: "truth medication",
                index: last,
                bound: n,
            });
        }
    }
    Ok(n)
}

/// Summed binary cross-entropy.
pub fn loss_bce(tape: &mut Tape<'_>, probs: Var, truth: &BTreeSet<usize>) -> Result<Var> {
    let n = check_len(tape, probs, truth)?;
    let y: Vec<f64> = (0..n).map(|i| if truth.contains(&i) { 1.0 } else { 0.0 }).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = tape.ln(p);
    let neg = tape.scale(p, -1.0);
    let q = tape.add_scalar(neg, 1.0);
    let log_q = tape.ln(q);
    let y = tape.constant(Tensor::vector(y));
    let not_y = tape.constant(Tensor::vector(not_y));
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let s = tape.add(a, b)?;
    let s = tape.sum(s);
    Ok(tape.scale(s, -1.0))
}

/// Pairwise margin loss over (positive, negative) pairs, divided by the
/// number of medicines. Zero when either side is empty.
pub fn loss_multi(tape: &mut Tape<'_>, probs: Var, truth: &BTreeSet<usize>) -> Result<Var> {
    let n = check_len(tape, probs, truth)?;
    let pos: Vec<usize> = truth.iter().copied().collect();
    let neg: Vec<usize> = (0..n).filter(|i| !truth.contains(i)).collect();
    if pos.is_empty() || neg.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let p = tape.gather(probs, &pos)?;
    let q = tape.gather(probs, &neg)?;
    let q = tape.scale(q, -1.0);
    let diff = tape.outer_add(p, q)?;
    let flipped = tape.scale(diff, -1.0);
    let margin = tape.add_scalar(flipped, 1.0);
    let hinge = tape.relu(margin);
    let s = tape.sum(hinge);
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// `lambda * bce + (1 - lambda) * multi`; a term with weight exactly zero
/// is not built at all.
pub fn loss_mixed(tape: &mut Tape<'_>, probs: Var, truth: &BTreeSet<usize>, lambda: f64) -> Result<Var> {
    if lambda == 1.0 {
        return loss_bce(tape, probs, truth);
    }
    if lambda == 0.0 {
        return loss_multi(tape, probs, truth);
    }
    let b = loss_bce(tape, probs, truth)?;
    let m = loss_multi(tape, probs, truth)?;
    let b = tape.scale(b, lambda);
    let m = tape.scale(m, 1.0 - lambda);
    tape.add(b, m)
}
