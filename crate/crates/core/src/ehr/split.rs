use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PatientRecord;
use crate::error::{Error, Result};

/// Patient-level partition into train/validation/test.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<PatientRecord>,
    pub val: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

/// Sizes for `n` items under `ratios`: floor each share, then hand the
/// remainder out one at a time in train, val, test order.
pub fn split_sizes(n: usize, ratios: [usize; 3]) -> [usize; 3] {
    let total: usize = ratios.iter().sum();
    let mut sizes = ratios.map(|r| n * r / total);
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut k = 0;
    while rest > 0 {
        sizes[k % 3] += 1;
        rest -= 1;
        k += 1;
    }
    sizes
}

/// Shuffles patients with `seed` and cuts them by `ratios` (e.g. `[4, 1, 1]`).
pub fn split_records(records: &[PatientRecord], ratios: [usize; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|&r| r == 0) {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    let needed: usize = ratios.iter().sum();
    if records.len() < needed {
        return Err(Error::Config(format!(
            "need at least {needed} patients to split {ratios:?}, got {}",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [a, b, _] = split_sizes(records.len(), ratios);
    let pick = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        train: pick(&order[..a]),
        val: pick(&order[a..a + b]),
        test: pick(&order[a + b..]),
    })
}
