//! Train/validation/test assignment with a fixed test set and repeated
//! random validation draws.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::error::{Error, Result};

/// Number of train/validation repeats.
pub const REPEATS: usize = 5;
/// Share of all subjects held out for testing.
pub const TEST_FRACTION: f64 = 0.2;
/// Share of the remaining pool used for validation in each repeat.
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// 1-based repeat index.
    pub repeat: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn share(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Five plans over `subject_ids`: `round(0.2·n)` subjects form a test set
/// shared by every repeat; each repeat then draws `round(0.2·pool)`
/// validation subjects from the remaining pool. Lists are sorted.
pub fn make_splits(subject_ids: &[String], seed: u64) -> Result<Vec<SplitPlan>> {
    if subject_ids.len() < REPEATS {
        return Err(Error::Config(format!(
            "splitting needs at least {REPEATS} subjects, got {}",
            subject_ids.len()
        )));
    }
    let mut ids: Vec<String> = subject_ids.to_vec();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("subject ids must be unique".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0])));
    let n_test = share(ids.len(), TEST_FRACTION);
    let mut test = ids[..n_test].to_vec();
    test.sort();
    let pool = &ids[n_test..];
    let n_val = share(pool.len(), VAL_FRACTION);
    let plans = (1..=REPEATS)
        .map(|repeat| {
            let mut p = pool.to_vec();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[repeat as u64])));
            let mut val = p[..n_val].to_vec();
            let mut train = p[n_val..].to_vec();
            val.sort();
            train.sort();
            SplitPlan {
                repeat,
                train,
                val,
                test: test.clone(),
            }
        })
        .collect();
    Ok(plans)
}

/// Index of the repeat with the highest mean validation Dice (first on ties).
pub fn select_best_repeat(mean_val_dice: &[f64]) -> Option<usize> {
    mean_val_dice
        .iter()
        .enumerate()
        .filter(|(_, d)| d.is_finite())
        .fold(None, |best: Option<(usize, f64)>, (i, &d)| match best {
            Some((_, b)) if b >= d => best,
            _ => Some((i, d)),
        })
        .map(|(i, _)| i)
}
