use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Conversation;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Conversation>,
    pub valid: Vec<Conversation>,
    pub test: Vec<Conversation>,
}

/// Conversation-level random split. Sizes are `round(n · ratio)` for train
/// and valid with the remainder going to test; each part keeps input order.
pub fn split(convs: &[Conversation], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be >= 0"
        )));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} sum to {total}, not 1"
        )));
    }
    let n = convs.len();
    let n_train = ((n as f64) * ratios[0]).round() as usize;
    let n_valid = (((n as f64) * ratios[1]).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_valid].to_vec(),
        order[n_train + n_valid..].to_vec(),
    ];
    for p in &mut parts {
        p.sort_unstable();
    }
    let take = |idx: &[usize]| idx.iter().map(|&i| convs[i].clone()).collect::<Vec<_>>();
    Ok(DatasetSplit {
        train: take(&parts[0]),
        valid: take(&parts[1]),
        test: take(&parts[2]),
    })
}
