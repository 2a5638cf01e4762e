use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Every index once plus enough seeded uniform draws (with replacement)
/// from the minority class to balance the two classes.
pub fn oversample_indices(labels: &[u8], seed: u64) -> Result<Vec<usize>> {
    let (neg, pos): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i] == 0);
    if neg.is_empty() || pos.is_empty() {
        return Err(Error::invalid("oversampling needs both classes"));
    }
    let (minority, deficit) = if pos.len() < neg.len() {
        (&pos, neg.len() - pos.len())
    } else {
        (&neg, pos.len() - neg.len())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = (0..labels.len()).collect();
    out.extend((0..deficit).map(|_| minority[rng.random_range(0..minority.len())]));
    Ok(out)
}
