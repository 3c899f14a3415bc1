use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DataError;

/// Seeded epoch-wise shuffling over `len` sample indices.
///
/// Epoch `e` uses its own ChaCha stream, so orders are independent of how many
/// epochs were drawn before.
#[derive(Clone, Debug)]
pub struct BatchOrder {
    len: usize,
    batch_size: usize,
    seed: u64,
}

impl BatchOrder {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self, DataError> {
        if len == 0 {
            return Err(DataError::EmptySplit);
        }
        if batch_size == 0 {
            return Err(DataError::InvalidConfig("batch size must be >= 1".into()));
        }
        Ok(Self { len, batch_size, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut idx: Vec<usize> = (0..self.len).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// Index batches for `epoch`; the last one may be short.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        self.permutation(epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}
