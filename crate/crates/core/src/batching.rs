//! Mini-batch assembly and seeded epoch orders.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Array, TensorError};

/// Stacks `[H, W]` images into an `[N, H, W, 1]` batch.
pub fn image_batch<'a>(images: impl IntoIterator<Item = &'a Array>) -> Result<Array, TensorError> {
    let items: Vec<Array> = images.into_iter().cloned().collect();
    let stacked = Array::stack(&items)?;
    let mut shape = stacked.shape().to_vec();
    shape.push(1);
    stacked.reshape(&shape)
}

/// Splits `[N, H, W, 1]` back into `[H, W]` images.
pub fn unbatch_images(batch: &Array) -> Vec<Array> {
    let s = batch.shape();
    (0..batch.batch())
        .map(|i| batch.item_at(i).reshape(&s[1..3]).expect("image batch is NHW1"))
        .collect()
}

/// Seeded RNG for epoch `epoch` of a training run.
pub(crate) fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// A permutation of `0..n` for one epoch.
pub(crate) fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Number of mini-batches per epoch; the last batch may be short.
pub(crate) fn batches_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}
