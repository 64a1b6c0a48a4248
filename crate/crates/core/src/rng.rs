//! Counter-based random streams.
//!
//! Every random draw in the laboratory comes from a ChaCha8 keystream
//! addressed by `(seed, stream)`; within a stream, position is the block
//! counter. Output is therefore a pure function of `(seed, stream, counter)`
//! and independent of which worker generates it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids below this bound are reserved for per-step impression batches.
pub const BATCH_STREAMS: u64 = 1 << 32;

/// Per-episode exploration draws of the data-collection policy.
pub const POLICY_STREAM: u64 = BATCH_STREAMS + 1;
/// Mini-batch sampling during supervised training.
pub const TRAIN_STREAM: u64 = BATCH_STREAMS + 2;
/// Parameter initialisation.
pub const INIT_STREAM: u64 = BATCH_STREAMS + 3;
/// Shuffling during preference fine-tuning.
pub const DPO_STREAM: u64 = BATCH_STREAMS + 4;
/// Random instance generation for the hindsight oracle.
pub const ORACLE_STREAM: u64 = BATCH_STREAMS + 5;
/// Coordinate sampling in the gradient checker.
pub const GRAD_CHECK_STREAM: u64 = BATCH_STREAMS + 6;

/// Returns the generator positioned at counter zero of `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The generator for the impressions of `step` in episode `seed`.
pub fn batch_stream(seed: u64, step: usize) -> ChaCha8Rng {
    debug_assert!((step as u64) < BATCH_STREAMS);
    stream(seed, step as u64)
}
