//! Deterministic random-number streams.
//!
//! Every stochastic routine in this crate takes an explicit generator;
//! nothing reads global or thread-local randomness.  A run is organised
//! around one user-facing seed, and independent substreams are carved out of
//! it by `(seed, stream id)` pairs so that, say, the prior draw, the
//! observation noise, and the minibatch shuffle of one experiment never share
//! or race for the same generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifies one logical randomness consumer within a seeded run.
///
/// The numbering is part of a binary's reproducibility contract: changing
/// which stream id a consumer uses changes its draws, so ids are assigned
/// once, centrally, by the caller that owns the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream(pub u64);

impl Stream {
    /// A generator for this stream under `seed`.
    ///
    /// Streams with different ids under the same seed are distinct ChaCha
    /// counter streams: their outputs are unrelated, and each is
    /// reproducible bit for bit.
    pub fn rng(self, seed: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(self.0);
        rng
    }
}

/// Shorthand for [`Stream::rng`] at stream 0, for single-consumer contexts
/// such as unit tests.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    Stream(0).rng(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_stream_is_identical() {
        let a: Vec<u64> = Stream(3).rng(17).random_iter().take(8).collect();
        let b: Vec<u64> = Stream(3).rng(17).random_iter().take(8).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn streams_are_distinct() {
        let a: Vec<u64> = Stream(0).rng(17).random_iter().take(8).collect();
        let b: Vec<u64> = Stream(1).rng(17).random_iter().take(8).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn seeds_are_distinct() {
        let a: u64 = Stream(0).rng(1).random();
        let b: u64 = Stream(0).rng(2).random();
        assert_ne!(a, b);
    }
}
