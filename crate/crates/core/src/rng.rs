//! Named, independent random streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream selector. Each purpose in a run draws from its own stream so that
/// adding draws in one place never perturbs another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    World,
    Split,
    PreferencePairs,
    GoldenSet,
    RmInit,
    PolicyInit,
    BaseRmTrain,
    PolicyWarmup,
    ApoSamples(usize),
    RmTrain(usize),
    AlignSamples(usize),
    AlignShuffle(usize),
    Eval(usize),
    WinRate(usize),
    ShiftPairs(usize),
    Calibration,
}

impl Stream {
    fn id(self) -> u64 {
        // Fixed stream ids: changing them changes every recorded experiment.
        let (family, round) = match self {
            Stream::World => (1, 0),
            Stream::Split => (2, 0),
            Stream::PreferencePairs => (3, 0),
            Stream::GoldenSet => (4, 0),
            Stream::RmInit => (5, 0),
            Stream::PolicyInit => (6, 0),
            Stream::BaseRmTrain => (7, 0),
            Stream::Calibration => (8, 0),
            Stream::PolicyWarmup => (9, 0),
            Stream::ApoSamples(r) => (10, r),
            Stream::RmTrain(r) => (11, r),
            Stream::AlignSamples(r) => (12, r),
            Stream::AlignShuffle(r) => (13, r),
            Stream::Eval(r) => (14, r),
            Stream::WinRate(r) => (15, r),
            Stream::ShiftPairs(r) => (16, r),
        };
        (family << 32) | round as u64
    }
}

/// Deterministic generator for `stream` under `seed`.
pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Plain seeded generator, for callers that manage their own streams.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, Stream::Eval(1)).random();
        let b: u64 = stream(7, Stream::Eval(1)).random();
        let c: u64 = stream(7, Stream::Eval(2)).random();
        let d: u64 = stream(8, Stream::Eval(1)).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
