use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split = 1,
    EncoderInit = 2,
    ProjectorInit = 3,
    HeadInit = 4,
    Shuffle = 5,
    Augment = 6,
    ValAugment = 7,
}

/// Same master seed and stream always give the same generator; different
/// streams never overlap.
pub fn stream_rng(master: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream as u64);
    rng
}
