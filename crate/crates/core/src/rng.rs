use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream for one purpose under a run seed.
pub fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

pub(crate) mod purpose {
    pub const CONCEPTS: u64 = 1;
    pub const LEXICON: u64 = 2;
    pub const WORD_VECTORS: u64 = 3;
    pub const IMAGES: u64 = 4;
    pub const SENTENCES: u64 = 5;
    pub const SPLITS: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const BATCHES: u64 = 8;
    pub const INIT: u64 = 9;
    pub const EXPLORE: u64 = 10;
    pub const MASK: u64 = 11;
    pub const CLC_INIT: u64 = 12;
    pub const TRANSLATE: u64 = 13;
    pub const NETWORK_INIT: u64 = 14;
    pub const EVAL_TRANSLATE: u64 = 15;
}
