//! Deterministic seed derivation.
//!
//! Every random stream in the simulator is keyed by a tuple of words
//! (master seed, scene id, box corners, salt ...) so results never depend
//! on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive mix of a list of words into one 64-bit key.
pub fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0x6A09_E667_F3BC_C908, |acc, &w| splitmix(acc ^ splitmix(w)))
}

pub fn rng_from(words: &[u64]) -> Rng {
    Rng::seed_from_u64(mix(words))
}

/// Stream salts, one per independent consumer.
pub mod salt {
    pub const WORLD: u64 = 0x5752_4c44;
    pub const DET: u64 = 0x4445_5400;
    pub const CLS: u64 = 0x434c_5300;
    pub const EVAL: u64 = 0x4556_4c00;
    pub const TEACHER: u64 = 0x5443_4852;
    pub const STUDENT: u64 = 0x5354_4454;
    pub const PROPOSE: u64 = 0x5052_4f50;
    pub const QUERY: u64 = 0x5155_4552;
    pub const INIT: u64 = 0x494e_4954;
    pub const SCHEDULE: u64 = 0x5343_4544;
}
