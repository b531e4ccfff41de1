//! Keyed random streams: every consumer derives its own ChaCha stream from the
//! run seed, so results never depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA_GLOBAL: u64 = 1;
pub const DATA_TEMPLATE: u64 = 2;
pub const DATA_FRAME: u64 = 3;
pub const MODEL_INIT: u64 = 4;
pub const EPOCH_ORDER: u64 = 5;
pub const AUGMENT: u64 = 6;
pub const GRADCHECK: u64 = 7;

pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 40) | index);
    rng
}
