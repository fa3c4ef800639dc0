//! Named, independent random streams derived from one master seed.
//!
//! A stream is addressed by a name and a path of integers (step, sample id,
//! view, ...). Each address maps to its own ChaCha8 key, so the order in
//! which streams are consumed never affects what any other stream yields.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const IMG_WEAK: &str = "img_weak";
pub const IMG_STRONG: &str = "img_strong";
pub const FEAT: &str = "feat";
pub const SPLIT: &str = "split";
pub const DATA: &str = "data";

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    master: u64,
}

impl Seeds {
    pub fn new(master: u64) -> Self {
        Seeds { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, name: &str, path: &[u64]) -> ChaCha8Rng {
        let mut state = self.master ^ fnv1a(name).rotate_left(17);
        let _ = splitmix(&mut state);
        for &p in path {
            state ^= p.wrapping_mul(0xD6E8_FEB8_6659_FD93);
            let _ = splitmix(&mut state);
        }
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix(&mut state).to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}
