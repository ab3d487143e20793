use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Derives independent, reproducible random streams from one root seed.
///
/// A stream is identified by a path of names (`"init"`, `"negatives"`, ...),
/// so adding a new consumer never shifts the draws of an existing one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    key: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { key: splitmix(seed) }
    }

    pub fn child(&self, name: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        SeedStream { key: splitmix(self.key ^ splitmix(h)) }
    }

    pub fn child_index(&self, index: u64) -> Self {
        SeedStream { key: splitmix(self.key ^ splitmix(index.wrapping_add(0x9e37_79b9))) }
    }

    pub fn rng(&self, name: &str) -> Rng {
        ChaCha8Rng::seed_from_u64(self.child(name).key)
    }

    pub fn key(&self) -> u64 {
        self.key
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
