use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Generator used by every seeded stream in the crate.
pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub replication_index: u64,
    pub stream_label: String,
}

impl SeedSpec {
    pub fn new(master_seed: u64, replication_index: u64, stream_label: impl Into<String>) -> Self {
        SeedSpec {
            master_seed,
            replication_index,
            stream_label: stream_label.into(),
        }
    }

    pub fn rng(&self) -> SimRng {
        SimRng::seed_from_u64(derive_seed(self))
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Child seed for `(master, replication, label)`.
pub fn derive_seed(spec: &SeedSpec) -> u64 {
    let mut h = splitmix64(spec.master_seed);
    h = splitmix64(h ^ spec.replication_index);
    splitmix64(h ^ fnv1a(spec.stream_label.as_bytes()))
}
