use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// A reproducible random stream keyed by a master seed and a stream index.
///
/// The same pair always yields the same sequence; distinct stream indices
/// select disjoint ChaCha20 streams under one key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id,
        }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// A stream for a sub-task of this one, e.g. the Monte Carlo draws of
    /// one selected coordinate inside a replication.
    pub fn derive(&self, tag: u64) -> RngStream {
        let key = splitmix(self.master_seed ^ splitmix(tag.wrapping_add(0x5851_f42d_4c95_7f2d)));
        RngStream {
            master_seed: key,
            stream_id: self.stream_id,
        }
    }
}
