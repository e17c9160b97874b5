//! Named random substreams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const VICTIM_INIT: &str = "victim-init";
pub const GENERATOR_INIT: &str = "generator-init";
pub const CLONE_INIT: &str = "clone-init";
pub const Z_STREAM: &str = "z-stream";
pub const DATA: &str = "data";

/// 64-bit FNV-1a, used for stream ids and config fingerprints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Independent ChaCha stream for `name`; same (master, name) gives the same stream.
    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(fnv1a(name.as_bytes()));
        rng
    }

    /// Derived master seed for a child component, e.g. one sweep cell.
    pub fn child(&self, name: &str) -> SeedStreams {
        let mut bytes = self.master.to_le_bytes().to_vec();
        bytes.extend_from_slice(name.as_bytes());
        SeedStreams::new(fnv1a(&bytes))
    }
}
