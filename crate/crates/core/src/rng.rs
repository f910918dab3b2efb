//! Counter-based random substreams.
//!
//! Every random quantity in an experiment is drawn from a ChaCha stream keyed by
//! `(seed, tag, index)`, so results never depend on evaluation order or on how
//! work is split between threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named purposes for substreams. Distinct tags never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamTag {
    Prior,
    Snapshot,
    Reference,
    Mlmc,
    Mc,
    Chain,
    Observation,
    Pilot,
    Custom(u32),
}

impl StreamTag {
    fn code(self) -> u64 {
        match self {
            StreamTag::Prior => 1,
            StreamTag::Snapshot => 2,
            StreamTag::Reference => 3,
            StreamTag::Mlmc => 4,
            StreamTag::Mc => 5,
            StreamTag::Chain => 6,
            StreamTag::Observation => 7,
            StreamTag::Pilot => 8,
            StreamTag::Custom(c) => 0x1000 + c as u64,
        }
    }
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Root of a family of substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamFamily {
    seed: u64,
    tag: StreamTag,
    replicate: u64,
}

impl StreamFamily {
    pub fn new(seed: u64, tag: StreamTag) -> Self {
        StreamFamily {
            seed,
            tag,
            replicate: 0,
        }
    }

    /// Independent family for replicate `r` of the same experiment.
    pub fn replicate(self, r: u64) -> Self {
        StreamFamily {
            replicate: r,
            ..self
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for sample `index`. Identical arguments always give identical streams.
    pub fn stream(&self, index: u64) -> ChaCha8Rng {
        let key = mix(mix(self.seed) ^ mix(self.tag.code().wrapping_mul(0x100_0000_01B3)))
            ^ mix(self.replicate.wrapping_add(0xA5A5_5A5A));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(index);
        rng
    }
}
