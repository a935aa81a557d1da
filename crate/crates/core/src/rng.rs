//! Deterministic seed expansion.
//!
//! A single master seed is expanded with a counter-based SplitMix64 mix into
//! independent per-component streams, so every component (initialization,
//! data order, dropout, ...) is reproducible on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    DataSplit,
    DataOrder,
    SomInit,
    MaskInit,
    NoiseMasks,
    ProbeInit,
    ProbeShuffle,
    Dropout,
    FewShot,
    Folds,
    Synthetic,
}

impl Component {
    fn tag(self) -> u64 {
        match self {
            Component::DataSplit => 1,
            Component::DataOrder => 2,
            Component::SomInit => 3,
            Component::MaskInit => 4,
            Component::NoiseMasks => 5,
            Component::ProbeInit => 6,
            Component::ProbeShuffle => 7,
            Component::Dropout => 8,
            Component::FewShot => 9,
            Component::Folds => 10,
            Component::Synthetic => 11,
        }
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSplitter {
    master: u64,
}

impl SeedSplitter {
    pub fn new(master: u64) -> Self {
        SeedSplitter { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Seed for `component`, further distinguished by `index` (layer, head, fold, ...).
    pub fn seed(&self, component: Component, index: u64) -> u64 {
        splitmix64(splitmix64(self.master ^ splitmix64(component.tag())) ^ splitmix64(index.wrapping_add(0x51)))
    }

    pub fn rng(&self, component: Component, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(component, index))
    }
}
