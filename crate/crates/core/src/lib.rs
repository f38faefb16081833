//! Multi-branch conditional text-to-image GAN at desk scale: procedural
//! corpus, frozen text/image encoders, generators and stage critics, loss
//! kernels, the alternating trainer and evaluation metrics.

pub mod checkpoint;
pub mod corpus;
pub mod embedder;
pub mod error;
pub mod evaluate;
pub mod inspect;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod raster;
pub mod trainer;

pub use error::{Error, Result};

/// SplitMix64 finalizer, used to derive independent seeds from `(seed, index)` pairs.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for stream `index` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}
