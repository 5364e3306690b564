//! Counter-based random substreams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by
//! `(seed, namespace)` and selected by an integer index, so any task or
//! initialization can be regenerated independently of everything else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Well-known namespaces. Training and evaluation never share one.
pub mod namespace {
    pub const INIT: u64 = 0x01;
    pub const PRETRAIN: u64 = 0x10;
    pub const CLUSTER_BUFFER: u64 = 0x20;
    pub const KMEANS: u64 = 0x21;
    pub const ENSEMBLE_TRAIN: u64 = 0x30;
    pub const EVAL: u64 = 0x40;
}

/// Independent generator for `(seed, namespace, index)`.
pub fn substream(seed: u64, namespace: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&namespace.to_le_bytes());
    key[16..24].copy_from_slice(b"eeml-rng");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
