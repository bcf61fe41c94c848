//! Seeded random streams.
//!
//! Everything stochastic in the crate draws from ChaCha8 streams keyed by
//! `(seed, stream id)`. Separate ids keep concerns independent: changing
//! how many random numbers initialization consumes must not change which
//! training examples get generated, and vice versa.

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream ids. The numeric values are part of the reproducibility contract.
pub mod stream {
    pub const PARAM_INIT: u64 = 1;
    pub const DATA_GEN: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const PROBE: u64 = 5;
}

/// A ChaCha8 generator on stream `id` of `seed`.
pub fn stream_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// A generator for epoch `epoch` on stream `id` of `seed`. Epochs are
/// spaced 2^32 words apart in the keystream, so per-epoch consumers (data
/// shuffles) never overlap and any epoch can be replayed without iterating
/// the ones before it.
pub fn epoch_rng(seed: u64, id: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = stream_rng(seed, id);
    rng.set_word_pos((epoch as u128) << 32);
    rng
}

/// Samples a normal with the given std, rejecting draws outside two
/// standard deviations. Used for all dense projection initializations.
pub fn trunc_normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return (z * std as f64) as f32;
        }
    }
}

/// Uniform on `[-bound, bound)`.
pub fn uniform_sym(rng: &mut ChaCha8Rng, bound: f32) -> f32 {
    rng.gen_range(-bound..bound)
}

/// Fills a buffer with truncated-normal draws.
pub fn fill_trunc_normal(rng: &mut ChaCha8Rng, std: f32, out: &mut [f32]) {
    for v in out.iter_mut() {
        *v = trunc_normal(rng, std);
    }
}
