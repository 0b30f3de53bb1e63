//! Deterministic per-unit random streams.
//!
//! Every trajectory (or Monte-Carlo sample block) gets its own ChaCha8
//! stream keyed by `(master seed, unit id)`, so results do not depend on
//! which worker ran which unit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

/// Independent stream for unit `id` under `seed`.
pub fn stream(seed: u64, id: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Sub-stream used when one unit needs several independent sources
/// (e.g. driving noise and Gaussian smoothing).
pub fn substream(seed: u64, id: u64, lane: u64) -> Stream {
    let mixed = seed ^ lane.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    stream(mixed, id)
}

/// Fill `out` with independent `N(0, var)` draws.
pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, var: f64, out: &mut [f64]) {
    let sd = var.sqrt();
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = sd * z;
    }
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
