//! Counter-keyed standard normal variates.
//!
//! Every draw is addressed by `(seed, stream, counter)`: the seed keys a
//! ChaCha8 generator, the stream selects an independent ChaCha stream (the
//! Monte Carlo path index), and the counter fixes the word position inside
//! that stream (node index times the block width). Uniforms use the top 53
//! bits of a `u64` shifted to the open interval (0,1); normals come from the
//! Box–Muller transform, two per pair of uniforms. The output therefore does
//! not depend on evaluation order or on the platform.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream reserved for sampling initial ensembles.
pub const ENSEMBLE_STREAM: u64 = u64::MAX;

pub struct NormalSource {
    rng: ChaCha8Rng,
    width: usize,
}

impl NormalSource {
    /// `width` is the number of normals drawn per counter value.
    pub fn new(seed: u64, stream: u64, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        NormalSource { rng, width }
    }

    fn words_per_block(&self) -> u128 {
        // two u64 (four u32 words) per Box–Muller pair
        (self.width.div_ceil(2) * 4) as u128
    }

    /// Fill `out` (length `width`) with the normals at `counter`.
    pub fn fill(&mut self, counter: u64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.width);
        self.rng
            .set_word_pos(counter as u128 * self.words_per_block());
        let mut i = 0;
        while i < out.len() {
            let u1 = unit_open(self.rng.next_u64());
            let u2 = unit_open(self.rng.next_u64());
            let r = (-2.0 * u1.ln()).sqrt();
            let th = std::f64::consts::TAU * u2;
            out[i] = r * th.cos();
            if i + 1 < out.len() {
                out[i + 1] = r * th.sin();
            }
            i += 2;
        }
    }

    pub fn draw(&mut self, counter: u64) -> Vec<f64> {
        let mut v = vec![0.0; self.width];
        self.fill(counter, &mut v);
        v
    }
}

fn unit_open(x: u64) -> f64 {
    ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Uniform variates in (0,1) with the same addressing scheme.
pub fn uniform(seed: u64, stream: u64, counter: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(counter as u128 * 2);
    unit_open(rng.next_u64())
}
