//! Counter-based Gaussian noise streams.
//!
//! Every random draw in the crate comes from a [`NoiseStream`] addressed by
//! a [`StreamKey`]: `(seed, replica, domain)` form the 256-bit ChaCha key and
//! the particle index selects the ChaCha stream. Within a stream the word
//! position is a pure function of how many fixed-size blocks have been
//! consumed, so a stream can be positioned at any step without replaying the
//! steps before it. Parallel schedules therefore cannot reorder randomness.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose tag mixed into the key so that unrelated consumers never share
/// a stream even for equal `(seed, replica, particle)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    Dynamics = 1,
    Initial = 2,
    Coupling = 3,
    Hypothesis = 4,
    Observable = 5,
}

/// Stream index reserved for the aggregate noise of "all particles except
/// the tagged one" in the reduced mean-field simulation.
pub const AGGREGATE_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub replica: u64,
    pub domain: Domain,
    pub particle: u64,
}

impl StreamKey {
    pub fn new(seed: u64, replica: u64, domain: Domain, particle: u64) -> Self {
        Self {
            seed,
            replica,
            domain,
            particle,
        }
    }

    fn chacha_seed(&self) -> [u8; 32] {
        let mut bytes = [0u8; 32];
        bytes[0..8].copy_from_slice(&self.seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&self.replica.to_le_bytes());
        bytes[16..24].copy_from_slice(&(self.domain as u64).to_le_bytes());
        bytes[24..32].copy_from_slice(&0x6d64_706c_6162_u64.to_le_bytes());
        bytes
    }
}

/// Gaussian/uniform source with a fixed word budget per block of draws.
///
/// A block of `width` standard normals always consumes `2 * ceil(width / 2)`
/// 64-bit words (Box–Muller on pairs), which keeps stream positions
/// step-addressable.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    width: usize,
}

impl NoiseStream {
    pub fn new(key: StreamKey, width: usize) -> Self {
        let mut rng = ChaCha8Rng::from_seed(key.chacha_seed());
        rng.set_stream(key.particle);
        Self { rng, width }
    }

    /// Number of 32-bit ChaCha words one block of `width` normals uses.
    pub fn words_per_block(width: usize) -> u128 {
        (width.div_ceil(2) * 4) as u128
    }

    /// Position the stream at the start of block `index`.
    pub fn seek_block(&mut self, index: u64) {
        self.rng
            .set_word_pos(index as u128 * Self::words_per_block(self.width));
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Fill `out` (length `width`) with independent standard normals.
    pub fn fill_normals(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.width);
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (z0, z1) = self.box_muller();
            pair[0] = z0;
            pair[1] = z1;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.box_muller().0;
        }
    }

    /// Uniform on (0, 1].
    pub fn uniform_open0(&mut self) -> f64 {
        1.0 - unit_f64(self.rng.next_u64())
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        unit_f64(self.rng.next_u64())
    }

    /// Uniform index in `0..n` (Lemire-style widening multiply; the bias is
    /// below 2^-64·n and irrelevant at the sizes used here).
    pub fn index(&mut self, n: usize) -> usize {
        ((self.rng.next_u64() as u128 * n as u128) >> 64) as usize
    }

    fn box_muller(&mut self) -> (f64, f64) {
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (radius * c, radius * s)
    }
}

fn unit_f64(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
