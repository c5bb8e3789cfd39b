//! Seeded, stream-addressable random numbers.
//!
//! Every draw sequence is a pure function of `(seed, stream)`: ChaCha8 keyed
//! by the seed with the stream id as the ChaCha stream. Sub-streams are
//! derived by hashing, so data generation, sampling and initialization never
//! share state.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

pub const ALGORITHM: &str = "chacha8";

/// Deterministic generator addressed by `(seed, stream)`.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// A generator for a child stream keyed by `parts`.
    pub fn derive(seed: u64, parts: &[u64]) -> Self {
        Self::new(seed, mix(parts))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        loop {
            let u1 = self.uniform();
            if u1 > f64::MIN_POSITIVE {
                let u2 = self.uniform();
                return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            }
        }
    }

    /// Normal draw with `std`, resampled until within two standard deviations.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn trunc_normal_tensor<F: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::of(self.trunc_normal(std))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product")
    }
}

/// SplitMix64 finalizer folded over `parts`.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
