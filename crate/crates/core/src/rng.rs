//! Counter-based splittable random streams.
//!
//! Every random decision is drawn from a ChaCha8 stream addressed by a
//! [`StreamKey`] `(seed, replica, scale, block)`. The seed and replica select
//! the 256-bit ChaCha key, the scale and block select one of the 2^64 streams
//! under that key. Any block's edge set can therefore be regenerated in
//! isolation, and results do not depend on how replicas are scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

pub type StreamRng = ChaCha8Rng;

/// Scale tags at or above this value address auxiliary streams (bootstrap,
/// exploration, periodic top layer, ...) rather than lattice layers.
pub const AUX_SCALE_BASE: u32 = 1 << 24;

/// Auxiliary stream purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Aux {
    PeriodicTop = 1,
    Explore = 2,
    Bootstrap = 3,
    Gillespie = 4,
    Coalescent = 5,
    Renorm = 6,
    Probe = 7,
    Synthetic = 8,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Address of one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub replica: u64,
    pub scale: u32,
    pub block: u64,
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        Self { seed, replica: 0, scale: 0, block: 0 }
    }

    pub fn replica(self, replica: u64) -> Self {
        Self { replica, ..self }
    }

    pub fn layer(self, scale: u32, block: u64) -> Self {
        Self { scale, block, ..self }
    }

    pub fn aux(self, purpose: Aux, index: u64) -> Self {
        Self { scale: AUX_SCALE_BASE + purpose as u32, block: index, ..self }
    }

    /// Derives an independent seed, used to nest experiments (e.g. one probe
    /// of a bisection) under a parent seed.
    pub fn derive_seed(self, tag: u64) -> u64 {
        splitmix64(splitmix64(self.seed ^ 0xA076_1D64_78BD_642F) ^ splitmix64(tag))
    }

    pub fn rng(self) -> StreamRng {
        let mut key = [0u8; 32];
        let words = [
            splitmix64(self.seed),
            splitmix64(self.seed ^ 0x5851_F42D_4C95_7F2D),
            splitmix64(self.replica ^ 0x2545_F491_4F6C_DD1D),
            splitmix64(self.replica.rotate_left(17) ^ self.seed),
        ];
        for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(splitmix64(splitmix64(self.scale as u64 ^ 0xD6E8_FEB8_6659_FD93) ^ self.block));
        rng
    }
}

/// A Poisson(`lambda`) count; zero for `lambda <= 0`.
pub fn poisson_count<R: Rng + ?Sized>(rng: &mut R, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    match Poisson::new(lambda) {
        Ok(dist) => dist.sample(rng) as u64,
        // Beyond the sampler's range (about 1.8e19): normal approximation.
        Err(_) => {
            let z: f64 = rand_distr::StandardNormal.sample(rng);
            (lambda + z * lambda.sqrt()).round().max(0.0) as u64
        }
    }
}

/// An exponential waiting time of the given rate.
pub fn exponential<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let key = StreamKey::new(7).replica(3).layer(2, 11);
        let a: Vec<u64> = (0..4)
            .map({
                let mut r = key.rng();
                move |_| r.random()
            })
            .collect();
        let b: Vec<u64> = (0..4)
            .map({
                let mut r = key.rng();
                move |_| r.random()
            })
            .collect();
        assert_eq!(a, b);
        let mut other = key.layer(2, 12).rng();
        assert_ne!(a[0], other.random::<u64>());
        let mut other = key.replica(4).rng();
        assert_ne!(a[0], other.random::<u64>());
        let mut aux = key.aux(Aux::Explore, 11).rng();
        assert_ne!(a[0], aux.random::<u64>());
    }
}
