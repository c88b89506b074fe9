//! Counter-based deterministic random number generation.
//!
//! The generator is SplitMix64 driven by an explicit counter, so a stream is
//! fully determined by `(seed, counter)`. Identical seed and call sequence
//! produce identical output on every platform; normal deviates go through
//! `libm`, which is bit-reproducible software math.

use alloc::vec::Vec;

use crate::math;
use crate::volume::{Shape4, Volume};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Seeded counter-based RNG. `Clone` gives an identical replay of the stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
    spare_normal: Option<u64>, // raw bits of the cached Box-Muller deviate
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            counter: 0,
            spare_normal: None,
        }
    }

    /// Restores an rng from persisted state (see checkpoint format).
    pub fn from_state(seed: u64, counter: u64) -> Self {
        Rng {
            seed,
            counter,
            spare_normal: None,
        }
    }

    pub fn state(&self) -> (u64, u64) {
        (self.seed, self.counter)
    }

    /// Independent named sub-stream. Used to fan one run seed out to
    /// data/init/train/sample streams that stay reproducible in isolation.
    pub fn derive(&self, label: &str) -> Rng {
        Rng::new(mix(self.seed ^ fnv1a(label.as_bytes()).wrapping_mul(GOLDEN)))
    }

    /// Independent indexed sub-stream (one per phantom, per sample, ...).
    pub fn derive_index(&self, index: u64) -> Rng {
        Rng::new(mix(self.seed ^ index.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `(0, 1]`; never zero, safe under `ln`.
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform integer in `[0, n)` without modulo bias.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = n * (u64::MAX / n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Uniform in `(lo, hi]`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal deviate via Box-Muller; the paired value is cached.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(bits) = self.spare_normal.take() {
            return f64::from_bits(bits);
        }
        let (z0, z1) = self.normal_pair();
        self.spare_normal = Some(z1.to_bits());
        z0
    }

    fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        let r = math::sqrt(-2.0 * math::ln(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        (r * math::cos(theta), r * math::sin(theta))
    }

    /// Volume of i.i.d. standard normal draws.
    pub fn normal_volume(&mut self, shape: Shape4) -> Volume {
        let n = shape.len();
        let mut data = Vec::with_capacity(n);
        while data.len() + 2 <= n {
            let (z0, z1) = self.normal_pair();
            data.push(z0);
            data.push(z1);
        }
        if data.len() < n {
            let (z0, _) = self.normal_pair();
            data.push(z0);
        }
        Volume::new(shape, data).expect("normal draws are finite")
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        self.normal_volume(Shape4::new(1, 1, 1, n)).into_data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let s = Shape4::new(1, 4, 4, 4);
        let va = Rng::new(9).normal_volume(s);
        let vb = Rng::new(9).normal_volume(s);
        assert_eq!(va.data(), vb.data());
    }

    #[test]
    fn successive_volumes_differ() {
        let mut r = Rng::new(3);
        let s = Shape4::new(1, 2, 2, 2);
        let a = r.normal_volume(s);
        let b = r.normal_volume(s);
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn derived_streams_differ() {
        let root = Rng::new(42);
        let mut a = root.derive("data");
        let mut b = root.derive("init");
        let mut c = root.derive_index(0);
        let x = a.next_u64();
        assert_ne!(x, b.next_u64());
        assert_ne!(x, c.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(123);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let z = r.next_normal();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn next_below_is_in_range_and_covers() {
        let mut r = Rng::new(5);
        let mut seen = [false; 10];
        for _ in 0..1000 {
            let v = r.next_below(10) as usize;
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
