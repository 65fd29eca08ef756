//! Deterministic random streams.
//!
//! The whole pipeline draws randomness through [`RngState`], a value type
//! wrapping a single `u64` seed. Independent purposes (label sampling,
//! frame noise, weight init, shuffling, ...) each derive a *child* state
//! from `(seed, tag, index)` so that adding a consumer or reordering work
//! never shifts anyone else's stream.
//!
//! The generator is self-contained rather than pulled from a crate, because
//! bit-level reproducibility across builds and years is part of the
//! contract here. The algorithms are fixed:
//!
//! * stream mixing / seeding: SplitMix64 (Steele et al.),
//! * generation: xoshiro256++ 1.0 (Blackman & Vigna),
//! * uniform doubles: top 53 bits scaled by 2^-53, giving [0, 1),
//! * integers below n: rejection sampling (no modulo bias),
//! * normals: Marsaglia polar method; the second value of each pair is
//!   discarded so one call consumes a self-contained number of draws.
//!
//! Integer outputs are platform-independent. Floating-point outputs use
//! only IEEE arithmetic plus `ln`/`sqrt` and are stable on a given
//! platform, which is the determinism contract the pipeline promises.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 output mixing function.
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One step of the SplitMix64 sequence; advances `state` and returns a value.
fn splitmix_next(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    mix(*state)
}

/// A reproducible point in seed space.
///
/// `RngState` is cheap to copy and carries no generator state; call
/// [`RngState::stream`] to materialise a generator, or [`RngState::child`]
/// to derive an independent state for a named purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive the child state for `(tag, index)`.
    ///
    /// The child seed is `mix(mix((seed ^ fnv1a64(tag)) + GOLDEN) ^ index * C)`
    /// with C an odd spreading constant, so distinct tags and indices land in
    /// unrelated regions of seed space.
    pub fn child(&self, tag: &str, index: u64) -> RngState {
        let mut z = self.seed ^ crate::digest::fnv1a64(tag.as_bytes());
        z = mix(z.wrapping_add(GOLDEN));
        z = mix(z ^ index.wrapping_mul(0xd2b7_4407_b1ce_6e93));
        RngState { seed: z }
    }

    /// Materialise a generator seeded from this state.
    pub fn stream(&self) -> Rng {
        Rng::from_seed(self.seed)
    }
}

/// xoshiro256++ generator.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
}

#[inline]
fn rotl(x: u64, k: u32) -> u64 {
    x.rotate_left(k)
}

impl Rng {
    /// Seed the four state words from a SplitMix64 sequence, per the
    /// generator authors' recommendation.
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix_next(&mut sm),
            splitmix_next(&mut sm),
            splitmix_next(&mut sm),
            splitmix_next(&mut sm),
        ];
        Rng { s }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = rotl(s[0].wrapping_add(s[3]), 23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = rotl(s[3], 45);
        result
    }

    /// Uniform double in [0, 1) from the top 53 bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in [lo, hi).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.uniform() * (hi - lo)
    }

    /// Uniform integer in [0, n) by rejection; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is meaningless");
        // Largest multiple of n representable: reject draws at or above it.
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// True with probability `p`.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via the Marsaglia polar method (spare discarded).
    pub fn normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below((i + 1) as u64) as usize;
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First three outputs of SplitMix64 seeded with 1234567,
        // cross-checked against an independent implementation.
        let mut s = 1234567u64;
        assert_eq!(splitmix_next(&mut s), 0x599ed017fb08fc85);
        assert_eq!(splitmix_next(&mut s), 0x2c73f08458540fa5);
        assert_eq!(splitmix_next(&mut s), 0x883ebce5a3f27c77);
    }

    #[test]
    fn xoshiro_golden_values() {
        // First outputs for seed 42; frozen so any change to seeding or
        // the generator step is caught immediately.
        let mut r = Rng::from_seed(42);
        assert_eq!(r.next_u64(), 0xd0764d4f4476689f);
        assert_eq!(r.next_u64(), 0x519e4174576f3791);
        assert_eq!(r.next_u64(), 0xfbe07cfb0c24ed8c);
        assert_eq!(r.next_u64(), 0xb37d9f600cd835b8);
        assert_eq!(r.next_u64(), 0xcb231c3874846a73);
    }

    #[test]
    fn same_state_same_draws() {
        let a: Vec<u64> = {
            let mut r = RngState::new(42).stream();
            (0..32).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngState::new(42).stream();
            (0..32).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn children_are_stable_and_distinct() {
        let root = RngState::new(42);
        assert_eq!(root.child("labels", 3), root.child("labels", 3));
        assert_ne!(root.child("labels", 3), root.child("labels", 4));
        assert_ne!(root.child("labels", 3), root.child("frames", 3));
        // A child stream does not collide with its parent.
        assert_ne!(root.child("labels", 0).seed(), root.seed());
    }

    #[test]
    fn uniform_unit_interval() {
        let mut r = RngState::new(7).stream();
        let mut sum = 0.0;
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn below_is_in_range_and_roughly_uniform() {
        let mut r = RngState::new(9).stream();
        let mut counts = [0usize; 7];
        for _ in 0..70_000 {
            counts[r.below(7) as usize] += 1;
        }
        for &c in &counts {
            assert!((8_000..12_000).contains(&c), "counts {counts:?}");
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = RngState::new(11).stream();
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let z = r.normal();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn shuffle_is_a_permutation_and_deterministic() {
        let mut a: Vec<u32> = (0..50).collect();
        let mut b = a.clone();
        RngState::new(5).child("shuffle", 0).stream().shuffle(&mut a);
        RngState::new(5).child("shuffle", 0).stream().shuffle(&mut b);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(a, sorted, "50 elements should not shuffle to identity");
    }
}
