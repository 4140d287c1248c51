//! Seeded, portable random number generation.
//!
//! Every stochastic step in the crate (parameter init, batch shuffling, attack
//! random starts, data synthesis) draws from a [`Rng`] reached through a
//! [`Seed`] tree, so a single 64-bit root seed pins an entire run bitwise.
//!
//! The generator is fixed and documented rather than pulled from a
//! dependency, because reproducibility across builds is part of the crate's
//! contract:
//!
//! - stream derivation and state expansion use the splitmix64 finalizer
//!   (Steele, Lea, Flood 2014);
//! - the stream itself is xoshiro256++ (Blackman, Vigna 2019).
//!
//! Integer and uniform draws are pure IEEE-754/integer arithmetic and
//! reproduce bitwise on any platform. [`Rng::next_normal`] additionally goes
//! through `ln`/`sqrt`; `sqrt` is exact, `ln` is deterministic per libm build.

/// A point in the seed tree. Cheap to copy; derive children freely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seed(pub u64);

/// splitmix64 output/mixing function: bijective on u64 with strong avalanche.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Seed {
    /// Child seed for an integer-indexed substream (epoch, batch, sample, ...).
    pub fn child(self, tag: u64) -> Seed {
        Seed(mix64(self.0 ^ mix64(tag ^ 0x9E37_79B9_7F4A_7C15)))
    }

    /// Child seed for a named substream ("init", "shuffle", "attack", ...).
    ///
    /// The label is folded with FNV-1a so the tag space is disjoint from
    /// small-integer tags.
    pub fn child_str(self, label: &str) -> Seed {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for &b in label.as_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.child(h)
    }

    /// Generator for this node of the tree.
    pub fn rng(self) -> Rng {
        Rng::from_seed(self)
    }
}

/// xoshiro256++ stream.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn from_seed(seed: Seed) -> Rng {
        // Expand the 64-bit seed into 256 bits of state with the splitmix64
        // sequence, the seeding procedure recommended for the xoshiro family.
        let mut z = seed.0;
        let mut s = [0u64; 4];
        for slot in &mut s {
            z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
            *slot = mix64(z.wrapping_sub(0x9E37_79B9_7F4A_7C15));
        }
        // All-zero state is the one fixed point of the stream; unreachable in
        // practice, handled anyway.
        if s == [0, 0, 0, 0] {
            s[0] = 1;
        }
        Rng { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Uniform integer in [0, n) by rejection, so every value is equally
    /// likely regardless of n.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index needs a nonempty range");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal deviate via the Marsaglia polar method.
    ///
    /// One deviate per call; the pair's second value is discarded so the
    /// stream position depends only on the rejection count.
    pub fn next_normal(&mut self) -> f64 {
        loop {
            let u = self.uniform(-1.0, 1.0);
            let v = self.uniform(-1.0, 1.0);
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Fisher–Yates shuffle of 0..n, used for epoch batch permutations.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.next_index(i + 1);
            p.swap(i, j);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_equal_streams() {
        let mut a = Seed(42).rng();
        let mut b = Seed(42).rng();
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn child_streams_are_distinct() {
        let root = Seed(7);
        let mut a = root.child(0).rng();
        let mut b = root.child(1).rng();
        let mut c = root.child_str("attack").rng();
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_ne!(x, y);
        assert_ne!(x, z);
        assert_ne!(y, z);
    }

    /// Stream values pinned when the crate was created. A failure here means
    /// the generator changed and stored seeds are no longer portable.
    #[test]
    fn stream_is_frozen() {
        let mut r = Seed(1).rng();
        let got: Vec<u64> = (0..4).map(|_| r.next_u64()).collect();
        let expected = [
            0xcfc5d07f6f03c29bu64,
            0xbf424132963fe08d,
            0x19a37d5757aaf520,
            0xbf08119f05cd56d6,
        ];
        assert_eq!(got, expected);
    }

    #[test]
    fn uniform_respects_bounds() {
        let mut r = Seed(3).rng();
        for _ in 0..10_000 {
            let x = r.uniform(-0.25, 0.25);
            assert!((-0.25..0.25).contains(&x));
        }
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut r = Seed(11).rng();
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let z = r.next_normal();
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn permutation_is_a_bijection() {
        let mut r = Seed(5).rng();
        let p = r.permutation(100);
        let mut seen = vec![false; 100];
        for &i in &p {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.into_iter().all(|s| s));
    }
}
