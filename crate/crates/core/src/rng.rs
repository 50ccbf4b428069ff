//! Deterministic splittable random streams.
//!
//! Every operation derives child streams from `(seed, operation tag, index)`
//! so that parallel evaluation order never changes results. A [`StreamKey`]
//! is a 64-bit key; `child` mixes in a string tag, `index` mixes in an
//! integer, and `rng` instantiates a ChaCha12 generator from the key.
//! Identical key paths yield bitwise-identical draw sequences on every
//! platform.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal, StandardUniform};

use crate::scalar::Scalar;

/// splitmix64 finalizer; a strong 64-bit mixer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn hash_tag(tag: &str) -> u64 {
    // FNV-1a over the tag bytes.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Key identifying one random stream in the derivation tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(master_seed: u64) -> Self {
        StreamKey(mix(master_seed))
    }

    /// Derive a child stream for a named sub-operation.
    pub fn child(self, tag: &str) -> Self {
        StreamKey(mix(self.0 ^ hash_tag(tag)))
    }

    /// Derive a child stream for a replicate/sample index.
    pub fn index(self, i: u64) -> Self {
        StreamKey(mix(self.0 ^ mix(i.wrapping_add(0x517c_c1b7_2722_0a95))))
    }

    /// Instantiate the generator for this stream.
    pub fn rng(self) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(self.0)
    }

    /// The raw 64-bit key, for handing to operations that take a seed.
    pub fn seed(self) -> u64 {
        self.0
    }
}

/// Draw `n` standard normal variates into a fresh vector.
///
/// Sampling happens at `f64` precision and converts, so the variate sequence
/// is identical across scalar types.
pub fn normal_vec<F: Scalar>(rng: &mut ChaCha12Rng, n: usize) -> Vec<F> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            F::c(x)
        })
        .collect()
}

/// Fill a slice with standard normal variates.
pub fn fill_normal<F: Scalar>(rng: &mut ChaCha12Rng, out: &mut [F]) {
    for v in out.iter_mut() {
        let x: f64 = StandardNormal.sample(rng);
        *v = F::c(x);
    }
}

/// Draw a uniform variate in `[0, 1)`.
pub fn uniform_01<F: Scalar>(rng: &mut ChaCha12Rng) -> F {
    let x: f64 = StandardUniform.sample(rng);
    F::c(x)
}

/// Sample `k` distinct indices from `0..n` uniformly without replacement.
///
/// Partial Fisher-Yates over an index table; the result keeps draw order.
pub fn sample_without_replacement(rng: &mut ChaCha12Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} of {n} without replacement");
    let mut idx: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let j = i + (rand::Rng::random_range(rng, 0..(n - i) as u64)) as usize;
        idx.swap(i, j);
        out.push(idx[i]);
    }
    out
}
