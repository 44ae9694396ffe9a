//! Portable, fully specified pseudo-random generator.
//!
//! All randomized operations in this crate draw from [`SplitMix64`] through
//! the derivations below, so any reimplementation reproduces our outputs
//! bit-for-bit given the same seed:
//!
//! * state transition: `state <- state + 0x9E3779B97F4A7C15 (mod 2^64)`
//! * output: `z = state; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
//!   z = (z ^ (z >> 27)) * 0x94D049BB133111EB; z ^ (z >> 31)` (wrapping)
//! * [`SplitMix64::next_f64`]: `(next_u64 >> 11) * 2^-53`, uniform on `[0, 1)`
//! * [`SplitMix64::below`]`(n)`: draw `x = next_u64` until
//!   `x < n * floor(2^64 / n)`, then return `x mod n`
//! * [`SplitMix64::shuffle`]: Fisher-Yates from the last index down, swapping
//!   position `i` with `below(i + 1)`
//! * [`SplitMix64::sample_indices`]`(n, k)`: the first `k` steps of a forward
//!   Fisher-Yates over `0..n` (position `i` swaps with `i + below(n - i)`),
//!   returning the first `k` entries in draw order
//! * [`SplitMix64::bernoulli`]`(p)`: `next_f64 < p`

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let limit = n * (u64::MAX / n);
        loop {
            let x = self.next_u64();
            if x < limit {
                return x % n;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, uniformly, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
