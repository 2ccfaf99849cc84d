//! Counter-based random streams.
//!
//! Every stochastic choice in the pipeline draws from a [`Stream`] identified
//! by a master seed and a stream label. The generator is SplitMix64 applied to
//! a 64-bit counter, keyed by a hash of `(seed, label)`, so the n-th draw of a
//! stream depends only on the seed, the label and n. That makes the sequence
//! trivially portable: any implementation of SplitMix64 and FNV-1a reproduces
//! it bit for bit.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A named, deterministic random stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64, label: &str) -> Self {
        Stream {
            key: mix64(seed ^ mix64(fnv1a(label.as_bytes()))),
            counter: 0,
        }
    }

    /// Derives an independent child stream; the parent is not advanced.
    pub fn fork(&self, label: &str) -> Self {
        Stream {
            key: mix64(self.key ^ mix64(fnv1a(label.as_bytes()).wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    /// Number of words drawn so far.
    pub fn position(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        // rejection zone keeps the result unbiased
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn coin(&mut self) -> bool {
        self.next_u64() >> 63 == 1
    }

    /// Standard normal via Box-Muller (one draw per call, no caching).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `[0, n)` when `k <= n`, otherwise `k` draws
    /// with replacement.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        if k <= n {
            let mut all: Vec<usize> = (0..n).collect();
            // partial Fisher-Yates
            for i in 0..k {
                let j = i + self.below(n - i);
                all.swap(i, j);
            }
            all.truncate(k);
            all
        } else {
            (0..k).map(|_| self.below(n)).collect()
        }
    }
}
