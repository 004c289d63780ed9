//! Counter-based random streams.
//!
//! Every consumer (init, dropout, data, shuffle, ...) gets its own named
//! stream derived from (seed, name), so adding a consumer never perturbs the
//! draws of any other. A stream is just a key plus a counter; output i is a
//! pure hash of (key, i), which makes stream state trivially checkpointable.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_name(name: &str) -> u64 {
    // FNV-1a, then one mixing round.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, name: &str) -> Self {
        RngStream {
            key: splitmix64(seed ^ hash_name(name)),
            counter: 0,
        }
    }

    /// Rebuild a stream at a saved counter position.
    pub fn restore(seed: u64, name: &str, counter: u64) -> Self {
        let mut s = RngStream::new(seed, name);
        s.counter = counter;
        s
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        splitmix64(self.key ^ c.wrapping_mul(GOLDEN))
    }

    /// Uniform in [0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Modulo bias is negligible for desk-scale n against 2^64.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f64 {
        let mut u1 = self.next_f64();
        if u1 == 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic() {
        let mut a = RngStream::new(42, "init");
        let mut b = RngStream::new(42, "init");
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_are_independent_by_name() {
        let mut a = RngStream::new(42, "init");
        let mut b = RngStream::new(42, "dropout");
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn restore_resumes_exactly() {
        let mut a = RngStream::new(7, "data");
        for _ in 0..13 {
            a.next_f64();
        }
        let mut b = RngStream::restore(7, "data", a.counter());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_mean_sane() {
        let mut s = RngStream::new(1, "u");
        let n = 20_000;
        let mean: f64 = (0..n).map(|_| s.next_f64()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn normal_moments_sane() {
        let mut s = RngStream::new(1, "n");
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| s.next_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03);
        assert!((var - 1.0).abs() < 0.05);
    }
}
