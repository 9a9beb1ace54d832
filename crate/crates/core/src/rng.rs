//! Counter-based deterministic random numbers.
//!
//! Every draw is a pure function of (seed, key words), so a value at a given
//! coordinate, e.g. the Gumbel noise for (step, stage, token), is
//! reproducible regardless of how many other draws happened before it, and is
//! identical across platforms. There is also a small sequential convenience
//! stream for places where coordinates don't matter (parameter init, data
//! generation), built on the same mixer with an internal counter.

/// splitmix64 finalizer; full-period bijection on u64.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent generator for a named substream.
    pub fn stream(&self, tag: u64) -> Rng {
        Rng {
            seed: mix(self.seed ^ mix(tag)),
            counter: 0,
        }
    }

    fn hash_key(&self, key: &[u64]) -> u64 {
        let mut acc = mix(self.seed);
        for &k in key {
            acc = mix(acc ^ mix(k));
        }
        acc
    }

    /// Uniform in (0, 1) at an explicit coordinate.
    pub fn uniform_at(&self, key: &[u64]) -> f64 {
        let bits = self.hash_key(key);
        // 53 mantissa bits, shifted into (0, 1); never exactly 0 or 1.
        (((bits >> 11) as f64) + 0.5) / (1u64 << 53) as f64
    }

    /// Standard Gumbel(0, 1) at an explicit coordinate.
    pub fn gumbel_at(&self, key: &[u64]) -> f64 {
        let u = self.uniform_at(key);
        -(-u.ln()).ln()
    }

    /// Standard normal at an explicit coordinate (Box-Muller).
    pub fn normal_at(&self, key: &[u64]) -> f64 {
        let mut k = key.to_vec();
        k.push(0);
        let u1 = self.uniform_at(&k);
        *k.last_mut().unwrap() = 1;
        let u2 = self.uniform_at(&k);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    // Sequential convenience draws. Each call consumes one counter slot.

    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        self.hash_key(&[SEQ_DOMAIN, c])
    }

    pub fn uniform(&mut self) -> f64 {
        let bits = self.next_u64();
        (((bits >> 11) as f64) + 0.5) / (1u64 << 53) as f64
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }
}

/// Domain separator so sequential draws never collide with keyed draws.
const SEQ_DOMAIN: u64 = 0x7365_7175_656e_7431;
