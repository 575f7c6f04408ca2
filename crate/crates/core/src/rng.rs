//! Seedable split-stream random number generator.
//!
//! Every tensor gets its own stream keyed by name, so initialization is
//! independent of the order in which tensors are visited. Identical
//! `(seed, stream_id)` pairs always produce bit-identical sequences.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a byte string; used to derive stream ids from tensor names.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic PRNG (xoshiro256++ core seeded via splitmix64).
#[derive(Debug, Clone)]
pub struct Rng {
    pub seed: u64,
    pub stream_id: u64,
    state: [u64; 4],
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut acc = seed ^ stream_id.wrapping_mul(GOLDEN);
        let mut state = [0u64; 4];
        for word in &mut state {
            *word = splitmix64(&mut acc);
        }
        // xoshiro must not start from the all-zero state
        if state.iter().all(|&w| w == 0) {
            state[0] = GOLDEN;
        }
        Rng {
            seed,
            stream_id,
            state,
            spare_normal: None,
        }
    }

    /// Stream for a named tensor under a given seed.
    pub fn for_name(seed: u64, name: &str) -> Self {
        Rng::new(seed, fnv1a64(name.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
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

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        // modulo bias is irrelevant for the n << 2^64 uses in this crate
        self.next_u64() % n
    }

    /// Standard normal via Box-Muller; pairs are cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so ln is finite
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// `count` i.i.d. samples from N(0, std^2); std = 0 yields exact zeros.
    pub fn gaussian(&mut self, count: usize, std: f64) -> Vec<f64> {
        if std == 0.0 {
            return vec![0.0; count];
        }
        (0..count).map(|_| std * self.normal()).collect()
    }
}
