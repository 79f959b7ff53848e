//! Tiny deterministic PRNG (splitmix64). Every stochastic choice in the
//! project flows through this so runs are bit-reproducible across platforms.

#[derive(Clone, Debug)]
pub struct DetRng {
    state: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold tags into a seed so sub-streams (per split, per epoch, per sample)
/// never collide with each other or with the parent stream.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut s = seed ^ 0xA076_1D64_78BD_642F;
    let mut out = splitmix64(&mut s);
    for &t in tags {
        s ^= t.wrapping_mul(0xE703_7ED1_A0B4_28DB);
        out = splitmix64(&mut s);
    }
    out
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        DetRng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform on the 2^-24 dyadic grid in [0, 1). Every value x satisfies
    /// fl(1 - x) == 1 - x exactly, which the mixing code relies on.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / 16_777_216.0
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / 9_007_199_254_740_992.0
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform index in [0, n). Modulo bias is below 2^-50 for desk-scale n.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller. Draws two uniforms per call.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal(0, std) resampled until within clip·std of zero.
    pub fn trunc_normal(&mut self, std: f64, clip: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= clip {
                return z * std;
            }
        }
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}
