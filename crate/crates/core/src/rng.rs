//! Deterministic random number generation.
//!
//! The generator is xoshiro256** seeded through splitmix64, so streams are
//! bit-identical across platforms and across ports of this pipeline to other
//! languages. Gaussian deviates come from Box-Muller pairs; the second member
//! of each pair is buffered.

/// One splitmix64 step: advances `state` and returns the mixed output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256** generator with buffered Box-Muller gaussians.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
    seed: u64,
    spare_gaussian: Option<f64>,
}

impl Rng {
    /// Creates a generator whose state is the splitmix64 expansion of `seed`.
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng {
            s,
            seed,
            spare_gaussian: None,
        }
    }

    /// The seed this generator was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child generator for worker `index`.
    ///
    /// `seed_child = splitmix64(parent_seed XOR index)`, so parallel workers
    /// can be given disjoint streams without sharing state.
    pub fn split(&self, index: u64) -> Rng {
        let mut s = self.seed ^ index;
        Rng::new(splitmix64(&mut s))
    }

    /// Next raw 64-bit output of xoshiro256**.
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform deviate in [0, 1): top 53 bits of the next output over 2^53.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform deviate in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.uniform() * (hi - lo)
    }

    /// Uniform integer in [0, n). Rejection-free via 53-bit scaling; fine for
    /// the small n used here (dataset indices, augmentation choices).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let i = (self.uniform() * n as f64) as usize;
        i.min(n - 1)
    }

    /// Standard normal deviate via Box-Muller; pairs are generated and the
    /// second value buffered for the next call.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite; u2 in [0, 1).
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let (z0, z1) = box_muller(u1, u2);
        self.spare_gaussian = Some(z1);
        z0
    }
}

/// Box-Muller transform of a uniform pair, u1 in (0, 1], u2 in [0, 1).
pub fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let r = (-2.0 * u1.ln()).sqrt();
    let a = 2.0 * std::f64::consts::PI * u2;
    (r * a.cos(), r * a.sin())
}
