//! Deterministic random streams.
//!
//! Everything random in this crate (toy denoiser weights, initial latents,
//! synthetic embeddings) comes from one explicitly specified generator so
//! that any implementation, in any language, can reproduce the exact same
//! values:
//!
//! * State update (SplitMix64):
//!   `state = state.wrapping_add(0x9E3779B97F4A7C15)`, then
//!   `z = state; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
//!    z = (z ^ (z >> 27)) * 0x94D049BB133111EB; output z ^ (z >> 31)`
//!   (all with wrapping 64-bit arithmetic).
//! * Uniform in `[0, 1)`: `(next_u64() >> 11) as f64 * 2^-53`.
//! * Uniform in `[-1, 1)`: `2 * unit - 1`.
//! * Standard Gaussian pairs (Box–Muller):
//!   `u1 = ((next_u64() >> 11) + 1) as f64 * 2^-53` (in `(0, 1]`),
//!   `u2 = next_u64() uniform in [0, 1)`,
//!   `r = sqrt(-2 ln u1)`, outputs `r cos(2π u2)` then `r sin(2π u2)`.
//!   A vector of odd length discards the unused second member of its
//!   final pair, so each `gaussian_vec(n)` call consumes exactly
//!   `ceil(n / 2)` pairs of `u64` draws.

const TWO_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_NEG_53
    }

    /// Uniform in `[-1, 1)`.
    pub fn next_pm1(&mut self) -> f64 {
        2.0 * self.next_unit() - 1.0
    }

    /// One Box–Muller pair of independent standard Gaussians.
    pub fn next_gaussian_pair(&mut self) -> (f64, f64) {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * TWO_NEG_53;
        let u2 = self.next_unit();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// `n` standard Gaussians; odd `n` discards the spare half-pair.
    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let (a, b) = self.next_gaussian_pair();
            out.push(a);
            if out.len() < n {
                out.push(b);
            }
        }
        out
    }

    /// `n` uniforms in `[-1, 1)`.
    pub fn pm1_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_pm1()).collect()
    }
}
