//! Portable random streams.
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded via
//! `SeedableRng::seed_from_u64`. Derived samples are defined on top of the raw
//! `u64` stream so that another implementation can reproduce them exactly:
//!
//! * uniform `[0, 1)`: `(next_u64 >> 11) * 2^-53`
//! * integer below `n`: `floor(uniform * n)`
//! * standard normal: Box–Muller on two uniforms, `sqrt(-2 ln(1 - u1)) * cos(2π u2)`
//!   (one draw per pair; the sine branch is discarded)

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Debug, Clone)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
