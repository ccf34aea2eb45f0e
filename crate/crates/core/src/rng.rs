// SPDX-License-Identifier: MIT OR Apache-2.0

//! Counter-based pseudo-random streams.
//!
//! Weight initialisation and dropout masks both derive from splitmix64 so
//! that every value is a pure function of `(seed, counter)` and can be
//! replayed on any platform.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One splitmix64 finalisation round.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sequential splitmix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Standard normal samples via the Box–Muller transform; both outputs of
/// each transform are used in order.
#[derive(Debug, Clone)]
pub struct BoxMuller {
    inner: SplitMix64,
    spare: Option<f64>,
}

impl BoxMuller {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::new(seed),
            spare: None,
        }
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps ln finite.
        let u1 = 1.0 - self.inner.next_f64();
        let u2 = self.inner.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }
}

/// Stateless uniform draw in `[0, 1)` for position `counter` of stream `seed`.
#[inline]
pub fn uniform_at(seed: u64, counter: u64) -> f64 {
    let z = mix64(seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)));
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Derives an independent sub-stream seed.
#[inline]
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    mix64(seed ^ mix64(salt.wrapping_add(GOLDEN)))
}
