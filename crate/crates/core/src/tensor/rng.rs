/// SplitMix64 generator.
///
/// Each draw adds `0x9E37_79B9_7F4A_7C15` to the state and mixes the result
/// with the shifts 30/27/31 and multipliers `0xBF58_476D_1CE4_E5B9`,
/// `0x94D0_49BB_1331_11EB`. Uniforms take the top 53 bits.
///
/// Normals use the Box-Muller transform evaluated in `f64` with the portable
/// `libm` routines, then rounded to `f32`:
/// `u1 = 1 - uniform()`, `u2 = uniform()`, `r = sqrt(-2 ln u1)`,
/// emitting `r cos(2 pi u2)` first and caching `r sin(2 pi u2)` for the next call.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-bound, bound)`, rounded to `f32`.
    pub fn uniform_symmetric(&mut self, bound: f64) -> f32 {
        (bound * (2.0 * self.uniform() - 1.0)) as f32
    }

    pub fn normal(&mut self) -> f32 {
        if let Some(s) = self.spare.take() {
            return s as f32;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        (r * libm::cos(theta)) as f32
    }
}
