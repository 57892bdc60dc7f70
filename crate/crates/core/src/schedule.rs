//! Noise schedule and the deterministic DDIM update.
//!
//! With `ab_t` the cumulative product of `alpha_t = 1 - beta_t` (and `ab_0 = 1`):
//!
//! ```text
//! x0      = (z_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)
//! sigma_t = eta sqrt((1 - ab_{t-1}) / (1 - ab_t)) sqrt(1 - ab_t / ab_{t-1})
//! z_{t-1} = sqrt(ab_{t-1}) x0 + sqrt(1 - ab_{t-1} - sigma_t^2) eps + sigma_t n
//! ```
//!
//! Inversion runs the `eta = 0` map backwards with the same `eps`. Arithmetic
//! is done per element in `f64` and rounded once to `f32`.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{randn, SeededRng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `alpha_t` for `t = 1..=T` at index `t - 1`.
    alphas: Vec<f32>,
    /// `ab_t` for `t = 0..=T`.
    alpha_bars: Vec<f32>,
}

impl NoiseSchedule {
    /// `beta_t = start + (end - start) (t - 1) / (T - 1)`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) && steps > 1 {
            return Err(Error::Config(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f32> = (0..steps)
            .map(|k| {
                let frac = if steps == 1 {
                    0.0
                } else {
                    k as f64 / (steps - 1) as f64
                };
                (beta_start + (beta_end - beta_start) * frac) as f32
            })
            .collect();
        let alphas: Vec<f32> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        let mut acc = 1.0f64;
        alpha_bars.push(1.0);
        for &a in &alphas {
            acc *= f64::from(a);
            alpha_bars.push(acc as f32);
        }
        Ok(Self { alphas, alpha_bars })
    }

    /// Default ramp: `T` steps from `1e-4` to `0.02`.
    pub fn default_linear(steps: usize) -> Result<Self> {
        Self::linear(steps, 1e-4, 0.02)
    }

    /// Arbitrary cumulative products `ab_0 ..= ab_T`, each in `(0, 1]`,
    /// non-increasing, with `ab_0 = 1`. Equal neighbours are allowed.
    pub fn from_alpha_bars(alpha_bars: Vec<f32>) -> Result<Self> {
        if alpha_bars.len() < 2 || alpha_bars[0] != 1.0 {
            return Err(Error::Config(
                "alpha_bars must start with 1 and have at least two entries".into(),
            ));
        }
        if alpha_bars.iter().any(|&a| !(a > 0.0 && a <= 1.0))
            || alpha_bars.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::Config(
                "alpha_bars must lie in (0, 1] and be non-increasing".into(),
            ));
        }
        let alphas = alpha_bars
            .windows(2)
            .map(|w| (f64::from(w[1]) / f64::from(w[0])) as f32)
            .collect();
        Ok(Self { alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alpha(&self, t: usize) -> f32 {
        self.alphas[t - 1]
    }

    pub fn beta(&self, t: usize) -> f32 {
        1.0 - self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f32 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f32] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over `T` and the bits of every `ab_t`.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.steps() as u64).to_le_bytes());
        for a in &self.alpha_bars {
            h.update(a.to_le_bytes());
        }
        hex::encode(h.finalize())[..16].to_string()
    }
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dim(format!(
            "latent {:?} and noise prediction {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// One reverse step `z_t -> z_{t-1}`. Draws noise from `rng` only when `eta > 0`.
pub fn ddim_reverse_step(
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    eta: f32,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    check_pair(z_t, eps)?;
    let ab_t = f64::from(schedule.alpha_bar(t));
    let ab_prev = f64::from(schedule.alpha_bar(t - 1));
    let sigma = if eta > 0.0 && ab_t < 1.0 {
        f64::from(eta) * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt()
    } else {
        0.0
    };
    let noise = if eta > 0.0 {
        Some(randn(rng, z_t.dims().to_vec())?)
    } else {
        None
    };
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (sq_t, sq1_t, sq_prev) = (ab_t.sqrt(), (1.0 - ab_t).sqrt(), ab_prev.sqrt());
    let data = z_t
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(k, (&z, &e))| {
            let (z, e) = (f64::from(z), f64::from(e));
            let x0 = (z - sq1_t * e) / sq_t;
            let n = noise.as_ref().map_or(0.0, |n| f64::from(n.data()[k]));
            (sq_prev * x0 + dir * e + sigma * n) as f32
        })
        .collect();
    Tensor::new(z_t.dims().to_vec(), data)
}

/// Inverse of the `eta = 0` reverse step: `z_{t-1} -> z_t` with the given `eps`.
pub fn ddim_inversion_step(
    z_prev: &Tensor,
    eps: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    check_pair(z_prev, eps)?;
    let ab_t = f64::from(schedule.alpha_bar(t));
    let ab_prev = f64::from(schedule.alpha_bar(t - 1));
    let (sq_t, sq1_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sq_prev, sq1_prev) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let data = z_prev
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| {
            let (z, e) = (f64::from(z), f64::from(e));
            let x0 = (z - sq1_prev * e) / sq_prev;
            (sq_t * x0 + sq1_t * e) as f32
        })
        .collect();
    Tensor::new(z_prev.dims().to_vec(), data)
}

/// Forward diffusion by one step: `sqrt(alpha_t) z_{t-1} + sqrt(1 - alpha_t) n`, fresh `n`.
pub fn rediffuse(
    z_prev: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    let noise = randn(rng, z_prev.dims().to_vec())?;
    let a = f64::from(schedule.alpha(t));
    let (keep, add) = (a.sqrt(), (1.0 - a).max(0.0).sqrt());
    let data = z_prev
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&z, &n)| (keep * f64::from(z) + add * f64::from(n)) as f32)
        .collect();
    Tensor::new(z_prev.dims().to_vec(), data)
}
