//! Forward-process noise schedule.
//!
//! The schedule stores the signal coefficient alpha_t of
//!   z_t = alpha_t * z_0 + sqrt(1 - alpha_t^2) * eps,
//! i.e. the square root of the cumulative product of (1 - beta) in the
//! usual DDPM parameterization. alpha_1 is near 1 (almost clean) and
//! alpha_T near 0 (almost pure noise).

use crate::error::{Error, Result};
use crate::latent::LatentVideo;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<ScheduleKind> {
        match s {
            "linear-beta" => Ok(ScheduleKind::LinearBeta),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>, // alpha[t - 1] = alpha_t, t in 1..=T
}

/// Build a schedule over T timesteps. Deterministic for fixed inputs.
pub fn make_schedule(timesteps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if timesteps < 2 {
        return Err(Error::invalid(format!("need at least 2 timesteps, got {timesteps}")));
    }
    let t_f = timesteps as f64;
    let mut alpha = Vec::with_capacity(timesteps);
    match kind {
        ScheduleKind::LinearBeta => {
            // Endpoints chosen so alpha spans roughly 0.9999 -> 0.006 at
            // T = 1000, the usual latent-diffusion range.
            let (beta_start, beta_end) = (1e-4, 0.02);
            let mut abar = 1.0;
            for t in 0..timesteps {
                let beta = beta_start + (beta_end - beta_start) * t as f64 / (t_f - 1.0);
                abar *= 1.0 - beta;
                alpha.push(abar.sqrt());
            }
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            let f0 = f(0.0);
            let mut abar = 1.0;
            let mut prev = 1.0;
            for t in 1..=timesteps {
                let cur = f(t as f64 / t_f) / f0;
                // Clip per-step beta to 0.999 so alpha stays in (0, 1].
                let beta = (1.0 - cur / prev).min(0.999);
                prev = cur;
                abar *= 1.0 - beta;
                alpha.push(abar.sqrt());
            }
        }
    }
    NoiseSchedule::from_alphas(alpha)
}

impl NoiseSchedule {
    /// Wrap raw signal coefficients, validating the schedule invariants:
    /// every entry in (0, 1] and non-increasing in t.
    pub fn from_alphas(alpha: Vec<f64>) -> Result<NoiseSchedule> {
        if alpha.len() < 2 {
            return Err(Error::invalid("schedule needs at least 2 entries"));
        }
        for (i, &a) in alpha.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::invalid(format!("alpha[{}] = {} outside (0, 1]", i + 1, a)));
            }
            if i > 0 && a > alpha[i - 1] {
                return Err(Error::invalid(format!("alpha increases at t = {}", i + 1)));
            }
        }
        Ok(NoiseSchedule { alpha })
    }

    pub fn timesteps(&self) -> usize {
        self.alpha.len()
    }

    /// Signal coefficient at timestep t (1-based).
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.alpha.len(), "timestep {t} out of range");
        self.alpha[t - 1]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }
}

/// The closed-form forward step at an explicit coefficient:
/// alpha * z0 + sqrt(1 - alpha^2) * eps, elementwise.
pub fn noisify(z0: &LatentVideo, eps: &LatentVideo, alpha_t: f64) -> Result<LatentVideo> {
    if !z0.same_shape(eps) {
        return Err(Error::invalid(format!(
            "z0 shape {:?} != eps shape {:?}",
            z0.tensor().shape(),
            eps.tensor().shape()
        )));
    }
    let sig = (1.0 - alpha_t * alpha_t).max(0.0).sqrt();
    let t = z0.tensor().zip_map(eps.tensor(), |a, b| alpha_t * a + sig * b);
    LatentVideo::new(t)
}

/// Noise a clean latent to timestep t of the schedule.
pub fn add_noise(
    z0: &LatentVideo,
    eps: &LatentVideo,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    if t < 1 || t > sched.timesteps() {
        return Err(Error::invalid(format!(
            "timestep {t} outside 1..={}",
            sched.timesteps()
        )));
    }
    noisify(z0, eps, sched.alpha(t))
}
