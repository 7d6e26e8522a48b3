//! Forward-process schedules: noise level `sigma(t)` and data scale `s(t)`.
//!
//! A noisy point is `z = s(t) * (x + sigma(t) * eps)`. Every likelihood in the
//! crate is the scaled form `N(z / s(t); x, sigma(t)^2 I)` and every score is
//! the gradient with respect to that scaled argument, which for EDM
//! (`sigma = t`, `s = 1`) is the ordinary gradient in `z`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::math::sq_dist;

pub const DEFAULT_BETA_D: f64 = 19.9;
pub const DEFAULT_BETA_MIN: f64 = 0.1;
pub const EDM_T_MIN: f64 = 0.002;
pub const EDM_T_MAX: f64 = 80.0;
pub const VP_T_MIN: f64 = 1e-3;
pub const VP_T_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleKind {
    Edm,
    Vp { beta_d: f64, beta_min: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub t_min: f64,
    pub t_max: f64,
}

/// Whether log-likelihoods carry the Gaussian normalizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Drop `-(d/2) log(2 pi sigma^2)`; it cancels in every posterior and
    /// importance weight.
    #[default]
    ConstantFree,
    Exact,
}

/// A noisy observation at diffusion time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePoint {
    pub z: Vec<f64>,
    pub t: f64,
}

/// `sigma`, `s` and their time derivatives evaluated at one `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub t: f64,
    pub sigma: f64,
    pub scale: f64,
    pub sigma_dot: f64,
    pub scale_dot: f64,
}

impl NoiseLevel {
    /// `z / s(t)`, the point the posterior is conditioned on.
    pub fn scaled(&self, z: &[f64]) -> Vec<f64> {
        if self.scale == 1.0 {
            z.to_vec()
        } else {
            z.iter().map(|v| v / self.scale).collect()
        }
    }

    /// `-||y - x||^2 / (2 sigma^2)` from a squared distance.
    #[inline]
    pub fn log_lik_from_sq(&self, sq: f64) -> f64 {
        -sq / (2.0 * self.sigma * self.sigma)
    }

    /// `(mean - y) / sigma^2`.
    pub fn score_from_mean(&self, mean: &[f64], y: &[f64]) -> Vec<f64> {
        let s2 = self.sigma * self.sigma;
        mean.iter().zip(y).map(|(m, v)| (m - v) / s2).collect()
    }

    /// Right-hand side of the probability-flow ODE given a score at `z`:
    /// `dz/dt = (s'/s) z - s sigma' sigma score`.
    pub fn drift(&self, z: &[f64], score: &[f64]) -> Vec<f64> {
        let a = self.scale_dot / self.scale;
        let b = self.scale * self.sigma_dot * self.sigma;
        z.iter()
            .zip(score)
            .map(|(zi, si)| a * zi - b * si)
            .collect()
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::edm()
    }
}

impl DiffusionSchedule {
    pub fn new(kind: ScheduleKind, t_min: f64, t_max: f64) -> Result<Self> {
        let s = Self { kind, t_min, t_max };
        s.validate()?;
        Ok(s)
    }

    /// EDM schedule on `[0.002, 80]`.
    pub fn edm() -> Self {
        Self {
            kind: ScheduleKind::Edm,
            t_min: EDM_T_MIN,
            t_max: EDM_T_MAX,
        }
    }

    /// Variance-preserving schedule with the conventional `beta_d = 19.9`,
    /// `beta_min = 0.1` on `[1e-3, 1]`.
    pub fn vp() -> Self {
        Self {
            kind: ScheduleKind::Vp {
                beta_d: DEFAULT_BETA_D,
                beta_min: DEFAULT_BETA_MIN,
            },
            t_min: VP_T_MIN,
            t_max: VP_T_MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min.is_finite() && self.t_max.is_finite()) {
            return Err(Error::Config("t_min and t_max must be finite".into()));
        }
        if !(0.0 < self.t_min && self.t_min < self.t_max) {
            return Err(Error::Config(format!(
                "schedule requires 0 < t_min < t_max, got t_min={} t_max={}",
                self.t_min, self.t_max
            )));
        }
        if let ScheduleKind::Vp { beta_d, beta_min } = self.kind {
            if !(beta_d > 0.0 && beta_min > 0.0 && beta_d.is_finite() && beta_min.is_finite()) {
                return Err(Error::Config(format!(
                    "vp schedule requires positive beta_d and beta_min, got {beta_d}, {beta_min}"
                )));
            }
        }
        Ok(())
    }

    fn check_t(t: f64) -> Result<()> {
        if t > 0.0 && t.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "diffusion time must be positive, got {t}"
            )))
        }
    }

    /// Evaluates the schedule at `t`. Accepts any `t > 0`; the `[t_min, t_max]`
    /// window only constrains the sampler.
    pub fn at(&self, t: f64) -> Result<NoiseLevel> {
        Self::check_t(t)?;
        Ok(match self.kind {
            ScheduleKind::Edm => NoiseLevel {
                t,
                sigma: t,
                scale: 1.0,
                sigma_dot: 1.0,
                scale_dot: 0.0,
            },
            ScheduleKind::Vp { beta_d, beta_min } => {
                let g = 0.5 * beta_d * t * t + beta_min * t;
                let g_dot = beta_d * t + beta_min;
                let sigma = g.exp_m1().sqrt();
                let scale = (-0.5 * g).exp();
                NoiseLevel {
                    t,
                    sigma,
                    scale,
                    // d/dt sqrt(e^g - 1) = g' e^g / (2 sigma)
                    sigma_dot: g_dot * g.exp() / (2.0 * sigma),
                    scale_dot: -0.5 * g_dot * scale,
                }
            }
        })
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(self.at(t)?.sigma)
    }

    pub fn scale(&self, t: f64) -> Result<f64> {
        Ok(self.at(t)?.scale)
    }

    /// Log-density of `N(z / s(t); x, sigma(t)^2 I)`.
    pub fn log_forward_likelihood(
        &self,
        x: &[f64],
        z: &[f64],
        t: f64,
        mode: Normalization,
    ) -> Result<f64> {
        check_dim(x.len(), z.len())?;
        let lvl = self.at(t)?;
        let y = lvl.scaled(z);
        let ll = lvl.log_lik_from_sq(sq_dist(&y, x));
        Ok(match mode {
            Normalization::ConstantFree => ll,
            Normalization::Exact => {
                let d = x.len() as f64;
                ll - 0.5 * d * (2.0 * std::f64::consts::PI * lvl.sigma * lvl.sigma).ln()
            }
        })
    }

    /// Score of the forward likelihood, `(x - z/s) / sigma^2`.
    pub fn conditional_score(&self, x: &[f64], z: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(x.len(), z.len())?;
        let lvl = self.at(t)?;
        let y = lvl.scaled(z);
        Ok(lvl.score_from_mean(x, &y))
    }

    /// Draws `x s(t) + s(t) sigma(t) eps` for one clean point.
    pub fn noise_point(&self, x: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
        check_dim(x.len(), eps.len())?;
        let lvl = self.at(t)?;
        Ok(x.iter()
            .zip(eps)
            .map(|(xi, e)| lvl.scale * (xi + lvl.sigma * e))
            .collect())
    }
}
