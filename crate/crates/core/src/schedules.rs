//! The linear noise path, timestep samplers, DM weighting, velocity/score
//! conversion and classifier-free guidance.
//!
//! Path convention: `z_t = (1 - t) z_0 + t eps`, so `alpha(t) = 1 - t`,
//! `sigma(t) = t`, and the flow-matching velocity target is `eps - z_0`.
//!
//! Converting a velocity prediction to a score uses the posterior-mean
//! identities of this path. With `a = E[z_0 | z_t]` and `b = E[eps | z_t]`:
//! `alpha a + sigma b = z_t` and `v = b - a`, hence `b = z_t + alpha v`
//! (because `alpha + sigma = 1`) and `s = -b / sigma = -(z_t + (1 - t) v) / t`.

use alloc::vec::Vec;

use crate::rng::{self, Rng};
use crate::{Array, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoiseSchedule {
    /// Floor for `t` wherever a score is formed; the score diverges like `1/t`.
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            t_min: 0.01,
            t_max: 1.0,
        }
    }
}

impl NoiseSchedule {
    #[inline]
    pub fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }

    #[inline]
    pub fn sigma(&self, t: f64) -> f64 {
        t
    }

    /// `z_t = alpha(t) z0 + sigma(t) eps`, with one `t` per row.
    pub fn perturb(&self, z0: &Array, t: &[f64], eps: &Array) -> Result<Array> {
        z0.check_same(eps, "perturb")?;
        check_rows(z0, t, "perturb")?;
        for &ti in t {
            check_unit(ti)?;
        }
        let mut out = z0.clone();
        for (r, &ti) in t.iter().enumerate() {
            let (a, s) = (self.alpha(ti), self.sigma(ti));
            for (o, e) in out.row_mut(r).iter_mut().zip(eps.row(r)) {
                *o = a * *o + s * e;
            }
        }
        Ok(out)
    }

    /// Marginal score `-(z_t + (1 - t) v) / t` from a velocity prediction.
    pub fn velocity_to_score(&self, v: &Array, z_t: &Array, t: &[f64]) -> Result<Array> {
        v.check_same(z_t, "velocity_to_score")?;
        check_rows(v, t, "velocity_to_score")?;
        let mut out = z_t.clone();
        for (r, &ti) in t.iter().enumerate() {
            if !(ti >= self.t_min && ti <= self.t_max) {
                return Err(Error::TimeOutOfRange {
                    t: ti,
                    lo: self.t_min,
                    hi: self.t_max,
                });
            }
            let a = self.alpha(ti);
            let inv = -1.0 / self.sigma(ti);
            for (o, vv) in out.row_mut(r).iter_mut().zip(v.row(r)) {
                *o = inv * (*o + a * vv);
            }
        }
        Ok(out)
    }

    /// Inverse of [`Self::velocity_to_score`].
    pub fn score_to_velocity(&self, s: &Array, z_t: &Array, t: &[f64]) -> Result<Array> {
        s.check_same(z_t, "score_to_velocity")?;
        check_rows(s, t, "score_to_velocity")?;
        let mut out = z_t.clone();
        for (r, &ti) in t.iter().enumerate() {
            if !(ti >= self.t_min && ti < 1.0) {
                return Err(Error::TimeOutOfRange {
                    t: ti,
                    lo: self.t_min,
                    hi: 1.0,
                });
            }
            let (a, sg) = (self.alpha(ti), self.sigma(ti));
            for (o, sv) in out.row_mut(r).iter_mut().zip(s.row(r)) {
                *o = -(sg * sv + *o) / a;
            }
        }
        Ok(out)
    }
}

fn check_unit(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange { t, lo: 0.0, hi: 1.0 })
    }
}

fn check_rows(a: &Array, t: &[f64], op: &'static str) -> Result<()> {
    if a.rows() != t.len() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: (t.len(), 1),
        });
    }
    Ok(())
}

/// Classifier-free guidance: `s_uncond + w (s_cond - s_uncond)`.
///
/// Works on velocities as well as scores, since the conversion is affine.
pub fn cfg_combine(cond: &Array, uncond: &Array, w: f64) -> Result<Array> {
    cond.zip_map(uncond, "cfg_combine", |c, u| u + w * (c - u))
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "mode", rename_all = "snake_case"))]
pub enum TimestepSampler {
    Uniform,
    /// The upper end of the range moves linearly from `start_hi` to `end_hi`
    /// over the first `fraction` of training, then stays at `end_hi`.
    Annealed { start_hi: f64, end_hi: f64, fraction: f64 },
}

impl Default for TimestepSampler {
    fn default() -> Self {
        TimestepSampler::Uniform
    }
}

impl TimestepSampler {
    /// Range `[0, 1]` annealed to `[0, 0.5]` over the whole run.
    pub fn annealed() -> Self {
        TimestepSampler::Annealed {
            start_hi: 1.0,
            end_hi: 0.5,
            fraction: 1.0,
        }
    }

    pub fn upper_bound(&self, step: usize, total_steps: usize) -> f64 {
        match *self {
            TimestepSampler::Uniform => 1.0,
            TimestepSampler::Annealed {
                start_hi,
                end_hi,
                fraction,
            } => {
                let horizon = (fraction * total_steps as f64).max(1.0);
                let p = (step as f64 / horizon).min(1.0);
                start_hi + (end_hi - start_hi) * p
            }
        }
    }

    /// One `t` per row, uniform on `[0, upper]` and clamped to `>= t_min`.
    pub fn sample(&self, schedule: &NoiseSchedule, step: usize, total_steps: usize, n: usize, rng: &mut Rng) -> Vec<f64> {
        let hi = self.upper_bound(step.min(total_steps), total_steps);
        (0..n)
            .map(|_| rng::uniform(rng, 0.0, hi).max(schedule.t_min))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DmWeight {
    /// `w(t) = sigma(t)^2`.
    #[default]
    SigmaSquared,
    /// Per-batch `1 / (mean |s_fake - s_real| + 1e-6)`.
    Normalized,
}

impl DmWeight {
    pub const NORMALIZED_DELTA: f64 = 1e-6;

    /// Per-row weights for a batch of score differences `diff = s_fake - s_real`.
    pub fn weights(&self, schedule: &NoiseSchedule, t: &[f64], diff: &Array) -> Vec<f64> {
        match self {
            DmWeight::SigmaSquared => t.iter().map(|&ti| schedule.sigma(ti) * schedule.sigma(ti)).collect(),
            DmWeight::Normalized => {
                let mean_abs = diff.data().iter().map(|v| v.abs()).sum::<f64>() / diff.len().max(1) as f64;
                let w = 1.0 / (mean_abs + Self::NORMALIZED_DELTA);
                t.iter().map(|_| w).collect()
            }
        }
    }
}
