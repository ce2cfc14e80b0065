//! Noise schedules `σ(t)`, `α(t) = sqrt(1 − σ²(t))`, and training-time
//! sampling above the clipping threshold.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

/// A variance-preserving noise schedule `σ(t) = t^p` on `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSchedule {
    /// `σ(t) = t`.
    #[default]
    Linear,
    /// `σ(t) = t^0.25`.
    Sqrt,
}

fn check_unit(what: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Domain {
            what,
            value: v,
            domain: "[0, 1]",
        })
    }
}

impl NoiseSchedule {
    pub fn exponent(self) -> f64 {
        match self {
            NoiseSchedule::Linear => 1.0,
            NoiseSchedule::Sqrt => 0.25,
        }
    }

    pub fn sigma(self, t: f64) -> Result<f64> {
        check_unit("t", t)?;
        Ok(self.sigma_unchecked(t))
    }

    #[inline]
    pub(crate) fn sigma_unchecked(self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Linear => t,
            NoiseSchedule::Sqrt => t.sqrt().sqrt(),
        }
    }

    pub fn alpha(self, t: f64) -> Result<f64> {
        check_unit("t", t)?;
        Ok(self.alpha_unchecked(t))
    }

    #[inline]
    pub(crate) fn alpha_unchecked(self, t: f64) -> f64 {
        let s = self.sigma_unchecked(t);
        (1.0 - s * s).max(0.0).sqrt()
    }

    /// The unique `t` with `σ(t) = s`.
    pub fn sigma_inverse(self, s: f64) -> Result<f64> {
        check_unit("sigma", s)?;
        Ok(match self {
            NoiseSchedule::Linear => s,
            NoiseSchedule::Sqrt => {
                let s2 = s * s;
                s2 * s2
            }
        })
    }

    /// `dσ/dt`, finite on `(0, 1]`.
    pub fn sigma_derivative(self, t: f64) -> Result<f64> {
        check_unit("t", t)?;
        let p = self.exponent();
        if p < 1.0 && t == 0.0 {
            return Err(Error::Domain {
                what: "t",
                value: t,
                domain: "(0, 1] for a schedule with infinite slope at 0",
            });
        }
        Ok(p * t.powf(p - 1.0))
    }

    /// `β(t) = −2 d log α/dt = 2 σ σ′ / (1 − σ²)`; diverges at `t = 1`.
    pub fn beta(self, t: f64) -> Result<f64> {
        let ds = self.sigma_derivative(t)?;
        let s = self.sigma_unchecked(t);
        let denom = 1.0 - s * s;
        if denom <= 0.0 {
            return Err(Error::Domain {
                what: "t",
                value: t,
                domain: "[0, 1) where α(t) > 0",
            });
        }
        Ok(2.0 * s * ds / denom)
    }
}

impl fmt::Display for NoiseSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseSchedule::Linear => "linear",
            NoiseSchedule::Sqrt => "sqrt",
        })
    }
}

impl FromStr for NoiseSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(NoiseSchedule::Linear),
            "sqrt" => Ok(NoiseSchedule::Sqrt),
            other => Err(Error::Config(format!(
                "unknown schedule {other:?} (expected linear or sqrt)"
            ))),
        }
    }
}

/// Weight `w′(σ)` such that uniform-time training under `from` equals
/// uniform-time training under `to` with every loss term multiplied by
/// `w′(σ)`:
///
/// `E_{t~U}[L(σ_from(t))] = E_{s~U}[w′(σ_to(s)) · L(σ_to(s))]`.
///
/// With a unit base weight this is `(dt_from/dσ) / (dt_to/dσ)`.
pub fn effective_weight(from: NoiseSchedule, to: NoiseSchedule, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::Domain {
            what: "sigma",
            value: sigma,
            domain: "(0, 1)",
        });
    }
    let dt_dsigma = |sch: NoiseSchedule| -> Result<f64> {
        let t = sch.sigma_inverse(sigma)?;
        Ok(1.0 / sch.sigma_derivative(t)?)
    };
    Ok(dt_dsigma(from)? / dt_dsigma(to)?)
}

/// Draws training timesteps uniformly from `[t_min, 1]`.
#[derive(Clone, Debug)]
pub struct ClippedTimeSampler {
    schedule: NoiseSchedule,
    t_min: f64,
    rng: ChaCha8Rng,
}

impl ClippedTimeSampler {
    pub fn new(schedule: NoiseSchedule, seed: u64) -> Self {
        Self {
            schedule,
            t_min: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent sampler for training worker `worker` under `base_seed`.
    pub fn for_worker(schedule: NoiseSchedule, base_seed: u64, worker: u64) -> Self {
        Self::new(
            schedule,
            crate::rng::derive_seed(base_seed, &[0x7153, worker]),
        )
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    /// Sets the threshold to `σ⁻¹(σ_min)`.
    pub fn set_sigma_min(&mut self, sigma_min: f64) -> Result<()> {
        self.t_min = self.schedule.sigma_inverse(sigma_min)?;
        Ok(())
    }

    /// Sets the threshold directly; `0` restores unclipped sampling.
    pub fn set_t_min(&mut self, t_min: f64) -> Result<()> {
        if !(0.0..1.0).contains(&t_min) {
            return Err(Error::Domain {
                what: "t_min",
                value: t_min,
                domain: "[0, 1)",
            });
        }
        self.t_min = t_min;
        Ok(())
    }

    pub fn sample_timestep(&mut self) -> f64 {
        let u: f64 = self.rng.random();
        // u ∈ [0, 1) keeps t ∈ [t_min, 1)
        self.t_min + (1.0 - self.t_min) * u
    }

    pub(crate) fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub(crate) fn restore(schedule: NoiseSchedule, t_min: f64, state: &RngState) -> Self {
        Self {
            schedule,
            t_min,
            rng: state.restore(),
        }
    }
}
