//! Time-dependent coefficient schedules.
//!
//! A [`Schedule`] bundles the diffusivity `φ1`, the noise intensity `φ2` and
//! the two anisotropy scales `λ1`, `λ2`. The anisotropy coefficient
//!
//! ```text
//! Ψ(t, p) = φ(t) / sqrt(1 + |p|² / λ(t)²)
//! ```
//!
//! attenuates smoothing (or noise) across strong gradients; `λ = +∞` is the
//! isotropic limit `Ψ ≡ φ`.

use crate::error::{Error, Result};
use crate::quadrature::{simpson, SIMPSON_PANELS};
use std::fmt;
use std::str::FromStr;

/// Values of `λ` above this are treated as the isotropic branch.
pub const ISOTROPIC_THRESHOLD: f64 = 1e12;

pub const DEFAULT_HORIZON: f64 = 2.0;
pub const DEFAULT_DT: f64 = 1e-2;

/// A scalar coefficient as a function of time on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transition {
    Constant(f64),
    /// `min · (max/min)^(t/T)`
    Geometric { min: f64, max: f64 },
    /// `min + (max − min) · (t/T)^exponent`
    Power { min: f64, max: f64, exponent: f64 },
    /// `min · (e^{rT} − 1) / (e^{r(T−t)} − 1)`, infinite at `t = T`.
    ExponentialBlowup { min: f64, rate: f64 },
}

impl Transition {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidTransition(msg));
        match *self {
            Transition::Constant(v) if !(v.is_finite() && v >= 0.0) => {
                bad(format!("constant value must be finite and >= 0, got {v}"))
            }
            Transition::Geometric { min, max } if !(min > 0.0 && min < max && max.is_finite()) => {
                bad(format!("geometric transition needs 0 < min < max, got {min} -> {max}"))
            }
            Transition::Power { min, max, exponent }
                if !(min >= 0.0 && max >= 0.0 && max.is_finite() && exponent > 0.0) =>
            {
                bad(format!(
                    "power transition needs min, max >= 0 and exponent > 0, got {min}, {max}, {exponent}"
                ))
            }
            Transition::ExponentialBlowup { min, rate } if !(min > 0.0 && rate > 0.0) => {
                bad(format!("exponential blowup needs min > 0 and rate > 0, got {min}, {rate}"))
            }
            _ => Ok(()),
        }
    }

    /// Value at `t`, rejecting times outside `[0, horizon]`.
    pub fn eval(&self, t: f64, horizon: f64) -> Result<f64> {
        check_time(t, horizon)?;
        Ok(self.value(t, horizon))
    }

    /// Value at `t` without range checks.
    pub fn value(&self, t: f64, horizon: f64) -> f64 {
        match *self {
            Transition::Constant(v) => v,
            Transition::Geometric { min, max } => {
                if t <= 0.0 {
                    min
                } else if t >= horizon {
                    max
                } else {
                    min * (max / min).powf(t / horizon)
                }
            }
            Transition::Power { min, max, exponent } => {
                min + (max - min) * (t / horizon).powf(exponent)
            }
            Transition::ExponentialBlowup { min, rate } => {
                let denom = (rate * (horizon - t)).exp_m1();
                if denom <= 0.0 {
                    f64::INFINITY
                } else {
                    min * (rate * horizon).exp_m1() / denom
                }
            }
        }
    }

    /// Closed-form `∫_0^t value(s) ds`.
    pub fn integral(&self, t: f64, horizon: f64) -> f64 {
        match *self {
            Transition::Constant(v) => v * t,
            Transition::Geometric { min, max } => {
                let log_ratio = (max / min).ln();
                min * horizon / log_ratio * (log_ratio * t / horizon).exp_m1()
            }
            Transition::Power { min, max, exponent } => {
                min * t + (max - min) * horizon / (exponent + 1.0) * (t / horizon).powf(exponent + 1.0)
            }
            Transition::ExponentialBlowup { min, rate } => {
                // d/du ln(1 − e^{−u}) = 1/(e^u − 1) with u = r(T − s)
                let u0 = rate * horizon;
                let ut = rate * (horizon - t);
                if ut <= 0.0 {
                    return f64::INFINITY;
                }
                let g = |u: f64| (-(-u).exp_m1()).ln();
                min * u0.exp_m1() / rate * (g(u0) - g(ut))
            }
        }
    }

    /// True when the transition is identically zero.
    pub fn is_zero(&self) -> bool {
        matches!(*self, Transition::Constant(v) if v == 0.0)
            || matches!(*self, Transition::Power { min, max, .. } if min == 0.0 && max == 0.0)
    }
}

impl fmt::Display for Transition {
    /// `kind:param:...`, parseable by [`FromStr`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Transition::Constant(v) => write!(f, "constant:{v}"),
            Transition::Geometric { min, max } => write!(f, "geometric:{min}:{max}"),
            Transition::Power { min, max, exponent } => write!(f, "power:{min}:{max}:{exponent}"),
            Transition::ExponentialBlowup { min, rate } => write!(f, "blowup:{min}:{rate}"),
        }
    }
}

impl FromStr for Transition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or_default();
        let nums: Vec<f64> = parts
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidTransition(format!("bad number in '{s}'")))?;
        let tr = match (kind, nums.as_slice()) {
            ("constant", [v]) => Transition::Constant(*v),
            ("geometric", [min, max]) => Transition::Geometric { min: *min, max: *max },
            ("power", [min, max, exponent]) => Transition::Power {
                min: *min,
                max: *max,
                exponent: *exponent,
            },
            ("blowup", [min, rate]) => Transition::ExponentialBlowup { min: *min, rate: *rate },
            _ => return Err(Error::InvalidTransition(format!("cannot parse '{s}'"))),
        };
        tr.validate()?;
        Ok(tr)
    }
}

/// An anisotropy scale `λ`: either a time transition or `+∞`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Anisotropy {
    Isotropic,
    Finite(Transition),
}

impl Anisotropy {
    pub fn is_isotropic(&self) -> bool {
        matches!(self, Anisotropy::Isotropic)
    }

    /// `1/λ(t)²`, exactly zero on the isotropic branch or once `λ(t)` exceeds
    /// [`ISOTROPIC_THRESHOLD`].
    pub fn inv_square(&self, t: f64, horizon: f64) -> f64 {
        match self {
            Anisotropy::Isotropic => 0.0,
            Anisotropy::Finite(tr) => {
                let l = tr.value(t, horizon);
                if !(l <= ISOTROPIC_THRESHOLD) {
                    0.0
                } else {
                    1.0 / (l * l)
                }
            }
        }
    }
}

/// `Ψ(t, ·)` frozen at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrozenPsi {
    pub phi: f64,
    pub inv_lambda_sq: f64,
}

impl FrozenPsi {
    pub const ZERO: FrozenPsi = FrozenPsi {
        phi: 0.0,
        inv_lambda_sq: 0.0,
    };

    #[inline]
    pub fn at(&self, p1: f64, p2: f64) -> f64 {
        if self.inv_lambda_sq == 0.0 {
            self.phi
        } else {
            self.phi / (1.0 + (p1 * p1 + p2 * p2) * self.inv_lambda_sq).sqrt()
        }
    }

    pub fn is_isotropic(&self) -> bool {
        self.inv_lambda_sq == 0.0
    }
}

/// The pair `(φ, λ)` defining one anisotropy coefficient `Ψ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnisotropyCoefficient {
    pub phi: Transition,
    pub lambda: Anisotropy,
}

impl AnisotropyCoefficient {
    pub fn freeze(&self, t: f64, horizon: f64) -> FrozenPsi {
        FrozenPsi {
            phi: self.phi.value(t, horizon),
            inv_lambda_sq: self.lambda.inv_square(t, horizon),
        }
    }

    pub fn eval_psi(&self, t: f64, horizon: f64, p: [f64; 2]) -> Result<f64> {
        check_time(t, horizon)?;
        Ok(self.freeze(t, horizon).at(p[0], p[1]))
    }
}

/// Coefficient bundle for one forward process.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub phi1: Transition,
    pub phi2: Transition,
    pub lambda1: Anisotropy,
    pub lambda2: Anisotropy,
    pub horizon: f64,
    /// Spatial noise correlation length; 0 means white noise.
    pub correlation_length: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "terminal time must be positive, got {}",
                self.horizon
            )));
        }
        if !(self.correlation_length >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "correlation length must be >= 0, got {}",
                self.correlation_length
            )));
        }
        self.phi1.validate()?;
        self.phi2.validate()?;
        for l in [&self.lambda1, &self.lambda2] {
            if let Anisotropy::Finite(tr) = l {
                tr.validate()?;
            }
        }
        Ok(())
    }

    pub fn drift_coefficient(&self) -> AnisotropyCoefficient {
        AnisotropyCoefficient {
            phi: self.phi1,
            lambda: self.lambda1,
        }
    }

    pub fn noise_coefficient(&self) -> AnisotropyCoefficient {
        AnisotropyCoefficient {
            phi: self.phi2,
            lambda: self.lambda2,
        }
    }

    /// `A(t) = ∫_0^t φ1`.
    pub fn accumulated_diffusivity(&self, t: f64) -> f64 {
        self.phi1.integral(t, self.horizon)
    }

    /// `w(t) = ∫_0^t φ2²`, by Simpson quadrature.
    pub fn accumulated_noise_variance(&self, t: f64) -> f64 {
        let phi2 = self.phi2;
        let h = self.horizon;
        simpson(
            |s| {
                let v = phi2.value(s, h);
                v * v
            },
            0.0,
            t,
            SIMPSON_PANELS,
        )
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }
}

/// Named forward-process configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Pure geometric noise, no drift.
    VeNoise,
    /// Anisotropic heat drift relaxing to isotropy, isotropic noise.
    AnisoHeat,
    /// Isotropic heat drift, small isotropic noise.
    IsoHeat,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::VeNoise, Preset::AnisoHeat, Preset::IsoHeat];

    pub fn name(self) -> &'static str {
        match self {
            Preset::VeNoise => "ve-noise",
            Preset::AnisoHeat => "aniso-heat",
            Preset::IsoHeat => "iso-heat",
        }
    }

    /// `image_size` is `max(height, width)`; it sets `φ1^max = 2·image_size`.
    pub fn schedule(self, image_size: usize) -> Schedule {
        let phi1_heat = Transition::Geometric {
            min: 0.5,
            max: 2.0 * image_size as f64,
        };
        match self {
            Preset::VeNoise => Schedule {
                phi1: Transition::Constant(0.0),
                phi2: Transition::Geometric { min: 0.01, max: 2.0 },
                lambda1: Anisotropy::Isotropic,
                lambda2: Anisotropy::Isotropic,
                horizon: DEFAULT_HORIZON,
                correlation_length: 0.0,
            },
            Preset::AnisoHeat => Schedule {
                phi1: phi1_heat,
                phi2: Transition::Geometric { min: 0.01, max: 2.0 },
                lambda1: Anisotropy::Finite(Transition::ExponentialBlowup {
                    min: 0.025,
                    rate: 0.5,
                }),
                lambda2: Anisotropy::Isotropic,
                horizon: DEFAULT_HORIZON,
                correlation_length: 0.0,
            },
            Preset::IsoHeat => Schedule {
                phi1: phi1_heat,
                phi2: Transition::Geometric { min: 0.01, max: 0.5 },
                lambda1: Anisotropy::Isotropic,
                lambda2: Anisotropy::Isotropic,
                horizon: DEFAULT_HORIZON,
                correlation_length: 0.0,
            },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

pub fn preset_schedule(name: &str, image_size: usize) -> Result<Schedule> {
    Ok(name.parse::<Preset>()?.schedule(image_size))
}

pub(crate) fn check_time(t: f64, horizon: f64) -> Result<()> {
    if !(t >= 0.0 && t <= horizon) {
        return Err(Error::TimeOutOfRange { t, horizon });
    }
    Ok(())
}
