//! Closed-form EIT transmission models and their widths.
//!
//! All three models decay to zero transmission far from two-photon resonance
//! and are even in the detuning. Detunings and rates are angular (rad/s).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{mean_thermal_speed, AtomGasParams, BeamConfig};

/// Relative tolerance of the numeric half-contrast search.
pub const FWHM_REL_TOL: f64 = 1e-9;

/// Three-level Lorentzian:
/// 1 − (γ_bc·Ω_C² + δ²γ²)/(Ω_C⁴ + δ²γ²).
pub fn eval_lorentzian(detuning: f64, control_rabi: f64, excited_decay: f64, coherence_decay: f64) -> Result<f64> {
    let omega2 = control_rabi * control_rabi;
    let dg2 = (detuning * excited_decay).powi(2);
    let denom = omega2 * omega2 + dg2;
    if denom == 0.0 {
        return Err(Error::domain("Lorentzian lineshape undefined for Ω_C = 0 at δ = 0"));
    }
    Ok(1.0 - (coherence_decay * omega2 + dg2) / denom)
}

/// Gaussian-beam power-broadened lineshape, 1 − x·arctan(1/x) with
/// x = |δ|γ/Ω_C². The removable point x = 0 evaluates to 1.
pub fn eval_ty(detuning: f64, control_rabi: f64, excited_decay: f64) -> f64 {
    ty_profile(detuning.abs() * excited_decay / (control_rabi * control_rabi))
}

#[inline]
pub(crate) fn ty_profile(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else if x > 1e4 {
        // x·atan(1/x) = 1 − 1/(3x²) + 1/(5x⁴) − …
        let inv2 = 1.0 / (x * x);
        inv2 / 3.0 - inv2 * inv2 / 5.0
    } else {
        1.0 - x * (1.0 / x).atan()
    }
}

/// Transit-limited lineshape exp(−|δ·t_tr|).
pub fn eval_transit_exponential(detuning: f64, transit_time: f64) -> f64 {
    (-(detuning * transit_time).abs()).exp()
}

/// Average transit time through the beam, t_tr = 2w/⟨v⟩, s.
pub fn transit_time(beam: &BeamConfig, gas: &AtomGasParams) -> Result<f64> {
    let v = mean_thermal_speed(gas.atomic_mass_kg, gas.temperature_k)?;
    Ok(2.0 * beam.waist_radius_cm / v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelTag {
    Lorentzian,
    Ty,
    TransitExponential,
}

impl ModelTag {
    pub const ALL: [ModelTag; 3] = [ModelTag::Lorentzian, ModelTag::Ty, ModelTag::TransitExponential];

    pub fn name(self) -> &'static str {
        match self {
            ModelTag::Lorentzian => "lorentzian",
            ModelTag::Ty => "ty",
            ModelTag::TransitExponential => "transit-exponential",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        ModelTag::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::parse(format!("unknown model `{s}`")))
    }
}

/// One of the three closed-form shapes with its physical parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum Lineshape {
    Lorentzian {
        control_rabi: f64,
        excited_decay: f64,
        coherence_decay: f64,
    },
    Ty {
        control_rabi: f64,
        excited_decay: f64,
    },
    TransitExponential {
        transit_time: f64,
    },
}

impl Lineshape {
    pub fn tag(&self) -> ModelTag {
        match self {
            Lineshape::Lorentzian { .. } => ModelTag::Lorentzian,
            Lineshape::Ty { .. } => ModelTag::Ty,
            Lineshape::TransitExponential { .. } => ModelTag::TransitExponential,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Lineshape::Lorentzian {
                control_rabi,
                excited_decay,
                coherence_decay,
            } => control_rabi > 0.0 && excited_decay > 0.0 && coherence_decay >= 0.0,
            Lineshape::Ty {
                control_rabi,
                excited_decay,
            } => control_rabi > 0.0 && excited_decay > 0.0,
            Lineshape::TransitExponential { transit_time } => transit_time > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid lineshape parameters {self:?}")))
        }
    }

    pub fn eval(&self, detuning: f64) -> f64 {
        match *self {
            Lineshape::Lorentzian {
                control_rabi,
                excited_decay,
                coherence_decay,
            } => eval_lorentzian(detuning, control_rabi, excited_decay, coherence_decay).unwrap_or(0.0),
            Lineshape::Ty {
                control_rabi,
                excited_decay,
            } => eval_ty(detuning, control_rabi, excited_decay),
            Lineshape::TransitExponential { transit_time } => eval_transit_exponential(detuning, transit_time),
        }
    }

    /// Natural detuning scale of the model, used to seed the width search.
    fn scale(&self) -> f64 {
        match *self {
            Lineshape::Lorentzian {
                control_rabi,
                excited_decay,
                ..
            }
            | Lineshape::Ty {
                control_rabi,
                excited_decay,
            } => control_rabi * control_rabi / excited_decay,
            Lineshape::TransitExponential { transit_time } => 1.0 / transit_time,
        }
    }

    /// Full width at half contrast, rad/s.
    pub fn fwhm(&self) -> Result<f64> {
        self.validate()?;
        fwhm_of(|d| self.eval(d), 0.0, self.scale())
    }
}

/// Amplitude/baseline wrapper used for real, arbitrarily-scaled data:
/// T = B + A·shape(δ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledLineshape {
    pub shape: Lineshape,
    pub amplitude: f64,
    pub baseline: f64,
}

impl ScaledLineshape {
    pub fn eval(&self, detuning: f64) -> f64 {
        self.baseline + self.amplitude * self.shape.eval(detuning)
    }
}

/// Width of an even profile that is maximal at δ = 0 and decays
/// monotonically to `asymptote`: 2δ with f(δ) halfway between f(0) and the
/// asymptote. `scale` seeds the bracket.
pub fn fwhm_of(f: impl Fn(f64) -> f64, asymptote: f64, scale: f64) -> Result<f64> {
    let peak = f(0.0);
    let half = 0.5 * (peak + asymptote);
    if !(peak > asymptote) || !scale.is_finite() || scale <= 0.0 {
        return Err(Error::Numerical("profile has no contrast above its asymptote".into()));
    }
    let mut lo = 0.0;
    let mut hi = scale;
    let mut guard = 0;
    while f(hi) > half {
        lo = hi;
        hi *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(Error::Numerical("half-contrast point not bracketed".into()));
        }
    }
    let mut prev = peak;
    // Sample well past the crossing to reject non-monotone profiles.
    for k in 1..=64 {
        let v = f(4.0 * hi * k as f64 / 64.0);
        if v > prev * (1.0 + 1e-12) + 1e-15 {
            return Err(Error::Numerical("profile is not monotone in |δ|".into()));
        }
        prev = v;
    }
    while hi - lo > FWHM_REL_TOL * 1e-3 * hi {
        let mid = 0.5 * (lo + hi);
        if f(mid) > half {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo + hi)
}
