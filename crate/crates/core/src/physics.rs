//! Physical constants, unit conventions and the configuration shared by every
//! simulator.
//!
//! Internally every frequency is an angular frequency in rad/s. Anything that
//! leaves the process (CSV, CLI flags, JSON reports) is cyclic frequency in Hz;
//! [`hz_to_rad`] and [`rad_to_hz`] are the only places the factor 2π appears.
//! Lengths are in cm, times in s, fields in gauss.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380_649e-23;

/// Mass of a ⁸⁷Rb atom, kg.
pub const RB87_MASS_KG: f64 = 1.443_160_6e-25;

/// Gyromagnetic ratio of the m=1 ground-state hyperfine coherence, Hz/G.
pub const RB87_M1_GYROMAGNETIC_HZ_PER_G: f64 = 1.4e6;

/// Mode constant κ in τ_D = κ·w²/D.
///
/// Fixed once so that a 0.04 cm waist in a D = 35.7 cm²/s gas gives
/// 1/(π·τ_D) = 26 kHz; never refit.
pub const DIFFUSION_MODE_CONSTANT: f64 = 35.7 / (PI * 0.04 * 0.04 * 26_000.0);

/// Ratio |Ω_P|/|Ω_C| above which the weak-probe assumption is flagged.
pub const WEAK_PROBE_WARNING_RATIO: f64 = 0.2;

/// Cyclic frequency (Hz) to angular frequency (rad/s).
#[inline]
pub fn hz_to_rad(hz: f64) -> f64 {
    2.0 * PI * hz
}

/// Angular frequency (rad/s) to cyclic frequency (Hz).
#[inline]
pub fn rad_to_hz(rad: f64) -> f64 {
    rad / (2.0 * PI)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomGasParams {
    pub diffusion_cm2_per_s: f64,
    pub atomic_mass_kg: f64,
    pub temperature_k: f64,
    #[serde(default = "default_gyromagnetic")]
    pub gyromagnetic_hz_per_gauss: f64,
}

fn default_gyromagnetic() -> f64 {
    RB87_M1_GYROMAGNETIC_HZ_PER_G
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellGeometry {
    pub length_cm: f64,
    pub radius_cm: f64,
}

impl Default for CellGeometry {
    fn default() -> Self {
        Self {
            length_cm: 7.0,
            radius_cm: 1.25,
        }
    }
}

/// Gaussian beam, I(r) = I₀·exp(−2r²/w²) with `waist_radius_cm` = w.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub waist_radius_cm: f64,
    pub total_power_w: f64,
}

impl BeamConfig {
    /// Intensity relative to the beam center, I(r)/I₀.
    #[inline]
    pub fn relative_intensity(&self, r2: f64) -> f64 {
        (-2.0 * r2 / (self.waist_radius_cm * self.waist_radius_cm)).exp()
    }

    /// ∫ I/I₀ dA over the plane, cm².
    pub fn mode_area(&self) -> f64 {
        PI * self.waist_radius_cm * self.waist_radius_cm / 2.0
    }
}

/// Optical rates, all angular (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticalParams {
    pub control_rabi_rad_s: f64,
    pub probe_rabi_rad_s: f64,
    pub excited_decay_rad_s: f64,
    pub coherence_decay_rad_s: f64,
    #[serde(default)]
    pub two_photon_detuning_rad_s: f64,
}

impl OpticalParams {
    /// Builds optics whose power-broadening rate Ω_C²/γ equals `pump_rate`.
    pub fn from_pump_rate(pump_rate: f64, excited_decay: f64, coherence_decay: f64) -> Self {
        let control = (pump_rate * excited_decay).sqrt();
        Self {
            control_rabi_rad_s: control,
            probe_rabi_rad_s: 0.05 * control,
            excited_decay_rad_s: excited_decay,
            coherence_decay_rad_s: coherence_decay,
            two_photon_detuning_rad_s: 0.0,
        }
    }

    /// Optical pumping rate at beam center, R₀ = Ω_C²/γ.
    pub fn pump_rate(&self) -> f64 {
        self.control_rabi_rad_s * self.control_rabi_rad_s / self.excited_decay_rad_s
    }
}

/// Longitudinal bias and transverse gradient ∂B_z/∂x. The companion term
/// ∂B_x/∂z is not stored: it equals the gradient identically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagneticConfig {
    pub bias_gauss: f64,
    #[serde(default)]
    pub gradient_gauss_per_cm: f64,
}

impl MagneticConfig {
    pub fn transverse_gradient(&self) -> f64 {
        self.gradient_gauss_per_cm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub gas: AtomGasParams,
    pub cell: CellGeometry,
    pub beam: BeamConfig,
    pub optics: OpticalParams,
    pub magnetics: MagneticConfig,
}

/// Named configurations for the cells the simulators are tuned against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 5 Torr Ne, 45 °C, lineshape conditions.
    Ne5Torr,
    /// 100 Torr Ne, 55 °C, lineshape conditions.
    Ne100Torr,
    /// 5 Torr Ne at 65 °C, stored-light conditions.
    Storage,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Ne5Torr, Preset::Ne100Torr, Preset::Storage];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Ne5Torr => "ne5torr",
            Preset::Ne100Torr => "ne100torr",
            Preset::Storage => "storage",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| {
                Error::config(
                    "preset",
                    format!("unknown preset `{name}` (expected ne5torr, ne100torr or storage)"),
                )
            })
    }

    pub fn config(self) -> ExperimentConfig {
        // Excited-state width of a pressure-broadened D1 line; only Ω_C²/γ
        // enters the models, so its exact value is immaterial.
        let gamma = hz_to_rad(250e6);
        let (diffusion, celsius, pump_rate, coherence_decay) = match self {
            Preset::Ne5Torr => (35.7, 45.0, PRESET_5TORR_PUMP_RATE, PRESET_5TORR_COHERENCE_DECAY),
            Preset::Ne100Torr => (
                1.78,
                55.0,
                PRESET_100TORR_PUMP_RATE,
                PRESET_100TORR_COHERENCE_DECAY,
            ),
            Preset::Storage => (35.7, 65.0, PRESET_5TORR_PUMP_RATE, PRESET_5TORR_COHERENCE_DECAY),
        };
        ExperimentConfig {
            gas: AtomGasParams {
                diffusion_cm2_per_s: diffusion,
                atomic_mass_kg: RB87_MASS_KG,
                temperature_k: celsius + 273.15,
                gyromagnetic_hz_per_gauss: RB87_M1_GYROMAGNETIC_HZ_PER_G,
            },
            cell: CellGeometry::default(),
            beam: BeamConfig {
                waist_radius_cm: 0.04,
                total_power_w: PRESET_POWER_W,
            },
            optics: OpticalParams::from_pump_rate(pump_rate, gamma, coherence_decay),
            magnetics: MagneticConfig {
                bias_gauss: 0.080,
                gradient_gauss_per_cm: 0.0,
            },
        }
    }
}

/// Center pumping rate Ω_C²/γ of the 5 Torr presets at 50 μW, rad/s.
pub const PRESET_5TORR_PUMP_RATE: f64 = 2.0e4;
/// Ground-state decoherence of the 5 Torr presets, rad/s.
pub const PRESET_5TORR_COHERENCE_DECAY: f64 = 2.0 * PI * 300.0;
/// Center pumping rate of the 100 Torr preset at 50 μW, rad/s.
pub const PRESET_100TORR_PUMP_RATE: f64 = 2.0e4;
/// Ground-state decoherence of the 100 Torr preset, rad/s.
pub const PRESET_100TORR_COHERENCE_DECAY: f64 = 2.0 * PI * 150.0;

/// Total laser power of the lineshape presets, W.
pub const PRESET_POWER_W: f64 = 50e-6;
/// Laser power and bias of the gradient-modified spectra, W and G.
pub const GRADIENT_SPECTRA_POWER_W: f64 = 100e-6;
pub const GRADIENT_SPECTRA_BIAS_G: f64 = 0.132;
/// Laser power and bias of the lock-in width-vs-gradient scan, W and G.
pub const GRADIENT_WIDTH_POWER_W: f64 = 20e-6;
pub const GRADIENT_WIDTH_BIAS_G: f64 = 0.080;

fn require(field: &str, ok: bool, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, reason))
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    require(field, v.is_finite() && v > 0.0, &format!("must be finite and > 0 (got {v})"))
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    require(field, v.is_finite() && v >= 0.0, &format!("must be finite and >= 0 (got {v})"))
}

impl ExperimentConfig {
    /// Checks every type invariant, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        positive("gas.diffusion_cm2_per_s", self.gas.diffusion_cm2_per_s)?;
        positive("gas.atomic_mass_kg", self.gas.atomic_mass_kg)?;
        positive("gas.temperature_k", self.gas.temperature_k)?;
        positive("gas.gyromagnetic_hz_per_gauss", self.gas.gyromagnetic_hz_per_gauss)?;
        positive("cell.length_cm", self.cell.length_cm)?;
        positive("cell.radius_cm", self.cell.radius_cm)?;
        positive("beam.waist_radius_cm", self.beam.waist_radius_cm)?;
        non_negative("beam.total_power_w", self.beam.total_power_w)?;
        require(
            "cell.radius_cm",
            self.cell.radius_cm > self.beam.waist_radius_cm,
            &format!(
                "must exceed beam.waist_radius_cm ({} <= {})",
                self.cell.radius_cm, self.beam.waist_radius_cm
            ),
        )?;
        non_negative("optics.control_rabi_rad_s", self.optics.control_rabi_rad_s)?;
        non_negative("optics.probe_rabi_rad_s", self.optics.probe_rabi_rad_s)?;
        positive("optics.excited_decay_rad_s", self.optics.excited_decay_rad_s)?;
        non_negative("optics.coherence_decay_rad_s", self.optics.coherence_decay_rad_s)?;
        require(
            "optics.two_photon_detuning_rad_s",
            self.optics.two_photon_detuning_rad_s.is_finite(),
            "must be finite",
        )?;
        non_negative("magnetics.bias_gauss", self.magnetics.bias_gauss)?;
        require(
            "magnetics.gradient_gauss_per_cm",
            self.magnetics.gradient_gauss_per_cm.is_finite(),
            "must be finite",
        )?;
        Ok(())
    }

    /// Soft problems that do not invalidate the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let ratio = self.optics.probe_rabi_rad_s.abs() / self.optics.control_rabi_rad_s.abs();
        if !(ratio < WEAK_PROBE_WARNING_RATIO) {
            out.push(format!(
                "weak-probe assumption questionable: |Ω_P|/|Ω_C| = {ratio:.3} >= {WEAK_PROBE_WARNING_RATIO}"
            ));
        }
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Rescales the total laser power; Ω_C² follows the power linearly.
    pub fn with_power_scale(mut self, factor: f64) -> Self {
        self.beam.total_power_w *= factor;
        self.optics.control_rabi_rad_s *= factor.sqrt();
        self.optics.probe_rabi_rad_s *= factor.sqrt();
        self
    }

    /// Rescales both optical fields to a new total power.
    pub fn with_power(self, total_power_w: f64) -> Self {
        let factor = total_power_w / self.beam.total_power_w;
        let mut out = self.with_power_scale(factor);
        out.beam.total_power_w = total_power_w;
        out
    }

    pub fn with_bias(mut self, gauss: f64) -> Self {
        self.magnetics.bias_gauss = gauss;
        self
    }

    pub fn with_gradient(mut self, gauss_per_cm: f64) -> Self {
        self.magnetics.gradient_gauss_per_cm = gauss_per_cm;
        self
    }

    /// Lowest-order diffusion time across the beam, τ_D = κ·w²/D, s.
    pub fn diffusion_time(&self) -> f64 {
        let w = self.beam.waist_radius_cm;
        DIFFUSION_MODE_CONSTANT * w * w / self.gas.diffusion_cm2_per_s
    }

    /// Zeeman dephasing rate per unit transverse displacement,
    /// 2π·g·∂B_z/∂x, rad/(s·cm).
    pub fn gradient_coupling(&self) -> f64 {
        hz_to_rad(self.gas.gyromagnetic_hz_per_gauss * self.magnetics.gradient_gauss_per_cm)
    }
}

/// Mean thermal speed √(8k_BT/(πm)), cm/s.
pub fn mean_thermal_speed(mass_kg: f64, temperature_k: f64) -> Result<f64> {
    if !(mass_kg > 0.0 && mass_kg.is_finite()) || !(temperature_k > 0.0 && temperature_k.is_finite()) {
        return Err(Error::domain(format!(
            "mean thermal speed needs positive mass and temperature (got m={mass_kg}, T={temperature_k})"
        )));
    }
    let metres_per_s = (8.0 * BOLTZMANN * temperature_k / (PI * mass_kg)).sqrt();
    Ok(metres_per_s * 100.0)
}

/// Naive single-pass diffusion linewidth 1/(π·τ_D), Hz.
pub fn single_pass_diffusion_linewidth(config: &ExperimentConfig) -> f64 {
    1.0 / (PI * config.diffusion_time())
}

/// Where a spectrum came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumSource {
    ClosedForm,
    MonteCarlo,
    File,
}

/// Transmission samples over strictly increasing two-photon detunings (rad/s).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    detunings: Vec<f64>,
    transmissions: Vec<f64>,
    pub source: SpectrumSource,
}

impl Spectrum {
    pub fn new(detunings: Vec<f64>, transmissions: Vec<f64>, source: SpectrumSource) -> Result<Self> {
        if detunings.len() != transmissions.len() {
            return Err(Error::domain(format!(
                "spectrum has {} detunings but {} transmissions",
                detunings.len(),
                transmissions.len()
            )));
        }
        if detunings.is_empty() {
            return Err(Error::domain("spectrum is empty"));
        }
        if let Some(i) = detunings
            .iter()
            .chain(transmissions.iter())
            .position(|v| !v.is_finite())
        {
            return Err(Error::domain(format!("spectrum entry {i} is not finite")));
        }
        if let Some(w) = detunings.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::domain(format!(
                "detunings not strictly increasing at index {}",
                w + 1
            )));
        }
        Ok(Self {
            detunings,
            transmissions,
            source,
        })
    }

    pub fn detunings(&self) -> &[f64] {
        &self.detunings
    }

    pub fn transmissions(&self) -> &[f64] {
        &self.transmissions
    }

    pub fn len(&self) -> usize {
        self.detunings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detunings.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.detunings.iter().copied().zip(self.transmissions.iter().copied())
    }

    /// Same shape with every transmission multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Spectrum::new(
            self.detunings.clone(),
            self.transmissions.iter().map(|t| t * factor).collect(),
            self.source,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn rb87_thermal_speed_at_318k() {
        // √(8·1.380649e-23·318/(π·1.443e-25)) m/s by hand: 278.35 m/s.
        let v = mean_thermal_speed(1.443e-25, 318.0).unwrap();
        assert_relative_eq!(v, 2.7835e4, max_relative = 1e-3);
    }

    #[test]
    fn thermal_speed_rejects_nonpositive() {
        assert!(mean_thermal_speed(0.0, 300.0).is_err());
        assert!(mean_thermal_speed(1e-25, -1.0).is_err());
        assert!(mean_thermal_speed(f64::NAN, 300.0).is_err());
    }

    #[test]
    fn diffusion_linewidth_anchor_and_scaling() {
        let five = Preset::Ne5Torr.config();
        assert_relative_eq!(single_pass_diffusion_linewidth(&five), 26_000.0, max_relative = 1e-12);

        let hundred = Preset::Ne100Torr.config();
        assert_relative_eq!(
            single_pass_diffusion_linewidth(&hundred),
            26_000.0 * 1.78 / 35.7,
            max_relative = 1e-12
        );

        let mut wide = five;
        wide.beam.waist_radius_cm *= 2.0;
        assert_relative_eq!(
            single_pass_diffusion_linewidth(&wide),
            26_000.0 / 4.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn presets_carry_diffusion_constants() {
        assert_eq!(Preset::from_name("ne5torr").unwrap().config().gas.diffusion_cm2_per_s, 35.7);
        assert_eq!(Preset::from_name("ne100torr").unwrap().config().gas.diffusion_cm2_per_s, 1.78);
        assert!(Preset::from_name("ne7torr").is_err());
        for p in Preset::ALL {
            p.config().validate().unwrap();
            assert!(p.config().warnings().is_empty());
        }
    }

    #[test]
    fn negative_waist_is_rejected_by_name() {
        let mut cfg = Preset::Ne5Torr.config();
        cfg.beam.waist_radius_cm = -0.04;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "beam.waist_radius_cm"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&Preset::Ne5Torr.config().to_json()).unwrap();
        v["beam"]["diameter_cm"] = serde_json::json!(0.08);
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("diameter_cm"), "{err}");
    }

    #[test]
    fn strong_probe_warns() {
        let mut cfg = Preset::Ne5Torr.config();
        cfg.optics.probe_rabi_rad_s = 0.5 * cfg.optics.control_rabi_rad_s;
        assert_eq!(cfg.warnings().len(), 1);
    }

    #[test]
    fn spectrum_invariants() {
        assert!(Spectrum::new(vec![0.0, 1.0], vec![1.0], SpectrumSource::File).is_err());
        assert!(Spectrum::new(vec![0.0, 0.0], vec![1.0, 1.0], SpectrumSource::File).is_err());
        assert!(Spectrum::new(vec![0.0, 1.0], vec![1.0, f64::NAN], SpectrumSource::File).is_err());
        assert!(Spectrum::new(vec![-1.0, 1.0], vec![0.5, 0.5], SpectrumSource::File).is_ok());
    }

    fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
        (
            0.1f64..100.0,
            1e-26f64..1e-24,
            200.0f64..500.0,
            0.01f64..0.2,
            1e2f64..1e6,
            0.0f64..1e4,
            -0.01f64..0.01,
        )
            .prop_map(|(d, m, t, w, r0, gbc, g)| {
                let mut cfg = Preset::Ne5Torr.config();
                cfg.gas.diffusion_cm2_per_s = d;
                cfg.gas.atomic_mass_kg = m;
                cfg.gas.temperature_k = t;
                cfg.beam.waist_radius_cm = w;
                cfg.optics = OpticalParams::from_pump_rate(r0, 1e9, gbc);
                cfg.magnetics.gradient_gauss_per_cm = g;
                cfg
            })
    }

    proptest! {
        #[test]
        fn config_json_round_trip(cfg in arb_config()) {
            let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
            prop_assert_eq!(back, cfg);
        }

        #[test]
        fn hz_rad_round_trip(f in -1e9f64..1e9) {
            let back = rad_to_hz(hz_to_rad(f));
            prop_assert!((back - f).abs() <= 1e-12 * f.abs().max(1e-300));
        }

        #[test]
        fn scaling_laws(cfg in arb_config()) {
            let v = mean_thermal_speed(cfg.gas.atomic_mass_kg, cfg.gas.temperature_k).unwrap();
            let v_hot = mean_thermal_speed(cfg.gas.atomic_mass_kg, 4.0 * cfg.gas.temperature_k).unwrap();
            let v_heavy = mean_thermal_speed(4.0 * cfg.gas.atomic_mass_kg, cfg.gas.temperature_k).unwrap();
            prop_assert!((v_hot / v - 2.0).abs() < 1e-12);
            prop_assert!((v_heavy / v - 0.5).abs() < 1e-12);

            let width = single_pass_diffusion_linewidth(&cfg);
            let mut doubled = cfg;
            doubled.beam.waist_radius_cm *= 2.0;
            prop_assert!((single_pass_diffusion_linewidth(&doubled) * 4.0 / width - 1.0).abs() < 1e-12);
            let mut faster = cfg;
            faster.gas.diffusion_cm2_per_s *= 3.0;
            prop_assert!((single_pass_diffusion_linewidth(&faster) / (3.0 * width) - 1.0).abs() < 1e-12);
        }
    }
}
