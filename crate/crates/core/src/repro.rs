//! Figure-level experiments. The `repro` subcommand and the acceptance suite
//! both call these, so what is checked is what is shipped.

use serde::{Deserialize, Serialize};

use crate::coil::{DistortionCheck, DistortionStatus};
use crate::diffusion::{gradient_scan, synth_spectrum, McSpectrum};
use crate::error::{Error, Result};
use crate::fit::{central_peak_width, fit, CentralPeak, FitResult};
use crate::lineshapes::ModelTag;
use crate::physics::{
    hz_to_rad, ExperimentConfig, Preset, Spectrum, GRADIENT_SPECTRA_BIAS_G, GRADIENT_SPECTRA_POWER_W,
    GRADIENT_WIDTH_BIAS_G, GRADIENT_WIDTH_POWER_W,
};
use crate::storage::{
    decay_curve, double_readout, DecayCurve, DelayCalibration, DoubleReadoutPoint, StorageMedium, StorageProtocol,
    TransverseGrid, STORAGE_DIFFUSION_SHARE, STORAGE_LINEWIDTH_HZ,
};

/// Seed used when none is given, so every figure is reproducible as shipped.
pub const DEFAULT_SEED: u64 = 20_240_601;
pub const DEFAULT_TRAJECTORIES: usize = 20_000;
/// Half-span of the detuning grid used for narrow-peak work, Hz.
pub const PEAK_GRID_SPAN_HZ: f64 = 20e3;
pub const PEAK_GRID_POINTS: usize = 241;
/// Spacing of the peak grid at resonance, roughly, Hz.
pub const PEAK_GRID_CORE_HZ: f64 = 20.0;
/// Gradients of the width scans, mG/cm.
pub const SCAN_GRADIENTS_MG_PER_CM: [f64; 4] = [0.0, 1.0, 2.0, 4.0];
/// Laser power of the MC run matched to the storage decay, W.
pub const MATCHED_LOW_POWER_W: f64 = 5e-6;
/// Storage intervals of the decay curve, s.
pub const DECAY_TAUS_S: [f64; 9] = [0.0, 50e-6, 100e-6, 200e-6, 400e-6, 700e-6, 1e-3, 1.5e-3, 2e-3];
/// Gaps T of the double-readout sweep, s.
pub const DOUBLE_READOUT_GAPS_S: [f64; 7] = [10e-6, 30e-6, 100e-6, 300e-6, 1e-3, 2e-3, 4e-3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Figure {
    /// Gradient coil field, gradient and linearity.
    Fig2,
    /// 5 Torr spectrum with Lorentzian and TY fits.
    Fig3,
    /// Spectra and TY fits versus gradient, both cells.
    Fig5,
    /// Central-peak width versus gradient, both cells.
    Fig6,
    /// Retrieved area versus storage time.
    Fig7,
    /// Double readout.
    Fig8,
}

/// Detuning grid (rad/s) with points spaced as sinh, dense at resonance and
/// sparse in the wings.
pub fn peak_grid(span_hz: f64, points: usize, core_hz: f64) -> Vec<f64> {
    let umax = (span_hz / core_hz).asinh();
    (0..points)
        .map(|i| {
            let u = -1.0 + 2.0 * i as f64 / (points - 1) as f64;
            hz_to_rad(core_hz * (u * umax).sinh())
        })
        .collect()
}

pub fn default_peak_grid() -> Vec<f64> {
    peak_grid(PEAK_GRID_SPAN_HZ, PEAK_GRID_POINTS, PEAK_GRID_CORE_HZ)
}

/// MC spectrum with both fits and the central-peak width.
#[derive(Debug, Clone)]
pub struct LineshapeFits {
    pub mc: McSpectrum,
    pub lorentzian: FitResult,
    pub ty: FitResult,
    pub peak: CentralPeak,
}

pub fn lineshape_fits(config: &ExperimentConfig, trajectories: usize, seed: u64) -> Result<LineshapeFits> {
    let mc = synth_spectrum(config, &default_peak_grid(), trajectories, seed)?;
    analyse(mc)
}

fn analyse(mc: McSpectrum) -> Result<LineshapeFits> {
    let lorentzian = fit(&mc.spectrum, ModelTag::Lorentzian, None, None)?;
    let ty = fit(&mc.spectrum, ModelTag::Ty, None, None)?;
    let peak = central_peak_width(&mc.spectrum)?;
    Ok(LineshapeFits {
        mc,
        lorentzian,
        ty,
        peak,
    })
}

/// One gradient of a scan, summarized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientPoint {
    pub gradient_mg_per_cm: f64,
    pub narrow_peak_fwhm_hz: Option<f64>,
    pub ty_normalized_rms: f64,
    pub lorentzian_normalized_rms: f64,
    pub distortion: DistortionCheck,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub spectrum: Option<Spectrum>,
    #[serde(skip)]
    pub ty_fit: Option<FitResult>,
}

/// MC spectra of a preset at the given power and bias across gradients.
pub fn gradient_points(
    preset: Preset,
    total_power_w: f64,
    bias_gauss: f64,
    gradients_mg_per_cm: &[f64],
    trajectories: usize,
    seed: u64,
) -> Result<Vec<GradientPoint>> {
    let config = preset.config().with_power(total_power_w).with_bias(bias_gauss);
    let gradients: Vec<f64> = gradients_mg_per_cm.iter().map(|g| g * 1e-3).collect();
    let scan = gradient_scan(&config, &gradients, &default_peak_grid(), trajectories, seed)?;
    scan.into_iter()
        .map(|p| {
            let warnings = p.result.warnings.clone();
            let fits = analyse(p.result)?;
            Ok(GradientPoint {
                gradient_mg_per_cm: p.gradient_gauss_per_cm * 1e3,
                narrow_peak_fwhm_hz: fits.peak.fwhm_hz(),
                ty_normalized_rms: fits.ty.normalized_rms,
                lorentzian_normalized_rms: fits.lorentzian.normalized_rms,
                distortion: p.distortion,
                warnings,
                spectrum: Some(fits.mc.spectrum),
                ty_fit: Some(fits.ty),
            })
        })
        .collect()
}

/// Width-versus-gradient scan under the lock-in conditions (20 μW, 80 mG).
pub fn width_scan(preset: Preset, gradients_mg_per_cm: &[f64], trajectories: usize, seed: u64) -> Result<Vec<GradientPoint>> {
    gradient_points(
        preset,
        GRADIENT_WIDTH_POWER_W,
        GRADIENT_WIDTH_BIAS_G,
        gradients_mg_per_cm,
        trajectories,
        seed,
    )
}

/// Spectra versus gradient under the direct-detection conditions (100 μW, 132 mG).
pub fn spectra_scan(preset: Preset, gradients_mg_per_cm: &[f64], trajectories: usize, seed: u64) -> Result<Vec<GradientPoint>> {
    gradient_points(
        preset,
        GRADIENT_SPECTRA_POWER_W,
        GRADIENT_SPECTRA_BIAS_G,
        gradients_mg_per_cm,
        trajectories,
        seed,
    )
}

/// Least-squares slope of width against gradient, Hz per mG/cm. Fails when
/// any point has no detectable peak.
pub fn width_slope(points: &[GradientPoint]) -> Result<f64> {
    let xy = points
        .iter()
        .map(|p| {
            p.narrow_peak_fwhm_hz
                .map(|w| (p.gradient_mg_per_cm, w))
                .ok_or_else(|| Error::Numerical(format!("no central peak at {} mG/cm", p.gradient_mg_per_cm)))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    if xy.len() < 2 {
        return Err(Error::domain("slope needs at least two gradients"));
    }
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("slope needs distinct gradients"));
    }
    Ok(sxy / sxx)
}

pub fn any_distortion_failure(points: &[GradientPoint]) -> bool {
    points.iter().any(|p| p.distortion.status == DistortionStatus::Fail)
}

/// Storage medium whose effective linewidth is the stored-light value.
pub fn decay_medium() -> Result<StorageMedium> {
    StorageMedium::from_config(&Preset::Storage.config())
        .with_effective_linewidth(STORAGE_LINEWIDTH_HZ, STORAGE_DIFFUSION_SHARE)
}

/// Medium of the double-readout experiment: the storage preset as is.
pub fn replenishment_medium() -> StorageMedium {
    StorageMedium::from_config(&Preset::Storage.config())
}

pub fn storage_decay(medium: &StorageMedium, grid_points: usize, taus_s: &[f64]) -> Result<DecayCurve> {
    let grid = TransverseGrid::for_medium(medium, grid_points)?;
    decay_curve(
        &StorageProtocol::default(),
        taus_s,
        medium,
        grid,
        &DelayCalibration::default(),
    )
}

pub fn storage_double_readout(medium: &StorageMedium, grid_points: usize, gaps_s: &[f64]) -> Result<Vec<DoubleReadoutPoint>> {
    let grid = TransverseGrid::for_medium(medium, grid_points)?;
    // The gap of the base protocol is replaced by each entry of `gaps_s`.
    double_readout(
        &StorageProtocol::double_readout(DOUBLE_READOUT_GAPS_S[0]),
        gaps_s,
        medium,
        grid,
        &DelayCalibration::default(),
    )
}

/// Experiment configuration sharing γ_bc, D and the beam with a storage
/// medium, at low laser power.
pub fn matched_config(medium: &StorageMedium) -> ExperimentConfig {
    let mut config = Preset::Storage.config().with_power(MATCHED_LOW_POWER_W);
    config.gas.diffusion_cm2_per_s = medium.diffusion_cm2_per_s;
    config.optics.coherence_decay_rad_s = medium.coherence_decay_rad_s;
    config.beam.waist_radius_cm = medium.waist_radius_cm;
    config.cell.radius_cm = medium.cell_radius_cm;
    config
}

/// Central-peak FWHM of the MC spectrum at parameters matched to `medium`.
pub fn matched_narrow_peak(medium: &StorageMedium, trajectories: usize, seed: u64) -> Result<CentralPeak> {
    let mc = synth_spectrum(&matched_config(medium), &default_peak_grid(), trajectories, seed)?;
    central_peak_width(&mc.spectrum)
}
