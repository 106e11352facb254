//! Dynamic-EIT light storage on a transverse grid.
//!
//! Longitudinal propagation is reduced to bookkeeping: the group delay sets
//! how much of the probe pulse is inside the medium when the control field is
//! switched off, and that fraction is mapped onto a coherence whose
//! transverse profile is the beam intensity mode. While the control is off
//! the coherence obeys
//!
//! ```text
//! ∂σ/∂t = D∇²σ − (γ_bc + i·2π·g·G_x·x)·σ
//! ```
//!
//! with an absorbing wall at the cell radius. While the control is on, the
//! in-beam coherence is additionally drained at the rate I(r)/(I₀·t_d), with
//! t_d the group delay at the read power, and the drained amount leaves the
//! cell as the retrieved probe field.
//!
//! Amounts are in units of the input pulse norm: the amplitude integral
//! Σσ·h² of the stored coherence equals the fraction of the pulse it still
//! represents, and retrieved pulse areas are time integrals of the retrieved
//! amplitude in the same units.
//!
//! Rate convention: a 1/e area decay time T corresponds to a linewidth
//! (FWHM, Hz) of 1/(π·T).
//!
//! # Solver
//!
//! The cell cross-section is embedded in the square [−R, R]² sampled at the
//! interior points of an (N+1)-interval grid. Diffusion is applied exactly in
//! the sine basis of that square (a 2-D DST-I computed with complex FFTs),
//! decay, gradient phase and drain are applied exactly pointwise, and the two
//! are combined by Strang splitting. Points outside the disk are zeroed after
//! every diffusion step.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::diffusion::BESSEL_J0_FIRST_ZERO;
use crate::error::{Error, Result};
use crate::physics::{ExperimentConfig, DIFFUSION_MODE_CONSTANT};

/// Full width of the Gaussian probe pulse (1/e of intensity), s.
pub const PULSE_FULL_WIDTH_S: f64 = 1e-3;
/// Control power while the pulse enters, W.
pub const WRITE_POWER_W: f64 = 50e-6;
/// Control power while pulses are retrieved, W.
pub const READ_POWER_W: f64 = 600e-6;
/// Group-delay anchor: at this control power...
pub const DELAY_REFERENCE_POWER_W: f64 = 50e-6;
/// ...the probe is delayed by this much, s.
pub const DELAY_REFERENCE_S: f64 = 450e-6;
/// First dark interval of the double-readout schedule, s.
pub const INTERMEDIATE_OFF_S: f64 = 200e-6;
/// Length of the intermediate read, s.
pub const INTERMEDIATE_ON_S: f64 = 200e-6;
/// Length of the final read, s.
pub const DEFAULT_READ_DURATION_S: f64 = 1e-3;
pub const DEFAULT_GRID_POINTS: usize = 128;
/// Linewidth of the stored-light decay experiment, Hz.
pub const STORAGE_LINEWIDTH_HZ: f64 = 600.0;
/// Share of [`STORAGE_LINEWIDTH_HZ`] carried by diffusion out of the beam.
/// Escape from the beam is algebraic rather than exponential in time, so a
/// fitted 1/e time tracks 1/(π·linewidth) only while this share is small.
pub const STORAGE_DIFFUSION_SHARE: f64 = 0.2;
/// Largest D·Δt/h² per substep.
pub const MAX_DIFFUSION_NUMBER: f64 = 0.5;
/// Largest Δt/t_d per substep while the control field is on.
pub const MAX_DRAIN_PER_STEP: f64 = 0.1;
/// Largest decay exponent or gradient phase per substep.
pub const MAX_POINTWISE_STEP: f64 = 0.1;

/// Group delay C/P, anchored by one measured (power, delay) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayCalibration {
    pub reference_power_w: f64,
    pub reference_delay_s: f64,
}

impl Default for DelayCalibration {
    fn default() -> Self {
        Self {
            reference_power_w: DELAY_REFERENCE_POWER_W,
            reference_delay_s: DELAY_REFERENCE_S,
        }
    }
}

impl DelayCalibration {
    /// C in delay = C/P, W·s.
    pub fn constant(&self) -> f64 {
        self.reference_power_w * self.reference_delay_s
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("calibration.reference_power_w", self.reference_power_w),
            ("calibration.reference_delay_s", self.reference_delay_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("must be finite and > 0 (got {v})")));
            }
        }
        Ok(())
    }
}

/// Group delay at a control power, s. Delay scales as 1/|Ω_C|² ∝ 1/P.
pub fn group_delay(control_power_w: f64, calibration: &DelayCalibration) -> Result<f64> {
    if !(control_power_w.is_finite() && control_power_w > 0.0) {
        return Err(Error::domain(format!(
            "control power must be finite and > 0 (got {control_power_w})"
        )));
    }
    Ok(calibration.constant() / control_power_w)
}

/// Fraction of a Gaussian pulse of intensity exp(−(2t/W)²) that lies in the
/// medium at switch-off: the energy inside a centered window of length equal
/// to the delay, erf(delay/W).
pub fn stored_fraction(delay_s: f64, pulse_full_width_s: f64) -> f64 {
    if delay_s <= 0.0 {
        return 0.0;
    }
    libm::erf(delay_s / pulse_full_width_s)
}

/// Square grid of N×N interior points covering [−R, R]².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransverseGrid {
    pub points: usize,
    pub half_width_cm: f64,
}

impl TransverseGrid {
    pub fn new(points: usize, half_width_cm: f64) -> Result<Self> {
        if points < 8 {
            return Err(Error::config("grid.points", format!("must be >= 8 (got {points})")));
        }
        if !(half_width_cm.is_finite() && half_width_cm > 0.0) {
            return Err(Error::config(
                "grid.half_width_cm",
                format!("must be finite and > 0 (got {half_width_cm})"),
            ));
        }
        Ok(Self {
            points,
            half_width_cm,
        })
    }

    pub fn for_medium(medium: &StorageMedium, points: usize) -> Result<Self> {
        Self::new(points, medium.cell_radius_cm)
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width_cm / (self.points as f64 + 1.0)
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width_cm + (i as f64 + 1.0) * self.spacing()
    }

    pub fn cell_area(&self) -> f64 {
        self.spacing() * self.spacing()
    }

    pub fn len(&self) -> usize {
        self.points * self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points == 0
    }
}

/// Transport and relaxation of the stored coherence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageMedium {
    pub diffusion_cm2_per_s: f64,
    pub coherence_decay_rad_s: f64,
    /// 2π·g·∂B_z/∂x, rad/(s·cm).
    pub gradient_coupling: f64,
    pub waist_radius_cm: f64,
    pub cell_radius_cm: f64,
}

impl StorageMedium {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        Self {
            diffusion_cm2_per_s: config.gas.diffusion_cm2_per_s,
            coherence_decay_rad_s: config.optics.coherence_decay_rad_s,
            gradient_coupling: config.gradient_coupling(),
            waist_radius_cm: config.beam.waist_radius_cm,
            cell_radius_cm: config.cell.radius_cm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("diffusion_cm2_per_s", self.diffusion_cm2_per_s, true),
            ("coherence_decay_rad_s", self.coherence_decay_rad_s, true),
            ("waist_radius_cm", self.waist_radius_cm, false),
            ("cell_radius_cm", self.cell_radius_cm, false),
        ];
        for (field, v, zero_ok) in checks {
            let ok = v.is_finite() && (v > 0.0 || (zero_ok && v == 0.0));
            if !ok {
                let bound = if zero_ok { ">= 0" } else { "> 0" };
                return Err(Error::config(field, format!("must be finite and {bound} (got {v})")));
            }
        }
        if !self.gradient_coupling.is_finite() {
            return Err(Error::config("gradient_coupling", "must be finite"));
        }
        if self.cell_radius_cm <= self.waist_radius_cm {
            return Err(Error::config("cell_radius_cm", "must exceed the beam waist radius"));
        }
        Ok(())
    }

    /// Decay rate of the slowest diffusion mode of the cell, D·(j₀₁/R)², rad/s.
    pub fn wall_rate(&self) -> f64 {
        self.diffusion_cm2_per_s * (BESSEL_J0_FIRST_ZERO / self.cell_radius_cm).powi(2)
    }

    /// Rate 1/τ_D of diffusion out of the beam, τ_D = κ·w²/D, rad/s.
    pub fn beam_escape_rate(&self) -> f64 {
        let w = self.waist_radius_cm;
        self.diffusion_cm2_per_s / (DIFFUSION_MODE_CONSTANT * w * w)
    }

    /// Linewidth (γ_bc + 1/τ_D)/π of the stored coherence, Hz.
    pub fn effective_linewidth_hz(&self) -> f64 {
        (self.coherence_decay_rad_s + self.beam_escape_rate()) / PI
    }

    /// Sets γ_bc and D so that the effective linewidth is `linewidth_hz`,
    /// with `diffusion_share` ∈ [0, 1] of it carried by diffusion.
    pub fn with_effective_linewidth(mut self, linewidth_hz: f64, diffusion_share: f64) -> Result<Self> {
        if !(linewidth_hz.is_finite() && linewidth_hz > 0.0) {
            return Err(Error::domain(format!("linewidth must be finite and > 0 (got {linewidth_hz})")));
        }
        if !(0.0..=1.0).contains(&diffusion_share) {
            return Err(Error::domain(format!(
                "diffusion share must lie in [0, 1] (got {diffusion_share})"
            )));
        }
        let total = PI * linewidth_hz;
        let w = self.waist_radius_cm;
        self.diffusion_cm2_per_s = diffusion_share * total * DIFFUSION_MODE_CONSTANT * w * w;
        self.coherence_decay_rad_s = (1.0 - diffusion_share) * total;
        Ok(self)
    }
}

/// Where the input pulse norm has gone so far.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NormLedger {
    pub input: f64,
    pub transmitted: f64,
    pub retrieved: f64,
    pub decayed: f64,
    pub wall: f64,
}

/// Stored spin coherence on the transverse grid, row-major with x along rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredCoherenceField {
    pub grid: TransverseGrid,
    pub values: Vec<Complex64>,
    pub ledger: NormLedger,
}

impl StoredCoherenceField {
    pub fn empty(grid: TransverseGrid) -> Self {
        Self {
            grid,
            values: vec![Complex64::new(0.0, 0.0); grid.len()],
            ledger: NormLedger::default(),
        }
    }

    /// Σσ·h².
    pub fn amplitude_total(&self) -> Complex64 {
        self.values.iter().sum::<Complex64>() * self.grid.cell_area()
    }

    /// Σ|σ|²·h².
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.cell_area()
    }

    /// ⟨x² + y²⟩ weighted by Re σ, cm².
    pub fn radial_second_moment(&self) -> f64 {
        let n = self.grid.points;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            let y = self.grid.coord(i);
            for j in 0..n {
                let x = self.grid.coord(j);
                let w = self.values[i * n + j].re;
                num += w * (x * x + y * y);
                den += w;
            }
        }
        num / den
    }

    /// Sum of every ledger entry plus what is still stored; equals the input
    /// norm up to discretization.
    pub fn accounted_total(&self) -> f64 {
        let l = &self.ledger;
        l.transmitted + l.retrieved + l.decayed + l.wall + self.amplitude_total().re
    }

    fn check_grid(&self) -> Result<()> {
        if self.values.len() != self.grid.len() {
            return Err(Error::domain(format!(
                "field has {} values for a {}×{} grid",
                self.values.len(),
                self.grid.points,
                self.grid.points
            )));
        }
        if self.values.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::Numerical("stored coherence is not finite".into()));
        }
        Ok(())
    }
}

/// One retrieved pulse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    /// Start of the read within the protocol, s.
    pub start_s: f64,
    /// Sample times (substep midpoints), s.
    pub times_s: Vec<f64>,
    /// Retrieved amplitude |E(t)| in pulse-norm units per second.
    pub amplitudes: Vec<f64>,
    /// ∫|E(t)| dt.
    pub area: f64,
}

struct Stepper {
    grid: TransverseGrid,
    fft: Arc<dyn Fft<f64>>,
    wavenumbers2: Vec<f64>,
    inside: Vec<bool>,
    mode: Vec<f64>,
    x: Vec<f64>,
}

impl Stepper {
    fn new(grid: TransverseGrid, medium: &StorageMedium) -> Self {
        let n = grid.points;
        let fft = FftPlanner::new().plan_fft_forward(2 * n + 2);
        let wavenumbers2 = (0..n)
            .map(|k| (PI * (k as f64 + 1.0) / (2.0 * grid.half_width_cm)).powi(2))
            .collect();
        let r_cell2 = medium.cell_radius_cm * medium.cell_radius_cm;
        let w2 = medium.waist_radius_cm * medium.waist_radius_cm;
        let mut inside = Vec::with_capacity(grid.len());
        let mut mode = Vec::with_capacity(grid.len());
        let mut x = Vec::with_capacity(grid.len());
        for i in 0..n {
            let yi = grid.coord(i);
            for j in 0..n {
                let xj = grid.coord(j);
                let r2 = xj * xj + yi * yi;
                inside.push(r2 <= r_cell2);
                mode.push(if r2 <= r_cell2 { (-2.0 * r2 / w2).exp() } else { 0.0 });
                x.push(xj);
            }
        }
        Self {
            grid,
            fft,
            wavenumbers2,
            inside,
            mode,
            x,
        }
    }

    /// In-place DST-I of every row, unnormalized.
    fn dst_rows(&self, values: &mut [Complex64]) {
        let n = self.grid.points;
        let zero = Complex64::new(0.0, 0.0);
        let half_i = Complex64::new(0.0, 0.5);
        values.par_chunks_mut(n).for_each_init(
            || {
                (
                    vec![zero; 2 * n + 2],
                    vec![zero; self.fft.get_inplace_scratch_len()],
                )
            },
            |(buf, scratch), row| {
                buf[0] = zero;
                buf[n + 1] = zero;
                for (k, &v) in row.iter().enumerate() {
                    buf[k + 1] = v;
                    buf[2 * n + 1 - k] = -v;
                }
                self.fft.process_with_scratch(buf, scratch);
                for (k, out) in row.iter_mut().enumerate() {
                    *out = buf[k + 1] * half_i;
                }
            },
        );
    }

    fn transpose(&self, values: &mut [Complex64]) {
        let n = self.grid.points;
        for i in 0..n {
            for j in (i + 1)..n {
                values.swap(i * n + j, j * n + i);
            }
        }
    }

    /// Exact heat-kernel step in the sine basis, then the absorbing mask.
    fn diffuse(&self, values: &mut [Complex64], diffusion: f64, dt: f64) {
        if diffusion == 0.0 || dt == 0.0 {
            return;
        }
        let n = self.grid.points;
        let norm = 2.0 / (n as f64 + 1.0);
        let g: Vec<f64> = self
            .wavenumbers2
            .iter()
            .map(|k2| norm * (-diffusion * k2 * dt).exp())
            .collect();
        self.dst_rows(values);
        self.transpose(values);
        self.dst_rows(values);
        values.par_chunks_mut(n).enumerate().for_each(|(q, row)| {
            for (p, v) in row.iter_mut().enumerate() {
                *v *= g[q] * g[p];
            }
        });
        self.dst_rows(values);
        self.transpose(values);
        self.dst_rows(values);
        for (v, &inside) in values.iter_mut().zip(&self.inside) {
            if !inside {
                *v = Complex64::new(0.0, 0.0);
            }
        }
    }

    fn mask(&self, values: &mut [Complex64]) {
        for (v, &inside) in values.iter_mut().zip(&self.inside) {
            if !inside {
                *v = Complex64::new(0.0, 0.0);
            }
        }
    }

    /// Largest stable-and-accurate substep for the given transport.
    fn max_substep(&self, medium: &StorageMedium, drain_time: Option<f64>) -> f64 {
        let h = self.grid.spacing();
        let mut dt = f64::INFINITY;
        if medium.diffusion_cm2_per_s > 0.0 {
            dt = dt.min(MAX_DIFFUSION_NUMBER * h * h / medium.diffusion_cm2_per_s);
        }
        if let Some(t_d) = drain_time {
            dt = dt.min(MAX_DRAIN_PER_STEP * t_d);
        }
        if medium.coherence_decay_rad_s > 0.0 {
            dt = dt.min(MAX_POINTWISE_STEP / medium.coherence_decay_rad_s);
        }
        let phase_rate = medium.gradient_coupling.abs() * medium.cell_radius_cm;
        if phase_rate > 0.0 {
            dt = dt.min(MAX_POINTWISE_STEP / phase_rate);
        }
        dt
    }

    /// Advances the field and returns the amount drained in each substep
    /// together with the substep midpoints.
    fn advance(
        &self,
        field: &mut StoredCoherenceField,
        medium: &StorageMedium,
        duration: f64,
        drain_time: Option<f64>,
    ) -> (Vec<f64>, Vec<Complex64>) {
        if duration <= 0.0 {
            return (Vec::new(), Vec::new());
        }
        let dt_max = self.max_substep(medium, drain_time);
        let steps = if dt_max.is_finite() {
            (duration / dt_max).ceil().max(1.0) as usize
        } else {
            1
        };
        let dt = duration / steps as f64;
        let half = 0.5 * dt;
        let gamma = medium.coherence_decay_rad_s;
        let drain_rate = |m: f64| drain_time.map_or(0.0, |t_d| m / t_d);
        // Pointwise half-step factor and the shares of the removed amount
        // that were retrieved and that decayed.
        let pointwise: Vec<(Complex64, f64, f64)> = self
            .mode
            .iter()
            .zip(&self.x)
            .map(|(&m, &x)| {
                let r = drain_rate(m);
                let total = gamma + r;
                let magnitude = (-total * half).exp();
                let phase = Complex64::from_polar(1.0, -medium.gradient_coupling * x * half);
                let removed = 1.0 - magnitude;
                let (drained, decayed) = if total > 0.0 {
                    (removed * r / total, removed * gamma / total)
                } else {
                    (0.0, 0.0)
                };
                (phase * magnitude, drained, decayed)
            })
            .collect();
        let area = self.grid.cell_area();
        let apply = |values: &mut [Complex64], ledger: &mut NormLedger| -> Complex64 {
            let mut drained = Complex64::new(0.0, 0.0);
            let mut decayed = Complex64::new(0.0, 0.0);
            for (v, &(factor, share_out, share_decay)) in values.iter_mut().zip(&pointwise) {
                drained += *v * share_out;
                decayed += *v * share_decay;
                *v *= factor;
            }
            ledger.decayed += decayed.re * area;
            drained * area
        };
        let mut times = Vec::with_capacity(steps);
        let mut drained = Vec::with_capacity(steps);
        for s in 0..steps {
            let mut out = apply(&mut field.values, &mut field.ledger);
            let before = field.amplitude_total().re;
            self.diffuse(&mut field.values, medium.diffusion_cm2_per_s, dt);
            field.ledger.wall += before - field.amplitude_total().re;
            out += apply(&mut field.values, &mut field.ledger);
            times.push((s as f64 + 0.5) * dt);
            drained.push(out);
        }
        (times, drained)
    }
}

fn check_duration(name: &str, duration: f64) -> Result<()> {
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(Error::domain(format!("{name} must be finite and >= 0 (got {duration})")));
    }
    Ok(())
}

fn prepare(field: &StoredCoherenceField, medium: &StorageMedium) -> Result<Stepper> {
    medium.validate()?;
    field.check_grid()?;
    Ok(Stepper::new(field.grid, medium))
}

/// Maps the in-medium part of the probe pulse onto a coherence with the beam
/// intensity profile. Returns the field and the transmitted fraction.
pub fn store_pulse(
    protocol: &StorageProtocol,
    medium: &StorageMedium,
    grid: TransverseGrid,
    calibration: &DelayCalibration,
) -> Result<(StoredCoherenceField, f64)> {
    protocol.validate()?;
    medium.validate()?;
    calibration.validate()?;
    let mut field = StoredCoherenceField::empty(grid);
    field.ledger.input = 1.0;
    if protocol.write_power_w == 0.0 {
        field.ledger.transmitted = 1.0;
        return Ok((field, 1.0));
    }
    let delay = group_delay(protocol.write_power_w, calibration)?;
    let fraction = stored_fraction(delay, protocol.pulse_full_width_s);
    let stepper = Stepper::new(grid, medium);
    let mode_total: f64 = stepper.mode.iter().sum::<f64>() * grid.cell_area();
    for (v, &m) in field.values.iter_mut().zip(&stepper.mode) {
        *v = Complex64::new(fraction * m / mode_total, 0.0);
    }
    field.ledger.transmitted = 1.0 - fraction;
    Ok((field, 1.0 - fraction))
}

/// Free evolution with the control field off.
pub fn evolve_dark(
    field: &StoredCoherenceField,
    duration_s: f64,
    medium: &StorageMedium,
) -> Result<StoredCoherenceField> {
    check_duration("dark duration", duration_s)?;
    let stepper = prepare(field, medium)?;
    let mut out = field.clone();
    stepper.mask(&mut out.values);
    stepper.advance(&mut out, medium, duration_s, None);
    out.check_grid()?;
    Ok(out)
}

/// Reads out with the control field on for `duration_s`. The coherence keeps
/// diffusing and decaying while it is drained.
pub fn retrieve(
    field: &StoredCoherenceField,
    read_power_w: f64,
    duration_s: f64,
    medium: &StorageMedium,
    calibration: &DelayCalibration,
) -> Result<(RetrievalRecord, StoredCoherenceField)> {
    check_duration("read duration", duration_s)?;
    calibration.validate()?;
    let drain_time = group_delay(read_power_w, calibration)?;
    let stepper = prepare(field, medium)?;
    let mut out = field.clone();
    stepper.mask(&mut out.values);
    let (times, drained) = stepper.advance(&mut out, medium, duration_s, Some(drain_time));
    let dt = if times.is_empty() { 0.0 } else { duration_s / times.len() as f64 };
    let amplitudes: Vec<f64> = drained.iter().map(|d| d.norm() / dt).collect();
    let area: f64 = drained.iter().map(|d| d.norm()).sum();
    out.ledger.retrieved += area;
    out.check_grid()?;
    Ok((
        RetrievalRecord {
            start_s: 0.0,
            times_s: times,
            amplitudes,
            area,
        },
        out,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlState {
    Off,
    On,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInterval {
    pub control: ControlState,
    pub duration_s: f64,
    /// Control power while on, W; ignored while off.
    pub power_w: f64,
}

/// Optional extra read inserted after the first dark interval, followed by a
/// second dark interval before the final read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntermediateRead {
    pub on_s: f64,
    pub gap_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageProtocol {
    pub pulse_full_width_s: f64,
    pub write_power_w: f64,
    pub read_power_w: f64,
    /// Dark interval between switch-off and the first read, s.
    pub storage_interval_s: f64,
    /// Length of the final read, s.
    pub read_duration_s: f64,
    #[serde(default)]
    pub intermediate: Option<IntermediateRead>,
}

impl Default for StorageProtocol {
    fn default() -> Self {
        Self {
            pulse_full_width_s: PULSE_FULL_WIDTH_S,
            write_power_w: WRITE_POWER_W,
            read_power_w: READ_POWER_W,
            storage_interval_s: 0.0,
            read_duration_s: DEFAULT_READ_DURATION_S,
            intermediate: None,
        }
    }
}

impl StorageProtocol {
    /// Off 200 μs, on 200 μs, off `gap_s`, then the final read.
    pub fn double_readout(gap_s: f64) -> Self {
        Self {
            storage_interval_s: INTERMEDIATE_OFF_S,
            intermediate: Some(IntermediateRead {
                on_s: INTERMEDIATE_ON_S,
                gap_s,
            }),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pulse_full_width_s", self.pulse_full_width_s),
            ("read_power_w", self.read_power_w),
            ("read_duration_s", self.read_duration_s),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("must be finite and > 0 (got {v})")));
            }
        }
        let non_negative = [
            ("write_power_w", self.write_power_w),
            ("storage_interval_s", self.storage_interval_s),
        ];
        if let Some(ir) = &self.intermediate {
            if !(ir.on_s.is_finite() && ir.on_s > 0.0) {
                return Err(Error::config(
                    "intermediate.on_s",
                    format!("must be finite and > 0 (got {})", ir.on_s),
                ));
            }
            if !(ir.gap_s.is_finite() && ir.gap_s > 0.0) {
                return Err(Error::config(
                    "intermediate.gap_s",
                    format!("must be finite and > 0 (got {})", ir.gap_s),
                ));
            }
        }
        for (field, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be finite and >= 0 (got {v})")));
            }
        }
        Ok(())
    }

    /// Control schedule after switch-off. Zero-length dark intervals are
    /// dropped, so the result always alternates and ends with a read.
    pub fn schedule(&self) -> Vec<ControlInterval> {
        let off = |d: f64| ControlInterval {
            control: ControlState::Off,
            duration_s: d,
            power_w: 0.0,
        };
        let on = |d: f64| ControlInterval {
            control: ControlState::On,
            duration_s: d,
            power_w: self.read_power_w,
        };
        let mut out = Vec::new();
        if self.storage_interval_s > 0.0 {
            out.push(off(self.storage_interval_s));
        }
        if let Some(ir) = &self.intermediate {
            out.push(on(ir.on_s));
            out.push(off(ir.gap_s));
        }
        out.push(on(self.read_duration_s));
        out
    }

    /// The same protocol with the intermediate read replaced by darkness.
    pub fn without_intermediate(&self) -> Self {
        let extra = self.intermediate.map_or(0.0, |ir| ir.on_s + ir.gap_s);
        Self {
            storage_interval_s: self.storage_interval_s + extra,
            intermediate: None,
            ..*self
        }
    }
}

/// Checks that a schedule has positive durations, alternates, and reads
/// with positive power.
pub fn validate_schedule(schedule: &[ControlInterval]) -> Result<()> {
    for (i, interval) in schedule.iter().enumerate() {
        if !(interval.duration_s.is_finite() && interval.duration_s > 0.0) {
            return Err(Error::config(
                format!("schedule[{i}].duration_s"),
                format!("must be finite and > 0 (got {})", interval.duration_s),
            ));
        }
        if interval.control == ControlState::On
            && !(interval.power_w.is_finite() && interval.power_w > 0.0)
        {
            return Err(Error::config(
                format!("schedule[{i}].power_w"),
                "a read needs a finite, positive control power",
            ));
        }
        if i > 0 && schedule[i - 1].control == interval.control {
            return Err(Error::config(
                format!("schedule[{i}].control"),
                "control intervals must alternate between off and on",
            ));
        }
    }
    Ok(())
}

/// Outcome of one store-then-schedule run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRun {
    pub stored_fraction: f64,
    pub transmitted: f64,
    pub reads: Vec<RetrievalRecord>,
    pub field: StoredCoherenceField,
}

impl ProtocolRun {
    pub fn final_area(&self) -> f64 {
        self.reads.last().map_or(0.0, |r| r.area)
    }
}

/// Stores a pulse and plays a control schedule on it.
pub fn run_schedule(
    protocol: &StorageProtocol,
    schedule: &[ControlInterval],
    medium: &StorageMedium,
    grid: TransverseGrid,
    calibration: &DelayCalibration,
) -> Result<ProtocolRun> {
    validate_schedule(schedule)?;
    let (mut field, transmitted) = store_pulse(protocol, medium, grid, calibration)?;
    let stored = 1.0 - transmitted;
    let mut reads = Vec::new();
    let mut clock = 0.0;
    for interval in schedule {
        match interval.control {
            ControlState::Off => field = evolve_dark(&field, interval.duration_s, medium)?,
            ControlState::On => {
                let (mut record, rest) =
                    retrieve(&field, interval.power_w, interval.duration_s, medium, calibration)?;
                record.start_s = clock;
                for t in &mut record.times_s {
                    *t += clock;
                }
                reads.push(record);
                field = rest;
            }
        }
        clock += interval.duration_s;
    }
    Ok(ProtocolRun {
        stored_fraction: stored,
        transmitted,
        reads,
        field,
    })
}

pub fn run_protocol(
    protocol: &StorageProtocol,
    medium: &StorageMedium,
    grid: TransverseGrid,
    calibration: &DelayCalibration,
) -> Result<ProtocolRun> {
    run_schedule(protocol, &protocol.schedule(), medium, grid, calibration)
}

/// Least-squares fit of A·exp(−τ/T).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub amplitude: f64,
    /// 1/T, 1/s.
    pub rate_per_s: f64,
    /// None when the best fit does not decay.
    pub decay_time_s: Option<f64>,
    pub no_decay: bool,
    pub rms: f64,
}

impl DecayFit {
    /// 1/(π·T), Hz.
    pub fn linewidth_hz(&self) -> f64 {
        self.rate_per_s / PI
    }
}

/// Rates below this fraction of 1/τ_max count as no decay.
const NO_DECAY_RATE: f64 = 1e-6;

pub fn fit_exponential_decay(taus: &[f64], areas: &[f64]) -> Result<DecayFit> {
    if taus.len() != areas.len() || taus.len() < 2 {
        return Err(Error::domain("decay fit needs at least two (τ, area) pairs of equal length"));
    }
    if taus.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::domain("storage intervals must be finite and >= 0"));
    }
    if areas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::domain("decay fit needs finite, positive areas"));
    }
    let tau_max = taus.iter().cloned().fold(0.0, f64::max);
    if tau_max <= 0.0 {
        return Err(Error::domain("storage intervals must not all be zero"));
    }
    let cost = |k: f64| -> (f64, f64) {
        let (mut ye, mut ee) = (0.0, 0.0);
        for (&t, &y) in taus.iter().zip(areas) {
            let e = (-k * t).exp();
            ye += y * e;
            ee += e * e;
        }
        let a = ye / ee;
        let s = taus
            .iter()
            .zip(areas)
            .map(|(&t, &y)| (y - a * (-k * t).exp()).powi(2))
            .sum::<f64>();
        (s, a)
    };
    let grid: Vec<f64> = std::iter::once(0.0)
        .chain((0..=400).map(|j| 10f64.powf(-4.0 + 8.0 * j as f64 / 400.0) / tau_max))
        .collect();
    let costs: Vec<f64> = grid.iter().map(|&k| cost(k).0).collect();
    let best = (0..grid.len())
        .min_by(|&a, &b| costs[a].total_cmp(&costs[b]))
        .expect("grid is non-empty");
    let mut lo = grid[best.saturating_sub(1)];
    let mut hi = grid[(best + 1).min(grid.len() - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (cost(c).0, cost(d).0);
    for _ in 0..200 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = cost(c).0;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = cost(d).0;
        }
        if hi - lo <= 1e-14 * hi.max(1.0 / tau_max) {
            break;
        }
    }
    let mut k = 0.5 * (lo + hi);
    if costs[0] <= cost(k).0 {
        k = 0.0;
    }
    let no_decay = k * tau_max < NO_DECAY_RATE;
    if no_decay {
        k = 0.0;
    }
    let (s, a) = cost(k);
    Ok(DecayFit {
        amplitude: a,
        rate_per_s: k,
        decay_time_s: if no_decay { None } else { Some(1.0 / k) },
        no_decay,
        rms: (s / taus.len() as f64).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub taus_s: Vec<f64>,
    pub areas: Vec<f64>,
    pub fit: DecayFit,
    /// Final read of each run, for waveform output.
    pub reads: Vec<RetrievalRecord>,
}

/// Retrieved area versus storage interval, with an exponential fit.
pub fn decay_curve(
    protocol: &StorageProtocol,
    taus_s: &[f64],
    medium: &StorageMedium,
    grid: TransverseGrid,
    calibration: &DelayCalibration,
) -> Result<DecayCurve> {
    let reads = taus_s
        .par_iter()
        .map(|&tau| {
            let p = StorageProtocol {
                storage_interval_s: tau,
                intermediate: None,
                ..*protocol
            };
            let mut run = run_protocol(&p, medium, grid, calibration)?;
            Ok(run.reads.pop().expect("every schedule ends with a read"))
        })
        .collect::<Result<Vec<RetrievalRecord>>>()?;
    let areas: Vec<f64> = reads.iter().map(|r| r.area).collect();
    let fit = fit_exponential_decay(taus_s, &areas)?;
    Ok(DecayCurve {
        taus_s: taus_s.to_vec(),
        areas,
        fit,
        reads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoubleReadoutPoint {
    pub gap_s: f64,
    pub area_with: f64,
    pub area_without: f64,
    /// area_with/area_without, 0 when nothing is retrieved without.
    pub ratio: f64,
    /// Both reads of the run with the intermediate read.
    pub reads_with: Vec<RetrievalRecord>,
    pub read_without: RetrievalRecord,
}

/// Final-read areas with and without the intermediate read, per gap T.
pub fn double_readout(
    protocol: &StorageProtocol,
    gaps_s: &[f64],
    medium: &StorageMedium,
    grid: TransverseGrid,
    calibration: &DelayCalibration,
) -> Result<Vec<DoubleReadoutPoint>> {
    let on_s = protocol.intermediate.map_or(INTERMEDIATE_ON_S, |ir| ir.on_s);
    gaps_s
        .par_iter()
        .map(|&gap| {
            let with = StorageProtocol {
                intermediate: Some(IntermediateRead { on_s, gap_s: gap }),
                ..*protocol
            };
            let reads_with = run_protocol(&with, medium, grid, calibration)?.reads;
            let read_without = run_protocol(&with.without_intermediate(), medium, grid, calibration)?
                .reads
                .pop()
                .expect("every schedule ends with a read");
            let area_with = reads_with.last().map_or(0.0, |r| r.area);
            let area_without = read_without.area;
            let ratio = if area_without > 0.0 {
                area_with / area_without
            } else {
                0.0
            };
            Ok(DoubleReadoutPoint {
                gap_s: gap,
                area_with,
                area_without,
                ratio,
                reads_with,
                read_without,
            })
        })
        .collect()
}
