//! Monte-Carlo model of ground-state coherence carried by atoms that diffuse
//! in and out of a Gaussian beam.
//!
//! Each atom carries one complex coherence σ obeying
//!
//! ```text
//! dσ/dt = −(R(r) + γ_bc + iΔ(x, δ))·σ + R(r),   R(r) = R₀·I(r)/I₀,
//! Δ(x, δ) = δ + 2π·g·(∂B_z/∂x)·x
//! ```
//!
//! so atoms are pumped toward σ = 1 inside the beam and precess freely "in
//! the dark" outside it. The probe signal is the intensity-weighted ensemble
//! mean of σ.
//!
//! # Estimator
//!
//! Transverse diffusion with a uniform stationary density is reversible, so
//! the history of an atom observed now at position x is a Brownian path
//! started at x. [`synth_spectrum`] samples the present position from the
//! intensity-weighted stationary density (a Gaussian of standard deviation
//! w/2 per axis), walks that path backwards in lag, and accumulates the
//! δ-independent lag kernel
//!
//! ```text
//! c_n = R_n·exp(−A_n)·(1 − exp(−z_n·Δt))/z_n,   z_n = R_n + γ_bc + i·k·x_n,
//! A_n = Σ_{m<n} z_m·Δt
//! ```
//!
//! The coherence at any detuning is then σ(δ) = Σ c_n·exp(−iδ(n+½)Δt)·sinc(δΔt/2),
//! which makes the cost independent of the size of the detuning grid. A path
//! ends when it touches a decohering wall, when the accumulated attenuation
//! exceeds [`ATTENUATION_CUTOFF`], or after the maximum duration.
//!
//! The stationary density and the Brownian increments are both symmetric
//! under x → −x, and the mirrored path has the complex-conjugate kernel, so
//! every sampled path is paired with its mirror image by keeping only Re c_n.
//! The resulting spectrum is exactly even in δ.
//!
//! Trajectory `i` draws from ChaCha8 stream `i` of the run seed, and batches
//! of [`BATCH_SIZE`] trajectories are reduced in index order, so results do
//! not depend on the number of worker threads.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coil::{distortion_check, DistortionCheck, DistortionStatus};
use crate::error::{Error, Result};
use crate::physics::{rad_to_hz, ExperimentConfig, Spectrum, SpectrumSource};

/// Minimum number of steps, statistically, to diffuse across one waist.
pub const STEPS_PER_WAIST: f64 = 25.0;
/// Upper bound on a trajectory's duration, s.
pub const MAX_TRAJECTORY_DURATION: f64 = 50e-3;
/// Paths stop once |exp(−A)| < exp(−ATTENUATION_CUTOFF).
pub const ATTENUATION_CUTOFF: f64 = 20.0;
/// Trajectories per deterministic reduction batch.
pub const BATCH_SIZE: usize = 64;
/// Largest phase advance per step at the outermost detuning, rad.
pub const MAX_PHASE_PER_STEP: f64 = 0.5;
/// First zero of J₀, sets the slowest diffusion mode of a cylindrical cell.
pub const BESSEL_J0_FIRST_ZERO: f64 = 2.404_825_557_695_773;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WallPolicy {
    /// Wall collisions destroy the coherence (uncoated glass).
    Decohere,
    /// Walls reflect atoms and leave the coherence intact.
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn norm2(&self) -> f64 {
        self.x * self.x + self.y * self.y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    pub time_step: f64,
    pub max_duration: f64,
    pub wall: WallPolicy,
    pub seed: u64,
}

impl TrajectoryParams {
    /// Default stepping for `config`, resolving detunings up to
    /// `max_detuning` (rad/s) without aliasing.
    pub fn for_config(config: &ExperimentConfig, max_detuning: f64, seed: u64) -> Self {
        let w = config.beam.waist_radius_cm;
        let mut dt = w * w / (STEPS_PER_WAIST * config.gas.diffusion_cm2_per_s);
        if max_detuning > 0.0 {
            dt = dt.min(MAX_PHASE_PER_STEP / max_detuning);
        }
        let gbc = config.optics.coherence_decay_rad_s;
        let max_duration = if gbc > 0.0 {
            (20.0 / gbc).min(MAX_TRAJECTORY_DURATION)
        } else {
            MAX_TRAJECTORY_DURATION
        };
        Self {
            time_step: dt,
            max_duration,
            wall: WallPolicy::Decohere,
            seed,
        }
    }

    pub fn validate(&self, config: &ExperimentConfig) -> Result<()> {
        let w = config.beam.waist_radius_cm;
        let limit = w * w / (STEPS_PER_WAIST * config.gas.diffusion_cm2_per_s);
        if !(self.time_step > 0.0 && self.time_step.is_finite()) {
            return Err(Error::config("time_step", "must be finite and > 0"));
        }
        if self.time_step > limit * (1.0 + 1e-12) {
            return Err(Error::config(
                "time_step",
                format!("{:.3e} s exceeds w²/(25·D) = {limit:.3e} s", self.time_step),
            ));
        }
        if !(self.max_duration >= self.time_step) {
            return Err(Error::config("max_duration", "must cover at least one step"));
        }
        Ok(())
    }

    pub fn max_steps(&self) -> usize {
        (self.max_duration / self.time_step).ceil() as usize
    }
}

/// One Brownian step with variance 2·D·Δt per axis. Returns the new position
/// and whether the step crossed the cell wall; crossing positions are
/// mirrored back inside.
pub fn step_brownian<R: Rng + ?Sized>(
    position: Point2,
    diffusion: f64,
    time_step: f64,
    cell_radius: f64,
    rng: &mut R,
) -> (Point2, bool) {
    let s = (2.0 * diffusion * time_step).sqrt();
    let gx: f64 = rng.sample(StandardNormal);
    let gy: f64 = rng.sample(StandardNormal);
    let mut p = Point2::new(position.x + s * gx, position.y + s * gy);
    let r = p.norm2().sqrt();
    if r > cell_radius {
        // Mirror radially; a step longer than the radius lands on the axis side.
        let r_new = (2.0 * cell_radius - r).abs().min(cell_radius);
        let f = r_new / r;
        p = Point2::new(p.x * f, p.y * f);
        return (p, true);
    }
    (p, false)
}

/// Sampled path with a fixed step; `resets[n]` marks a wall collision
/// immediately before step `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub time_step: f64,
    pub points: Vec<Point2>,
    pub resets: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Stationary atom at `at` for `steps` steps.
    pub fn pinned(at: Point2, steps: usize, time_step: f64) -> Self {
        Self {
            time_step,
            points: vec![at; steps],
            resets: vec![false; steps],
        }
    }

    /// Same path traversed in the opposite time direction. A path that ended
    /// on a wall starts with a reset.
    pub fn reversed(&self, ended_on_wall: bool) -> Self {
        let mut points = self.points.clone();
        points.reverse();
        let mut resets = vec![false; points.len()];
        if ended_on_wall && !resets.is_empty() {
            resets[0] = true;
        }
        Self {
            time_step: self.time_step,
            points,
            resets,
        }
    }
}

/// Simulates `steps` Brownian steps from `start`. The returned flag tells
/// whether the path was cut short by a decohering wall.
pub fn simulate_trajectory<R: Rng + ?Sized>(
    start: Point2,
    steps: usize,
    diffusion: f64,
    params: &TrajectoryParams,
    cell_radius: f64,
    rng: &mut R,
) -> (Trajectory, bool) {
    let mut points = Vec::with_capacity(steps);
    let mut resets = Vec::with_capacity(steps);
    let mut p = start;
    for _ in 0..steps {
        points.push(p);
        resets.push(false);
        let (next, hit) = step_brownian(p, diffusion, params.time_step, cell_radius, rng);
        p = next;
        if hit && params.wall == WallPolicy::Decohere {
            return (
                Trajectory {
                    time_step: params.time_step,
                    points,
                    resets,
                },
                true,
            );
        }
    }
    (
        Trajectory {
            time_step: params.time_step,
            points,
            resets,
        },
        false,
    )
}

/// Rate coefficients of the single-coherence model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceOde {
    /// R₀ = Ω_C²/γ at beam center, rad/s.
    pub pump_rate_center: f64,
    pub coherence_decay: f64,
    /// 2π·g·∂B_z/∂x, rad/(s·cm).
    pub gradient_coupling: f64,
    pub waist_radius: f64,
}

impl CoherenceOde {
    pub fn from_config(config: &ExperimentConfig) -> Self {
        Self {
            pump_rate_center: config.optics.pump_rate(),
            coherence_decay: config.optics.coherence_decay_rad_s,
            gradient_coupling: config.gradient_coupling(),
            waist_radius: config.beam.waist_radius_cm,
        }
    }

    #[inline]
    pub fn pump_rate(&self, p: Point2) -> f64 {
        let w2 = self.waist_radius * self.waist_radius;
        self.pump_rate_center * (-2.0 * p.norm2() / w2).exp()
    }

    #[inline]
    pub fn dephasing(&self, x: f64, detuning: f64) -> f64 {
        detuning + self.gradient_coupling * x
    }
}

/// (1 − e^{−z·h})/z, continuous through z = 0.
#[inline]
fn phi1(z: Complex64, h: f64) -> Complex64 {
    let zh = z * h;
    if zh.norm() < 1e-5 {
        h * (1.0 - zh / 2.0 + zh * zh / 6.0)
    } else {
        (1.0 - (-zh).exp()) / z
    }
}

/// Integrates the coherence along `trajectory` at detuning `detuning` with
/// the exact exponential update for coefficients frozen over each step.
/// Returns σ at every step boundary, starting from σ(0) = 0.
pub fn evolve_coherence(trajectory: &Trajectory, detuning: f64, ode: &CoherenceOde) -> Vec<Complex64> {
    evolve_coherence_from(Complex64::new(0.0, 0.0), trajectory, detuning, ode)
}

pub fn evolve_coherence_from(
    initial: Complex64,
    trajectory: &Trajectory,
    detuning: f64,
    ode: &CoherenceOde,
) -> Vec<Complex64> {
    let h = trajectory.time_step;
    let mut out = Vec::with_capacity(trajectory.len() + 1);
    let mut sigma = initial;
    out.push(sigma);
    for (p, &reset) in trajectory.points.iter().zip(&trajectory.resets) {
        if reset {
            sigma = Complex64::new(0.0, 0.0);
        }
        let r = ode.pump_rate(*p);
        let z = Complex64::new(r + ode.coherence_decay, ode.dephasing(p.x, detuning));
        sigma = sigma * (-z * h).exp() + r * phi1(z, h);
        out.push(sigma);
    }
    out
}

/// Lag kernel of a backward path (index 0 is the present).
pub fn path_kernel(history: &Trajectory, ode: &CoherenceOde) -> Vec<Complex64> {
    let h = history.time_step;
    let mut out = Vec::with_capacity(history.len());
    let mut attenuation = Complex64::new(0.0, 0.0);
    for p in &history.points {
        let r = ode.pump_rate(*p);
        let z = Complex64::new(r + ode.coherence_decay, ode.gradient_coupling * p.x);
        out.push(r * (-attenuation).exp() * phi1(z, h));
        attenuation += z * h;
        if attenuation.re > ATTENUATION_CUTOFF {
            break;
        }
    }
    out
}

#[inline]
fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0
    } else {
        x.sin() / x
    }
}

/// Σ c_n·exp(−iδ(n+½)Δt)·sinc(δΔt/2) for each detuning.
pub fn kernel_spectrum(kernel: &[Complex64], time_step: f64, detunings: &[f64]) -> Vec<Complex64> {
    const RESYNC: usize = 256;
    detunings
        .iter()
        .map(|&d| {
            let rot = Complex64::from_polar(1.0, -d * time_step);
            let mut acc = Complex64::new(0.0, 0.0);
            let mut phase = Complex64::new(0.0, 0.0);
            for (n, c) in kernel.iter().enumerate() {
                if n % RESYNC == 0 {
                    phase = Complex64::from_polar(1.0, -d * (n as f64 + 0.5) * time_step);
                }
                acc += c * phase;
                phase *= rot;
            }
            acc * sinc(0.5 * d * time_step)
        })
        .collect()
}

/// Present position of trajectory `index` and its backward history.
pub fn backward_path(config: &ExperimentConfig, params: &TrajectoryParams, index: u64) -> (Trajectory, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index);
    let sd = 0.5 * config.beam.waist_radius_cm;
    let r_cell = config.cell.radius_cm;
    let start = loop {
        let gx: f64 = rng.sample(StandardNormal);
        let gy: f64 = rng.sample(StandardNormal);
        let p = Point2::new(sd * gx, sd * gy);
        if p.norm2() < r_cell * r_cell {
            break p;
        }
    };
    simulate_trajectory(
        start,
        params.max_steps(),
        config.gas.diffusion_cm2_per_s,
        params,
        r_cell,
        &mut rng,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEnsembleResult {
    /// rad/s
    pub detunings: Vec<f64>,
    pub mean_coherence: Vec<Complex64>,
    /// Batch-means standard error of Re⟨σ⟩; absent with fewer than two batches.
    pub std_error: Option<Vec<f64>>,
    pub trajectories: usize,
}

#[derive(Debug, Clone)]
pub struct McSpectrum {
    pub spectrum: Spectrum,
    pub ensemble: TrajectoryEnsembleResult,
    pub params: TrajectoryParams,
    pub warnings: Vec<String>,
}

/// Expected width (Hz) of the narrow feature: decoherence plus the slowest
/// wall-diffusion mode.
pub fn expected_narrow_width_hz(config: &ExperimentConfig) -> f64 {
    let r = config.cell.radius_cm;
    let wall = config.gas.diffusion_cm2_per_s * BESSEL_J0_FIRST_ZERO.powi(2) / (r * r);
    (config.optics.coherence_decay_rad_s + wall) / PI
}

fn grid_warning(config: &ExperimentConfig, detunings: &[f64]) -> Option<String> {
    if detunings.len() < 2 {
        return Some("detuning grid has fewer than two points".into());
    }
    let i0 = detunings
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap();
    let mut spacing = f64::INFINITY;
    if i0 > 0 {
        spacing = spacing.min(detunings[i0] - detunings[i0 - 1]);
    }
    if i0 + 1 < detunings.len() {
        spacing = spacing.min(detunings[i0 + 1] - detunings[i0]);
    }
    let expected = expected_narrow_width_hz(config);
    let spacing_hz = rad_to_hz(spacing);
    (spacing_hz > expected / 5.0).then(|| {
        format!(
            "detuning grid undersamples the narrow peak: spacing {spacing_hz:.1} Hz near resonance, expected width {expected:.1} Hz"
        )
    })
}

/// Monte-Carlo transmission spectrum, T(δ) = Re⟨σ⟩, on `detunings` (rad/s).
pub fn synth_spectrum(
    config: &ExperimentConfig,
    detunings: &[f64],
    trajectories: usize,
    seed: u64,
) -> Result<McSpectrum> {
    let max_detuning = detunings.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let params = TrajectoryParams::for_config(config, max_detuning, seed);
    synth_spectrum_with(config, detunings, trajectories, &params)
}

pub fn synth_spectrum_with(
    config: &ExperimentConfig,
    detunings: &[f64],
    trajectories: usize,
    params: &TrajectoryParams,
) -> Result<McSpectrum> {
    config.validate()?;
    params.validate(config)?;
    if trajectories == 0 {
        return Err(Error::config("ntraj", "must be at least 1"));
    }
    let mut warnings = config.warnings();
    if trajectories < 1000 {
        warnings.push(format!("{trajectories} trajectories: error bars are not meaningful below 1000"));
    }
    warnings.extend(grid_warning(config, detunings));

    let ode = CoherenceOde::from_config(config);
    let n_batches = trajectories.div_ceil(BATCH_SIZE);
    let batch_sums: Vec<Vec<Complex64>> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let lo = b * BATCH_SIZE;
            let hi = (lo + BATCH_SIZE).min(trajectories);
            let mut kernel: Vec<Complex64> = Vec::new();
            for i in lo..hi {
                let (path, _) = backward_path(config, params, i as u64);
                let k = path_kernel(&path, &ode);
                if k.len() > kernel.len() {
                    kernel.resize(k.len(), Complex64::new(0.0, 0.0));
                }
                // The mirror path x → −x is equally likely and has the
                // conjugate kernel, so each pair contributes Re c_n.
                for (acc, c) in kernel.iter_mut().zip(&k) {
                    acc.re += c.re;
                }
            }
            kernel_spectrum(&kernel, params.time_step, detunings)
        })
        .collect();

    let n = trajectories as f64;
    let mut mean = vec![Complex64::new(0.0, 0.0); detunings.len()];
    for batch in &batch_sums {
        for (m, s) in mean.iter_mut().zip(batch) {
            *m += s;
        }
    }
    for m in &mut mean {
        *m /= n;
    }

    // Standard error of the mean from the spread of per-batch means.
    let std_error = (n_batches >= 2).then(|| {
        let nb = n_batches as f64;
        (0..detunings.len())
            .map(|j| {
                let ss: f64 = batch_sums
                    .iter()
                    .enumerate()
                    .map(|(b, batch)| {
                        let size = (trajectories - b * BATCH_SIZE).min(BATCH_SIZE) as f64;
                        (batch[j].re / size - mean[j].re).powi(2)
                    })
                    .sum();
                (ss / (nb * (nb - 1.0))).sqrt()
            })
            .collect()
    });

    let spectrum = Spectrum::new(
        detunings.to_vec(),
        mean.iter().map(|c| c.re).collect(),
        SpectrumSource::MonteCarlo,
    )?;
    Ok(McSpectrum {
        spectrum,
        ensemble: TrajectoryEnsembleResult {
            detunings: detunings.to_vec(),
            mean_coherence: mean,
            std_error,
            trajectories,
        },
        params: *params,
        warnings,
    })
}

#[derive(Debug, Clone)]
pub struct GradientScanPoint {
    pub gradient_gauss_per_cm: f64,
    pub result: McSpectrum,
    pub distortion: DistortionCheck,
}

/// One spectrum per transverse gradient (G/cm), all with the same seed.
pub fn gradient_scan(
    config: &ExperimentConfig,
    gradients: &[f64],
    detunings: &[f64],
    trajectories: usize,
    seed: u64,
) -> Result<Vec<GradientScanPoint>> {
    gradients
        .iter()
        .map(|&g| {
            let cfg = config.with_gradient(g);
            let distortion = distortion_check(g, cfg.cell.length_cm, cfg.magnetics.bias_gauss)?;
            let mut result = synth_spectrum(&cfg, detunings, trajectories, seed)?;
            if distortion.status != DistortionStatus::Pass {
                result.warnings.push(format!(
                    "transverse-field distortion ratio {:.3} at {:.1} mG/cm, B0 = {:.0} mG ({:?})",
                    distortion.ratio,
                    g * 1e3,
                    cfg.magnetics.bias_gauss * 1e3,
                    distortion.status
                ));
            }
            Ok(GradientScanPoint {
                gradient_gauss_per_cm: g,
                result,
                distortion,
            })
        })
        .collect()
}
