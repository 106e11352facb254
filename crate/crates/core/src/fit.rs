//! Bounded nonlinear least squares for EIT spectra.
//!
//! Every model is fitted as T(δ) = B + A·s(δ; w) with one shape parameter w:
//!
//! | model                 | s(δ; w)                         | w          |
//! |-----------------------|---------------------------------|------------|
//! | `lorentzian`          | w²/(w² + δ²)                    | Ω_C²/γ     |
//! | `ty`                  | 1 − x·atan(1/x), x = \|δ\|/w    | Ω_C²/γ     |
//! | `transit-exponential` | exp(−\|δ\|·w)                   | t_tr       |
//!
//! The three-level Lorentzian's γ_bc/Ω_C² term only rescales the contrast, so
//! it is absorbed into A. Detunings are angular (rad/s).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lineshapes::{ty_profile, ModelTag};
use crate::physics::{rad_to_hz, Spectrum};

pub const MAX_ITERATIONS: usize = 500;
pub const COST_REL_TOL: f64 = 1e-10;
/// Half-contrast root of the TY profile; its FWHM is 2·TY_HALF_ROOT·w.
pub const TY_HALF_ROOT: f64 = 0.428_977_908_964_179_3;
/// Excess heights below this fraction of the pedestal amplitude count as no peak.
pub const PEAK_DETECTION_FLOOR: f64 = 1e-6;
pub const MIN_POINTS_IN_PEAK: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    fn clamp(&self, p: &mut [f64]) {
        for (v, (lo, hi)) in p.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: ModelTag,
    pub params: Vec<FitParam>,
    pub rms: f64,
    /// rms/|A|.
    pub normalized_rms: f64,
    /// data − model at each detuning.
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub message: Option<String>,
}

impl FitResult {
    pub fn amplitude(&self) -> f64 {
        self.params[0].value
    }

    pub fn baseline(&self) -> f64 {
        self.params[1].value
    }

    pub fn shape_param(&self) -> f64 {
        self.params[2].value
    }

    pub fn values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.value).collect()
    }

    pub fn eval(&self, detuning: f64) -> f64 {
        let mut g = [0.0; 3];
        eval_model(self.model, &self.values(), detuning, &mut g)
    }

    /// FWHM of the fitted shape, Hz.
    pub fn fwhm_hz(&self) -> f64 {
        let w = self.shape_param();
        let rad = match self.model {
            ModelTag::Lorentzian => 2.0 * w,
            ModelTag::Ty => 2.0 * TY_HALF_ROOT * w,
            ModelTag::TransitExponential => 2.0 * std::f64::consts::LN_2 / w,
        };
        rad_to_hz(rad)
    }
}

pub fn param_names(model: ModelTag) -> [&'static str; 3] {
    match model {
        ModelTag::Lorentzian | ModelTag::Ty => ["amplitude", "baseline", "power_width_rad_s"],
        ModelTag::TransitExponential => ["amplitude", "baseline", "transit_time_s"],
    }
}

/// A ≥ 0, B free, shape parameter strictly positive.
pub fn default_bounds(model: ModelTag) -> Bounds {
    let _ = model;
    Bounds {
        lower: vec![0.0, f64::NEG_INFINITY, f64::MIN_POSITIVE],
        upper: vec![f64::INFINITY, f64::INFINITY, f64::INFINITY],
    }
}

/// Value of a model plus its gradient with respect to (A, B, w).
fn eval_model(model: ModelTag, p: &[f64], d: f64, grad: &mut [f64]) -> f64 {
    let (a, b, w) = (p[0], p[1], p[2]);
    let (s, ds) = shape_and_derivative(model, d, w);
    grad[0] = s;
    grad[1] = 1.0;
    grad[2] = a * ds;
    b + a * s
}

fn shape_and_derivative(model: ModelTag, d: f64, w: f64) -> (f64, f64) {
    let u = d.abs();
    match model {
        ModelTag::Lorentzian => {
            let den = w * w + d * d;
            (w * w / den, 2.0 * w * d * d / (den * den))
        }
        ModelTag::Ty => {
            let x = u / w;
            let s = ty_profile(x);
            let ds = if x == 0.0 {
                0.0
            } else if x > 1e4 {
                2.0 / (3.0 * x * x * w)
            } else {
                ((1.0 / x).atan() - x / (1.0 + x * x)) * x / w
            };
            (s, ds)
        }
        ModelTag::TransitExponential => {
            let e = (-u * w).exp();
            (e, -u * e)
        }
    }
}

struct LmOutcome {
    params: Vec<f64>,
    cost: f64,
    residuals: Vec<f64>,
    jacobian: DMatrix<f64>,
    converged: bool,
    iterations: usize,
    message: Option<String>,
}

fn residuals_and_jacobian(
    x: &[f64],
    y: &[f64],
    p: &[f64],
    model: &dyn Fn(&[f64], f64, &mut [f64]) -> f64,
) -> (Vec<f64>, DMatrix<f64>) {
    let n = x.len();
    let m = p.len();
    let mut r = Vec::with_capacity(n);
    let mut jac = DMatrix::zeros(n, m);
    let mut g = vec![0.0; m];
    for i in 0..n {
        let f = model(p, x[i], &mut g);
        r.push(y[i] - f);
        for j in 0..m {
            jac[(i, j)] = g[j];
        }
    }
    (r, jac)
}

fn cost_of(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Levenberg–Marquardt with Marquardt's diagonal scaling; trial points are
/// clamped into the bounds.
fn levenberg_marquardt(
    x: &[f64],
    y: &[f64],
    p0: &[f64],
    bounds: &Bounds,
    model: &dyn Fn(&[f64], f64, &mut [f64]) -> f64,
) -> LmOutcome {
    let m = p0.len();
    let scale2: f64 = y.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    let mut p = p0.to_vec();
    let (mut r, mut jac) = residuals_and_jacobian(x, y, &p, model);
    let mut cost = cost_of(&r);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut message = None;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        if cost <= 1e-30 * scale2 {
            converged = true;
            break;
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let jtr = &jt * DVector::from_column_slice(&r);
        if (0..m).any(|j| jtj[(j, j)] == 0.0 || !jtj[(j, j)].is_finite()) {
            message = Some("degenerate Jacobian: a parameter has no effect on the model".into());
            break;
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for j in 0..m {
                a[(j, j)] += lambda * jtj[(j, j)];
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            bounds.clamp(&mut trial);
            let (tr, tj) = residuals_and_jacobian(x, y, &trial, model);
            let tc = cost_of(&tr);
            if tc.is_finite() && tc < cost {
                let rel = (cost - tc) / cost;
                let moved = trial
                    .iter()
                    .zip(&p)
                    .map(|(a, b)| (a - b).abs() / b.abs().max(1e-300))
                    .fold(0.0, f64::max);
                p = trial;
                r = tr;
                jac = tj;
                cost = tc;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel < COST_REL_TOL || moved < 1e-14 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged {
            break;
        }
        if !accepted {
            // No descent direction reduces the cost: a (possibly bounded) minimum.
            converged = true;
            break;
        }
    }
    if !converged && message.is_none() {
        message = Some(format!("no convergence after {MAX_ITERATIONS} iterations"));
    }
    LmOutcome {
        params: p,
        cost,
        residuals: r,
        jacobian: jac,
        converged,
        iterations,
        message,
    }
}

fn std_errors(out: &LmOutcome, n: usize) -> Vec<Option<f64>> {
    let m = out.params.len();
    if n <= m {
        return vec![None; m];
    }
    let s2 = out.cost / (n - m) as f64;
    let jtj = out.jacobian.transpose() * &out.jacobian;
    match jtj.try_inverse() {
        Some(inv) => (0..m)
            .map(|j| {
                let v = inv[(j, j)] * s2;
                (v.is_finite() && v >= 0.0).then(|| v.sqrt())
            })
            .collect(),
        None => vec![None; m],
    }
}

/// Index of a parameter whose Jacobian column vanishes relative to the
/// others, e.g. the width when the fitted amplitude is zero.
fn unidentified_param(jac: &DMatrix<f64>) -> Option<usize> {
    let norms: Vec<f64> = (0..jac.ncols()).map(|j| jac.column(j).norm()).collect();
    let largest = norms.iter().copied().fold(0.0, f64::max);
    norms.iter().position(|&n| n <= 1e-10 * largest)
}

fn check_data(spectrum: &Spectrum, free: usize) -> Result<()> {
    if spectrum.len() < 3 * free {
        return Err(Error::config(
            "spectrum",
            format!("{} points is fewer than 3× the {free} free parameters", spectrum.len()),
        ));
    }
    Ok(())
}

/// Fits `model` to the spectrum. Without an initial guess the automatic
/// heuristics of [`initial_guess`] are used; without bounds,
/// [`default_bounds`].
pub fn fit(
    spectrum: &Spectrum,
    model: ModelTag,
    initial: Option<&[f64]>,
    bounds: Option<&Bounds>,
) -> Result<FitResult> {
    check_data(spectrum, 3)?;
    let bounds = bounds.cloned().unwrap_or_else(|| default_bounds(model));
    if bounds.lower.len() != 3 || bounds.upper.len() != 3 {
        return Err(Error::config("bounds", "need three lower and three upper values"));
    }
    let p0 = match initial {
        Some(p) => p.to_vec(),
        None => {
            let mut p = initial_guess(spectrum, model);
            bounds.clamp(&mut p);
            p
        }
    };
    if p0.len() != 3 || p0.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("initial guess", "need three finite values"));
    }
    if !bounds.contains(&p0) {
        return Err(Error::config("initial guess", format!("{p0:?} lies outside the bounds")));
    }
    let f = |p: &[f64], d: f64, g: &mut [f64]| eval_model(model, p, d, g);
    let mut out = levenberg_marquardt(spectrum.detunings(), spectrum.transmissions(), &p0, &bounds, &f);
    if out.converged {
        if let Some(j) = unidentified_param(&out.jacobian) {
            out.converged = false;
            out.message = Some(format!(
                "`{}` is undetermined: the fitted model does not depend on it",
                param_names(model)[j]
            ));
        }
    }
    let se = std_errors(&out, spectrum.len());
    let names = param_names(model);
    let rms = (out.cost / spectrum.len() as f64).sqrt();
    let amp = out.params[0].abs();
    Ok(FitResult {
        model,
        params: (0..3)
            .map(|j| FitParam {
                name: names[j].to_string(),
                value: out.params[j],
                std_error: se[j],
            })
            .collect(),
        rms,
        normalized_rms: if amp > 0.0 { rms / amp } else { f64::INFINITY },
        residuals: out.residuals,
        converged: out.converged,
        iterations: out.iterations,
        message: out.message,
    })
}

/// Baseline from the outer tenth of the grid, amplitude from the contrast,
/// width from the outermost half-contrast point.
pub fn initial_guess(spectrum: &Spectrum, model: ModelTag) -> Vec<f64> {
    let d = spectrum.detunings();
    let t = spectrum.transmissions();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&i, &j| d[j].abs().total_cmp(&d[i].abs()));
    let wings = (d.len() / 10).max(1);
    let baseline = order[..wings].iter().map(|&i| t[i]).sum::<f64>() / wings as f64;
    let peak = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let amplitude = (peak - baseline).max(f64::EPSILON * peak.abs().max(1.0));
    let half = baseline + 0.5 * amplitude;
    let max_abs = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut hw = d
        .iter()
        .zip(t)
        .filter(|(_, &v)| v >= half)
        .map(|(x, _)| x.abs())
        .fold(0.0f64, f64::max);
    if hw <= 0.0 {
        // Fall back to the smallest nonzero spacing.
        hw = d
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
            .min(max_abs)
            .max(f64::MIN_POSITIVE);
    }
    let shape = match model {
        ModelTag::Lorentzian => hw,
        ModelTag::Ty => hw / TY_HALF_ROOT,
        ModelTag::TransitExponential => std::f64::consts::LN_2 / hw,
    };
    vec![amplitude, baseline, shape]
}

/// Fits all three models with automatic guesses, best (lowest RMS) first.
pub fn compare_models(spectrum: &Spectrum) -> Result<Vec<FitResult>> {
    let mut out = ModelTag::ALL
        .iter()
        .map(|&m| fit(spectrum, m, None, None))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.rms.total_cmp(&b.rms));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CentralPeak {
    NoneDetected {
        pedestal: FitResult,
    },
    Detected {
        fwhm_hz: f64,
        /// Excess height above the pedestal at its maximum.
        height: f64,
        points_in_peak: usize,
        pedestal: FitResult,
        warning: Option<String>,
    },
}

impl CentralPeak {
    pub fn fwhm_hz(&self) -> Option<f64> {
        match self {
            CentralPeak::Detected { fwhm_hz, .. } => Some(*fwhm_hz),
            CentralPeak::NoneDetected { .. } => None,
        }
    }

    pub fn pedestal(&self) -> &FitResult {
        match self {
            CentralPeak::Detected { pedestal, .. } | CentralPeak::NoneDetected { pedestal } => pedestal,
        }
    }
}

/// Width of the narrow excess on top of the broad TY pedestal.
///
/// The pedestal comes from a joint fit of B + A·TY(a) + C·g²/(g² + δ²) with
/// C ≥ 0 and g ≤ a, so the narrow feature does not drag the pedestal. The
/// excess data − (B + A·TY) is then measured between its outermost
/// half-maximum crossings within |δ| ≤ 0.43·a, interpolating linearly.
pub fn central_peak_width(spectrum: &Spectrum) -> Result<CentralPeak> {
    check_data(spectrum, 5)?;
    let d = spectrum.detunings();
    let t = spectrum.transmissions();
    let ty = fit(spectrum, ModelTag::Ty, None, None)?;
    let (a0, b0, w0) = (ty.amplitude(), ty.baseline(), ty.shape_param());

    let near = d.iter().zip(&ty.residuals).filter(|(x, _)| x.abs() <= TY_HALF_ROOT * w0);
    let c0 = near.clone().map(|(_, r)| *r).fold(0.0f64, f64::max).max(1e-3 * a0.abs());
    let spacing = d.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let g0 = (w0 / 20.0).max(2.0 * spacing).min(w0);
    let joint = |p: &[f64], x: f64, g: &mut [f64]| {
        let (s, ds) = shape_and_derivative(ModelTag::Ty, x, p[2]);
        let (l, dl) = shape_and_derivative(ModelTag::Lorentzian, x, p[4]);
        g[0] = s;
        g[1] = 1.0;
        g[2] = p[0] * ds;
        g[3] = l;
        g[4] = p[3] * dl;
        p[1] + p[0] * s + p[3] * l
    };
    let bounds = Bounds {
        lower: vec![0.0, f64::NEG_INFINITY, f64::MIN_POSITIVE, 0.0, f64::MIN_POSITIVE],
        upper: vec![f64::INFINITY, f64::INFINITY, f64::INFINITY, f64::INFINITY, w0.max(g0) * 4.0],
    };
    let p0 = [a0, b0, w0, c0, g0];
    let out = levenberg_marquardt(d, t, &p0, &bounds, &joint);
    let (mut a, mut b, mut w) = (out.params[0], out.params[1], out.params[2]);
    if out.params[4] > w || !out.converged || out.cost > ty.rms.powi(2) * d.len() as f64 {
        // A narrow term wider than the pedestal is not a central peak.
        (a, b, w) = (a0, b0, w0);
    }

    let pedestal_at = |x: f64| b + a * ty_profile(x.abs() / w);
    let excess: Vec<f64> = d.iter().zip(t).map(|(x, y)| y - pedestal_at(*x)).collect();
    let residuals: Vec<f64> = excess.clone();
    let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / d.len() as f64).sqrt();
    let names = param_names(ModelTag::Ty);
    let pedestal = FitResult {
        model: ModelTag::Ty,
        params: [a, b, w]
            .iter()
            .zip(names)
            .map(|(v, n)| FitParam {
                name: n.into(),
                value: *v,
                std_error: None,
            })
            .collect(),
        rms,
        normalized_rms: if a > 0.0 { rms / a } else { f64::INFINITY },
        residuals,
        converged: ty.converged,
        iterations: ty.iterations + out.iterations,
        message: None,
    };

    let limit = TY_HALF_ROOT * w;
    let window: Vec<usize> = (0..d.len()).filter(|&i| d[i].abs() <= limit).collect();
    let Some(&imax) = window.iter().max_by(|&&i, &&j| excess[i].total_cmp(&excess[j])) else {
        return Ok(CentralPeak::NoneDetected { pedestal });
    };
    let height = excess[imax];
    if !(height > PEAK_DETECTION_FLOOR * a.abs().max(f64::MIN_POSITIVE)) {
        return Ok(CentralPeak::NoneDetected { pedestal });
    }
    let half = 0.5 * height;
    let lo_idx = *window.first().unwrap();
    let hi_idx = *window.last().unwrap();

    let crossing = |from: usize, step: isize, edge: usize| -> Option<f64> {
        // Outermost index in this direction still at or above half maximum.
        let mut last = from;
        let mut i = from as isize;
        while i != edge as isize {
            i += step;
            if excess[i as usize] >= half {
                last = i as usize;
            }
        }
        if last == edge {
            return None;
        }
        let next = (last as isize + step) as usize;
        let (x0, y0, x1, y1) = (d[last], excess[last], d[next], excess[next]);
        Some(x0 + (y0 - half) * (x1 - x0) / (y0 - y1))
    };
    let right_start = window.iter().copied().filter(|&i| d[i] >= 0.0).max_by(|&i, &j| excess[i].total_cmp(&excess[j]));
    let left_start = window.iter().copied().filter(|&i| d[i] <= 0.0).max_by(|&i, &j| excess[i].total_cmp(&excess[j]));
    let right = right_start.and_then(|s| crossing(s, 1, hi_idx));
    let left = left_start.and_then(|s| crossing(s, -1, lo_idx));
    let (fwhm_rad, points) = match (left, right) {
        (Some(l), Some(r)) => (r - l, d.iter().filter(|x| **x >= l && **x <= r).count()),
        (None, Some(r)) if d[lo_idx] >= 0.0 => (2.0 * r, 2 * d.iter().filter(|x| **x >= 0.0 && **x <= r).count()),
        (Some(l), None) if d[hi_idx] <= 0.0 => (-2.0 * l, 2 * d.iter().filter(|x| **x <= 0.0 && **x >= l).count()),
        _ => {
            return Err(Error::Numerical(
                "central excess does not fall to half maximum inside the pedestal".into(),
            ))
        }
    };
    let warning = (points < MIN_POINTS_IN_PEAK)
        .then(|| format!("only {points} grid points inside the central peak; width is poorly resolved"));
    Ok(CentralPeak::Detected {
        fwhm_hz: rad_to_hz(fwhm_rad),
        height,
        points_in_peak: points,
        pedestal,
        warning,
    })
}
