//! Biot–Savart model of a transverse-gradient (Golay saddle) coil set.
//!
//! The cylinder axis is z, the bias field B0 points along z and the coil
//! produces ∂B_z/∂x at the center. Lengths are in cm, currents in A and
//! fields in G.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// μ₀/4π in G·cm/A.
pub const MU0_OVER_4PI_GAUSS_CM_PER_A: f64 = 0.1;
/// Largest angular size of one arc element, degrees.
pub const MAX_ARC_STEP_DEG: f64 = 1.0;
/// Step of the central difference used for the center gradient, cm.
pub const GRADIENT_STEP_CM: f64 = 0.05;
/// Gradient the coil must reach with a plausible number of turns, G/(cm·A).
pub const TARGET_GRADIENT_PER_AMP: f64 = 0.040;
pub const MAX_PLAUSIBLE_TURNS: u32 = 100;
pub const DISTORTION_PASS_RATIO: f64 = 0.1;
pub const DISTORTION_WARN_RATIO: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoilGeometry {
    pub inner_z_cm: f64,
    pub outer_z_cm: f64,
    pub radius_cm: f64,
    #[serde(default = "default_arc_angle")]
    pub arc_angle_deg: f64,
    #[serde(default = "default_turns")]
    pub turns: u32,
    #[serde(default = "default_current")]
    pub current_a: f64,
}

fn default_arc_angle() -> f64 {
    120.0
}

fn default_turns() -> u32 {
    1
}

fn default_current() -> f64 {
    1.0
}

impl Default for CoilGeometry {
    fn default() -> Self {
        Self {
            inner_z_cm: 2.4,
            outer_z_cm: 16.2,
            radius_cm: 6.4,
            arc_angle_deg: default_arc_angle(),
            turns: default_turns(),
            current_a: default_current(),
        }
    }
}

impl CoilGeometry {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.inner_z_cm, self.outer_z_cm, self.radius_cm, self.arc_angle_deg, self.current_a]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("coil", "all dimensions must be finite"));
        }
        if !(self.inner_z_cm > 0.0) {
            return Err(Error::config("inner_z_cm", "must be > 0"));
        }
        if !(self.outer_z_cm > self.inner_z_cm) {
            return Err(Error::config("outer_z_cm", "must exceed inner_z_cm"));
        }
        if !(self.radius_cm > 0.0) {
            return Err(Error::config("radius_cm", "must be > 0"));
        }
        if !(self.arc_angle_deg > 0.0 && self.arc_angle_deg < 180.0) {
            return Err(Error::config("arc_angle_deg", "must lie in (0, 180)"));
        }
        if self.turns == 0 {
            return Err(Error::config("turns", "must be at least 1"));
        }
        Ok(())
    }

    /// Same coil with every length multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            inner_z_cm: self.inner_z_cm * factor,
            outer_z_cm: self.outer_z_cm * factor,
            radius_cm: self.radius_cm * factor,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SegmentKind {
    /// Piece of a circle of the given radius centered on the z axis.
    Arc { radius: f64 },
    Straight,
}

/// Directed piece of wire; current flows from `start` to `end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireSegment {
    pub start: Vec3,
    pub end: Vec3,
    pub kind: SegmentKind,
}

impl WireSegment {
    /// Length of the conductor, along the arc for arc pieces.
    pub fn length(&self) -> f64 {
        match self.kind {
            SegmentKind::Straight => (self.end - self.start).norm(),
            SegmentKind::Arc { radius } => radius * arc_span(self),
        }
    }

    /// Field per ampere at `p`.
    fn field_per_amp(&self, p: &Vec3) -> Vec3 {
        match self.kind {
            SegmentKind::Straight => {
                let l = self.end - self.start;
                let len = l.norm();
                if len == 0.0 {
                    return Vec3::zeros();
                }
                let u = l / len;
                let r1 = p - self.start;
                let r2 = p - self.end;
                let perp = r1 - u * r1.dot(&u);
                let d2 = perp.norm_squared();
                if d2 == 0.0 {
                    return Vec3::zeros();
                }
                // (cos θ₁ − cos θ₂)/d along u × d̂.
                let c = r1.dot(&u) / r1.norm() - r2.dot(&u) / r2.norm();
                u.cross(&perp) * (c / d2)
            }
            SegmentKind::Arc { radius } => {
                // Two-point Gauss rule along the arc, dl = a·dφ on the tangent.
                let phi0 = self.start.y.atan2(self.start.x);
                let dphi = signed_arc_span(self);
                let g = 0.5 / 3f64.sqrt();
                let mut b = Vec3::zeros();
                for t in [0.5 - g, 0.5 + g] {
                    let phi = phi0 + t * dphi;
                    let q = Vec3::new(radius * phi.cos(), radius * phi.sin(), self.start.z);
                    let dl = Vec3::new(-phi.sin(), phi.cos(), 0.0) * (0.5 * radius * dphi);
                    let r = p - q;
                    let r2 = r.norm_squared();
                    b += dl.cross(&r) / (r2 * r2.sqrt());
                }
                b
            }
        }
    }

    fn distance_to(&self, p: &Vec3) -> f64 {
        let d = self.end - self.start;
        let len2 = d.norm_squared();
        let t = if len2 > 0.0 {
            ((p - self.start).dot(&d) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (p - (self.start + d * t)).norm()
    }
}

fn signed_arc_span(s: &WireSegment) -> f64 {
    let a0 = s.start.y.atan2(s.start.x);
    let a1 = s.end.y.atan2(s.end.x);
    let mut d = a1 - a0;
    while d > PI {
        d -= 2.0 * PI;
    }
    while d < -PI {
        d += 2.0 * PI;
    }
    d
}

fn arc_span(s: &WireSegment) -> f64 {
    signed_arc_span(s).abs()
}

/// Closed wire loops sharing a common series current.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilSet {
    pub chains: Vec<Vec<WireSegment>>,
    pub turns: u32,
}

impl CoilSet {
    pub fn segments(&self) -> impl Iterator<Item = &WireSegment> {
        self.chains.iter().flatten()
    }

    /// Largest gap between the end of one segment and the start of the next,
    /// including the wrap-around of each chain.
    pub fn max_closure_gap(&self) -> f64 {
        let mut gap = 0.0f64;
        for chain in &self.chains {
            for (i, seg) in chain.iter().enumerate() {
                let next = &chain[(i + 1) % chain.len()];
                gap = gap.max((seg.end - next.start).norm());
            }
        }
        gap
    }

    /// Mirror image under x → −x; each segment keeps its current direction.
    pub fn mirrored_x(&self) -> Self {
        let flip = |v: Vec3| Vec3::new(-v.x, v.y, v.z);
        Self {
            chains: self
                .chains
                .iter()
                .map(|c| {
                    c.iter()
                        .map(|s| WireSegment {
                            start: flip(s.start),
                            end: flip(s.end),
                            kind: s.kind,
                        })
                        .collect()
                })
                .collect(),
            turns: self.turns,
        }
    }

    /// Same wires with the current reversed.
    pub fn reversed(&self) -> Self {
        Self {
            chains: self
                .chains
                .iter()
                .map(|c| {
                    c.iter()
                        .rev()
                        .map(|s| WireSegment {
                            start: s.end,
                            end: s.start,
                            kind: s.kind,
                        })
                        .collect()
                })
                .collect(),
            turns: self.turns,
        }
    }

    fn max_element_length(&self) -> f64 {
        self.segments().map(|s| s.length()).fold(0.0, f64::max)
    }

    pub fn min_wire_distance(&self, p: &Vec3) -> f64 {
        self.segments().map(|s| s.distance_to(p)).fold(f64::INFINITY, f64::min)
    }
}

fn circle_point(radius: f64, phi: f64, z: f64) -> Vec3 {
    Vec3::new(radius * phi.cos(), radius * phi.sin(), z)
}

fn push_arc(out: &mut Vec<WireSegment>, radius: f64, z: f64, phi_from: f64, phi_to: f64) {
    let span = (phi_to - phi_from).abs().to_degrees();
    let n = (span / MAX_ARC_STEP_DEG).ceil().max(1.0) as usize;
    let mut prev = circle_point(radius, phi_from, z);
    for i in 1..=n {
        let phi = phi_from + (phi_to - phi_from) * i as f64 / n as f64;
        let next = circle_point(radius, phi, z);
        out.push(WireSegment {
            start: prev,
            end: next,
            kind: SegmentKind::Arc { radius },
        });
        prev = next;
    }
}

fn push_line(out: &mut Vec<WireSegment>, from: Vec3, to: Vec3, pieces: usize) {
    let mut prev = from;
    for i in 1..=pieces {
        let next = if i == pieces {
            to
        } else {
            from + (to - from) * (i as f64 / pieces as f64)
        };
        out.push(WireSegment {
            start: prev,
            end: next,
            kind: SegmentKind::Straight,
        });
        prev = next;
    }
}

/// Four saddle units on a cylinder of radius a: each spans `arc_angle_deg`
/// around ±x, joins an inner arc at |z| = z0 and an outer arc at |z| = z1
/// with two axial wires. Units on the −x side carry the opposite current,
/// so B vanishes at the center and ∂B_z/∂x is the leading term.
pub fn build_golay_set(geometry: &CoilGeometry) -> Result<CoilSet> {
    geometry.validate()?;
    let a = geometry.radius_cm;
    let half = 0.5 * geometry.arc_angle_deg.to_radians();
    let element = a * MAX_ARC_STEP_DEG.to_radians();
    let axial_pieces = ((geometry.outer_z_cm - geometry.inner_z_cm) / element).ceil() as usize;
    let mut chains = Vec::with_capacity(4);
    for side in [1.0, -1.0] {
        let center = if side > 0.0 { 0.0 } else { PI };
        // Inner arc runs toward +φ on the +x side and toward −φ on the −x side.
        let (p0, p1) = if side > 0.0 {
            (center - half, center + half)
        } else {
            (center + half, center - half)
        };
        for zsign in [1.0, -1.0] {
            let zi = zsign * geometry.inner_z_cm;
            let zo = zsign * geometry.outer_z_cm;
            let mut chain = Vec::new();
            push_arc(&mut chain, a, zi, p0, p1);
            push_line(&mut chain, circle_point(a, p1, zi), circle_point(a, p1, zo), axial_pieces);
            push_arc(&mut chain, a, zo, p1, p0);
            push_line(&mut chain, circle_point(a, p0, zo), circle_point(a, p0, zi), axial_pieces);
            chains.push(chain);
        }
    }
    Ok(CoilSet {
        chains,
        turns: geometry.turns,
    })
}

/// Single circular loop of radius `radius` at height `z`, current toward +φ.
pub fn circular_loop(radius: f64, z: f64) -> CoilSet {
    let mut chain = Vec::new();
    push_arc(&mut chain, radius, z, 0.0, PI);
    push_arc(&mut chain, radius, z, PI, 2.0 * PI);
    CoilSet {
        chains: vec![chain],
        turns: 1,
    }
}

/// Field in G at `point` for `current` amperes through every turn.
pub fn biot_savart(coil: &CoilSet, point: &Vec3, current: f64) -> Vec3 {
    let mut b = Vec3::zeros();
    for seg in coil.segments() {
        b += seg.field_per_amp(point);
    }
    b * (MU0_OVER_4PI_GAUSS_CM_PER_A * current * coil.turns as f64)
}

/// As [`biot_savart`], with a warning when the point is within ten element
/// lengths of a wire.
pub fn biot_savart_checked(coil: &CoilSet, point: &Vec3, current: f64) -> (Vec3, Option<String>) {
    let limit = 10.0 * coil.max_element_length();
    let d = coil.min_wire_distance(point);
    let warning = (d < limit).then(|| {
        format!(
            "point ({:.3}, {:.3}, {:.3}) is {d:.3} cm from a wire; discretization error may dominate",
            point.x, point.y, point.z
        )
    });
    (biot_savart(coil, point, current), warning)
}

/// ∂B_z/∂x at the origin per ampere of drive current (all turns included),
/// G/(cm·A).
pub fn gradient_at_center(coil: &CoilSet) -> f64 {
    let h = GRADIENT_STEP_CM;
    let bp = biot_savart(coil, &Vec3::new(h, 0.0, 0.0), 1.0);
    let bm = biot_savart(coil, &Vec3::new(-h, 0.0, 0.0), 1.0);
    (bp.z - bm.z) / (2.0 * h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    /// G/(cm·A) for one turn.
    pub per_ampere_turn: f64,
    /// G/(cm·A) with the configured turns.
    pub per_ampere: f64,
    pub turns: u32,
    /// Smallest integer number of turns reaching the target gradient.
    pub turns_for_target: u32,
    pub target_per_ampere: f64,
    pub target_reachable: bool,
}

pub fn gradient_report(coil: &CoilSet) -> GradientReport {
    let per_ampere = gradient_at_center(coil);
    let per_turn = per_ampere / coil.turns as f64;
    let needed = (TARGET_GRADIENT_PER_AMP / per_turn.abs()).ceil();
    let turns_for_target = if needed.is_finite() && needed <= u32::MAX as f64 {
        needed.max(1.0) as u32
    } else {
        u32::MAX
    };
    GradientReport {
        per_ampere_turn: per_turn,
        per_ampere,
        turns: coil.turns,
        turns_for_target,
        target_per_ampere: TARGET_GRADIENT_PER_AMP,
        target_reachable: turns_for_target <= MAX_PLAUSIBLE_TURNS,
    }
}

/// Regular 3-D grid of field samples. Points within two grid cells of a wire
/// are left out.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    pub origin: Vec3,
    pub spacing: [f64; 3],
    pub shape: [usize; 3],
    pub fields: Vec<Option<Vec3>>,
}

impl FieldMap {
    pub fn point(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin
            + Vec3::new(
                i as f64 * self.spacing[0],
                j as f64 * self.spacing[1],
                k as f64 * self.spacing[2],
            )
    }

    fn flat(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Option<Vec3> {
        self.fields[self.flat(i, j, k)]
    }

    /// Sampled points in x-major order.
    pub fn samples(&self) -> impl Iterator<Item = (Vec3, Vec3)> + '_ {
        let [nx, ny, nz] = self.shape;
        (0..nx)
            .flat_map(move |i| (0..ny).flat_map(move |j| (0..nz).map(move |k| (i, j, k))))
            .filter_map(|(i, j, k)| self.get(i, j, k).map(|b| (self.point(i, j, k), b)))
    }
}

/// Evaluates the field on the box `[lo, hi]` with the given spacing per axis.
pub fn field_map(coil: &CoilSet, current: f64, lo: Vec3, hi: Vec3, spacing: [f64; 3]) -> Result<FieldMap> {
    let mut shape = [0usize; 3];
    for ax in 0..3 {
        if !(spacing[ax] > 0.0 && spacing[ax].is_finite()) {
            return Err(Error::config("spacing", "must be finite and > 0"));
        }
        if !(hi[ax] >= lo[ax]) {
            return Err(Error::config("bounds", "upper corner must not be below lower corner"));
        }
        shape[ax] = ((hi[ax] - lo[ax]) / spacing[ax] + 1e-9).floor() as usize + 1;
    }
    let mut map = FieldMap {
        origin: lo,
        spacing,
        shape,
        fields: Vec::new(),
    };
    let exclusion = 2.0 * spacing.iter().cloned().fold(0.0, f64::max);
    let n = shape[0] * shape[1] * shape[2];
    map.fields = (0..n)
        .into_par_iter()
        .map(|idx| {
            let k = idx % shape[2];
            let j = (idx / shape[2]) % shape[1];
            let i = idx / (shape[1] * shape[2]);
            let p = map.point(i, j, k);
            (coil.min_wire_distance(&p) > exclusion).then(|| biot_savart(coil, &p, current))
        })
        .collect();
    Ok(map)
}

/// Central map used for the curl and linearity report: |x| ≤ 1.2 cm on the
/// x axis with a thin slab in y and z, spacing 0.1 cm.
pub fn central_field_map(coil: &CoilSet, current: f64) -> Result<FieldMap> {
    field_map(
        coil,
        current,
        Vec3::new(-1.2, -0.2, -0.2),
        Vec3::new(1.2, 0.2, 0.2),
        [0.1, 0.1, 0.1],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurlLinearityReport {
    /// max |∂B_z/∂x − ∂B_x/∂z| relative to the center gradient.
    pub curl_residual: f64,
    /// Largest component of ∇×B relative to the center gradient.
    pub max_curl: f64,
    /// max |∇·B| relative to the center gradient.
    pub divergence_residual: f64,
    /// max |g(x)/g(0) − 1| for ∂B_z/∂x on the x axis with |x| ≤ 1 cm.
    pub linearity_deviation: f64,
    pub center_gradient: f64,
}

/// Finite-difference derivatives of a field map. The map must contain the
/// x axis and have spacing ≤ 0.1 cm.
pub fn curl_and_linearity_report(map: &FieldMap) -> Result<CurlLinearityReport> {
    let [nx, ny, nz] = map.shape;
    if map.spacing.iter().any(|&h| h > 0.1 + 1e-12) {
        return Err(Error::config("spacing", "must be ≤ 0.1 cm"));
    }
    if nx < 3 || ny < 3 || nz < 3 {
        return Err(Error::config("map", "needs at least 3 points per axis"));
    }
    let [hx, hy, hz] = map.spacing;
    let axis_index = |origin: f64, h: f64, n: usize| -> Option<usize> {
        let f = -origin / h;
        let i = f.round();
        ((f - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < n).then_some(i as usize)
    };
    let (j0, k0) = match (axis_index(map.origin.y, hy, ny), axis_index(map.origin.z, hz, nz)) {
        (Some(j), Some(k)) => (j, k),
        _ => return Err(Error::config("map", "must contain the x axis")),
    };

    // Jacobian J[a][b] = ∂B_a/∂x_b by central differences.
    let jacobian = |i: usize, j: usize, k: usize| -> Option<[[f64; 3]; 3]> {
        let dx = (map.get(i + 1, j, k)? - map.get(i - 1, j, k)?) / (2.0 * hx);
        let dy = (map.get(i, j + 1, k)? - map.get(i, j - 1, k)?) / (2.0 * hy);
        let dz = (map.get(i, j, k + 1)? - map.get(i, j, k - 1)?) / (2.0 * hz);
        let mut m = [[0.0; 3]; 3];
        for a in 0..3 {
            m[a] = [dx[a], dy[a], dz[a]];
        }
        Some(m)
    };

    let mut gaxis = Vec::new();
    for i in 1..nx - 1 {
        let x = map.point(i, j0, k0).x;
        if let Some(jm) = jacobian(i, j0, k0) {
            gaxis.push((x, jm[2][0]));
        }
    }
    let center_gradient = gaxis
        .iter()
        .min_by(|a, b| a.0.abs().total_cmp(&b.0.abs()))
        .filter(|(x, _)| x.abs() < 1e-9)
        .map(|(_, g)| *g)
        .ok_or_else(|| Error::config("map", "must sample the origin"))?;
    if center_gradient == 0.0 {
        return Err(Error::domain("center gradient is zero"));
    }
    let scale = center_gradient.abs();
    let linearity_deviation = gaxis
        .iter()
        .filter(|(x, _)| x.abs() <= 1.0 + 1e-9)
        .map(|(_, g)| (g / center_gradient - 1.0).abs())
        .fold(0.0, f64::max);

    let (mut curl_residual, mut max_curl, mut div) = (0.0f64, 0.0f64, 0.0f64);
    for i in 1..nx - 1 {
        for j in 1..ny - 1 {
            for k in 1..nz - 1 {
                let Some(m) = jacobian(i, j, k) else { continue };
                let c = [m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]];
                curl_residual = curl_residual.max((m[2][0] - m[0][2]).abs() / scale);
                max_curl = max_curl.max(c.iter().fold(0.0f64, |a, v| a.max(v.abs())) / scale);
                div = div.max((m[0][0] + m[1][1] + m[2][2]).abs() / scale);
            }
        }
    }
    Ok(CurlLinearityReport {
        curl_residual,
        max_curl,
        divergence_residual: div,
        linearity_deviation,
        center_gradient,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistortionStatus {
    Pass,
    Marginal,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionCheck {
    pub ratio: f64,
    pub status: DistortionStatus,
}

impl DistortionCheck {
    pub fn pass(&self) -> bool {
        self.status == DistortionStatus::Pass
    }
}

/// Compares the transverse field a gradient adds at the cell ends with the
/// bias: ratio = (G·L/2)/(√2·B0).
pub fn distortion_check(gradient_gauss_per_cm: f64, length_cm: f64, bias_gauss: f64) -> Result<DistortionCheck> {
    if !(bias_gauss > 0.0 && bias_gauss.is_finite()) {
        return Err(Error::config("bias_gauss", "must be finite and > 0"));
    }
    if !(length_cm >= 0.0 && gradient_gauss_per_cm.is_finite()) {
        return Err(Error::config("gradient", "gradient must be finite and length ≥ 0"));
    }
    let ratio = (gradient_gauss_per_cm.abs() * length_cm / 2.0) / (2f64.sqrt() * bias_gauss);
    let status = if ratio < DISTORTION_PASS_RATIO {
        DistortionStatus::Pass
    } else if ratio < DISTORTION_WARN_RATIO {
        DistortionStatus::Marginal
    } else {
        DistortionStatus::Fail
    };
    Ok(DistortionCheck { ratio, status })
}
