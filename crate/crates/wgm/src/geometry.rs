//! Generating curve, revolved chart `(r, s, α)` and chart inversion.
//!
//! The meridian curve `S` is given by its curvature `k(s)` on `[0, L)`. The
//! turning angle is `a(s) = ∫₀^s k − shift`, and the curve is
//! `x = R + Q₁(s)`, `z = Q₂(s)` with `Q₁ = ∫ cos a`, `Q₂ = ∫ sin a`. Values of
//! `a`, `Q₁`, `Q₂` are cached on a uniform grid and interpolated with quintic
//! Hermite polynomials built from the exact first and second derivatives.

use crate::quad::adaptive;
use crate::{Error, Result};
use serde::Serialize;
use std::f64::consts::{PI, TAU};

/// Default number of cached nodes per period.
pub const DEFAULT_CURVE_NODES: usize = 4096;

const PROFILE_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
enum ProfileKind {
    Triangle { sigma: f64 },
    Circle,
    Tabulated { spline: PeriodicSpline },
}

/// An `L`-periodic curvature profile with `∫₀^L k = 2π`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureProfile {
    pub length: f64,
    /// Integral of the raw shape function; `None` for the circle.
    pub gamma: Option<f64>,
    scale: f64,
    kind: ProfileKind,
}

fn gaussian_centers(length: f64) -> [f64; 4] {
    [0.0, length / 3.0, 2.0 * length / 3.0, length]
}

/// The rounded-triangle profile: `k = (2π/γ) f` with `f` a sum of four
/// Gaussians of width `sigma` centred at `0, L/3, 2L/3, L`.
pub fn triangle_profile(sigma: f64, length: f64) -> Result<CurvatureProfile> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    check_length(length)?;
    let kind = ProfileKind::Triangle { sigma };
    let raw = |s: f64| raw_triangle(sigma, length, s);
    let gamma = adaptive(raw, 0.0, length, PROFILE_TOL, 0.0)?;
    Ok(CurvatureProfile { length, gamma: Some(gamma), scale: TAU / gamma, kind })
}

fn raw_triangle(sigma: f64, length: f64, s: f64) -> f64 {
    gaussian_centers(length)
        .iter()
        .map(|c| (-(s - c).powi(2) / (sigma * sigma)).exp())
        .sum()
}

fn raw_triangle_prime(sigma: f64, length: f64, s: f64) -> f64 {
    gaussian_centers(length)
        .iter()
        .map(|c| -2.0 * (s - c) / (sigma * sigma) * (-(s - c).powi(2) / (sigma * sigma)).exp())
        .sum()
}

fn check_length(length: f64) -> Result<()> {
    if length > 0.0 && length.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("length must be positive, got {length}")))
    }
}

impl CurvatureProfile {
    /// Constant curvature `2π/L`.
    pub fn circle(length: f64) -> Result<Self> {
        check_length(length)?;
        Ok(Self { length, gamma: None, scale: 1.0, kind: ProfileKind::Circle })
    }

    /// A profile sampled at `s_j = jL/N`, interpolated by a periodic cubic
    /// spline and rescaled so that the total turning is `2π`.
    pub fn tabulated(length: f64, samples: &[f64]) -> Result<Self> {
        check_length(length)?;
        if samples.len() < 8 {
            return Err(Error::InvalidProfile("need at least 8 curvature samples".into()));
        }
        if samples.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidProfile("curvature samples must be positive".into()));
        }
        let spline = PeriodicSpline::new(length, samples.to_vec());
        let n = 8 * samples.len();
        if (0..n).any(|i| spline.eval(length * i as f64 / n as f64) <= 0.0) {
            return Err(Error::InvalidProfile("interpolated curvature is not positive".into()));
        }
        let gamma = adaptive(|s| spline.eval(s), 0.0, length, PROFILE_TOL, 0.0)?;
        Ok(Self { length, gamma: Some(gamma), scale: TAU / gamma, kind: ProfileKind::Tabulated { spline } })
    }

    /// `k(s)`, extended `L`-periodically.
    pub fn kappa(&self, s: f64) -> f64 {
        let s = s.rem_euclid(self.length);
        match &self.kind {
            ProfileKind::Triangle { sigma } => self.scale * raw_triangle(*sigma, self.length, s),
            ProfileKind::Circle => TAU / self.length,
            ProfileKind::Tabulated { spline } => self.scale * spline.eval(s),
        }
    }

    /// `k′(s)`.
    pub fn kappa_prime(&self, s: f64) -> f64 {
        let s = s.rem_euclid(self.length);
        match &self.kind {
            ProfileKind::Triangle { sigma } => self.scale * raw_triangle_prime(*sigma, self.length, s),
            ProfileKind::Circle => 0.0,
            ProfileKind::Tabulated { spline } => self.scale * spline.deriv(s),
        }
    }

    /// Rigid rotation subtracted from the turning angle: `γ` for the
    /// triangle profile, zero otherwise.
    pub fn shift(&self) -> f64 {
        match self.kind {
            ProfileKind::Triangle { .. } => self.gamma.unwrap_or(0.0),
            _ => 0.0,
        }
    }

    /// `∫₀^L k`.
    pub fn total_turning(&self) -> Result<f64> {
        adaptive(|s| self.kappa(s), 0.0, self.length, PROFILE_TOL, 0.0)
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ProfileKind::Triangle { .. } => "triangle",
            ProfileKind::Circle => "circle",
            ProfileKind::Tabulated { .. } => "tabulated",
        }
    }
}

/// Periodic cubic spline through uniformly spaced samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicSpline {
    length: f64,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl PeriodicSpline {
    pub fn new(length: f64, y: Vec<f64>) -> Self {
        let n = y.len();
        let h = length / n as f64;
        let rhs: Vec<f64> = (0..n)
            .map(|i| 6.0 * (y[(i + 1) % n] - 2.0 * y[i] + y[(i + n - 1) % n]) / (h * h))
            .collect();
        let m = solve_cyclic_tridiagonal(1.0, 4.0, 1.0, &rhs);
        Self { length, y, m }
    }

    fn locate(&self, s: f64) -> (usize, usize, f64, f64) {
        let n = self.y.len();
        let h = self.length / n as f64;
        let s = s.rem_euclid(self.length);
        let i = ((s / h).floor() as usize).min(n - 1);
        let t = s - i as f64 * h;
        (i, (i + 1) % n, t, h)
    }

    pub fn eval(&self, s: f64) -> f64 {
        let (i, j, t, h) = self.locate(s);
        let u = h - t;
        (self.m[i] * u.powi(3) + self.m[j] * t.powi(3)) / (6.0 * h)
            + (self.y[i] / h - self.m[i] * h / 6.0) * u
            + (self.y[j] / h - self.m[j] * h / 6.0) * t
    }

    pub fn deriv(&self, s: f64) -> f64 {
        let (i, j, t, h) = self.locate(s);
        let u = h - t;
        (-self.m[i] * u * u + self.m[j] * t * t) / (2.0 * h) - (self.y[i] / h - self.m[i] * h / 6.0)
            + (self.y[j] / h - self.m[j] * h / 6.0)
    }
}

/// Solves the cyclic system with constant `(lower, diag, upper)` bands via
/// Sherman–Morrison.
fn solve_cyclic_tridiagonal(lower: f64, diag: f64, upper: f64, rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    let gamma = -diag;
    let mut b = vec![diag; n];
    b[0] = diag - gamma;
    b[n - 1] = diag - lower * upper / gamma;
    let thomas = |d: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0; n];
        let mut x = vec![0.0; n];
        c[0] = upper / b[0];
        x[0] = d[0] / b[0];
        for i in 1..n {
            let den = b[i] - lower * c[i - 1];
            c[i] = upper / den;
            x[i] = (d[i] - lower * x[i - 1]) / den;
        }
        for i in (0..n - 1).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        x
    };
    let x = thomas(rhs);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = upper;
    let z = thomas(&u);
    let fact = (x[0] + lower * x[n - 1] / gamma) / (1.0 + z[0] + lower * z[n - 1] / gamma);
    x.iter().zip(&z).map(|(xi, zi)| xi - fact * zi).collect()
}

/// Quintic Hermite interpolation on the unit interval from values, first
/// and second derivatives (already scaled by the cell width).
#[inline]
fn quintic(t: f64, p0: f64, v0: f64, a0: f64, p1: f64, v1: f64, a1: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    let t4 = t3 * t;
    let t5 = t4 * t;
    let h0 = 1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5;
    let h1 = t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5;
    let h2 = 0.5 * (t2 - 3.0 * t3 + 3.0 * t4 - t5);
    let h3 = 0.5 * (t3 - 2.0 * t4 + t5);
    let h4 = -4.0 * t3 + 7.0 * t4 - 3.0 * t5;
    let h5 = 10.0 * t3 - 15.0 * t4 + 6.0 * t5;
    h0 * p0 + h1 * v0 + h2 * a0 + h3 * a1 + h4 * v1 + h5 * p1
}

/// The generating curve `S` together with the rotation radius `R`.
#[derive(Debug, Clone)]
pub struct MeridianCurve {
    pub profile: CurvatureProfile,
    pub radius: f64,
    ds: f64,
    a: Vec<f64>,
    k: Vec<f64>,
    kp: Vec<f64>,
    q1: Vec<f64>,
    q2: Vec<f64>,
    closure_defect: f64,
}

/// A point of the revolved chart with its metric data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChartPoint {
    pub r: f64,
    pub s: f64,
    pub alpha: f64,
    /// Distance to the rotation axis, `X(r, s)`.
    pub x: f64,
    pub z: f64,
    /// `(1 − r k) X`.
    pub jacobian: f64,
    /// Lamé coefficient `1 − r k`.
    pub h_s: f64,
    /// `r < 1/k(s)`.
    pub valid: bool,
}

/// Builds the curve with [`DEFAULT_CURVE_NODES`] cached nodes.
pub fn build_curve(profile: CurvatureProfile, radius: f64) -> Result<MeridianCurve> {
    build_curve_with(profile, radius, DEFAULT_CURVE_NODES)
}

/// Builds the curve with `nodes` cached nodes per period.
pub fn build_curve_with(profile: CurvatureProfile, radius: f64, nodes: usize) -> Result<MeridianCurve> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Domain(format!("rotation radius must be positive, got {radius}")));
    }
    if nodes < 16 {
        return Err(Error::Domain("curve needs at least 16 nodes".into()));
    }
    let length = profile.length;
    let total = profile.total_turning()?;
    if (total - TAU).abs() > 1e-8 {
        return Err(Error::InvalidProfile(format!("total turning {total} differs from 2π")));
    }
    let ds = length / nodes as f64;
    let s_at = |i: usize| i as f64 * ds;
    let k: Vec<f64> = (0..=nodes).map(|i| profile.kappa(s_at(i))).collect();
    let kp: Vec<f64> = (0..=nodes).map(|i| profile.kappa_prime(s_at(i))).collect();
    if k.iter().any(|v| *v <= 0.0) {
        return Err(Error::InvalidProfile("curvature must be positive".into()));
    }
    let mut a = Vec::with_capacity(nodes + 1);
    a.push(-profile.shift());
    for i in 0..nodes {
        let inc = adaptive(|s| profile.kappa(s), s_at(i), s_at(i + 1), PROFILE_TOL, 0.0)?;
        a.push(a[i] + inc);
    }
    let mut curve = MeridianCurve {
        profile,
        radius,
        ds,
        a,
        k,
        kp,
        q1: vec![0.0; nodes + 1],
        q2: vec![0.0; nodes + 1],
        closure_defect: 0.0,
    };
    for i in 0..nodes {
        let (lo, hi) = (s_at(i), s_at(i + 1));
        let c = adaptive(|s| curve.a_in_cell(i, s).cos(), lo, hi, PROFILE_TOL, 0.0)?;
        let s_ = adaptive(|s| curve.a_in_cell(i, s).sin(), lo, hi, PROFILE_TOL, 0.0)?;
        curve.q1[i + 1] = curve.q1[i] + c;
        curve.q2[i + 1] = curve.q2[i] + s_;
    }
    let defect = (curve.q1[nodes] - curve.q1[0]).abs() + (curve.q2[nodes] - curve.q2[0]).abs();
    curve.closure_defect = defect;
    if defect > 1e-6 {
        return Err(Error::CurveNotClosed { defect });
    }
    if (0..nodes).any(|i| radius + curve.q1[i] <= 0.0) {
        return Err(Error::Geometry("curve crosses the rotation axis".into()));
    }
    Ok(curve)
}

impl MeridianCurve {
    pub fn length(&self) -> f64 {
        self.profile.length
    }

    pub fn nodes(&self) -> usize {
        self.a.len() - 1
    }

    /// `|Q(L) − Q(0)|₁` measured at build time.
    pub fn closure_defect(&self) -> f64 {
        self.closure_defect
    }

    fn cell(&self, s: f64) -> (usize, f64) {
        let n = self.nodes();
        let s = s.rem_euclid(self.length());
        let i = ((s / self.ds).floor() as usize).min(n - 1);
        (i, (s - i as f64 * self.ds) / self.ds)
    }

    fn a_in_cell(&self, i: usize, s: f64) -> f64 {
        let t = (s - i as f64 * self.ds) / self.ds;
        let h = self.ds;
        quintic(t, self.a[i], h * self.k[i], h * h * self.kp[i], self.a[i + 1], h * self.k[i + 1], h * h * self.kp[i + 1])
    }

    /// Turning angle `a(s)` reduced to the base period.
    pub fn turning_angle(&self, s: f64) -> f64 {
        let (i, t) = self.cell(s);
        let h = self.ds;
        quintic(t, self.a[i], h * self.k[i], h * h * self.kp[i], self.a[i + 1], h * self.k[i + 1], h * h * self.kp[i + 1])
    }

    pub fn kappa(&self, s: f64) -> f64 {
        self.profile.kappa(s)
    }

    pub fn kappa_prime(&self, s: f64) -> f64 {
        self.profile.kappa_prime(s)
    }

    fn q_interp(&self, q: &[f64], s: f64, cos_part: bool) -> f64 {
        let (i, t) = self.cell(s);
        let h = self.ds;
        let d = |j: usize| {
            let (sn, cs) = self.a[j].sin_cos();
            if cos_part {
                (cs, -self.k[j] * sn)
            } else {
                (sn, self.k[j] * cs)
            }
        };
        let (v0, a0) = d(i);
        let (v1, a1) = d(i + 1);
        quintic(t, q[i], h * v0, h * h * a0, q[i + 1], h * v1, h * h * a1)
    }

    pub fn q1(&self, s: f64) -> f64 {
        self.q_interp(&self.q1, s, true)
    }

    pub fn q2(&self, s: f64) -> f64 {
        self.q_interp(&self.q2, s, false)
    }

    /// `(Q₁′, Q₂′) = (cos a, sin a)`.
    pub fn tangent(&self, s: f64) -> (f64, f64) {
        let (sn, cs) = self.turning_angle(s).sin_cos();
        (cs, sn)
    }

    pub fn q1_prime(&self, s: f64) -> f64 {
        self.tangent(s).0
    }

    pub fn q2_prime(&self, s: f64) -> f64 {
        self.tangent(s).1
    }

    /// `(Q₁″, Q₂″) = k (−sin a, cos a)`.
    pub fn second_derivative(&self, s: f64) -> (f64, f64) {
        let (c, sn) = self.tangent(s);
        let k = self.kappa(s);
        (-k * sn, k * c)
    }

    /// Boundary point `(R + Q₁, Q₂)` in the meridian half-plane.
    pub fn point(&self, s: f64) -> (f64, f64) {
        (self.radius + self.q1(s), self.q2(s))
    }

    /// `X(0, s) = R + Q₁(s)`.
    pub fn x0(&self, s: f64) -> f64 {
        self.radius + self.q1(s)
    }

    /// Inward unit normal `(−Q₂′, Q₁′)`.
    pub fn inner_normal(&self, s: f64) -> (f64, f64) {
        let (c, sn) = self.tangent(s);
        (-sn, c)
    }

    /// Chart map `(r, s) ↦ (X, Z)` with Jacobian and Lamé coefficient.
    pub fn eval_chart(&self, r: f64, s: f64) -> ChartPoint {
        let (c, sn) = self.tangent(s);
        let k = self.kappa(s);
        let x = self.radius + self.q1(s) - r * sn;
        let z = self.q2(s) + r * c;
        let h_s = 1.0 - r * k;
        ChartPoint { r, s, alpha: 0.0, x, z, jacobian: h_s * x, h_s, valid: r * k < 1.0 }
    }

    /// Nearest boundary point to `(xi, z)`: returns `(r, s)` with `r` the
    /// signed distance, positive inside.
    pub fn project(&self, xi: f64, z: f64) -> Result<(f64, f64)> {
        let n = self.nodes();
        let stride = 8.min(n / 16).max(1);
        let d2 = |i: usize| {
            let (px, pz) = (self.radius + self.q1[i % n], self.q2[i % n]);
            (px - xi).powi(2) + (pz - z).powi(2)
        };
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in (0..n).step_by(stride) {
            let d = d2(i);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        for j in 0..2 * stride {
            let i = (best + n + j - stride) % n;
            let d = d2(i);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        let f = |s: f64| {
            let (px, pz) = self.point(s);
            let (tx, tz) = self.tangent(s);
            (xi - px) * tx + (z - pz) * tz
        };
        let s0 = best as f64 * self.ds;
        let (mut lo, mut hi) = (s0 - self.ds, s0 + self.ds);
        let (flo, fhi) = (f(lo), f(hi));
        let bracketed = flo >= 0.0 && fhi <= 0.0;
        let mut s = s0;
        let mut converged = false;
        for _ in 0..100 {
            let (px, pz) = self.point(s);
            let (tx, tz) = self.tangent(s);
            let (nx, nz) = (-tz, tx);
            let fv = (xi - px) * tx + (z - pz) * tz;
            let fp = -1.0 + self.kappa(s) * ((xi - px) * nx + (z - pz) * nz);
            if bracketed {
                if fv > 0.0 {
                    lo = s;
                } else {
                    hi = s;
                }
            }
            let mut next = if fp != 0.0 { s - fv / fp } else { f64::NAN };
            if bracketed && !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if !next.is_finite() {
                break;
            }
            let step = (next - s).abs();
            s = next;
            if step <= 1e-15 * self.length() || (bracketed && hi - lo <= 1e-15 * self.length()) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::OutOfChart { xi, z });
        }
        let (px, pz) = self.point(s);
        let (nx, nz) = self.inner_normal(s);
        let r = (xi - px) * nx + (z - pz) * nz;
        Ok((r, s.rem_euclid(self.length())))
    }

    /// Inverse chart: `(xi, z) ↦ (r, s)` for points of the chart region.
    pub fn invert_chart(&self, xi: f64, z: f64) -> Result<(f64, f64)> {
        let (r, s) = self.project(xi, z)?;
        if r * self.kappa(s) >= 1.0 {
            return Err(Error::OutOfChart { xi, z });
        }
        let p = self.eval_chart(r, s);
        if (p.x - xi).abs() + (p.z - z).abs() > 1e-10 {
            return Err(Error::OutOfChart { xi, z });
        }
        Ok((r, s))
    }

    /// Largest `|Q₁|` and `|Q₂|` over the cached nodes.
    pub fn extent(&self) -> (f64, f64) {
        let m1 = self.q1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let m2 = self.q2.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (m1, m2)
    }

    /// Node positions `s_j` and the boundary samples used for export.
    pub fn samples(&self) -> Vec<CurveSample> {
        (0..self.nodes())
            .map(|i| {
                let s = i as f64 * self.ds;
                CurveSample { s, x: self.radius + self.q1[i], z: self.q2[i], kappa: self.k[i] }
            })
            .collect()
    }
}

/// One exported row of the meridian curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveSample {
    pub s: f64,
    pub x: f64,
    pub z: f64,
    pub kappa: f64,
}

/// The circle of unit radius (`L = 2π`) used as the constant-curvature
/// reference geometry.
pub fn unit_circle_profile() -> CurvatureProfile {
    CurvatureProfile::circle(TAU).expect("2π is a valid length")
}

/// One third of the full period `2π`.
pub const THIRD_TURN: f64 = 2.0 * PI / 3.0;
