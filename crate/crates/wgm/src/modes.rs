//! Longitudinal mode `ψ(s)`, boundary-layer mode `w(ρ, s)`, its localized
//! version `w̃`, the 3-D quasimode `u` and the caustic.
//!
//! Modes are stored as samples on uniform grids and evaluated elsewhere by
//! six-point Lagrange interpolation. The turning-point construction uses
//! the variable `s = s₋ + c(1 − cos θ)`, `c = (s₊ − s₋)/2`, in which the
//! action and the phase-correction integrands are smooth.

use crate::geometry::MeridianCurve;
use crate::par::{map_range, Exec};
use crate::quad::{adaptive, Cumulative};
use crate::semiclassics::{
    parabolic_spectrum, stability_a, Longitudinal, ModeIndices, Regime, ScaleParams, SpectralData,
};
use crate::specfun::{airy, parabolic_d};
use crate::{Error, Result};
use num_complex::Complex64;
use serde::Serialize;
use std::f64::consts::PI;
use std::ops::{Add, Mul};
use std::sync::Arc;

pub const DEFAULT_S_NODES: usize = 2048;
pub const DEFAULT_RHO_NODES: usize = 512;
pub const DEFAULT_ELL: u32 = 3;
pub const DEFAULT_DELTA_FRACTION: f64 = 0.1;
pub const DEFAULT_RHO_MAX_FACTOR: f64 = 12.0;
pub const DEFAULT_C_LOC: f64 = 6.0;
pub const DEFAULT_MAX_NORM_CHANGE: f64 = 1e-6;

const BRANCH_PANELS: usize = 256;
const PHASE_PANELS: usize = 256;

/// Grid and construction parameters shared by the mode builders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeOptions {
    pub s_nodes: usize,
    pub rho_nodes: usize,
    pub rho_max_factor: f64,
    /// `δ = delta_fraction·(s₊ − s₋)`.
    pub delta_fraction: f64,
    pub ell: u32,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for ModeOptions {
    fn default() -> Self {
        Self {
            s_nodes: DEFAULT_S_NODES,
            rho_nodes: DEFAULT_RHO_NODES,
            rho_max_factor: DEFAULT_RHO_MAX_FACTOR,
            delta_fraction: DEFAULT_DELTA_FRACTION,
            ell: DEFAULT_ELL,
            exec: Exec::default(),
        }
    }
}

/// `C^∞` step: 0 for `x ≤ 0`, 1 for `x ≥ 1`, built from `exp(−1/x)`.
pub fn smooth_step(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / x).exp();
        let b = (-1.0 / (1.0 - x)).exp();
        a / (a + b)
    }
}

/// Equal to 1 on `[lo, hi]`, 0 outside `[lo − width, hi + width]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmoothCutoff {
    pub lo: f64,
    pub hi: f64,
    pub width: f64,
}

impl SmoothCutoff {
    pub fn eval(&self, s: f64) -> f64 {
        smooth_step((s - (self.lo - self.width)) / self.width) * smooth_step(((self.hi + self.width) - s) / self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ModeKind {
    Wkb,
    Airy,
    Parabolic,
}

/// Which turning point a branch is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    Minus,
    Plus,
}

/// Uniform sampling `s_j = start + j·ds`, `j < n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SGrid {
    pub start: f64,
    pub ds: f64,
    pub n: usize,
    /// Samples wrap with this period; otherwise values vanish off the grid.
    pub period: Option<f64>,
}

impl SGrid {
    pub fn node(&self, j: usize) -> f64 {
        self.start + j as f64 * self.ds
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.node(j)).collect()
    }

    pub fn end(&self) -> f64 {
        self.start + self.n as f64 * self.ds
    }

    /// Six-point Lagrange interpolation of grid samples.
    pub fn interpolate<T>(&self, values: &[T], s: f64) -> T
    where
        T: Copy + Default + Add<Output = T> + Mul<f64, Output = T>,
    {
        let mut x = (s - self.start) / self.ds;
        if let Some(p) = self.period {
            x = ((s - self.start).rem_euclid(p)) / self.ds;
        }
        let base = x.floor() as i64 - 2;
        let t = x - base as f64;
        let n = self.n as i64;
        let mut acc = T::default();
        for a in 0..6i64 {
            let mut w = 1.0;
            for b in 0..6i64 {
                if a != b {
                    w *= (t - b as f64) / (a - b) as f64;
                }
            }
            let idx = base + a;
            let v = match self.period {
                Some(_) => values[idx.rem_euclid(n) as usize],
                None if idx < 0 || idx >= n => T::default(),
                None => values[idx as usize],
            };
            acc = acc + v * w;
        }
        acc
    }

    /// Fourth-order central first derivative, zero-padded or periodic.
    pub fn derivative<T>(&self, values: &[T]) -> Vec<T>
    where
        T: Copy + Default + Add<Output = T> + Mul<f64, Output = T>,
    {
        let n = self.n as i64;
        let get = |i: i64| match self.period {
            Some(_) => values[i.rem_euclid(n) as usize],
            None if i < 0 || i >= n => T::default(),
            None => values[i as usize],
        };
        let c = 1.0 / (12.0 * self.ds);
        (0..n)
            .map(|i| (get(i - 2) * 1.0 + get(i - 1) * -8.0 + get(i + 1) * 8.0 + get(i + 2) * -1.0) * c)
            .collect()
    }
}

/// The normalized longitudinal mode.
#[derive(Debug, Clone, Serialize)]
pub struct Mode1D {
    pub kind: ModeKind,
    /// Normalization constant applied to the raw construction.
    pub a0: f64,
    pub delta: f64,
    pub ell: u32,
    pub zeta: Option<SmoothCutoff>,
    /// Constant phase of the construction; `ψ·phase⁻¹` is real for the
    /// Airy and parabolic forms.
    #[serde(skip)]
    pub phase: Complex64,
    pub grid: SGrid,
    #[serde(skip)]
    pub values: Vec<Complex64>,
}

impl Mode1D {
    pub fn psi(&self, s: f64) -> Complex64 {
        self.grid.interpolate(&self.values, s)
    }

    /// `∂ₛψ` on the grid.
    pub fn derivative(&self) -> Vec<Complex64> {
        self.grid.derivative(&self.values)
    }

    /// `‖ψ‖_{L²}` by the trapezoidal rule.
    pub fn norm(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.ds).sqrt()
    }

    /// Copy with every sample multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.a0 *= factor;
        out.values.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Sign changes of `Re(ψ/phase)` on `(lo, hi)`, ignoring samples below
    /// `1e−8·max|ψ|`.
    pub fn zero_count(&self, lo: f64, hi: f64) -> usize {
        let max = self.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let inv = self.phase.conj();
        let mut last = 0.0f64;
        let mut count = 0;
        for j in 0..self.grid.n {
            let s = self.grid.node(j);
            if s <= lo || s >= hi {
                continue;
            }
            let v = (self.values[j] * inv).re;
            if v.abs() < 1e-8 * max {
                continue;
            }
            if last != 0.0 && v.signum() != last.signum() {
                count += 1;
            }
            last = v;
        }
        count
    }
}

/// Moment-matched reflection coefficients: `Σ_j c_j (−j)^p = 1`,
/// `p = 0..ℓ−1`. For `ℓ = 3` these are `(6, −8, 3)`.
pub fn extension_coefficients(ell: u32) -> Result<Vec<f64>> {
    if ell == 0 || ell > 8 {
        return Err(Error::Domain(format!("extension order must be in 1..=8, got {ell}")));
    }
    let l = ell as usize;
    let a = nalgebra::DMatrix::from_fn(l, l, |p, j| (-((j + 1) as f64)).powi(p as i32));
    let b = nalgebra::DVector::from_element(l, 1.0);
    let c = a.lu().solve(&b).ok_or_else(|| Error::Domain("singular moment system".into()))?;
    Ok(c.iter().copied().collect())
}

/// Extends `f` beyond the turning point `tp` by
/// `Σ_j c_j f(tp + j(tp − s))`. The reflected nodes must stay in
/// `interior`.
pub fn extend_beyond_turning<F: Fn(f64) -> f64>(
    f: F,
    tp: f64,
    s: f64,
    coeffs: &[f64],
    interior: (f64, f64),
) -> Result<f64> {
    let mut acc = 0.0;
    for (j, c) in coeffs.iter().enumerate() {
        let node = tp + (j + 1) as f64 * (tp - s);
        if node < interior.0 || node > interior.1 {
            return Err(Error::CollarTooWide { node, lo: interior.0, hi: interior.1 });
        }
        acc += c * f(node);
    }
    Ok(acc)
}

type BoxedFn<'a> = Box<dyn Fn(f64) -> f64 + Send + Sync + 'a>;

/// Smooth pieces of a uniform Airy branch: signed `Φ`, `P_ev`, `P_odd`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Composite {
    phi: f64,
    pev: f64,
    podd: f64,
}

/// The two uniform Airy branches `ψ₋`, `ψ₊` attached to the turning
/// points. The global factor `√(2π) e^{iπ/4}` is left out.
pub struct AiryBranches<'a, M: Longitudinal + ?Sized> {
    model: &'a M,
    pub e2: f64,
    pub e1: f64,
    pub h: f64,
    pub epsilon: f64,
    pub t_k: f64,
    pub m: u32,
    pub s_minus: f64,
    pub s_plus: f64,
    half: f64,
    action: Cumulative<BoxedFn<'a>>,
    phase: Cumulative<BoxedFn<'a>>,
    coeffs: Vec<f64>,
}

impl<'a, M: Longitudinal + ?Sized> AiryBranches<'a, M> {
    pub fn new(model: &'a M, spectral: &SpectralData, ell: u32) -> Result<Self> {
        let (lo, hi) = spectral
            .turning()
            .ok_or_else(|| Error::Regime("uniform Airy branches need two turning points".into()))?;
        let c = 0.5 * (hi - lo);
        let e2 = spectral.e2;
        let e1 = spectral.e1;
        let s_of = move |t: f64| {
            let sh = (0.5 * t).sin();
            lo + 2.0 * c * sh * sh
        };
        for i in 0..=64 {
            stability_a(model, lo + (hi - lo) * i as f64 / 64.0, e2)?;
        }
        let act: BoxedFn<'a> = Box::new(move |t: f64| (e2 - model.u(s_of(t))).max(0.0).sqrt() * c * t.sin());
        let ph: BoxedFn<'a> = Box::new(move |t: f64| {
            let s = s_of(t);
            let a2 = model.a3(s, e2).max(0.0).powf(2.0 / 3.0);
            (e1 - a2) / (e2 - model.u(s)).abs().sqrt() * c * t.sin()
        });
        Ok(Self {
            model,
            e2,
            e1,
            h: spectral.h,
            epsilon: spectral.epsilon,
            t_k: spectral.t_k,
            m: spectral.m,
            s_minus: lo,
            s_plus: hi,
            half: c,
            action: Cumulative::new(act, 0.0, PI, BRANCH_PANELS),
            phase: Cumulative::new(ph, 0.0, PI, BRANCH_PANELS),
            coeffs: extension_coefficients(ell)?,
        })
    }

    fn theta(&self, s: f64) -> f64 {
        let u = (s - self.s_minus) / (2.0 * self.half);
        if u <= 0.5 {
            2.0 * u.max(0.0).sqrt().asin()
        } else {
            let w = (self.s_plus - s) / (2.0 * self.half);
            PI - 2.0 * w.max(0.0).sqrt().asin()
        }
    }

    /// `∫_{s₋}^{s₊} (E₁ − 𝒜²)/√|V|`; vanishes by the definition of `E₁`.
    pub fn phase_total(&self) -> f64 {
        self.phase.total()
    }

    /// `(1/επ)∫√|V|` over the well.
    pub fn quantum_number(&self) -> f64 {
        self.action.total() / (self.epsilon * PI)
    }

    fn direct(&self, side: Side, s: f64) -> Composite {
        let eta = 1e-9 * (self.s_plus - self.s_minus);
        let s = s.clamp(self.s_minus + eta, self.s_plus - eta);
        let t = self.theta(s);
        let k = self.h / self.epsilon * self.t_k * 0.5;
        let (act, g) = match side {
            Side::Minus => (self.action.head(t), -k * self.phase.head(t)),
            Side::Plus => (self.action.tail(t), k * self.phase.tail(t)),
        };
        let phi = act.powf(2.0 / 3.0);
        let v = (self.e2 - self.model.u(s)).abs();
        Composite { phi, pev: (phi / v).powf(0.25) * g.cos(), podd: g.sin() / (phi * v).powf(0.25) }
    }

    fn composite(&self, side: Side, s: f64) -> Result<Composite> {
        let (tp, outside) = match side {
            Side::Minus => (self.s_minus, s <= self.s_minus),
            Side::Plus => (self.s_plus, s >= self.s_plus),
        };
        if !outside {
            return Ok(self.direct(side, s));
        }
        let interior = (self.s_minus, self.s_plus);
        let mut acc = Composite { phi: 0.0, pev: 0.0, podd: 0.0 };
        for (j, c) in self.coeffs.iter().enumerate() {
            let node = tp + (j + 1) as f64 * (tp - s);
            if node < interior.0 || node > interior.1 {
                return Err(Error::CollarTooWide { node, lo: interior.0, hi: interior.1 });
            }
            let v = self.direct(side, node);
            acc.phi += c * v.phi;
            acc.pev += c * v.pev;
            acc.podd += c * v.podd;
        }
        Ok(acc)
    }

    /// Signed `Φ` of a branch (negative beyond its turning point).
    pub fn phi(&self, side: Side, s: f64) -> Result<f64> {
        self.composite(side, s).map(|c| c.phi)
    }

    /// `g₁(s)` of a branch inside the well.
    pub fn g1(&self, side: Side, s: f64) -> f64 {
        let t = self.theta(s);
        let k = self.h / self.epsilon * self.t_k * 0.5;
        match side {
            Side::Minus => -k * self.phase.head(t),
            Side::Plus => k * self.phase.tail(t),
        }
    }

    /// `ψ₊` or `ψ₋` at `s`, including `κ₋ = (−1)^m`.
    pub fn psi(&self, side: Side, s: f64) -> Result<f64> {
        let c = self.composite(side, s)?;
        let q = 1.5 / self.epsilon;
        let a = airy(-q.powf(2.0 / 3.0) * c.phi);
        let (kappa, sign) = match side {
            Side::Plus => (1.0, -1.0),
            Side::Minus => (if self.m % 2 == 0 { 1.0 } else { -1.0 }, 1.0),
        };
        Ok(kappa * (q.powf(1.0 / 6.0) * c.pev * a.ai + sign * q.powf(-1.0 / 6.0) * c.podd * a.ai_prime))
    }

    /// `max|ψ₊ − ψ₋| / max|ψ₊|` over `[s₋ + δ, s₊ − δ]`.
    pub fn mismatch(&self, delta: f64, samples: usize) -> Result<f64> {
        let (a, b) = (self.s_minus + delta, self.s_plus - delta);
        let mut diff = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..=samples {
            let s = a + (b - a) * i as f64 / samples as f64;
            let (p, q) = (self.psi(Side::Plus, s)?, self.psi(Side::Minus, s)?);
            diff = diff.max((p - q).abs());
            scale = scale.max(p.abs());
        }
        Ok(diff / scale)
    }

    /// Interior zeros of one branch on `(s₋, s₊)`, sampled on `samples`
    /// points.
    pub fn zero_count(&self, side: Side, samples: usize) -> Result<usize> {
        let mut count = 0;
        let mut last = 0.0f64;
        for i in 1..samples {
            let s = self.s_minus + (self.s_plus - self.s_minus) * i as f64 / samples as f64;
            let v = self.psi(side, s)?;
            if last != 0.0 && v != 0.0 && v.signum() != last.signum() {
                count += 1;
            }
            if v != 0.0 {
                last = v;
            }
        }
        Ok(count)
    }
}

fn normalize(values: &mut [Complex64], ds: f64) -> Result<f64> {
    let n2: f64 = values.iter().map(|v| v.norm_sqr()).sum::<f64>() * ds;
    if !(n2 > 0.0 && n2.is_finite()) {
        return Err(Error::NoMode(format!("mode has norm² {n2}")));
    }
    let a0 = 1.0 / n2.sqrt();
    values.iter_mut().for_each(|v| *v *= a0);
    Ok(a0)
}

/// Uniform Airy mode glued from `ψ₋` and `ψ₊` with a smooth blend across
/// `[s₋ + δ, s₊ − δ]`, extended into the δ-collars and cut off by `ζ`.
pub fn assemble_psi<M: Longitudinal + ?Sized>(
    model: &M,
    spectral: &SpectralData,
    opts: &ModeOptions,
) -> Result<Mode1D> {
    if spectral.regime != Regime::TwoTurningPoints {
        return Err(Error::Regime("assemble_psi needs two turning points".into()));
    }
    let br = AiryBranches::new(model, spectral, opts.ell)?;
    let (lo, hi) = (br.s_minus, br.s_plus);
    let delta = opts.delta_fraction * (hi - lo);
    if !(delta > 0.0) || 2.0 * opts.ell as f64 * delta >= hi - lo {
        return Err(Error::CollarTooWide { node: lo - 2.0 * delta, lo, hi });
    }
    let zeta = SmoothCutoff { lo: lo - delta, hi: hi + delta, width: delta };
    let start = lo - 2.2 * delta;
    let width = (hi - lo) + 4.4 * delta;
    if width >= model.period() {
        return Err(Error::Domain("mode window exceeds the period".into()));
    }
    let grid = SGrid { start, ds: width / opts.s_nodes as f64, n: opts.s_nodes, period: None };
    let (b0, b1) = (lo + delta, hi - delta);
    let raw: Vec<Result<f64>> = map_range(grid.n, opts.exec, |j| {
        let s = grid.node(j);
        let z = zeta.eval(s);
        if z == 0.0 {
            return Ok(0.0);
        }
        let beta = smooth_step((s - b0) / (b1 - b0));
        let mut v = 0.0;
        if beta < 1.0 {
            v += (1.0 - beta) * br.psi(Side::Minus, s)?;
        }
        if beta > 0.0 {
            v += beta * br.psi(Side::Plus, s)?;
        }
        Ok(v * z)
    });
    let phase = Complex64::from_polar(1.0, PI / 4.0);
    let pref = (2.0 * PI).sqrt();
    let mut values = raw
        .into_iter()
        .map(|r| r.map(|v| phase * (pref * v)))
        .collect::<Result<Vec<_>>>()?;
    let a0 = normalize(&mut values, grid.ds)? * pref;
    Ok(Mode1D { kind: ModeKind::Airy, a0, delta, ell: opts.ell, zeta: Some(zeta), phase, grid, values })
}

/// WKB mode on the full period (no turning points).
pub fn wkb_mode<M: Longitudinal + ?Sized>(model: &M, spectral: &SpectralData, opts: &ModeOptions) -> Result<Mode1D> {
    if spectral.regime != Regime::NoTurningPoints {
        return Err(Error::Regime("the WKB form needs V < 0 on the whole period".into()));
    }
    let len = model.period();
    let (e2, e1) = (spectral.e2, spectral.e1);
    for i in 0..256 {
        stability_a(model, len * i as f64 / 256.0, e2)?;
    }
    let vabs = |s: f64| (e2 - model.u(s)).abs();
    let action = Cumulative::new(|s: f64| vabs(s).sqrt(), 0.0, len, PHASE_PANELS);
    let corr = Cumulative::new(
        |s: f64| (e1 - model.a3(s, e2).max(0.0).powf(2.0 / 3.0)) / vabs(s).sqrt(),
        0.0,
        len,
        PHASE_PANELS,
    );
    let k = 0.5 * spectral.h * spectral.t_k;
    let eps = spectral.epsilon;
    let total = (action.total() + k * corr.total()) / eps;
    let defect = (Complex64::from_polar(1.0, total) - 1.0).norm();
    if defect > 1e-6 {
        return Err(Error::QuantizationMismatch { defect });
    }
    let v0 = vabs(0.0);
    let grid = SGrid { start: 0.0, ds: len / opts.s_nodes as f64, n: opts.s_nodes, period: Some(len) };
    let mut values = map_range(grid.n, opts.exec, |j| {
        let s = grid.node(j);
        let amp = (v0 / vabs(s)).powf(0.25);
        Complex64::from_polar(amp, (action.head(s) + k * corr.head(s)) / eps)
    });
    let a0 = normalize(&mut values, grid.ds)?;
    Ok(Mode1D {
        kind: ModeKind::Wkb,
        a0,
        delta: 0.0,
        ell: opts.ell,
        zeta: None,
        phase: Complex64::new(1.0, 0.0),
        grid,
        values,
    })
}

/// Parabolic-cylinder mode at the bottom of the well:
/// `ψ = A₀ D_m(√2 β^{1/4}(s − s₀)/√ε + h t_k 𝒜₁/(√2 √ε β^{3/4}))`.
pub fn parabolic_mode<M: Longitudinal + ?Sized>(
    model: &M,
    scale: &ScaleParams,
    idx: &ModeIndices,
    opts: &ModeOptions,
) -> Result<(Mode1D, SpectralData)> {
    let (spec, wb) = parabolic_spectrum(model, scale, idx)?;
    let a3 = model.a3(wb.s0, spec.e2);
    let a1 = 2.0 / 3.0 * model.a3_prime(wb.s0, spec.e2) / a3.cbrt();
    let eps = scale.epsilon;
    let b4 = wb.beta.powf(0.25);
    let gain = 2f64.sqrt() * b4 / eps.sqrt();
    let shift = scale.h * spec.t_k * a1 / (2f64.sqrt() * eps.sqrt() * wb.beta.powf(0.75));
    let eta_max = 2.0 * (2.0 * idx.m as f64 + 1.0).sqrt() + 12.0;
    let half = (eta_max + shift.abs()) / gain;
    if 2.0 * half >= model.period() {
        return Err(Error::Regime("parabolic mode is not localized within one period".into()));
    }
    let grid = SGrid { start: wb.s0 - half, ds: 2.0 * half / opts.s_nodes as f64, n: opts.s_nodes, period: None };
    let mut values =
        map_range(grid.n, opts.exec, |j| Complex64::new(parabolic_d(idx.m, gain * (grid.node(j) - wb.s0) + shift), 0.0));
    let a0 = normalize(&mut values, grid.ds)?;
    let mode = Mode1D {
        kind: ModeKind::Parabolic,
        a0,
        delta: 0.0,
        ell: opts.ell,
        zeta: None,
        phase: Complex64::new(1.0, 0.0),
        grid,
        values,
    };
    Ok((mode, spec))
}

/// Picks the construction matching the spectral regime.
pub fn build_mode1d<M: Longitudinal + ?Sized>(
    model: &M,
    spectral: &SpectralData,
    opts: &ModeOptions,
) -> Result<Mode1D> {
    match spectral.regime {
        Regime::TwoTurningPoints => assemble_psi(model, spectral, opts),
        Regime::NoTurningPoints => wkb_mode(model, spectral, opts),
    }
}

/// `∫₀^∞ (𝒜/Ai′(−t_k)²) Ai²(−t_k + ρ𝒜) dρ`, equal to 1.
pub fn chi_normalization(a: f64, t_k: f64) -> Result<f64> {
    let d = airy(-t_k).ai_prime;
    let upper = (t_k + 40.0) / a;
    adaptive(|r| a / (d * d) * airy(-t_k + r * a).ai.powi(2), 0.0, upper, 1e-14, 1e-13)
}

/// Localization cutoff `θ(r, s)`: 1 for `r ≤ √h C/k(s)`, 0 beyond half way to
/// the focal distance `1/k(s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThetaCutoff {
    pub c_loc: f64,
    pub h: f64,
}

impl ThetaCutoff {
    /// `(r_loc, r_end)` at curvature `k`.
    pub fn band(&self, k: f64) -> (f64, f64) {
        let r_loc = self.h.sqrt() * self.c_loc / k;
        (r_loc, r_loc + 0.5 * (1.0 / k - r_loc))
    }

    pub fn eval(&self, r: f64, k: f64) -> f64 {
        let (a, b) = self.band(k);
        1.0 - smooth_step((r - a) / (b - a))
    }
}

/// `w(ρ, s)` sampled on `ρ_i = i·Δρ` (`i ≤ rho_nodes`) times the ψ grid.
#[derive(Debug, Clone, Serialize)]
pub struct Mode2D {
    pub mode1d: Mode1D,
    pub spectral: SpectralData,
    pub drho: f64,
    pub rho_nodes: usize,
    /// `𝒜(s_j; ℰ²)`.
    pub a: Vec<f64>,
    /// `∂ₛ𝒜(s_j; ℰ²)`.
    pub a_prime: Vec<f64>,
    /// `k(s_j)`, filled by [`cutoff_localize`].
    pub kappa: Vec<f64>,
    pub ai_prime_tk: f64,
    #[serde(skip)]
    dpsi: Vec<Complex64>,
    pub theta: Option<ThetaCutoff>,
    /// Relative L² change caused by `θ`.
    pub norm_change: Option<f64>,
    #[serde(skip)]
    pub values: Vec<Complex64>,
}

impl Mode2D {
    pub fn grid(&self) -> &SGrid {
        &self.mode1d.grid
    }

    pub fn rho_max(&self) -> f64 {
        self.drho * self.rho_nodes as f64
    }

    pub fn rows(&self) -> usize {
        self.rho_nodes + 1
    }

    pub fn at(&self, i: usize, j: usize) -> Complex64 {
        self.values[i * self.grid().n + j]
    }

    /// `‖w‖_{L²(Π)}` on the grid.
    pub fn norm(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.drho * self.grid().ds).sqrt()
    }

    /// Evaluates `w` (or `w̃` once localized) at an arbitrary point.
    pub fn eval(&self, rho: f64, s: f64) -> Complex64 {
        if rho < 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let g = self.grid();
        let psi = g.interpolate(&self.mode1d.values, s);
        let dpsi = g.interpolate(&self.dpsi, s);
        let a = g.interpolate(&self.a, s);
        let ap = g.interpolate(&self.a_prime, s);
        if !(a > 0.0) {
            return Complex64::new(0.0, 0.0);
        }
        let mut w = transverse(a, ap, self.spectral.t_k, self.ai_prime_tk, self.spectral.h, self.spectral.epsilon, rho, psi, dpsi);
        if let Some(th) = self.theta {
            let k = g.interpolate(&self.kappa, s);
            w *= th.eval(self.spectral.h * rho, k);
        }
        w
    }

    /// Sign changes of `Re(w/phase)` along `ρ` in column `j`.
    pub fn transverse_zero_count(&self, j: usize) -> usize {
        let inv = self.mode1d.phase.conj();
        let col: Vec<f64> = (0..self.rows()).map(|i| (self.at(i, j) * inv).re).collect();
        let max = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut last = 0.0f64;
        let mut count = 0;
        for v in col.into_iter().skip(1) {
            if v.abs() < 1e-6 * max {
                continue;
            }
            if last != 0.0 && v.signum() != last.signum() {
                count += 1;
            }
            last = v;
        }
        count
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn transverse(a: f64, ap: f64, t_k: f64, dtk: f64, h: f64, eps: f64, rho: f64, psi: Complex64, dpsi: Complex64) -> Complex64 {
    let chi = a.sqrt() / dtk.abs() * airy(-t_k + rho * a).ai;
    (psi - dpsi * (h.sqrt() * rho * rho * ap / (2.0 * a) * eps)) * chi
}

/// `w(ρ, s) = (√𝒜/|Ai′(−t_k)|) Ai(−t_k + ρ𝒜)[ψ − √h ρ² (𝒜′/2𝒜) ε∂ₛψ]`
/// with `𝒜` evaluated at `ℰ²`.
pub fn build_mode2d<M: Longitudinal + ?Sized>(
    model: &M,
    spectral: &SpectralData,
    mode1d: &Mode1D,
    opts: &ModeOptions,
) -> Result<Mode2D> {
    let g = mode1d.grid;
    let ce = spectral.curly_e2;
    let support: Vec<usize> = (0..g.n).filter(|&j| mode1d.values[j].norm() > 0.0).collect();
    let mut a = vec![0.0; g.n];
    let mut a_prime = vec![0.0; g.n];
    for j in 0..g.n {
        let s = g.node(j);
        match stability_a(model, s, ce) {
            Ok(v) => {
                a[j] = v;
                a_prime[j] = model.a3_prime(s, ce) / (3.0 * v * v);
            }
            Err(e) if support.binary_search(&j).is_ok() => return Err(e),
            Err(_) => {}
        }
    }
    let a_min = support.iter().map(|&j| a[j]).fold(f64::INFINITY, f64::min);
    if !a_min.is_finite() {
        return Err(Error::NoMode("empty longitudinal mode".into()));
    }
    let t_k = spectral.t_k;
    let rho_max = (t_k + opts.rho_max_factor) / a_min;
    let drho = rho_max / opts.rho_nodes as f64;
    let ai_prime_tk = airy(-t_k).ai_prime;
    let dpsi = mode1d.derivative();
    let (h, eps) = (spectral.h, spectral.epsilon);
    let rows = map_range(opts.rho_nodes + 1, opts.exec, |i| {
        let rho = i as f64 * drho;
        (0..g.n)
            .map(|j| {
                if a[j] > 0.0 {
                    transverse(a[j], a_prime[j], t_k, ai_prime_tk, h, eps, rho, mode1d.values[j], dpsi[j])
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(Mode2D {
        mode1d: mode1d.clone(),
        spectral: spectral.clone(),
        drho,
        rho_nodes: opts.rho_nodes,
        a,
        a_prime,
        kappa: vec![0.0; g.n],
        ai_prime_tk,
        dpsi,
        theta: None,
        norm_change: None,
        values: rows.into_iter().flatten().collect(),
    })
}

/// Multiplies `w` by `θ(r, s)` and records the relative L² change; fails
/// with a localization error when it exceeds `max_change`.
pub fn cutoff_localize(mode: &Mode2D, curve: &MeridianCurve, c_loc: f64, max_change: f64) -> Result<Mode2D> {
    if !(c_loc > 0.0) {
        return Err(Error::Domain(format!("C_loc must be positive, got {c_loc}")));
    }
    let h = mode.spectral.h;
    let theta = ThetaCutoff { c_loc, h };
    let g = *mode.grid();
    let kappa: Vec<f64> = (0..g.n).map(|j| curve.kappa(g.node(j))).collect();
    if h.sqrt() * c_loc >= 1.0 {
        return Err(Error::Domain(format!("√h·C_loc = {} reaches the focal distance", h.sqrt() * c_loc)));
    }
    let before = mode.norm();
    let mut out = mode.clone();
    for i in 0..mode.rows() {
        let r = h * i as f64 * mode.drho;
        for j in 0..g.n {
            out.values[i * g.n + j] *= theta.eval(r, kappa[j]);
        }
    }
    let after = out.norm();
    let change = (before - after).abs() / before;
    out.kappa = kappa;
    out.theta = Some(theta);
    out.norm_change = Some(change);
    if change > max_change {
        return Err(Error::LocalizationFailure { change, limit: max_change });
    }
    Ok(out)
}

/// `u = e^{inα} w̃(r/h, s) / √((1 − rk)X) / √(2πh)` inside the chart region;
/// the last factor makes `‖u‖_{L²(T)} = ‖w̃‖_{L²(Π)}`.
#[derive(Debug, Clone)]
pub struct Mode3D {
    pub n: i64,
    pub mode2d: Arc<Mode2D>,
    pub curve: Arc<MeridianCurve>,
}

pub fn build_mode3d(curve: Arc<MeridianCurve>, mode2d: Arc<Mode2D>, n: i64) -> Result<Mode3D> {
    if mode2d.theta.is_none() {
        return Err(Error::Domain("the 3-D lift needs the localized mode (apply cutoff_localize first)".into()));
    }
    Ok(Mode3D { n, mode2d, curve })
}

impl Mode3D {
    /// `u` at chart coordinates.
    pub fn u_chart(&self, r: f64, s: f64, alpha: f64) -> Complex64 {
        if r < 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let p = self.curve.eval_chart(r, s);
        if !p.valid || p.jacobian <= 0.0 {
            return Complex64::new(0.0, 0.0);
        }
        let h = self.mode2d.spectral.h;
        let w = self.mode2d.eval(r / h, s);
        w * Complex64::from_polar(1.0 / (p.jacobian * 2.0 * PI * h).sqrt(), self.n as f64 * alpha)
    }

    /// `u` at a Cartesian point; zero outside the chart region.
    pub fn u(&self, x: f64, y: f64, z: f64) -> Complex64 {
        let xi = x.hypot(y);
        let alpha = x.atan2(y);
        match self.curve.invert_chart(xi, z) {
            Ok((r, s)) => self.u_chart(r, s, alpha),
            Err(_) => Complex64::new(0.0, 0.0),
        }
    }
}

/// Chart-coordinate quadrature grid for 3-D inner products.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChartGrid {
    pub r_nodes: usize,
    pub s_nodes: usize,
    pub alpha_nodes: usize,
}

impl Default for ChartGrid {
    fn default() -> Self {
        Self { r_nodes: 192, s_nodes: 512, alpha_nodes: 16 }
    }
}

/// `⟨u₁, u₂⟩_{L²(T)}` by the midpoint rule in `(r, s, α)` with Jacobian
/// `(1 − rk)X`. Each `(r, s)` node is mapped to Cartesian coordinates and
/// both modes are evaluated there through the inverse chart.
pub fn inner_product_3d(u1: &Mode3D, u2: &Mode3D, grid: ChartGrid, exec: Exec) -> Complex64 {
    let g1 = u1.mode2d.grid();
    let g2 = u2.mode2d.grid();
    let (s_lo, s_hi) = match (g1.period, g2.period) {
        (Some(p), _) | (_, Some(p)) => (0.0, p),
        _ => (g1.start.min(g2.start), g1.end().max(g2.end())),
    };
    let h = u1.mode2d.spectral.h.max(u2.mode2d.spectral.h);
    let r_max = h * u1.mode2d.rho_max().max(u2.mode2d.rho_max());
    let dr = r_max / grid.r_nodes as f64;
    let ds = (s_hi - s_lo) / grid.s_nodes as f64;
    let da = 2.0 * PI / grid.alpha_nodes as f64;
    let curve = &u1.curve;
    let rows = map_range(grid.s_nodes, exec, |j| {
        let s = s_lo + (j as f64 + 0.5) * ds;
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..grid.r_nodes {
            let r = (i as f64 + 0.5) * dr;
            let p = curve.eval_chart(r, s);
            if !p.valid || p.jacobian <= 0.0 {
                continue;
            }
            let (a, b) = (u1.u(0.0, p.x, p.z), u2.u(0.0, p.x, p.z));
            if a == Complex64::new(0.0, 0.0) && b == Complex64::new(0.0, 0.0) {
                continue;
            }
            let mut ang = Complex64::new(0.0, 0.0);
            for l in 0..grid.alpha_nodes {
                let al = l as f64 * da;
                ang += Complex64::from_polar(1.0, (u1.n - u2.n) as f64 * al);
            }
            acc += a * b.conj() * ang * da * p.jacobian;
        }
        acc * dr * ds
    });
    rows.into_iter().sum()
}

/// `ρ_c(s) = t_k/𝒜(s; ℰ²)` and `r_c = h ρ_c` on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Caustic {
    pub t_k: f64,
    pub h: f64,
    pub s: Vec<f64>,
    pub rho_c: Vec<f64>,
    pub r_c: Vec<f64>,
}

pub fn caustic_curve<M: Longitudinal + ?Sized>(
    model: &M,
    spectral: &SpectralData,
    range: (f64, f64),
    samples: usize,
) -> Result<Caustic> {
    let n = samples.max(2);
    let mut s = Vec::with_capacity(n);
    let mut rho_c = Vec::with_capacity(n);
    for i in 0..n {
        let x = range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64;
        let a = stability_a(model, x, spectral.curly_e2)?;
        s.push(x);
        rho_c.push(spectral.t_k / a);
    }
    let r_c = rho_c.iter().map(|r| r * spectral.h).collect();
    Ok(Caustic { t_k: spectral.t_k, h: spectral.h, s, rho_c, r_c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_curve, triangle_profile};
    use crate::semiclassics::{assemble_spectrum, ConstantCoefficients, RegimeChoice, Torus};
    use std::f64::consts::TAU;

    fn example() -> (Torus, ScaleParams, SpectralData) {
        let curve = Arc::new(build_curve(triangle_profile(0.4, TAU).unwrap(), 3.0).unwrap());
        let scale = ScaleParams::from_h(0.015, 1500).unwrap();
        let t = Torus::new(curve, &scale);
        let idx = ModeIndices::new(1500, 2, 5).unwrap();
        let d = assemble_spectrum(&t, &scale, &idx, RegimeChoice::Auto).unwrap();
        (t, scale, d)
    }

    #[test]
    fn smooth_step_limits() {
        assert_eq!(smooth_step(-1.0), 0.0);
        assert_eq!(smooth_step(2.0), 1.0);
        assert!((smooth_step(0.5) - 0.5).abs() < 1e-15);
        assert!((smooth_step(0.3) + smooth_step(0.7) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn extension_coefficients_for_three() {
        let c = extension_coefficients(3).unwrap();
        assert!((c[0] - 6.0).abs() < 1e-12 && (c[1] + 8.0).abs() < 1e-12 && (c[2] - 3.0).abs() < 1e-12);
        for p in 0..3 {
            let m: f64 = c.iter().enumerate().map(|(j, cj)| cj * (-((j + 1) as f64)).powi(p)).sum();
            assert!((m - 1.0).abs() < 1e-12);
        }
        assert!(extension_coefficients(0).is_err());
    }

    #[test]
    fn extension_reproduces_quadratics() {
        let c = extension_coefficients(3).unwrap();
        let tp = 1.0;
        let v = extend_beyond_turning(|_| 1.0, tp, 1.1, &c, (0.0, 1.0)).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        for &s in &[1.01, 1.05, 1.2] {
            let v = extend_beyond_turning(|x| (x - tp).powi(2), tp, s, &c, (0.0, 1.0)).unwrap();
            assert!((v - (s - tp).powi(2)).abs() < 1e-12);
        }
        assert!(matches!(
            extend_beyond_turning(|x| x, tp, 1.5, &c, (0.0, 1.0)),
            Err(Error::CollarTooWide { .. })
        ));
    }

    #[test]
    fn interpolation_is_high_order() {
        let g = SGrid { start: 0.0, ds: TAU / 256.0, n: 256, period: Some(TAU) };
        let v: Vec<f64> = g.nodes().iter().map(|s| s.sin()).collect();
        for &s in &[0.001, 1.234, 6.2, 7.5] {
            assert!((g.interpolate(&v, s) - s.sin()).abs() < 1e-10);
        }
        let d = g.derivative(&v);
        assert!(d.iter().zip(g.nodes()).all(|(d, s)| (d - s.cos()).abs() < 1e-7));
    }

    #[test]
    fn airy_mode_of_example() {
        let (t, _, d) = example();
        let br = AiryBranches::new(&t, &d, 3).unwrap();
        assert!(br.phase_total().abs() < 1e-8);
        assert!((br.quantum_number() - 5.5).abs() < 1e-9);
        assert_eq!(br.zero_count(Side::Plus, 4000).unwrap(), 5);
        assert_eq!(br.zero_count(Side::Minus, 4000).unwrap(), 5);
        let s_mid = 0.5 * (br.s_minus + br.s_plus);
        assert!((br.g1(Side::Minus, s_mid) - br.g1(Side::Plus, s_mid)).abs() < 1e-6);
        // Φ changes sign across each turning point
        assert!(br.phi(Side::Plus, br.s_plus + 0.01).unwrap() < 0.0);
        assert!(br.phi(Side::Plus, br.s_plus - 0.01).unwrap() > 0.0);
        assert!(br.phi(Side::Minus, br.s_minus - 0.01).unwrap() < 0.0);
        let m = assemble_psi(&t, &d, &ModeOptions::default()).unwrap();
        assert!((m.norm() - 1.0).abs() < 1e-12);
        let (lo, hi) = d.turning().unwrap();
        assert_eq!(m.zero_count(lo, hi), 5);
        let z = m.zeta.unwrap();
        for j in 0..m.grid.n {
            let s = m.grid.node(j);
            if s < z.lo - z.width || s > z.hi + z.width {
                assert_eq!(m.values[j].norm(), 0.0);
            }
        }
    }

    #[test]
    fn wkb_mode_on_constant_coefficients_is_a_plane_wave() {
        let c = ConstantCoefficients::circle_equator(3.0, 2.0);
        let scale = ScaleParams::from_epsilon(0.01, 200).unwrap();
        let idx = ModeIndices::new(200, 1, 3).unwrap();
        let d = assemble_spectrum(&c, &scale, &idx, RegimeChoice::Auto).unwrap();
        let m = wkb_mode(&c, &d, &ModeOptions { s_nodes: 512, ..Default::default() }).unwrap();
        let amp = 1.0 / TAU.sqrt();
        for j in (0..512).step_by(37) {
            let s = m.grid.node(j);
            let expect = Complex64::from_polar(amp, 3.0 * s);
            assert!((m.values[j] - expect).norm() < 1e-10);
        }
        assert!(assemble_psi(&c, &d, &ModeOptions::default()).is_err());
    }

    #[test]
    fn parabolic_ground_state_has_no_zeros() {
        let (t, scale, _) = example();
        for m in [0u32, 3] {
            let idx = ModeIndices::new(1500, 2, m).unwrap();
            let (mode, spec) = parabolic_mode(&t, &scale, &idx, &ModeOptions::default()).unwrap();
            assert!((mode.norm() - 1.0).abs() < 1e-12);
            assert_eq!(mode.zero_count(f64::NEG_INFINITY, f64::INFINITY), m as usize);
            assert!(spec.e2 > 0.30);
        }
    }

    #[test]
    fn chi_is_normalized() {
        for &(a, k) in &[(0.5, 1), (1.3, 2), (2.0, 4)] {
            let t = crate::specfun::airy_negative_root(k).unwrap().t_k;
            assert!((chi_normalization(a, t).unwrap() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn mode2d_dirichlet_decay_and_norm() {
        let (t, _, d) = example();
        let opts = ModeOptions { s_nodes: 1024, rho_nodes: 384, ..Default::default() };
        let m1 = assemble_psi(&t, &d, &opts).unwrap();
        let w = build_mode2d(&t, &d, &m1, &opts).unwrap();
        let g = *w.grid();
        let max = w.values.iter().fold(0.0f64, |m, v| m.max(v.norm()));
        for j in 0..g.n {
            assert!(w.at(0, j).norm() < 1e-12 * max);
            assert!(w.at(w.rho_nodes, j).norm() < 1e-8);
        }
        assert!((w.norm() - 1.0).abs() <= 5.0 * d.h);
        let j = (0..g.n).min_by(|&a, &b| (g.node(a) - 3.9).abs().total_cmp(&(g.node(b) - 3.9).abs())).unwrap();
        assert_eq!(w.transverse_zero_count(j), 1);
        let p = w.eval(w.drho * 10.0, g.node(j));
        assert!((p - w.at(10, j)).norm() < 1e-8 * (1.0 + p.norm()));
        let wt = cutoff_localize(&w, &t.curve, DEFAULT_C_LOC, 1e-6).unwrap();
        assert!(wt.norm_change.unwrap() <= 1e-6);
        assert!(matches!(cutoff_localize(&w, &t.curve, 0.05, 1e-6), Err(Error::LocalizationFailure { .. })));
    }

    #[test]
    fn caustic_scales_with_root() {
        let (t, _, d) = example();
        let c2 = caustic_curve(&t, &d, (3.8, 4.2), 17).unwrap();
        let mut d1 = d.clone();
        d1.t_k = crate::specfun::airy_negative_root(1).unwrap().t_k;
        let c1 = caustic_curve(&t, &d1, (3.8, 4.2), 17).unwrap();
        for i in 0..17 {
            assert!((c2.r_c[i] / c1.r_c[i] - d.t_k / d1.t_k).abs() < 1e-12);
            assert!(c2.r_c[i] > 0.0 && c2.r_c[i] < 0.3);
        }
    }
}
