//! Effective potential, stability function `𝒜`, turning points, the two
//! quantization rules, the correction `E₁` and the assembled spectral
//! parameter `ℰ² = E² + h t_k E₁`.
//!
//! Everything here is written against the [`Longitudinal`] trait so that the
//! same solvers run on the torus and on constant-coefficient reference
//! problems.

use crate::geometry::MeridianCurve;
use crate::quad::{adaptive, bisect, gl10_panel};
use crate::specfun::airy_negative_root;
use crate::{Error, Result};
use serde::Serialize;
use std::f64::consts::PI;
use std::sync::Arc;

/// Grid used to scan `V` for sign changes.
pub const SCAN_NODES: usize = 4096;

const INTEGRAL_TOL: f64 = 1e-15;

/// Coefficients of the longitudinal problem
/// `−ε²ψ″ + (U(s) − E²)ψ + h t_k 𝒜²(s; E²)ψ`.
pub trait Longitudinal: Send + Sync {
    /// Period `L` in `s`.
    fn period(&self) -> f64;
    /// `U(s) = a_n²/X²(0, s)`.
    fn u(&self, s: f64) -> f64;
    fn u_prime(&self, s: f64) -> f64;
    /// `𝒜³(s; E²)`.
    fn a3(&self, s: f64, e2: f64) -> f64;
    /// `∂ₛ𝒜³(s; E²)`.
    fn a3_prime(&self, s: f64, e2: f64) -> f64;
}

/// The torus seen through its meridian curve and `a_n`.
#[derive(Debug, Clone)]
pub struct Torus {
    pub curve: Arc<MeridianCurve>,
    pub a_n: f64,
}

impl Torus {
    pub fn new(curve: Arc<MeridianCurve>, scale: &ScaleParams) -> Self {
        Self { curve, a_n: scale.a_n }
    }

    /// Same curve, different `a_n`.
    pub fn with_a_n(&self, a_n: f64) -> Self {
        Self { curve: Arc::clone(&self.curve), a_n }
    }
}

impl Longitudinal for Torus {
    fn period(&self) -> f64 {
        self.curve.length()
    }

    fn u(&self, s: f64) -> f64 {
        let x = self.curve.x0(s);
        self.a_n * self.a_n / (x * x)
    }

    fn u_prime(&self, s: f64) -> f64 {
        let x = self.curve.x0(s);
        -2.0 * self.a_n * self.a_n * self.curve.q1_prime(s) / (x * x * x)
    }

    fn a3(&self, s: f64, e2: f64) -> f64 {
        let x = self.curve.x0(s);
        let an2 = self.a_n * self.a_n;
        let v = an2 / (x * x) - e2;
        2.0 * an2 * self.curve.q2_prime(s) / (x * x * x) - 2.0 * self.curve.kappa(s) * v
    }

    fn a3_prime(&self, s: f64, e2: f64) -> f64 {
        let x = self.curve.x0(s);
        let an2 = self.a_n * self.a_n;
        let (q1p, q2p) = self.curve.tangent(s);
        let (_, q2pp) = self.curve.second_derivative(s);
        let v = an2 / (x * x) - e2;
        let vp = -2.0 * an2 * q1p / (x * x * x);
        2.0 * an2 * (q2pp / x.powi(3) - 3.0 * q2p * q1p / x.powi(4))
            - 2.0 * self.curve.kappa_prime(s) * v
            - 2.0 * self.curve.kappa(s) * vp
    }
}

/// Constant `U ≡ u0` and `𝒜³ ≡ a3` on a period `length`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantCoefficients {
    pub length: f64,
    pub u0: f64,
    pub a3: f64,
}

impl ConstantCoefficients {
    /// The equatorial values of a circular meridian of radius 1 centred at
    /// distance `radius + 1` from the axis: `U₀ = a_n²/(R+1)²`,
    /// `𝒜³ = 2a_n²/(R+1)³`.
    pub fn circle_equator(radius: f64, a_n: f64) -> Self {
        let x = radius + 1.0;
        Self { length: 2.0 * PI, u0: a_n * a_n / (x * x), a3: 2.0 * a_n * a_n / (x * x * x) }
    }
}

impl Longitudinal for ConstantCoefficients {
    fn period(&self) -> f64 {
        self.length
    }
    fn u(&self, _s: f64) -> f64 {
        self.u0
    }
    fn u_prime(&self, _s: f64) -> f64 {
        0.0
    }
    fn a3(&self, _s: f64, _e2: f64) -> f64 {
        self.a3
    }
    fn a3_prime(&self, _s: f64, _e2: f64) -> f64 {
        0.0
    }
}

/// `(n, k, m)`: angular, transverse (Airy root) and longitudinal indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModeIndices {
    pub n: u32,
    pub k: u32,
    pub m: u32,
}

impl ModeIndices {
    pub fn new(n: u32, k: u32, m: u32) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::Domain(format!("n and k must be positive, got n = {n}, k = {k}")));
        }
        Ok(Self { n, k, m })
    }
}

/// `ε`, `h = ε^{2/3}` and `a_n = nε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaleParams {
    pub epsilon: f64,
    pub h: f64,
    pub n: u32,
    pub a_n: f64,
}

/// Default admissible range of `a_n/R`.
pub const A_N_RATIO_BOUNDS: (f64, f64) = (0.05, 20.0);

impl ScaleParams {
    pub fn from_h(h: f64, n: u32) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Domain(format!("h must be positive, got {h}")));
        }
        Self::from_epsilon(h.powf(1.5), n).map(|mut s| {
            s.h = h;
            s
        })
    }

    pub fn from_epsilon(epsilon: f64, n: u32) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
        }
        if n == 0 {
            return Err(Error::Domain("n must be positive".into()));
        }
        Ok(Self { epsilon, h: epsilon.powf(2.0 / 3.0), n, a_n: n as f64 * epsilon })
    }

    /// Scale at `h` with `n = round(a_n/ε)`, keeping `a_n` as close to the
    /// target as an integer `n` allows.
    pub fn with_fixed_a_n(h: f64, a_n: f64) -> Result<Self> {
        let eps = h.powf(1.5);
        let n = (a_n / eps).round();
        if !(n >= 1.0 && n <= u32::MAX as f64) {
            return Err(Error::Domain(format!("a_n = {a_n} gives no admissible n at h = {h}")));
        }
        Self::from_h(h, n as u32)
    }

    /// Warning text when `a_n/R` leaves `bounds`.
    pub fn ratio_warning(&self, radius: f64, bounds: (f64, f64)) -> Option<String> {
        let r = self.a_n / radius;
        (r < bounds.0 || r > bounds.1).then(|| format!("a_n/R = {r:.4} outside [{}, {}]", bounds.0, bounds.1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Regime {
    NoTurningPoints,
    TwoTurningPoints,
}

/// How [`assemble_spectrum`] picks the quantization rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeChoice {
    /// Bohr–Sommerfeld if it has a solution, otherwise the periodic rule.
    #[default]
    Auto,
    Periodic,
    Turning,
    Parabolic,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralData {
    pub n: u32,
    pub k: u32,
    pub m: u32,
    pub epsilon: f64,
    pub h: f64,
    #[serde(rename = "E2")]
    pub e2: f64,
    #[serde(rename = "E1")]
    pub e1: f64,
    pub t_k: f64,
    #[serde(rename = "curlyE2")]
    pub curly_e2: f64,
    pub lambda2: f64,
    pub regime: Regime,
    pub s_minus: Option<f64>,
    pub s_plus: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SpectralData {
    /// `h t_k E₁`.
    pub fn correction(&self) -> f64 {
        self.h * self.t_k * self.e1
    }

    pub fn lambda(&self) -> f64 {
        self.lambda2.sqrt()
    }

    /// `(s_−, s_+)` in the turning-point regime.
    pub fn turning(&self) -> Option<(f64, f64)> {
        self.s_minus.zip(self.s_plus)
    }
}

/// `V = U − E²`.
pub fn potential_v<M: Longitudinal + ?Sized>(model: &M, s: f64, e2: f64) -> f64 {
    model.u(s) - e2
}

/// `𝒜(s; E²) = (𝒜³)^{1/3}`, rejecting non-positive `𝒜³`.
pub fn stability_a<M: Longitudinal + ?Sized>(model: &M, s: f64, e2: f64) -> Result<f64> {
    let a3 = model.a3(s, e2);
    if a3 > 0.0 {
        Ok(a3.cbrt())
    } else {
        Err(Error::StabilityViolation { s, value: a3 })
    }
}

/// `U` sampled on [`SCAN_NODES`] uniform nodes.
#[derive(Debug, Clone)]
pub struct PotentialScan {
    pub s: Vec<f64>,
    pub u: Vec<f64>,
}

impl PotentialScan {
    pub fn new<M: Longitudinal + ?Sized>(model: &M) -> Self {
        let ds = model.period() / SCAN_NODES as f64;
        let s: Vec<f64> = (0..SCAN_NODES).map(|i| i as f64 * ds).collect();
        let u = s.iter().map(|&x| model.u(x)).collect();
        Self { s, u }
    }

    pub fn min(&self) -> (f64, f64) {
        let (i, u) = self.u.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty");
        (self.s[i], *u)
    }

    pub fn max(&self) -> (f64, f64) {
        let (i, u) = self.u.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty");
        (self.s[i], *u)
    }
}

/// Classification of `V(·; E²)` on a period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TurningPoints {
    /// `V < 0` everywhere.
    None,
    /// `V < 0` exactly on `(s_−, s_+)`; `s_+` may exceed `L` when the well
    /// wraps around `s = 0`.
    Two(f64, f64),
}

impl TurningPoints {
    pub fn regime(&self) -> Regime {
        match self {
            TurningPoints::None => Regime::NoTurningPoints,
            TurningPoints::Two(..) => Regime::TwoTurningPoints,
        }
    }
}

/// Sign scan on [`SCAN_NODES`] nodes plus bisection.
pub fn turning_points<M: Longitudinal + ?Sized>(model: &M, e2: f64) -> Result<TurningPoints> {
    turning_points_scanned(model, &PotentialScan::new(model), e2)
}

pub fn turning_points_scanned<M: Longitudinal + ?Sized>(
    model: &M,
    scan: &PotentialScan,
    e2: f64,
) -> Result<TurningPoints> {
    let n = scan.s.len();
    let len = model.period();
    let ds = len / n as f64;
    let allowed = |i: usize| scan.u[i % n] - e2 < 0.0;
    let mut entering = Vec::new();
    let mut leaving = Vec::new();
    for i in 0..n {
        match (allowed(i), allowed(i + 1)) {
            (false, true) => entering.push(i),
            (true, false) => leaving.push(i),
            _ => {}
        }
    }
    let count = entering.len() + leaving.len();
    if count == 0 {
        return if allowed(0) {
            Ok(TurningPoints::None)
        } else {
            Err(Error::NoMode(format!("V > 0 everywhere at E2 = {e2}")))
        };
    }
    if count > 2 {
        return Err(Error::UnsupportedRegime(format!("{count} turning points at E2 = {e2}")));
    }
    let refine = |i: usize| {
        let lo = i as f64 * ds;
        bisect(|s| model.u(s) - e2, lo, lo + ds, 0.0)
    };
    let s_minus = refine(entering[0])?;
    let mut s_plus = refine(leaving[0])?;
    if s_plus < s_minus {
        s_plus += len;
    }
    Ok(TurningPoints::Two(s_minus, s_plus))
}

/// `∫_{lo}^{hi} g(s) ds` for integrands with inverse square-root or square-root
/// behaviour at both ends, via `s = lo + c(1 − cos θ)`. The transformed
/// integrand is smooth, so composite Gauss–Legendre panels are doubled until
/// two successive sums agree. Rounding of `s` next to the endpoints limits
/// inverse square-root weights to about 1e−11 relative accuracy.
pub fn well_integral<F: Fn(f64) -> f64>(g: F, lo: f64, hi: f64) -> Result<f64> {
    let c = 0.5 * (hi - lo);
    let f = |t: f64| {
        let sh = (0.5 * t).sin();
        g(lo + 2.0 * c * sh * sh) * c * t.sin()
    };
    let sum = |panels: usize| {
        let w = PI / panels as f64;
        (0..panels).map(|i| gl10_panel(&f, i as f64 * w, (i + 1) as f64 * w)).sum::<f64>()
    };
    let mut panels = 8;
    let mut prev = sum(panels);
    let mut diff = f64::INFINITY;
    while panels < 1024 {
        panels *= 2;
        let next = sum(panels);
        diff = (next - prev).abs();
        prev = next;
        if diff <= 1e-12 * next.abs() {
            return Ok(next);
        }
    }
    if diff <= 1e-9 * prev.abs() {
        Ok(prev)
    } else {
        Err(Error::Quadrature { estimate: diff })
    }
}

/// `∫_{s_−}^{s_+} √|V(s; E²)| ds`.
pub fn well_action<M: Longitudinal + ?Sized>(model: &M, e2: f64, lo: f64, hi: f64) -> Result<f64> {
    well_integral(|s| (e2 - model.u(s)).max(0.0).sqrt(), lo, hi)
}

/// `∫₀^L √(E² − U)`.
pub fn period_action<M: Longitudinal + ?Sized>(model: &M, e2: f64) -> Result<f64> {
    adaptive(|s| (e2 - model.u(s)).max(0.0).sqrt(), 0.0, model.period(), INTEGRAL_TOL, 1e-14)
}

/// Solves `(1/επ)∫_{s_−}^{s_+}√|V| = m + ½` for `E²`.
pub fn solve_bohr_sommerfeld<M: Longitudinal + ?Sized>(model: &M, scale: &ScaleParams, idx: &ModeIndices) -> Result<f64> {
    let scan = PotentialScan::new(model);
    let (_, umin) = scan.min();
    let (_, umax) = scan.max();
    if umax - umin <= 0.0 {
        return Err(Error::NoMode("potential has no well".into()));
    }
    let d0 = 1e-9 * (umax - umin);
    let target = (idx.m as f64 + 0.5) * scale.epsilon * PI;
    let defect = |e2: f64| -> Result<f64> {
        match turning_points_scanned(model, &scan, e2)? {
            TurningPoints::Two(lo, hi) => Ok(well_action(model, e2, lo, hi)? - target),
            TurningPoints::None => Err(Error::Regime("no turning points inside the bracket".into())),
        }
    };
    let (mut lo, mut hi) = (umin + d0, umax - d0);
    let (flo, fhi) = (defect(lo)?, defect(hi)?);
    if flo > 0.0 || fhi < 0.0 {
        return Err(Error::NoMode(format!("Bohr–Sommerfeld has no root for m = {} in [{lo}, {hi}]", idx.m)));
    }
    while hi - lo > 1e-13 * hi.abs() {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if defect(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Solves `∫₀^L √(E² − U) = 2πmε` for `E² ≥ max U`.
pub fn solve_periodic_quantization<M: Longitudinal + ?Sized>(
    model: &M,
    scale: &ScaleParams,
    idx: &ModeIndices,
) -> Result<f64> {
    let scan = PotentialScan::new(model);
    let (smax, _) = scan.max();
    // refine max U on the grid neighbourhood
    let ds = model.period() / SCAN_NODES as f64;
    let umax = golden_max(|s| model.u(s), smax - ds, smax + ds).max(scan.max().1);
    let target = 2.0 * PI * idx.m as f64 * scale.epsilon;
    let len = model.period();
    let base = period_action(model, umax)?;
    if base > target {
        return Err(Error::Regime(format!(
            "periodic rule needs action {target:.3e} below the separatrix value {base:.3e}; use Bohr–Sommerfeld"
        )));
    }
    let mut hi = umax + (target / len).powi(2) + 1e-12;
    while period_action(model, hi)? < target {
        hi = umax + 2.0 * (hi - umax);
    }
    let mut lo = umax;
    while hi - lo > 1e-15 * hi.abs() {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if period_action(model, mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn golden_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    for _ in 0..80 {
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    f(0.5 * (a + b))
}

/// Location and value of the minimum of `U`, refined by golden section.
pub fn potential_minimum<M: Longitudinal + ?Sized>(model: &M) -> (f64, f64) {
    let scan = PotentialScan::new(model);
    let (s0, _) = scan.min();
    let ds = model.period() / SCAN_NODES as f64;
    let (mut a, mut b) = (s0 - ds, s0 + ds);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if model.u(c) < model.u(d) {
            b = d;
        } else {
            a = c;
        }
    }
    // polish with Newton on U′ when it is well conditioned
    let mut s = 0.5 * (a + b);
    for _ in 0..5 {
        let e = 1e-5;
        let upp = (model.u_prime(s + e) - model.u_prime(s - e)) / (2.0 * e);
        if upp <= 0.0 {
            break;
        }
        let step = model.u_prime(s) / upp;
        if step.abs() > ds {
            break;
        }
        s -= step;
    }
    (s.rem_euclid(model.period()), model.u(s))
}

/// `E₁ = ⟨𝒜²⟩` weighted by `1/√|V|` over the well or the period.
pub fn correction_e1<M: Longitudinal + ?Sized>(model: &M, e2: f64, tp: TurningPoints) -> Result<f64> {
    let check = |s: f64| stability_a(model, s, e2).map(|a| a * a);
    // surface stability errors before integrating
    let (lo, hi) = match tp {
        TurningPoints::Two(lo, hi) => (lo, hi),
        TurningPoints::None => (0.0, model.period()),
    };
    for i in 0..=256 {
        check(lo + (hi - lo) * i as f64 / 256.0)?;
    }
    let a2 = |s: f64| model.a3(s, e2).max(0.0).powf(2.0 / 3.0);
    let w = |s: f64| 1.0 / (e2 - model.u(s)).abs().sqrt();
    let (num, den) = match tp {
        TurningPoints::Two(lo, hi) => (well_integral(|s| a2(s) * w(s), lo, hi)?, well_integral(w, lo, hi)?),
        TurningPoints::None => {
            let len = model.period();
            (
                adaptive(|s| a2(s) * w(s), 0.0, len, INTEGRAL_TOL, 1e-14)?,
                adaptive(w, 0.0, len, INTEGRAL_TOL, 1e-14)?,
            )
        }
    };
    Ok(num / den)
}

/// Harmonic data at the bottom of the well: `s₀`, `U(s₀)` and
/// `β = U″(s₀)/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WellBottom {
    pub s0: f64,
    pub u0: f64,
    pub beta: f64,
}

pub fn well_bottom<M: Longitudinal + ?Sized>(model: &M) -> Result<WellBottom> {
    let (s0, u0) = potential_minimum(model);
    let e = 1e-4;
    let upp = (-model.u_prime(s0 + 2.0 * e) + 8.0 * model.u_prime(s0 + e) - 8.0 * model.u_prime(s0 - e)
        + model.u_prime(s0 - 2.0 * e))
        / (12.0 * e);
    if !(upp > 0.0) {
        return Err(Error::GeometryAssumption(format!("U″(s0) = {upp} is not positive")));
    }
    Ok(WellBottom { s0, u0, beta: 0.5 * upp })
}

/// Parabolic-cylinder spectral data: `E² = U(s₀) + ε(m+½)2√β`,
/// `E₁ = 𝒜²(s₀; E²)`.
pub fn parabolic_spectrum<M: Longitudinal + ?Sized>(
    model: &M,
    scale: &ScaleParams,
    idx: &ModeIndices,
) -> Result<(SpectralData, WellBottom)> {
    let wb = well_bottom(model)?;
    let e2 = wb.u0 + scale.epsilon * (idx.m as f64 + 0.5) * 2.0 * wb.beta.sqrt();
    let a = stability_a(model, wb.s0, e2)
        .map_err(|_| Error::GeometryAssumption(format!("𝒜³ ≤ 0 at the well bottom s0 = {}", wb.s0)))?;
    let e1 = a * a;
    let t_k = airy_negative_root(idx.k as i64)?.t_k;
    let mut data = finish(scale, idx, e2, e1, t_k, turning_points(model, e2)?);
    if let Some((lo, hi)) = data.turning() {
        let half = 0.5 * (hi - lo);
        if half > 5.0 * scale.h.sqrt() {
            data.warnings.push(format!("turning-point half width {half:.4} exceeds 5√h"));
        }
    }
    Ok((data, wb))
}

fn finish(scale: &ScaleParams, idx: &ModeIndices, e2: f64, e1: f64, t_k: f64, tp: TurningPoints) -> SpectralData {
    let curly = e2 + scale.h * t_k * e1;
    let (s_minus, s_plus) = match tp {
        TurningPoints::Two(a, b) => (Some(a), Some(b)),
        TurningPoints::None => (None, None),
    };
    SpectralData {
        n: idx.n,
        k: idx.k,
        m: idx.m,
        epsilon: scale.epsilon,
        h: scale.h,
        e2,
        e1,
        t_k,
        curly_e2: curly,
        lambda2: curly / (scale.epsilon * scale.epsilon),
        regime: tp.regime(),
        s_minus,
        s_plus,
        warnings: Vec::new(),
    }
}

/// Solves the quantization rule selected by `choice`, computes `E₁` and
/// `t_k`, and checks the stability condition at `ℰ²`.
pub fn assemble_spectrum<M: Longitudinal + ?Sized>(
    model: &M,
    scale: &ScaleParams,
    idx: &ModeIndices,
    choice: RegimeChoice,
) -> Result<SpectralData> {
    if choice == RegimeChoice::Parabolic {
        let (data, _) = parabolic_spectrum(model, scale, idx)?;
        check_stability(model, &data)?;
        return Ok(data);
    }
    let e2 = match choice {
        RegimeChoice::Turning => solve_bohr_sommerfeld(model, scale, idx)?,
        RegimeChoice::Periodic => solve_periodic_quantization(model, scale, idx)?,
        _ => match solve_bohr_sommerfeld(model, scale, idx) {
            Ok(e) => e,
            Err(Error::NoMode(_)) => solve_periodic_quantization(model, scale, idx)?,
            Err(e) => return Err(e),
        },
    };
    let tp = turning_points(model, e2)?;
    let e1 = correction_e1(model, e2, tp)?;
    let t_k = airy_negative_root(idx.k as i64)?.t_k;
    let data = finish(scale, idx, e2, e1, t_k, tp);
    check_stability(model, &data)?;
    Ok(data)
}

fn check_stability<M: Longitudinal + ?Sized>(model: &M, data: &SpectralData) -> Result<()> {
    let (lo, hi) = data.turning().unwrap_or((0.0, model.period()));
    for i in 0..=512 {
        stability_a(model, lo + (hi - lo) * i as f64 / 512.0, data.curly_e2)?;
    }
    Ok(())
}

/// `(1/π)∫_{s_−}^{s_+}√(E² − U)`, the longitudinal action.
pub fn action<M: Longitudinal + ?Sized>(model: &M, e2: f64) -> Result<f64> {
    match turning_points(model, e2)? {
        TurningPoints::Two(lo, hi) => Ok(well_action(model, e2, lo, hi)? / PI),
        TurningPoints::None => Err(Error::Regime(format!("no turning points at E2 = {e2}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_curve, triangle_profile, unit_circle_profile};
    use std::f64::consts::TAU;

    /// `U = u0 + β(s − L/2)²` on a long period, with constant `𝒜³`.
    struct Harmonic {
        beta: f64,
    }

    impl Longitudinal for Harmonic {
        fn period(&self) -> f64 {
            20.0
        }
        fn u(&self, s: f64) -> f64 {
            let x = s.rem_euclid(20.0) - 10.0;
            1.0 + self.beta * x * x
        }
        fn u_prime(&self, s: f64) -> f64 {
            2.0 * self.beta * (s.rem_euclid(20.0) - 10.0)
        }
        fn a3(&self, _s: f64, _e2: f64) -> f64 {
            8.0
        }
        fn a3_prime(&self, _s: f64, _e2: f64) -> f64 {
            0.0
        }
    }

    fn example() -> (Torus, ScaleParams, ModeIndices) {
        let curve = Arc::new(build_curve(triangle_profile(0.4, TAU).unwrap(), 3.0).unwrap());
        let scale = ScaleParams::from_h(0.015, 1500).unwrap();
        (Torus::new(curve, &scale), scale, ModeIndices::new(1500, 2, 5).unwrap())
    }

    #[test]
    fn scale_relations() {
        let s = ScaleParams::from_h(0.015, 1500).unwrap();
        assert!((s.epsilon - 0.0018371173070873836).abs() < 1e-15);
        assert!((s.epsilon.powf(2.0 / 3.0) - s.h).abs() < 1e-14);
        assert!((s.a_n - 1500.0 * s.epsilon).abs() < 1e-15);
        assert!(ScaleParams::from_h(-1.0, 1).is_err());
        assert!(ModeIndices::new(0, 1, 0).is_err());
        assert!(s.ratio_warning(3.0, A_N_RATIO_BOUNDS).is_none());
        assert!(s.ratio_warning(1000.0, A_N_RATIO_BOUNDS).is_some());
        let f = ScaleParams::with_fixed_a_n(0.03, s.a_n).unwrap();
        assert!((f.a_n - s.a_n).abs() <= 0.5 * f.epsilon);
    }

    #[test]
    fn potential_is_affine_in_e2() {
        let (t, _, _) = example();
        let v = potential_v(&t, 1.0, 0.3);
        assert!((potential_v(&t, 1.0, 0.4) - (v - 0.1)).abs() < 1e-15);
        let e2 = t.u(2.2);
        assert!(potential_v(&t, 2.2, e2).abs() < 1e-15);
    }

    #[test]
    fn stability_at_turning_point_drops_v_term() {
        let (t, _, _) = example();
        let s = 4.2;
        let e2 = t.u(s);
        let x = t.curve.x0(s);
        let expect = (2.0 * t.a_n.powi(2) * t.curve.q2_prime(s) / x.powi(3)).cbrt();
        assert!((stability_a(&t, s, e2).unwrap() - expect).abs() < 1e-14);
        let bad = ConstantCoefficients { length: 1.0, u0: 0.0, a3: -1.0 };
        assert!(matches!(stability_a(&bad, 0.5, 0.0), Err(Error::StabilityViolation { .. })));
    }

    #[test]
    fn a3_prime_matches_finite_difference() {
        let (t, _, _) = example();
        for &s in &[0.5, 2.0, 3.9, 4.3, 5.5] {
            let e = 1e-5;
            let fd = (t.a3(s + e, 0.32) - t.a3(s - e, 0.32)) / (2.0 * e);
            assert!((fd - t.a3_prime(s, 0.32)).abs() < 1e-6, "s = {s}");
            let fu = (t.u(s + e) - t.u(s - e)) / (2.0 * e);
            assert!((fu - t.u_prime(s)).abs() < 1e-8);
        }
    }

    #[test]
    fn example_spectrum() {
        let (t, scale, idx) = example();
        let d = assemble_spectrum(&t, &scale, &idx, RegimeChoice::Auto).unwrap();
        assert_eq!(d.regime, Regime::TwoTurningPoints);
        let (lo, hi) = d.turning().unwrap();
        assert!((lo - 3.7573).abs() < 2e-3 && (hi - 4.2266).abs() < 2e-3);
        assert!((d.e2 - 0.31169).abs() < 5e-4);
        assert!((d.correction() - 0.01587).abs() < 5e-4);
        assert!((d.curly_e2 - 0.327566).abs() < 5e-4);
        assert!((d.lambda2 - d.curly_e2 / scale.epsilon.powi(2)).abs() < 1e-9 * d.lambda2);
        assert!(potential_v(&t, lo, d.e2).abs() < 1e-10);
        assert!(potential_v(&t, hi, d.e2).abs() < 1e-10);
        assert!(potential_v(&t, 0.5 * (lo + hi), d.e2) < 0.0);
        let i = well_action(&t, d.e2, lo, hi).unwrap() / (scale.epsilon * PI);
        assert!((i - 5.5).abs() < 1e-10);
    }

    #[test]
    fn bohr_sommerfeld_monotone_in_m_and_a_n() {
        let (t, scale, _) = example();
        let e = |m, tor: &Torus| solve_bohr_sommerfeld(tor, &scale, &ModeIndices::new(1500, 2, m).unwrap()).unwrap();
        let (e4, e5) = (e(4, &t), e(5, &t));
        assert!(e5 > e4);
        let bigger = t.with_a_n(t.a_n * 1.01);
        assert!(e(5, &bigger) > e5);
    }

    #[test]
    fn spectral_gap_exceeds_correction() {
        let (t, scale, _) = example();
        let d = |m| assemble_spectrum(&t, &scale, &ModeIndices::new(1500, 2, m).unwrap(), RegimeChoice::Turning).unwrap();
        let (a, b) = (d(5), d(6));
        assert!(b.lambda2 > a.lambda2);
        let gap = (b.e2 - a.e2) / scale.epsilon.powi(2);
        let shift = (b.correction() - a.correction()).abs() / scale.epsilon.powi(2);
        assert!(gap > shift, "gap {gap}, correction shift {shift}");
        // the correction itself is an order larger than the level spacing
        assert!(a.correction() / scale.epsilon.powi(2) > gap);
    }

    #[test]
    fn harmonic_well() {
        let model = Harmonic { beta: 2.0 };
        let scale = ScaleParams::from_epsilon(1e-3, 1).unwrap();
        for m in 0..4 {
            let e2 = solve_bohr_sommerfeld(&model, &scale, &ModeIndices::new(1, 1, m).unwrap()).unwrap();
            let expect = 1.0 + 1e-3 * (m as f64 + 0.5) * 2.0 * 2f64.sqrt();
            assert!((e2 - expect).abs() < 1e-12, "m = {m}: {e2} vs {expect}");
            let i = action(&model, e2).unwrap();
            assert!((i - (e2 - 1.0) / (2.0 * 2f64.sqrt())).abs() < 1e-13);
        }
        let tp = turning_points(&model, 1.5).unwrap();
        let TurningPoints::Two(lo, hi) = tp else { panic!() };
        assert!((lo - (10.0 - 0.5)).abs() < 1e-10 && (hi - 10.5).abs() < 1e-10);
        assert_eq!(turning_points(&model, 1000.0).unwrap(), TurningPoints::None);
        assert!(turning_points(&model, 0.5).is_err());
        let e1 = correction_e1(&model, 1.5, tp).unwrap();
        assert!((e1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn constant_potential_periodic_rule() {
        let c = ConstantCoefficients::circle_equator(3.0, 2.0);
        let scale = ScaleParams::from_epsilon(0.01, 200).unwrap();
        for m in [1, 3, 7] {
            let idx = ModeIndices::new(200, 1, m).unwrap();
            let e2 = solve_periodic_quantization(&c, &scale, &idx).unwrap();
            let expect = c.u0 + (2.0 * PI * m as f64 * 0.01 / c.length).powi(2);
            assert!((e2 - expect).abs() < 1e-13);
            let d = assemble_spectrum(&c, &scale, &idx, RegimeChoice::Auto).unwrap();
            assert_eq!(d.regime, Regime::NoTurningPoints);
            assert!((d.e1 - c.a3.powf(2.0 / 3.0)).abs() < 1e-13);
        }
    }

    #[test]
    fn periodic_rule_on_circle_torus() {
        let curve = Arc::new(build_curve(unit_circle_profile(), 3.0).unwrap());
        let scale = ScaleParams::from_h(0.03, 200).unwrap();
        let t = Torus::new(curve, &scale);
        let idx = ModeIndices::new(200, 1, 400).unwrap();
        let e2 = solve_periodic_quantization(&t, &scale, &idx).unwrap();
        let act = period_action(&t, e2).unwrap();
        assert!((act - 2.0 * PI * 400.0 * scale.epsilon).abs() < 1e-10);
        assert_eq!(turning_points(&t, e2).unwrap(), TurningPoints::None);
        let low = ModeIndices::new(200, 1, 1).unwrap();
        assert!(matches!(solve_periodic_quantization(&t, &scale, &low), Err(Error::Regime(_))));
    }

    #[test]
    fn parabolic_matches_bohr_sommerfeld_at_small_h() {
        let (t, _, _) = example();
        let scale = ScaleParams::with_fixed_a_n(0.005, t.a_n).unwrap();
        let t = t.with_a_n(scale.a_n);
        let idx = ModeIndices::new(scale.n, 2, 0).unwrap();
        let (p, wb) = parabolic_spectrum(&t, &scale, &idx).unwrap();
        let bs = solve_bohr_sommerfeld(&t, &scale, &idx).unwrap();
        let spread = (p.s_plus.unwrap() - p.s_minus.unwrap()).powi(2);
        assert!((p.e2 - bs).abs() < scale.epsilon * spread, "{} vs {bs}", p.e2);
        assert!((wb.s0 - 4.0114).abs() < 1e-3);
    }
}
