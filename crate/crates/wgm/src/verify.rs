//! Discrete residuals of the 1-D and 2-D operators, their fitted orders in
//! `h`, a finite-difference eigenvalue oracle for the 1-D problem and the
//! normalization audits.
//!
//! All difference operators are fourth order. In `s` the samples wrap on
//! periodic grids and are zero-padded otherwise; in `ρ` the field is
//! extended oddly across `ρ = 0` and by zero beyond `ρ_max`.

use crate::geometry::MeridianCurve;
use crate::modes::{
    build_mode1d, build_mode2d, cutoff_localize, inner_product_3d, ChartGrid, Mode1D, Mode2D, Mode3D,
    ModeOptions, SGrid,
};
use crate::par::{map_range, Exec};
use crate::semiclassics::{
    assemble_spectrum, Longitudinal, ModeIndices, Regime, RegimeChoice, ScaleParams, SpectralData, Torus,
};
use crate::specfun::airy;
use crate::{Error, Result};
use num_complex::Complex64;
use serde::Serialize;
use std::sync::Arc;

/// Relative change under grid doubling below which a residual counts as
/// grid-converged.
pub const GRID_CONVERGENCE_TOL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OperatorId {
    #[serde(rename = "L0_1d")]
    L01d,
    #[serde(rename = "H_2d")]
    H2d,
    #[serde(rename = "Delta2_2d")]
    Delta22d,
    #[serde(rename = "Laplace3d_order")]
    Laplace3dOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    pub s_nodes: usize,
    pub ds: f64,
    pub rho_nodes: Option<usize>,
    pub drho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub operator_id: OperatorId,
    pub l2_norm: f64,
    pub h: f64,
    pub grid_spec: GridSpec,
    /// Set by [`grid_doubling`]; `None` until audited.
    pub grid_converged: Option<bool>,
}

fn l2(values: &[Complex64], cell: f64) -> f64 {
    (values.iter().map(|v| v.norm_sqr()).sum::<f64>() * cell).sqrt()
}

fn fetch(values: &[Complex64], grid: &SGrid, i: i64) -> Complex64 {
    let n = grid.n as i64;
    match grid.period {
        Some(_) => values[i.rem_euclid(n) as usize],
        None if i < 0 || i >= n => Complex64::new(0.0, 0.0),
        None => values[i as usize],
    }
}

fn d2_line(values: &[Complex64], grid: &SGrid) -> Vec<Complex64> {
    let c = 1.0 / (12.0 * grid.ds * grid.ds);
    (0..grid.n as i64)
        .map(|i| {
            let f = |k: i64| fetch(values, grid, i + k);
            (-f(-2) + f(-1) * 16.0 - f(0) * 30.0 + f(1) * 16.0 - f(2)) * c
        })
        .collect()
}

/// `(−ε²∂ₛ² + U − ℰ² + h t_k 𝒜²(s; ℰ²))` applied to samples on `grid`.
pub fn l0_field<M: Longitudinal + ?Sized>(
    model: &M,
    spectral: &SpectralData,
    grid: &SGrid,
    values: &[Complex64],
) -> Vec<Complex64> {
    let eps2 = spectral.epsilon * spectral.epsilon;
    let ce = spectral.curly_e2;
    let lap = d2_line(values, grid);
    (0..grid.n)
        .map(|j| {
            if values[j] == Complex64::new(0.0, 0.0) && lap[j] == Complex64::new(0.0, 0.0) {
                return Complex64::new(0.0, 0.0);
            }
            let s = grid.node(j);
            let a2 = model.a3(s, ce).max(0.0).powf(2.0 / 3.0);
            -lap[j] * eps2 + values[j] * (model.u(s) - ce + spectral.h * spectral.t_k * a2)
        })
        .collect()
}

/// `‖L̂₀ψ‖` over the ψ grid.
pub fn apply_l0<M: Longitudinal + ?Sized>(model: &M, spectral: &SpectralData, mode: &Mode1D) -> ResidualReport {
    let r = l0_field(model, spectral, &mode.grid, &mode.values);
    ResidualReport {
        operator_id: OperatorId::L01d,
        l2_norm: l2(&r, mode.grid.ds),
        h: spectral.h,
        grid_spec: GridSpec { s_nodes: mode.grid.n, ds: mode.grid.ds, rho_nodes: None, drho: None },
        grid_converged: None,
    }
}

/// Row-major `(ρ_i, s_j)` field with `rows` rows.
#[derive(Debug, Clone, Copy)]
pub struct Field2D<'a> {
    pub values: &'a [Complex64],
    pub rows: usize,
    pub drho: f64,
    pub grid: &'a SGrid,
}

impl Field2D<'_> {
    fn get(&self, i: i64, j: i64) -> Complex64 {
        let rows = self.rows as i64;
        if i >= rows {
            return Complex64::new(0.0, 0.0);
        }
        if i < 0 {
            return -self.get(-i, j);
        }
        let n = self.grid.n;
        let row = &self.values[i as usize * n..(i as usize + 1) * n];
        fetch(row, self.grid, j)
    }

    fn d2_rho(&self, i: i64, j: i64) -> Complex64 {
        let f = |k: i64| self.get(i + k, j);
        (-f(-2) + f(-1) * 16.0 - f(0) * 30.0 + f(1) * 16.0 - f(2)) / (12.0 * self.drho * self.drho)
    }

    fn d2_s(&self, i: i64, j: i64) -> Complex64 {
        let f = |k: i64| self.get(i, j + k);
        let ds = self.grid.ds;
        (-f(-2) + f(-1) * 16.0 - f(0) * 30.0 + f(1) * 16.0 - f(2)) / (12.0 * ds * ds)
    }
}

fn d1_periodic_or_padded(row: &[Complex64], grid: &SGrid) -> Vec<Complex64> {
    let c = 1.0 / (12.0 * grid.ds);
    (0..grid.n as i64)
        .map(|i| {
            let f = |k: i64| fetch(row, grid, i + k);
            (f(-2) - f(-1) * 8.0 + f(1) * 8.0 - f(2)) * c
        })
        .collect()
}

/// `Ĥ = −ε²∂ₛ² + V(s; ℰ²) + h(−∂ρ² + ρ𝒜³)` with `𝒜` taken from `a`.
pub fn h_field<M: Longitudinal + ?Sized>(
    model: &M,
    spectral: &SpectralData,
    field: Field2D<'_>,
    a: &[f64],
    exec: Exec,
) -> Vec<Complex64> {
    let n = field.grid.n;
    let eps2 = spectral.epsilon * spectral.epsilon;
    let h = spectral.h;
    let v: Vec<f64> = (0..n).map(|j| model.u(field.grid.node(j)) - spectral.curly_e2).collect();
    let rows = map_range(field.rows, exec, |i| {
        let rho = i as f64 * field.drho;
        (0..n)
            .map(|j| {
                let (ii, jj) = (i as i64, j as i64);
                let w = field.get(ii, jj);
                -field.d2_s(ii, jj) * eps2 + w * v[j] + (-field.d2_rho(ii, jj) + w * (rho * a[j].powi(3))) * h
            })
            .collect::<Vec<_>>()
    });
    rows.into_iter().flatten().collect()
}

/// `‖Ĥw‖_{L²(Π)}`.
pub fn apply_h_2d<M: Longitudinal + ?Sized>(model: &M, mode: &Mode2D, exec: Exec) -> ResidualReport {
    let g = mode.grid();
    let field = Field2D { values: &mode.values, rows: mode.rows(), drho: mode.drho, grid: g };
    let r = h_field(model, &mode.spectral, field, &mode.a, exec);
    ResidualReport {
        operator_id: OperatorId::H2d,
        l2_norm: l2(&r, mode.drho * g.ds),
        h: mode.spectral.h,
        grid_spec: GridSpec { s_nodes: g.n, ds: g.ds, rho_nodes: Some(mode.rho_nodes), drho: Some(mode.drho) },
        grid_converged: None,
    }
}

/// `(Δ₂ − ℰ²)` in the stretched variable:
/// `−h∂ρ² − ε²∂ₛ(g∂ₛ) + a_n²/X(hρ, s)² − ℰ²` with `g = (1 − rk)^{−2}` inside
/// the focal distance and 0 beyond, `X = X₀ − rQ₂′`.
pub fn delta2_field(
    curve: &MeridianCurve,
    a_n: f64,
    spectral: &SpectralData,
    field: Field2D<'_>,
    exec: Exec,
) -> Vec<Complex64> {
    let n = field.grid.n;
    let eps2 = spectral.epsilon * spectral.epsilon;
    let h = spectral.h;
    let nodes = field.grid.nodes();
    let kappa: Vec<f64> = nodes.iter().map(|&s| curve.kappa(s)).collect();
    let x0: Vec<f64> = nodes.iter().map(|&s| curve.x0(s)).collect();
    let q2p: Vec<f64> = nodes.iter().map(|&s| curve.q2_prime(s)).collect();
    let rows = map_range(field.rows, exec, |i| {
        let r = h * i as f64 * field.drho;
        let row: Vec<Complex64> = (0..n).map(|j| field.get(i as i64, j as i64)).collect();
        let mut flux = d1_periodic_or_padded(&row, field.grid);
        for j in 0..n {
            let rk = r * kappa[j];
            let g = if rk < 1.0 { (1.0 - rk).powi(-2) } else { 0.0 };
            flux[j] *= g;
        }
        let div = d1_periodic_or_padded(&flux, field.grid);
        (0..n)
            .map(|j| {
                let x = x0[j] - r * q2p[j];
                let w = row[j];
                -field.d2_rho(i as i64, j as i64) * h - div[j] * eps2 + w * (a_n * a_n / (x * x) - spectral.curly_e2)
            })
            .collect::<Vec<_>>()
    });
    rows.into_iter().flatten().collect()
}

/// `‖(Δ₂ − ℰ²)w̃‖_{L²(Π)}`; needs the localized mode.
pub fn apply_delta2(torus: &Torus, mode: &Mode2D, exec: Exec) -> Result<ResidualReport> {
    if mode.theta.is_none() {
        return Err(Error::Domain("the divergent-form residual needs the localized mode".into()));
    }
    let g = mode.grid();
    let field = Field2D { values: &mode.values, rows: mode.rows(), drho: mode.drho, grid: g };
    let r = delta2_field(&torus.curve, torus.a_n, &mode.spectral, field, exec);
    Ok(ResidualReport {
        operator_id: OperatorId::Delta22d,
        l2_norm: l2(&r, mode.drho * g.ds),
        h: mode.spectral.h,
        grid_spec: GridSpec { s_nodes: g.n, ds: g.ds, rho_nodes: Some(mode.rho_nodes), drho: Some(mode.drho) },
        grid_converged: None,
    })
}

/// Residual before and after doubling the node counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridAudit {
    pub coarse: f64,
    pub fine: f64,
    pub relative_change: f64,
    pub converged: bool,
}

/// Evaluates `residual(factor)` at factors 1 and 2 and compares.
pub fn grid_doubling<F: Fn(usize) -> Result<f64>>(residual: F) -> Result<GridAudit> {
    let coarse = residual(1)?;
    let fine = residual(2)?;
    let relative_change = (fine - coarse).abs() / coarse.abs().max(f64::MIN_POSITIVE);
    Ok(GridAudit { coarse, fine, relative_change, converged: relative_change < GRID_CONVERGENCE_TOL })
}

/// Log-log least-squares fit `log y = order·log x + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingFit {
    pub operator_id: OperatorId,
    pub pairs: Vec<(f64, f64)>,
    pub fitted_order: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `y` strictly decreases along the pairs sorted by decreasing `x`.
    pub monotone: bool,
}

pub fn fit_order(operator_id: OperatorId, pairs: &[(f64, f64)]) -> Result<ScalingFit> {
    if pairs.len() < 4 {
        return Err(Error::Domain(format!("a scaling fit needs at least 4 points, got {}", pairs.len())));
    }
    if pairs.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Domain("scaling fit needs positive data".into()));
    }
    let n = pairs.len() as f64;
    let lx: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let decreasing_x = sorted.windows(2).all(|w| w[1].1 < w[0].1);
    Ok(ScalingFit {
        operator_id,
        pairs: pairs.to_vec(),
        fitted_order: slope,
        intercept: my - slope * mx,
        r_squared: if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 },
        monotone: decreasing_x,
    })
}

/// Parameters of a residual run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualOptions {
    pub mode: ModeOptions,
    pub c_loc: f64,
    pub max_norm_change: f64,
    pub regime: RegimeChoice,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        Self {
            mode: ModeOptions::default(),
            c_loc: crate::modes::DEFAULT_C_LOC,
            max_norm_change: crate::modes::DEFAULT_MAX_NORM_CHANGE,
            regime: RegimeChoice::Auto,
        }
    }
}

/// All residuals of one `(h, n, k, m)` point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub h: f64,
    pub n: u32,
    pub epsilon: f64,
    pub a_n: f64,
    pub curly_e2: f64,
    pub lambda: f64,
    pub c_loc: f64,
    pub norm_change: f64,
    pub w_norm: f64,
    pub l0: ResidualReport,
    pub h2d: ResidualReport,
    pub delta2: ResidualReport,
}

/// Builds ψ, w and w̃ for `torus` and measures the three residuals.
pub fn residual_point(torus: &Torus, scale: &ScaleParams, idx: &ModeIndices, opts: &ResidualOptions) -> Result<SweepPoint> {
    let spec = assemble_spectrum(torus, scale, idx, opts.regime)?;
    let psi = build_mode1d(torus, &spec, &opts.mode)?;
    let w = build_mode2d(torus, &spec, &psi, &opts.mode)?;
    let wt = cutoff_localize(&w, &torus.curve, opts.c_loc, opts.max_norm_change)?;
    Ok(SweepPoint {
        h: spec.h,
        n: spec.n,
        epsilon: spec.epsilon,
        a_n: torus.a_n,
        curly_e2: spec.curly_e2,
        lambda: spec.lambda(),
        c_loc: opts.c_loc,
        norm_change: wt.norm_change.unwrap_or(0.0),
        w_norm: w.norm(),
        l0: apply_l0(torus, &spec, &psi),
        h2d: apply_h_2d(torus, &w, opts.mode.exec),
        delta2: apply_delta2(torus, &wt, opts.mode.exec)?,
    })
}

/// `C_loc` used at `h` in a sweep: the configured value, reduced so that the
/// localization band stays inside `0.8/k`.
pub fn sweep_c_loc(c_loc: f64, h: f64) -> f64 {
    c_loc.min(0.8 / h.sqrt())
}

/// Residuals over `hs` with `a_n` held fixed.
pub fn h_sweep(
    curve: Arc<MeridianCurve>,
    a_n: f64,
    hs: &[f64],
    k: u32,
    m: u32,
    opts: &ResidualOptions,
) -> Result<Vec<SweepPoint>> {
    hs.iter()
        .map(|&h| {
            let scale = ScaleParams::with_fixed_a_n(h, a_n)?;
            let torus = Torus { curve: Arc::clone(&curve), a_n };
            let idx = ModeIndices::new(scale.n, k, m)?;
            let o = ResidualOptions { c_loc: sweep_c_loc(opts.c_loc, h), ..*opts };
            residual_point(&torus, &scale, &idx, &o)
        })
        .collect()
}

/// Fitted orders of the three residuals against `h`.
pub fn sweep_fits(points: &[SweepPoint]) -> Result<[ScalingFit; 3]> {
    let pairs = |f: &dyn Fn(&SweepPoint) -> f64| points.iter().map(|p| (p.h, f(p))).collect::<Vec<_>>();
    Ok([
        fit_order(OperatorId::L01d, &pairs(&|p| p.l0.l2_norm))?,
        fit_order(OperatorId::H2d, &pairs(&|p| p.h2d.l2_norm))?,
        fit_order(OperatorId::Delta22d, &pairs(&|p| p.delta2.l2_norm))?,
    ])
}

/// Quasimode order: slope of `‖(Δ₂ − ℰ²)w̃‖/ℰ²` (the 3-D residual over
/// `λ²`) against `λ`. The target is `−4/3`.
pub fn nu_fit(points: &[SweepPoint]) -> Result<ScalingFit> {
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.lambda, p.delta2.l2_norm / p.curly_e2)).collect();
    fit_order(OperatorId::Laplace3dOrder, &pairs)
}

/// LU factorization with partial pivoting of a banded matrix.
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    a: Vec<f64>,
    piv: Vec<usize>,
}

impl BandLu {
    /// `entry(i, j)` supplies the matrix for `|i − j|` within the band.
    pub fn factor<F: Fn(usize, usize) -> f64>(n: usize, kl: usize, ku: usize, entry: F) -> Result<Self> {
        let width = 2 * kl + ku + 1;
        let mut lu = Self { n, kl, ku, width, a: vec![0.0; n * width], piv: vec![0; n] };
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                *lu.at(i, j) = entry(i, j);
            }
        }
        let reach = kl + ku;
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let p = (k..=last).max_by(|&x, &y| lu.get(x, k).abs().total_cmp(&lu.get(y, k).abs())).unwrap_or(k);
            if lu.get(p, k) == 0.0 {
                return Err(Error::OracleFailure("singular banded matrix".into()));
            }
            lu.piv[k] = p;
            let end = (k + reach).min(n - 1);
            if p != k {
                for j in k..=end {
                    let t = lu.get(k, j);
                    *lu.at(k, j) = lu.get(p, j);
                    *lu.at(p, j) = t;
                }
            }
            let pivot = lu.get(k, k);
            for i in k + 1..=last {
                let l = lu.get(i, k) / pivot;
                *lu.at(i, k) = l;
                if l != 0.0 {
                    for j in k + 1..=end {
                        let v = lu.get(k, j);
                        *lu.at(i, j) -= l * v;
                    }
                }
            }
        }
        Ok(lu)
    }

    fn at(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.a[i * self.width + (j + self.kl - i)]
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.width + (j + self.kl - i)]
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for k in 0..n {
            x.swap(k, self.piv[k]);
            for i in k + 1..=(k + self.kl).min(n - 1) {
                x[i] -= self.get(i, k) * x[k];
            }
        }
        let reach = self.kl + self.ku;
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in i + 1..=(i + reach).min(n - 1) {
                acc -= self.get(i, j) * x[j];
            }
            x[i] = acc / self.get(i, i);
        }
        x
    }
}

/// Symmetric periodic pentadiagonal matrix: `diag[i]` on the diagonal,
/// `off1` and `off2` on the first and second cyclic off-diagonals.
#[derive(Debug, Clone)]
pub struct PeriodicPentadiagonal {
    pub diag: Vec<f64>,
    pub off1: f64,
    pub off2: f64,
}

impl PeriodicPentadiagonal {
    pub fn n(&self) -> usize {
        self.diag.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n() as i64;
        let f = |i: i64| x[i.rem_euclid(n) as usize];
        (0..n)
            .map(|i| {
                self.diag[i as usize] * f(i) + self.off1 * (f(i - 1) + f(i + 1)) + self.off2 * (f(i - 2) + f(i + 2))
            })
            .collect()
    }

    /// Dense copy, for small sizes.
    pub fn dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.n();
        nalgebra::DMatrix::from_fn(n, n, |i, j| {
            let d = (i as i64 - j as i64).rem_euclid(n as i64).min((j as i64 - i as i64).rem_euclid(n as i64));
            match d {
                0 => self.diag[i],
                1 => self.off1,
                2 => self.off2,
                _ => 0.0,
            }
        })
    }

    /// Solver for `(A − σI)x = b`: banded LU of the non-periodic part and a
    /// rank-4 Woodbury correction for the corners.
    pub fn shifted_solver(&self, sigma: f64) -> Result<ShiftedSolver> {
        let n = self.n();
        if n < 8 {
            return Err(Error::Domain("periodic solver needs at least 8 nodes".into()));
        }
        let band = BandLu::factor(n, 2, 2, |i, j| match i.abs_diff(j) {
            0 => self.diag[i] - sigma,
            1 => self.off1,
            2 => self.off2,
            _ => 0.0,
        })?;
        // corners: rows {0, 1} × cols {n−2, n−1} and the transpose
        let rows = [0, 1, n - 2, n - 1];
        let vt: [Vec<(usize, f64)>; 4] = [
            vec![(n - 2, self.off2), (n - 1, self.off1)],
            vec![(n - 1, self.off2)],
            vec![(0, self.off2)],
            vec![(0, self.off1), (1, self.off2)],
        ];
        let z: Vec<Vec<f64>> = rows
            .iter()
            .map(|&r| {
                let mut e = vec![0.0; n];
                e[r] = 1.0;
                band.solve(&e)
            })
            .collect();
        let mut cap = nalgebra::Matrix4::<f64>::identity();
        for (a, row) in vt.iter().enumerate() {
            for (b, zb) in z.iter().enumerate() {
                cap[(a, b)] += row.iter().map(|&(j, v)| v * zb[j]).sum::<f64>();
            }
        }
        let cap_inv = cap.try_inverse().ok_or_else(|| Error::OracleFailure("singular Woodbury capacitance".into()))?;
        Ok(ShiftedSolver { band, z, vt, cap_inv })
    }
}

pub struct ShiftedSolver {
    band: BandLu,
    z: Vec<Vec<f64>>,
    vt: [Vec<(usize, f64)>; 4],
    cap_inv: nalgebra::Matrix4<f64>,
}

impl ShiftedSolver {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut y = self.band.solve(b);
        let proj = nalgebra::Vector4::from_fn(|a, _| self.vt[a].iter().map(|&(j, v)| v * y[j]).sum::<f64>());
        let c = self.cap_inv * proj;
        for (b, zb) in self.z.iter().enumerate() {
            for (yi, zi) in y.iter_mut().zip(zb) {
                *yi -= c[b] * zi;
            }
        }
        y
    }
}

/// Periodic fourth-order FD matrix of `−ε²∂ₛ² + U + h t_k 𝒜²(s; E²_freeze)`.
pub fn oracle_matrix<M: Longitudinal + ?Sized>(model: &M, spectral: &SpectralData, e2_freeze: f64, nodes: usize) -> PeriodicPentadiagonal {
    let len = model.period();
    let ds = len / nodes as f64;
    let c = spectral.epsilon * spectral.epsilon / (12.0 * ds * ds);
    let diag = (0..nodes)
        .map(|j| {
            let s = j as f64 * ds;
            let a2 = model.a3(s, e2_freeze).max(0.0).powf(2.0 / 3.0);
            model.u(s) + spectral.h * spectral.t_k * a2 + 30.0 * c
        })
        .collect();
    PeriodicPentadiagonal { diag, off1: -16.0 * c, off2: c }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub eigenvalue: f64,
    pub relative_error: f64,
    pub nodes: usize,
    pub iterations: usize,
    /// `E²` at which `𝒜²` was frozen for the final solve.
    pub frozen_at: f64,
    pub zero_count: usize,
    #[serde(skip)]
    pub eigenvector: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Rayleigh-quotient iteration from `start`, optionally preceded by two
/// inverse-iteration steps at the fixed shift `sigma`.
/// Stops when the residual `‖Ax − μx‖` stops shrinking; the Rayleigh
/// quotient is then accurate to `residual²/gap`.
fn rqi(a: &PeriodicPentadiagonal, start: Vec<f64>, sigma: Option<f64>) -> Result<(f64, Vec<f64>, usize)> {
    let residual = |x: &[f64]| {
        let ax = a.apply(x);
        let mu = dot(x, &ax);
        (mu, ax.iter().zip(x).map(|(p, q)| (p - mu * q).powi(2)).sum::<f64>().sqrt())
    };
    let mut x = normalized(start);
    if let Some(sigma) = sigma {
        let fixed = a.shifted_solver(sigma)?;
        for _ in 0..2 {
            x = normalized(fixed.solve(&x));
        }
    }
    let (mut mu, mut res) = residual(&x);
    let mut iterations = 0;
    for it in 1..=60 {
        iterations = it;
        if res <= 1e-14 * mu.abs().max(1.0) {
            break;
        }
        let Ok(solver) = a.shifted_solver(mu) else { break };
        let y = solver.solve(&x);
        if y.iter().any(|v| !v.is_finite()) {
            break;
        }
        let cand = normalized(y);
        let (m2, r2) = residual(&cand);
        if r2 >= 0.5 * res && res <= 1e-8 * mu.abs().max(1.0) {
            if r2 < res {
                (x, mu, res) = (cand, m2, r2);
            }
            break;
        }
        (x, mu, res) = (cand, m2, r2);
    }
    if res <= 1e-8 * mu.abs().max(1.0) {
        Ok((mu, x, iterations))
    } else {
        Err(Error::OracleFailure(format!("inverse iteration stalled with residual {res:.3e}")))
    }
}

fn sign_changes(v: &[f64], periodic: bool) -> usize {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let big: Vec<f64> = v.iter().copied().filter(|x| x.abs() > 1e-3 * max).collect();
    let mut c = big.windows(2).filter(|w| w[0].signum() != w[1].signum()).count();
    if periodic && big.len() > 1 && big[0].signum() != big[big.len() - 1].signum() {
        c += 1;
    }
    c
}

/// Eigenvalue of the frozen-coefficient FD operator nearest `ℰ²`, by
/// Rayleigh-quotient iteration seeded with the asymptotic mode. `𝒜²` is
/// frozen at `E²` and refreshed once at `Λ − h t_k E₁` for the resulting eigenvalue `Λ`. The eigenvector must
/// have the zero count of the requested `m` (`2m` on a full period).
pub fn fd_oracle_1d<M: Longitudinal + ?Sized>(
    model: &M,
    spectral: &SpectralData,
    seed: Option<&Mode1D>,
    nodes: usize,
) -> Result<OracleResult> {
    if nodes < 2000 {
        return Err(Error::Domain(format!("oracle grid needs at least 2000 nodes, got {nodes}")));
    }
    let len = model.period();
    let ds = len / nodes as f64;
    let start: Vec<f64> = match seed {
        Some(mode) => {
            let inv = mode.phase.conj();
            let shifts: &[f64] = if mode.grid.period.is_some() { &[0.0] } else { &[-len, 0.0, len] };
            (0..nodes)
                .map(|j| shifts.iter().map(|k| (mode.psi(j as f64 * ds + k) * inv).re).sum())
                .collect()
        }
        None => vec![1.0; nodes],
    };
    if start.iter().all(|v| *v == 0.0) {
        return Err(Error::OracleFailure("seed mode vanishes on the oracle grid".into()));
    }
    let a0 = oracle_matrix(model, spectral, spectral.e2, nodes);
    let shift = seed.is_none().then_some(spectral.curly_e2);
    let (mu0, x0, it0) = rqi(&a0, start, shift)?;
    // E² level of the updated eigenvalue
    let refreeze = mu0 - spectral.correction();
    let a1 = oracle_matrix(model, spectral, refreeze, nodes);
    let (mu, x, it1) = rqi(&a1, x0, None)?;
    let periodic = spectral.regime == Regime::NoTurningPoints;
    let zero_count = sign_changes(&x, periodic);
    let expect = if periodic { 2 * spectral.m as usize } else { spectral.m as usize };
    if seed.is_some() && zero_count != expect {
        return Err(Error::OracleFailure(format!(
            "oracle eigenvector has {zero_count} sign changes, expected {expect}"
        )));
    }
    Ok(OracleResult {
        eigenvalue: mu,
        relative_error: (mu - spectral.curly_e2) / spectral.curly_e2,
        nodes,
        iterations: it0 + it1,
        frozen_at: refreeze,
        zero_count,
        eigenvector: x,
    })
}

/// Sorted eigenvalues of the dense frozen-coefficient matrix.
pub fn coarse_spectrum<M: Longitudinal + ?Sized>(model: &M, spectral: &SpectralData, e2_freeze: f64, nodes: usize) -> Vec<f64> {
    let m = oracle_matrix(model, spectral, e2_freeze, nodes).dense();
    let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Position of two oracle eigenvalues within a coarse spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BracketReport {
    pub index_lower: usize,
    pub index_upper: usize,
    /// Coarse eigenvalues strictly between the two matched ones.
    pub between: usize,
}

pub fn bracket_check(coarse: &[f64], lower: f64, upper: f64) -> BracketReport {
    let nearest = |x: f64| {
        (0..coarse.len()).min_by(|&a, &b| (coarse[a] - x).abs().total_cmp(&(coarse[b] - x).abs())).unwrap_or(0)
    };
    let (i, j) = (nearest(lower), nearest(upper));
    BracketReport { index_lower: i, index_upper: j, between: j.saturating_sub(i + 1) }
}

/// `|⟨Of, g⟩ − ⟨f, Og⟩| / (‖Of‖‖g‖)` for real fields.
pub fn symmetry_defect<O: Fn(&[f64]) -> Vec<f64>>(op: O, f: &[f64], g: &[f64]) -> f64 {
    let of = op(f);
    let og = op(g);
    (dot(&of, g) - dot(f, &og)).abs() / (dot(&of, &of).sqrt() * dot(g, g).sqrt()).max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditCheck {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub checks: Vec<AuditCheck>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(report: &mut AuditReport, name: &str, value: f64, tol: f64) -> Result<()> {
    let passed = value <= tol;
    report.checks.push(AuditCheck { name: name.into(), value, tolerance: tol, passed });
    if passed {
        Ok(())
    } else {
        Err(Error::AuditFailure { check: name.into(), value, tol })
    }
}

/// Largest deviation from 1 of `∫(𝒜/Ai′(−t_k)²)Ai²(−t_k + ρ𝒜)dρ` over the
/// columns where ψ is nonzero, by the trapezoidal rule on the ρ grid.
pub fn chi_normalization_defect(mode: &Mode2D) -> f64 {
    let g = mode.grid();
    let t = mode.spectral.t_k;
    let d2 = mode.ai_prime_tk * mode.ai_prime_tk;
    let mut worst = 0.0f64;
    for j in 0..g.n {
        if mode.mode1d.values[j].norm() == 0.0 || !(mode.a[j] > 0.0) {
            continue;
        }
        let a = mode.a[j];
        let mut acc = 0.0;
        for i in 0..mode.rows() {
            let v = a / d2 * airy(-t + i as f64 * mode.drho * a).ai.powi(2);
            acc += if i == 0 || i == mode.rho_nodes { 0.5 * v } else { v };
        }
        worst = worst.max((acc * mode.drho - 1.0).abs());
    }
    worst
}

/// Tolerances of the four normalization audits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuditTolerances {
    pub psi_norm: f64,
    /// Multiplied by `h`.
    pub w_norm_factor: f64,
    pub chi: f64,
    pub orthogonality: f64,
}

impl Default for AuditTolerances {
    fn default() -> Self {
        Self { psi_norm: 1e-8, w_norm_factor: 5.0, chi: 1e-6, orthogonality: 1e-10 }
    }
}

/// Runs the audits in order (‖ψ‖, ‖w‖, χ normalization, orthogonality of
/// the supplied pair) and stops at the first failure.
pub fn audit_normalizations(
    mode1d: &Mode1D,
    mode2d: &Mode2D,
    pair: (&Mode3D, &Mode3D),
    grid: ChartGrid,
    tol: AuditTolerances,
    exec: Exec,
) -> Result<AuditReport> {
    let mut r = AuditReport { checks: Vec::new() };
    check(&mut r, "psi_norm", (mode1d.norm() - 1.0).abs(), tol.psi_norm)?;
    check(&mut r, "w_norm", (mode2d.norm() - 1.0).abs(), tol.w_norm_factor * mode2d.spectral.h)?;
    check(&mut r, "chi_normalization", chi_normalization_defect(mode2d), tol.chi)?;
    let ip = inner_product_3d(pair.0, pair.1, grid, exec);
    check(&mut r, "orthogonality", ip.norm(), tol.orthogonality)?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_curve, triangle_profile};
    use crate::semiclassics::ConstantCoefficients;
    use std::f64::consts::TAU;

    #[test]
    fn band_lu_matches_dense() {
        let n = 12;
        let entry = |i: usize, j: usize| match i.abs_diff(j) {
            0 => 0.1 * i as f64 - 0.3,
            1 => 1.0 + 0.05 * (i + j) as f64,
            2 => -0.7,
            _ => 0.0,
        };
        let lu = BandLu::factor(n, 2, 2, entry).unwrap();
        let dense = nalgebra::DMatrix::from_fn(n, n, entry);
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = lu.solve(&b);
        let r = &dense * nalgebra::DVector::from_vec(x) - nalgebra::DVector::from_vec(b);
        assert!(r.norm() < 1e-12);
    }

    #[test]
    fn periodic_solver_inverts_shifted_matrix() {
        let n = 40;
        let p = PeriodicPentadiagonal {
            diag: (0..n).map(|i| 2.0 + (i as f64 * 0.3).cos()).collect(),
            off1: -16.0 / 12.0,
            off2: 1.0 / 12.0,
        };
        let sigma = 0.37;
        let solver = p.shifted_solver(sigma).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin() + 0.1).collect();
        let x = solver.solve(&b);
        let ax = p.apply(&x);
        for i in 0..n {
            assert!((ax[i] - sigma * x[i] - b[i]).abs() < 1e-11);
        }
    }

    #[test]
    fn fit_recovers_power_law() {
        let pairs: Vec<(f64, f64)> = [0.04, 0.03, 0.02, 0.015].iter().map(|&h| (h, 3.0 * h * h)).collect();
        let f = fit_order(OperatorId::L01d, &pairs).unwrap();
        assert!((f.fitted_order - 2.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(f.monotone);
        assert!(fit_order(OperatorId::L01d, &pairs[..3]).is_err());
    }

    #[test]
    fn operators_annihilate_zero() {
        let c = ConstantCoefficients::circle_equator(3.0, 2.0);
        let scale = ScaleParams::from_epsilon(0.01, 200).unwrap();
        let idx = ModeIndices::new(200, 1, 3).unwrap();
        let spec = assemble_spectrum(&c, &scale, &idx, RegimeChoice::Auto).unwrap();
        let g = SGrid { start: 0.0, ds: TAU / 64.0, n: 64, period: Some(TAU) };
        let zero = vec![Complex64::new(0.0, 0.0); 64 * 9];
        assert!(l0_field(&c, &spec, &g, &zero[..64]).iter().all(|v| v.norm() == 0.0));
        let field = Field2D { values: &zero, rows: 9, drho: 0.1, grid: &g };
        assert!(h_field(&c, &spec, field, &[1.0; 64], Exec::Sequential).iter().all(|v| v.norm() == 0.0));
        let curve = build_curve(triangle_profile(0.4, TAU).unwrap(), 3.0).unwrap();
        assert!(delta2_field(&curve, 2.0, &spec, field, Exec::Sequential).iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn circle_oracle_is_exact() {
        let c = ConstantCoefficients::circle_equator(3.0, 2.0);
        let scale = ScaleParams::from_h(0.03, 200).unwrap();
        let torus_a = c.a3.cbrt();
        for m in [2u32, 3] {
            let idx = ModeIndices::new(200, 2, m).unwrap();
            let spec = assemble_spectrum(&c, &scale, &idx, RegimeChoice::Auto).unwrap();
            let expect = c.u0 + (TAU * m as f64 * scale.epsilon / c.length).powi(2) + scale.h * spec.t_k * torus_a * torus_a;
            assert!((spec.curly_e2 - expect).abs() < 1e-13);
            let psi = build_mode1d(&c, &spec, &ModeOptions::default()).unwrap();
            let o = fd_oracle_1d(&c, &spec, Some(&psi), 2048).unwrap();
            assert!(o.relative_error.abs() < 1e-10, "{}", o.relative_error);
        }
    }

    #[test]
    fn wkb_residual_on_constant_coefficients() {
        let c = ConstantCoefficients::circle_equator(3.0, 2.0);
        let scale = ScaleParams::from_h(0.03, 200).unwrap();
        let idx = ModeIndices::new(200, 2, 3).unwrap();
        let spec = assemble_spectrum(&c, &scale, &idx, RegimeChoice::Auto).unwrap();
        let psi = build_mode1d(&c, &spec, &ModeOptions::default()).unwrap();
        assert!(apply_l0(&c, &spec, &psi).l2_norm < 1e-10);
    }

    #[test]
    fn l0_is_symmetric_on_periodic_grids() {
        let curve = Arc::new(build_curve(triangle_profile(0.4, TAU).unwrap(), 3.0).unwrap());
        let scale = ScaleParams::from_h(0.015, 1500).unwrap();
        let t = Torus::new(curve, &scale);
        let spec = assemble_spectrum(&t, &scale, &ModeIndices::new(1500, 2, 5).unwrap(), RegimeChoice::Auto).unwrap();
        let g = SGrid { start: 0.0, ds: TAU / 256.0, n: 256, period: Some(TAU) };
        let f: Vec<f64> = (0..256).map(|i| ((i * 7919 % 263) as f64 / 263.0) - 0.5).collect();
        let h: Vec<f64> = (0..256).map(|i| ((i * 104729 % 251) as f64 / 251.0) - 0.5).collect();
        let op = |x: &[f64]| {
            let v: Vec<Complex64> = x.iter().map(|&r| Complex64::new(r, 0.0)).collect();
            l0_field(&t, &spec, &g, &v).iter().map(|z| z.re).collect::<Vec<_>>()
        };
        assert!(symmetry_defect(op, &f, &h) < 1e-10);
    }

    #[test]
    fn example_oracle_and_bracket() {
        let curve = Arc::new(build_curve(triangle_profile(0.4, TAU).unwrap(), 3.0).unwrap());
        let scale = ScaleParams::with_fixed_a_n(0.008, 1500.0 * 0.015f64.powf(1.5)).unwrap();
        let t = Torus { curve, a_n: 1500.0 * 0.015f64.powf(1.5) };
        let spec = |m| assemble_spectrum(&t, &scale, &ModeIndices::new(scale.n, 2, m).unwrap(), RegimeChoice::Auto).unwrap();
        let (s5, s6) = (spec(5), spec(6));
        let opts = ModeOptions::default();
        let o5 = fd_oracle_1d(&t, &s5, Some(&build_mode1d(&t, &s5, &opts).unwrap()), 4096).unwrap();
        let o6 = fd_oracle_1d(&t, &s6, Some(&build_mode1d(&t, &s6, &opts).unwrap()), 4096).unwrap();
        assert!(o5.relative_error.abs() <= 3e-4, "{}", o5.relative_error);
        assert_eq!(o5.zero_count, 5);
        assert!(o6.eigenvalue > o5.eigenvalue);
        let coarse = coarse_spectrum(&t, &s5, s5.e2, 1024);
        let b = bracket_check(&coarse, o5.eigenvalue, o6.eigenvalue);
        assert_eq!((b.index_lower, b.index_upper, b.between), (5, 6, 0));
    }
}
