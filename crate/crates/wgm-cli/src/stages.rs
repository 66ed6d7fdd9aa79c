//! Pipeline stages. Each stage writes its artifacts, prints one summary line
//! and returns an error naming the stage when it cannot finish.

use std::io;
use std::sync::Arc;

use clap::ValueEnum;
use serde::Serialize;
use wgm::billiards::{billiard_3d, caustic_launch, default_dt, flow_2d, polyline, Ray3D, ReducedHamiltonian};
use wgm::geometry::MeridianCurve;
use wgm::modes::{
    build_mode1d, build_mode2d, build_mode3d, caustic_curve, cutoff_localize, ChartGrid, Mode1D, Mode2D,
};
use wgm::semiclassics::{assemble_spectrum, ModeIndices, ScaleParams, SpectralData, Torus, A_N_RATIO_BOUNDS};
use wgm::verify::{
    apply_h_2d, apply_l0, audit_normalizations, chi_normalization_defect, fd_oracle_1d, fit_order, nu_fit,
    residual_point, sweep_c_loc, AuditTolerances, OperatorId, ResidualOptions, ScalingFit, SweepPoint,
};
use wgm::Error;

use crate::config::{Format, RunConfig};
use crate::output::{heatmap_svg, Sink};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Curve,
    Spectrum,
    Mode1d,
    Mode2d,
    Mode3d,
    Residual,
    Oracle,
    Billiard2d,
    Billiard3d,
    Caustic,
    All,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Curve => "curve",
            Stage::Spectrum => "spectrum",
            Stage::Mode1d => "mode1d",
            Stage::Mode2d => "mode2d",
            Stage::Mode3d => "mode3d",
            Stage::Residual => "residual",
            Stage::Oracle => "oracle",
            Stage::Billiard2d => "billiard2d",
            Stage::Billiard3d => "billiard3d",
            Stage::Caustic => "caustic",
            Stage::All => "all",
        }
    }
}

const CHAIN: [Stage; 10] = [
    Stage::Curve,
    Stage::Spectrum,
    Stage::Mode1d,
    Stage::Mode2d,
    Stage::Mode3d,
    Stage::Residual,
    Stage::Oracle,
    Stage::Billiard2d,
    Stage::Billiard3d,
    Stage::Caustic,
];

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error("{stage}: {source}")]
    Numeric { stage: &'static str, source: Error },
    #[error("{stage}: cannot write artifacts: {source}")]
    Io { stage: &'static str, source: io::Error },
}

impl StageError {
    pub fn is_audit(&self) -> bool {
        matches!(self, StageError::Numeric { source: Error::AuditFailure { .. }, .. })
    }
}

trait At<T> {
    fn at(self, stage: Stage) -> Result<T, StageError>;
}

impl<T> At<T> for wgm::Result<T> {
    fn at(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|source| StageError::Numeric { stage: stage.name(), source })
    }
}

impl<T> At<T> for io::Result<T> {
    fn at(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|source| StageError::Io { stage: stage.name(), source })
    }
}

fn audit(check: &str, value: f64, tol: f64) -> wgm::Result<()> {
    if value <= tol {
        Ok(())
    } else {
        Err(Error::AuditFailure { check: check.into(), value, tol })
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Shared state of one run; later stages reuse earlier results.
pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub sink: Sink,
    pub h_sweep: Vec<f64>,
    curve: Option<Arc<MeridianCurve>>,
    spectral: Option<SpectralData>,
    psi: Option<Arc<Mode1D>>,
    w: Option<Arc<Mode2D>>,
    localized: Option<Arc<Mode2D>>,
    summary: Vec<(String, String, String)>,
}

impl<'a> Context<'a> {
    pub fn new(cfg: &'a RunConfig, sink: Sink, h_sweep: Vec<f64>) -> Self {
        Self { cfg, sink, h_sweep, curve: None, spectral: None, psi: None, w: None, localized: None, summary: Vec::new() }
    }

    fn curve(&mut self) -> wgm::Result<Arc<MeridianCurve>> {
        if self.curve.is_none() {
            self.curve = Some(Arc::new(self.cfg.curve()?));
        }
        Ok(Arc::clone(self.curve.as_ref().expect("set above")))
    }

    fn torus(&mut self) -> wgm::Result<Torus> {
        Ok(Torus::new(self.curve()?, &self.cfg.scale))
    }

    fn indices(&self) -> wgm::Result<ModeIndices> {
        ModeIndices::new(self.cfg.scale.n, self.cfg.mode.k, self.cfg.mode.m)
    }

    fn spectral(&mut self) -> wgm::Result<SpectralData> {
        if self.spectral.is_none() {
            let torus = self.torus()?;
            let mut spec = assemble_spectrum(&torus, &self.cfg.scale, &self.indices()?, self.cfg.mode.regime)?;
            if let Some(w) = self.cfg.scale.ratio_warning(self.cfg.geometry.radius, A_N_RATIO_BOUNDS) {
                spec.warnings.push(w);
            }
            self.spectral = Some(spec);
        }
        Ok(self.spectral.clone().expect("set above"))
    }

    fn psi(&mut self) -> wgm::Result<Arc<Mode1D>> {
        if self.psi.is_none() {
            let (torus, spec) = (self.torus()?, self.spectral()?);
            self.psi = Some(Arc::new(build_mode1d(&torus, &spec, &self.cfg.mode_options())?));
        }
        Ok(Arc::clone(self.psi.as_ref().expect("set above")))
    }

    fn w(&mut self) -> wgm::Result<Arc<Mode2D>> {
        if self.w.is_none() {
            let (torus, spec, psi) = (self.torus()?, self.spectral()?, self.psi()?);
            self.w = Some(Arc::new(build_mode2d(&torus, &spec, &psi, &self.cfg.mode_options())?));
        }
        Ok(Arc::clone(self.w.as_ref().expect("set above")))
    }

    fn localized(&mut self) -> wgm::Result<Arc<Mode2D>> {
        if self.localized.is_none() {
            let (w, curve) = (self.w()?, self.curve()?);
            let m = &self.cfg.mode;
            self.localized = Some(Arc::new(cutoff_localize(&w, &curve, m.c_loc, m.max_norm_change)?));
        }
        Ok(Arc::clone(self.localized.as_ref().expect("set above")))
    }

    fn note(&mut self, quantity: &str, value: String, reference: &str) {
        self.summary.push((quantity.into(), value, reference.into()));
    }

    pub fn run(&mut self, stage: Stage) -> Result<(), StageError> {
        match stage {
            Stage::Curve => self.stage_curve(),
            Stage::Spectrum => self.stage_spectrum(),
            Stage::Mode1d => self.stage_mode1d(),
            Stage::Mode2d => self.stage_mode2d(),
            Stage::Mode3d => self.stage_mode3d(),
            Stage::Residual => self.stage_residual(),
            Stage::Oracle => self.stage_oracle(),
            Stage::Billiard2d => self.stage_billiard2d(),
            Stage::Billiard3d => self.stage_billiard3d(),
            Stage::Caustic => self.stage_caustic(),
            Stage::All => self.stage_all(),
        }
    }

    fn stage_all(&mut self) -> Result<(), StageError> {
        let mut first_audit = None;
        for s in CHAIN {
            match self.run(s) {
                Ok(()) => {}
                Err(e) if e.is_audit() => {
                    println!("{e}");
                    first_audit.get_or_insert(e);
                }
                Err(e) => return Err(e),
            }
        }
        println!("{:<14} {:>14} {:>12}", "quantity", "value", "reference");
        for (q, v, r) in &self.summary {
            println!("{q:<14} {v:>14} {r:>12}");
        }
        first_audit.map_or(Ok(()), Err)
    }

    fn stage_curve(&mut self) -> Result<(), StageError> {
        let st = Stage::Curve;
        let curve = self.curve().at(st)?;
        let samples = curve.samples();
        if self.cfg.wants(Format::Csv) {
            let rows = samples.iter().map(|p| [p.s, p.x, p.z, p.kappa]);
            self.sink.csv("curve.csv", &["s", "x", "z", "kappa"], rows).at(st)?;
        }
        #[derive(Serialize)]
        struct Out<'a> {
            profile: &'a str,
            length: f64,
            radius: f64,
            nodes: usize,
            closure_defect: f64,
            max_abs_q1: f64,
            max_abs_q2: f64,
        }
        let (m1, m2) = curve.extent();
        let out = Out {
            profile: self.cfg.profile().at(st)?.name(),
            length: curve.length(),
            radius: curve.radius,
            nodes: curve.nodes(),
            closure_defect: curve.closure_defect(),
            max_abs_q1: m1,
            max_abs_q2: m2,
        };
        if self.cfg.wants(Format::Json) {
            self.sink.json("curve.json", &out).at(st)?;
        }
        println!(
            "curve: {} L = {:.6} R = {} nodes = {} closure defect {:.2e}",
            out.profile, out.length, out.radius, out.nodes, out.closure_defect
        );
        Ok(())
    }

    fn stage_spectrum(&mut self) -> Result<(), StageError> {
        let st = Stage::Spectrum;
        let spec = self.spectral().at(st)?;
        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(flatten)]
            spectral: &'a SpectralData,
            a_n: f64,
            a_n_over_r: f64,
            correction: f64,
        }
        let a_n = self.cfg.scale.a_n;
        let ratio = a_n / self.cfg.geometry.radius;
        let out = Out { spectral: &spec, a_n, a_n_over_r: ratio, correction: spec.correction() };
        if self.cfg.wants(Format::Json) {
            self.sink.json("spectrum.json", &out).at(st)?;
        }
        let tp = spec.turning().map_or("periodic".to_string(), |(a, b)| format!("s- = {a:.6} s+ = {b:.6}"));
        println!(
            "spectrum: E2 = {:.6} h t_k E1 = {:.6} curlyE2 = {:.6} t_k = {:.6} {tp} a_n/R = {ratio:.6}",
            spec.e2,
            spec.correction(),
            spec.curly_e2,
            spec.t_k
        );
        for w in &spec.warnings {
            println!("spectrum: warning: {w}");
        }
        self.note("t_k", format!("{:.6}", spec.t_k), "4.0879");
        if let Some((a, b)) = spec.turning() {
            self.note("s_minus", format!("{a:.6}"), "3.7573");
            self.note("s_plus", format!("{b:.6}"), "4.2266");
        }
        self.note("E2", format!("{:.6}", spec.e2), "0.31169");
        self.note("h t_k E1", format!("{:.6}", spec.correction()), "0.01587");
        self.note("curlyE2", format!("{:.6}", spec.curly_e2), "0.327566");
        self.note("a_n/R", format!("{ratio:.6}"), "0.915");
        Ok(())
    }

    fn stage_mode1d(&mut self) -> Result<(), StageError> {
        let st = Stage::Mode1d;
        let (torus, spec, psi) = (self.torus().at(st)?, self.spectral().at(st)?, self.psi().at(st)?);
        let residual = apply_l0(&torus, &spec, &psi);
        if self.cfg.wants(Format::Csv) {
            let rows = psi.values.iter().enumerate().map(|(j, v)| [psi.grid.node(j), v.re, v.im, v.norm()]);
            self.sink.csv("mode1d.csv", &["s", "re", "im", "abs"], rows).at(st)?;
        }
        #[derive(Serialize)]
        struct Out<'a> {
            mode: &'a Mode1D,
            norm: f64,
            residual: &'a wgm::verify::ResidualReport,
        }
        let norm = psi.norm();
        if self.cfg.wants(Format::Json) {
            self.sink.json("mode1d.json", &Out { mode: &psi, norm, residual: &residual }).at(st)?;
        }
        let defect = (norm - 1.0).abs();
        let tol = AuditTolerances::default().psi_norm;
        println!(
            "mode1d: {:?} ‖ψ‖ − 1 = {defect:.2e} {} ‖L0 ψ‖ = {:.3e}",
            psi.kind,
            verdict(defect <= tol),
            residual.l2_norm
        );
        self.note("|psi| - 1", format!("{defect:.2e}"), "");
        audit("psi_norm", defect, tol).at(st)
    }

    fn stage_mode2d(&mut self) -> Result<(), StageError> {
        let st = Stage::Mode2d;
        let (torus, spec, w) = (self.torus().at(st)?, self.spectral().at(st)?, self.w().at(st)?);
        let h_res = apply_h_2d(&torus, &w, self.cfg.mode_options().exec);
        let chi = chi_normalization_defect(&w);
        let g = *w.grid();
        let (row_step, col_step) = ((w.rows() / 128).max(1), (g.n / 256).max(1));
        let rows_i: Vec<usize> = (0..w.rows()).step_by(row_step).collect();
        let cols_j: Vec<usize> = (0..g.n).step_by(col_step).collect();
        if self.cfg.wants(Format::Csv) {
            let mut rows = Vec::new();
            for &j in &cols_j {
                for &i in &rows_i {
                    let v = w.at(i, j);
                    rows.push([i as f64 * w.drho, g.node(j), v.re, v.im, v.norm()]);
                }
            }
            self.sink.csv("mode2d.csv", &["rho", "s", "re", "im", "abs"], rows).at(st)?;
        }
        let localized = self.localized();
        if self.cfg.wants(Format::Svg) {
            let grid: Vec<Vec<f64>> = rows_i.iter().map(|&i| cols_j.iter().map(|&j| w.at(i, j).norm()).collect()).collect();
            let overlay: Vec<(f64, f64)> = cols_j
                .iter()
                .filter(|&&j| w.a[j] > 0.0)
                .map(|&j| (g.node(j), spec.t_k / w.a[j]))
                .filter(|&(_, r)| r <= w.rho_max())
                .collect();
            let svg = heatmap_svg(&grid, (g.start, g.end()), (0.0, w.rho_max()), &overlay, &self.sink.meta);
            self.sink.text("mode2d.svg", &svg).at(st)?;
        }
        #[derive(Serialize)]
        struct Out<'a> {
            rows: usize,
            s_nodes: usize,
            drho: f64,
            rho_max: f64,
            norm: f64,
            chi_normalization_defect: f64,
            localization_norm_change: Option<f64>,
            residual: &'a wgm::verify::ResidualReport,
        }
        let change = localized.as_ref().ok().and_then(|m| m.norm_change);
        let out = Out {
            rows: w.rows(),
            s_nodes: g.n,
            drho: w.drho,
            rho_max: w.rho_max(),
            norm: w.norm(),
            chi_normalization_defect: chi,
            localization_norm_change: change,
            residual: &h_res,
        };
        if self.cfg.wants(Format::Json) {
            self.sink.json("mode2d.json", &out).at(st)?;
        }
        let tol = AuditTolerances::default();
        let wdef = (out.norm - 1.0).abs();
        let wtol = tol.w_norm_factor * spec.h;
        println!(
            "mode2d: ‖w‖ − 1 = {wdef:.2e} {} χ defect {chi:.2e} {} ‖Ĥw‖ = {:.3e} cutoff change {}",
            verdict(wdef <= wtol),
            verdict(chi <= tol.chi),
            h_res.l2_norm,
            change.map_or("n/a".into(), |c| format!("{c:.2e}"))
        );
        self.note("|w| - 1", format!("{wdef:.2e}"), "");
        audit("w_norm", wdef, wtol).at(st)?;
        audit("chi_normalization", chi, tol.chi).at(st)?;
        localized.map(|_| ()).at(st)
    }

    fn stage_mode3d(&mut self) -> Result<(), StageError> {
        let st = Stage::Mode3d;
        let (curve, psi, w, wt) = (self.curve().at(st)?, self.psi().at(st)?, self.w().at(st)?, self.localized().at(st)?);
        let n = self.cfg.scale.n as i64;
        let u = build_mode3d(Arc::clone(&curve), Arc::clone(&wt), n).at(st)?;
        let scale1 = ScaleParams::from_epsilon(self.cfg.scale.epsilon, self.cfg.scale.n + 1).at(st)?;
        let torus1 = Torus::new(Arc::clone(&curve), &scale1);
        let idx1 = ModeIndices::new(scale1.n, self.cfg.mode.k, self.cfg.mode.m).at(st)?;
        let opts = self.cfg.mode_options();
        let spec1 = assemble_spectrum(&torus1, &scale1, &idx1, self.cfg.mode.regime).at(st)?;
        let psi1 = build_mode1d(&torus1, &spec1, &opts).at(st)?;
        let w1 = build_mode2d(&torus1, &spec1, &psi1, &opts).at(st)?;
        let wt1 = cutoff_localize(&w1, &curve, self.cfg.mode.c_loc, self.cfg.mode.max_norm_change).at(st)?;
        let u1 = build_mode3d(Arc::clone(&curve), Arc::new(wt1), n + 1).at(st)?;

        if self.cfg.wants(Format::Csv) {
            let g = *wt.grid();
            let r_max = wt.spectral.h * wt.rho_max();
            let mut rows = Vec::new();
            for j in (0..g.n).step_by((g.n / 256).max(1)) {
                let s = g.node(j);
                for i in 0..64 {
                    let r = r_max * i as f64 / 64.0;
                    let p = curve.eval_chart(r, s);
                    let v = u.u_chart(r, s, 0.0);
                    rows.push([p.x, p.z, r, s, v.re, v.im, v.norm()]);
                }
            }
            self.sink.csv("mode3d.csv", &["x", "z", "r", "s", "re", "im", "abs"], rows).at(st)?;
        }
        let result = audit_normalizations(&psi, &w, (&u, &u1), ChartGrid::default(), AuditTolerances::default(), opts.exec);
        #[derive(Serialize)]
        struct Out<'a> {
            n: i64,
            pair: [i64; 2],
            checks: Option<&'a wgm::verify::AuditReport>,
            failure: Option<String>,
        }
        let out = Out {
            n,
            pair: [n, n + 1],
            checks: result.as_ref().ok(),
            failure: result.as_ref().err().map(|e| e.to_string()),
        };
        if self.cfg.wants(Format::Json) {
            self.sink.json("mode3d.json", &out).at(st)?;
        }
        let report = result.at(st)?;
        let line: Vec<String> =
            report.checks.iter().map(|c| format!("{} {:.2e} {}", c.name, c.value, verdict(c.passed))).collect();
        println!("mode3d: {}", line.join(", "));
        if let Some(c) = report.checks.last() {
            self.note("<u_n, u_n+1>", format!("{:.2e}", c.value), "");
        }
        Ok(())
    }

    fn stage_residual(&mut self) -> Result<(), StageError> {
        let st = Stage::Residual;
        let curve = self.curve().at(st)?;
        let a_n = self.cfg.scale.a_n;
        let base = ResidualOptions {
            mode: self.cfg.mode_options(),
            c_loc: self.cfg.mode.c_loc,
            max_norm_change: f64::INFINITY,
            regime: self.cfg.mode.regime,
        };
        let limit = self.cfg.mode.max_norm_change;
        let sweep = !self.h_sweep.is_empty();
        let hs = if sweep { self.h_sweep.clone() } else { vec![self.cfg.scale.h] };
        let mut points: Vec<SweepPoint> = Vec::new();
        for &h in &hs {
            let (scale, c_loc) = if sweep {
                (ScaleParams::with_fixed_a_n(h, a_n).at(st)?, sweep_c_loc(base.c_loc, h))
            } else {
                (self.cfg.scale, base.c_loc)
            };
            let torus = Torus { curve: Arc::clone(&curve), a_n };
            let idx = ModeIndices::new(scale.n, self.cfg.mode.k, self.cfg.mode.m).at(st)?;
            points.push(residual_point(&torus, &scale, &idx, &ResidualOptions { c_loc, ..base }).at(st)?);
        }
        let localized = points.iter().all(|p| p.norm_change <= limit);
        let pairs = |f: fn(&SweepPoint) -> f64| points.iter().map(|p| (p.h, f(p))).collect::<Vec<_>>();
        let mut fits: Vec<ScalingFit> = Vec::new();
        let mut nu = None;
        if points.len() >= 4 {
            fits.push(fit_order(OperatorId::L01d, &pairs(|p| p.l0.l2_norm)).at(st)?);
            fits.push(fit_order(OperatorId::H2d, &pairs(|p| p.h2d.l2_norm)).at(st)?);
            if localized {
                fits.push(fit_order(OperatorId::Delta22d, &pairs(|p| p.delta2.l2_norm)).at(st)?);
                nu = Some(nu_fit(&points).at(st)?);
            }
        }
        #[derive(Serialize)]
        struct Out<'a> {
            max_norm_change: f64,
            localized: bool,
            points: &'a [SweepPoint],
            fits: &'a [ScalingFit],
            nu: Option<&'a ScalingFit>,
        }
        let out = Out { max_norm_change: limit, localized, points: &points, fits: &fits, nu: nu.as_ref() };
        if self.cfg.wants(Format::Json) {
            self.sink.json("residual.json", &out).at(st)?;
        }
        if self.cfg.wants(Format::Csv) {
            let rows = points.iter().map(|p| [p.h, p.lambda, p.l0.l2_norm, p.h2d.l2_norm, p.delta2.l2_norm, p.norm_change]);
            self.sink.csv("residual.csv", &["h", "lambda", "L0", "H_2d", "Delta2_2d", "norm_change"], rows).at(st)?;
        }
        if fits.is_empty() {
            let p = &points[0];
            println!(
                "residual: h = {} ‖L0ψ‖ = {:.3e} ‖Ĥw‖ = {:.3e} ‖(Δ₂ − ℰ²)w̃‖ = {:.3e}",
                p.h, p.l0.l2_norm, p.h2d.l2_norm, p.delta2.l2_norm
            );
        } else {
            let mut parts: Vec<String> = fits
                .iter()
                .map(|f| {
                    let target = if f.operator_id == OperatorId::Delta22d { 1.6 } else { 1.7 };
                    format!("{:?} slope {:.3} {}", f.operator_id, f.fitted_order, verdict(f.fitted_order >= target))
                })
                .collect();
            if let Some(f) = &nu {
                parts.push(format!("nu {:.3} {}", f.fitted_order, verdict((f.fitted_order + 4.0 / 3.0).abs() <= 0.2)));
            }
            println!("residual: {}", parts.join(", "));
        }
        if !localized {
            let change = points.iter().map(|p| p.norm_change).fold(0.0, f64::max);
            return Err(Error::LocalizationFailure { change, limit }).at(st);
        }
        Ok(())
    }

    fn stage_oracle(&mut self) -> Result<(), StageError> {
        let st = Stage::Oracle;
        let (torus, spec, psi) = (self.torus().at(st)?, self.spectral().at(st)?, self.psi().at(st)?);
        let o = fd_oracle_1d(&torus, &spec, Some(&psi), self.cfg.grid.oracle_nodes).at(st)?;
        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(flatten)]
            result: &'a wgm::verify::OracleResult,
            #[serde(rename = "curlyE2")]
            curly_e2: f64,
        }
        if self.cfg.wants(Format::Json) {
            self.sink.json("oracle.json", &Out { result: &o, curly_e2: spec.curly_e2 }).at(st)?;
        }
        if self.cfg.wants(Format::Csv) {
            let ds = torus.curve.length() / o.nodes as f64;
            let rows = o.eigenvector.iter().enumerate().map(|(j, v)| [j as f64 * ds, *v]);
            self.sink.csv("oracle.csv", &["s", "v"], rows).at(st)?;
        }
        println!(
            "oracle: eigenvalue {:.8} vs curlyE2 {:.8} relative error {:.3e} zero count {} ({} nodes)",
            o.eigenvalue, spec.curly_e2, o.relative_error, o.zero_count, o.nodes
        );
        self.note("oracle rel.", format!("{:.3e}", o.relative_error), "");
        Ok(())
    }

    fn stage_billiard2d(&mut self) -> Result<(), StageError> {
        let st = Stage::Billiard2d;
        let (torus, spec) = (self.torus().at(st)?, self.spectral().at(st)?);
        let ham = ReducedHamiltonian::from_spectral(&torus, &spec);
        let b = &self.cfg.billiard;
        let dt = b.dt.unwrap_or_else(|| default_dt(&torus));
        let [s, ps, rho, prho] = b.initial;
        let steps = (b.t_end / dt).ceil() as usize;
        let tr = flow_2d(&ham, ham.state(s, ps, rho, prho), b.t_end, dt, (steps / 4000).max(1)).at(st)?;
        if self.cfg.wants(Format::Csv) {
            let rows = tr.samples.iter().map(|(t, x)| [*t, x.s, x.p_s, x.rho, x.p_rho, x.energy]);
            self.sink.csv("billiard2d.csv", &["t", "s", "p_s", "rho", "p_rho", "H"], rows).at(st)?;
        }
        #[derive(Serialize)]
        struct Out {
            dt: f64,
            t_end: f64,
            steps: usize,
            reflections: usize,
            halvings: u32,
            max_relative_drift: f64,
        }
        let out = Out {
            dt,
            t_end: b.t_end,
            steps: tr.steps,
            reflections: tr.reflections,
            halvings: tr.halvings,
            max_relative_drift: tr.max_relative_drift,
        };
        if self.cfg.wants(Format::Json) {
            self.sink.json("billiard2d.json", &out).at(st)?;
        }
        let tol = 1e-7;
        println!(
            "billiard2d: {} steps, {} reflections, energy drift {:.2e} {}",
            tr.steps,
            tr.reflections,
            tr.max_relative_drift,
            verdict(tr.max_relative_drift <= tol)
        );
        self.note("2-D drift", format!("{:.2e}", tr.max_relative_drift), "");
        audit("energy_drift", tr.max_relative_drift, tol).at(st)
    }

    fn stage_billiard3d(&mut self) -> Result<(), StageError> {
        let st = Stage::Billiard3d;
        let curve = self.curve().at(st)?;
        let b = &self.cfg.billiard;
        let p = curve.eval_chart(b.origin_chart[0], b.origin_chart[1]);
        let d = b.direction;
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let ray = Ray3D { origin: [0.0, p.x, p.z], direction: d.map(|v| v / n), segment_length: 0.0 };
        let run = billiard_3d(&curve, ray, b.bounces).at(st)?;
        let lz0 = ray.angular_momentum_z();
        let speed = run.rays.iter().map(|r| (r.speed() - 1.0).abs()).fold(0.0, f64::max);
        let lz = run.rays.iter().map(|r| (r.angular_momentum_z() - lz0).abs()).fold(0.0, f64::max);
        if self.cfg.wants(Format::Csv) {
            self.sink.csv("billiard3d_polyline.csv", &["x", "y", "z"], polyline(&run)).at(st)?;
            let rows = run.bounce_points.iter().enumerate().map(|(i, q)| [i as f64, q[0], q[1], q[2]]);
            self.sink.csv("billiard3d_bounces.csv", &["bounce", "x", "y", "z"], rows).at(st)?;
        }
        #[derive(Serialize)]
        struct Out<'a> {
            bounces: usize,
            speed_defect: f64,
            lz_defect: f64,
            warnings: &'a [String],
        }
        let out = Out { bounces: run.bounce_points.len(), speed_defect: speed, lz_defect: lz, warnings: &run.warnings };
        if self.cfg.wants(Format::Json) {
            self.sink.json("billiard3d.json", &out).at(st)?;
        }
        println!(
            "billiard3d: {} bounces, speed defect {speed:.2e} {}, L_z defect {lz:.2e} {}",
            out.bounces,
            verdict(speed <= 1e-14),
            verdict(lz <= 1e-10)
        );
        self.note("3-D L_z", format!("{lz:.2e}"), "");
        audit("speed", speed, 1e-14).at(st)?;
        audit("angular_momentum_z", lz, 1e-10).at(st)
    }

    fn stage_caustic(&mut self) -> Result<(), StageError> {
        let st = Stage::Caustic;
        let (torus, spec) = (self.torus().at(st)?, self.spectral().at(st)?);
        let range = spec.turning().unwrap_or((0.0, torus.curve.length()));
        let c = caustic_curve(&torus, &spec, range, 400).at(st)?;
        if self.cfg.wants(Format::Csv) {
            let rows = (0..c.s.len()).map(|i| [c.s[i], c.rho_c[i], c.r_c[i]]);
            self.sink.csv("caustic.csv", &["s", "rho_c", "r_c"], rows).at(st)?;
        }
        let ham = ReducedHamiltonian::from_spectral(&torus, &spec);
        let s0 = 0.5 * (range.0 + range.1);
        let x0 = caustic_launch(&ham, spec.t_k, s0).at(st)?;
        let dt = 10.0 * default_dt(&torus);
        let tr = flow_2d(&ham, x0, 5e5 * dt, dt, 1000).at(st)?;
        let peaks: Vec<[f64; 3]> = tr
            .peaks
            .iter()
            .filter_map(|p| wgm::semiclassics::stability_a(&torus, p.s, spec.curly_e2).ok().map(|a| [p.s, p.rho, spec.t_k / a]))
            .collect();
        let worst = peaks.iter().map(|p| (p[1] - p[2]).abs() / p[2]).fold(0.0, f64::max);
        if self.cfg.wants(Format::Csv) {
            self.sink.csv("caustic_peaks.csv", &["s", "rho_peak", "rho_c"], peaks.iter().copied()).at(st)?;
        }
        #[derive(Serialize)]
        struct Out<'a> {
            caustic: &'a wgm::modes::Caustic,
            launch_s: f64,
            arcs: usize,
            worst_relative_peak_offset: f64,
        }
        if self.cfg.wants(Format::Json) {
            let out = Out { caustic: &c, launch_s: s0, arcs: peaks.len(), worst_relative_peak_offset: worst };
            self.sink.json("caustic.json", &out).at(st)?;
        }
        let (lo, hi) = c.rho_c.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        println!(
            "caustic: rho_c in [{lo:.4}, {hi:.4}], {} arcs, worst arc-peak offset {:.2e}",
            peaks.len(),
            worst
        );
        Ok(())
    }
}
