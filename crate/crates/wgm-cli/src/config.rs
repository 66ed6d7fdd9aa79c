//! Run configuration: TOML with defaults for every omitted field.
//!
//! An empty file gives the default run (rounded-triangle meridian with
//! `σ = 0.4`, `L = 2π`, `R = 3`, `h = 0.015`, `n = 1500`, `k = 2`, `m = 5`).
//! A `[scale]` table, when present, must give exactly one of `h` and
//! `epsilon`.

use std::f64::consts::TAU;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use toml::Spanned;
use wgm::geometry::{build_curve, triangle_profile, CurvatureProfile, MeridianCurve};
use wgm::modes::{ModeOptions, DEFAULT_C_LOC, DEFAULT_MAX_NORM_CHANGE};
use wgm::semiclassics::{RegimeChoice, ScaleParams};

pub const MIN_NODES: usize = 1 << 8;
pub const MAX_NODES: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    Triangle,
    Circle,
    Tabulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub profile: ProfileName,
    pub sigma: f64,
    #[serde(rename = "L")]
    pub length: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    /// Curvature samples for `profile = "tabulated"`.
    pub samples: Vec<f64>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { profile: ProfileName::Triangle, sigma: 0.4, length: TAU, radius: 3.0, samples: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScale {
    h: Option<f64>,
    epsilon: Option<f64>,
    n: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeConfig {
    pub k: u32,
    pub m: u32,
    /// `δ` as a fraction of `s₊ − s₋`.
    pub delta: f64,
    pub ell: u32,
    #[serde(rename = "C_loc")]
    pub c_loc: f64,
    pub max_norm_change: f64,
    pub regime: RegimeChoice,
}

impl Default for ModeConfig {
    fn default() -> Self {
        let d = ModeOptions::default();
        Self {
            k: 2,
            m: 5,
            delta: d.delta_fraction,
            ell: d.ell,
            c_loc: DEFAULT_C_LOC,
            max_norm_change: DEFAULT_MAX_NORM_CHANGE,
            regime: RegimeChoice::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub s_nodes: usize,
    pub rho_nodes: usize,
    pub rho_max_factor: f64,
    pub oracle_nodes: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        let d = ModeOptions::default();
        Self { s_nodes: d.s_nodes, rho_nodes: d.rho_nodes, rho_max_factor: d.rho_max_factor, oracle_nodes: 4096 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BilliardConfig {
    /// Time step of the reduced flow; derived from the potential when absent.
    pub dt: Option<f64>,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub bounces: usize,
    /// `(s, p_s, ρ, p_ρ)` of the reduced flow.
    pub initial: [f64; 4],
    /// Start of the 3-D ray in chart coordinates `(r, s)`.
    pub origin_chart: [f64; 2],
    pub direction: [f64; 3],
}

impl Default for BilliardConfig {
    fn default() -> Self {
        Self {
            dt: None,
            t_end: 10.0,
            bounces: 500,
            initial: [4.0, 0.0, 0.0, 1e-4],
            origin_chart: [0.3, 1.0],
            direction: [0.3, 0.5, 0.2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: PathBuf::from("wgm-out"), formats: vec![Format::Csv, Format::Json] }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawConfig {
    geometry: GeometryConfig,
    scale: Option<Spanned<RawScale>>,
    mode: ModeConfig,
    grid: GridConfig,
    billiard: BilliardConfig,
    output: OutputConfig,
}

/// A validated run configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub scale: ScaleParams,
    pub mode: ModeConfig,
    pub grid: GridConfig,
    pub billiard: BilliardConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        parse_config("").expect("defaults are valid")
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(format!("{name} must be positive and finite, got {v}")))
    }
}

fn power_of_two(name: &str, v: usize) -> Result<(), ConfigError> {
    if v.is_power_of_two() && (MIN_NODES..=MAX_NODES).contains(&v) {
        Ok(())
    } else {
        Err(bad(format!("{name} must be a power of two in [{MIN_NODES}, {MAX_NODES}], got {v}")))
    }
}

/// Parses and validates TOML text.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
    let scale = match raw.scale {
        None => ScaleParams::from_h(0.015, 1500),
        Some(sp) => {
            let line = line_of(text, sp.span().start);
            let s = sp.into_inner();
            let n = s.n.unwrap_or(1500);
            match (s.h, s.epsilon) {
                (Some(h), None) => {
                    positive("h", h).map_err(|e| bad(format!("line {line}: {e}")))?;
                    ScaleParams::from_h(h, n)
                }
                (None, Some(eps)) => {
                    positive("epsilon", eps).map_err(|e| bad(format!("line {line}: {e}")))?;
                    ScaleParams::from_epsilon(eps, n)
                }
                (Some(_), Some(_)) => return Err(bad(format!("line {line}: [scale] gives both h and epsilon"))),
                (None, None) => return Err(bad(format!("line {line}: [scale] needs one of h or epsilon"))),
            }
        }
    }
    .map_err(|e| bad(e.to_string()))?;

    let g = &raw.geometry;
    positive("geometry.sigma", g.sigma)?;
    positive("geometry.L", g.length)?;
    positive("geometry.R", g.radius)?;
    if g.profile == ProfileName::Tabulated && g.samples.is_empty() {
        return Err(bad("geometry.samples is required for the tabulated profile"));
    }
    let m = &raw.mode;
    if m.k == 0 {
        return Err(bad("mode.k must be at least 1"));
    }
    if m.ell == 0 {
        return Err(bad("mode.ell must be at least 1"));
    }
    positive("mode.delta", m.delta)?;
    positive("mode.C_loc", m.c_loc)?;
    positive("mode.max_norm_change", m.max_norm_change)?;
    let gr = &raw.grid;
    power_of_two("grid.s_nodes", gr.s_nodes)?;
    power_of_two("grid.rho_nodes", gr.rho_nodes)?;
    power_of_two("grid.oracle_nodes", gr.oracle_nodes)?;
    positive("grid.rho_max_factor", gr.rho_max_factor)?;
    let b = &raw.billiard;
    if let Some(dt) = b.dt {
        positive("billiard.dt", dt)?;
    }
    positive("billiard.T", b.t_end)?;
    if b.bounces == 0 {
        return Err(bad("billiard.bounces must be at least 1"));
    }
    let dn = b.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    positive("norm of billiard.direction", dn)?;
    Ok(RunConfig { geometry: raw.geometry, scale, mode: raw.mode, grid: raw.grid, billiard: raw.billiard, output: raw.output })
}

impl RunConfig {
    pub fn profile(&self) -> wgm::Result<CurvatureProfile> {
        let g = &self.geometry;
        match g.profile {
            ProfileName::Triangle => triangle_profile(g.sigma, g.length),
            ProfileName::Circle => CurvatureProfile::circle(g.length),
            ProfileName::Tabulated => CurvatureProfile::tabulated(g.length, &g.samples),
        }
    }

    pub fn curve(&self) -> wgm::Result<MeridianCurve> {
        build_curve(self.profile()?, self.geometry.radius)
    }

    pub fn mode_options(&self) -> ModeOptions {
        ModeOptions {
            s_nodes: self.grid.s_nodes,
            rho_nodes: self.grid.rho_nodes,
            rho_max_factor: self.grid.rho_max_factor,
            delta_fraction: self.mode.delta,
            ell: self.mode.ell,
            ..Default::default()
        }
    }

    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }
}
