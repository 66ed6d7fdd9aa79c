//! Whispering-gallery quasimodes of the Dirichlet Laplacian in a solid torus
//! of revolution.
//!
//! The pipeline runs curve → spectrum → modes → verification:
//!
//! * [`geometry`] builds the generating meridian curve from its curvature and
//!   exposes the revolved `(r, s, α)` chart.
//! * [`semiclassics`] solves the Bohr–Sommerfeld and periodic quantization
//!   rules and assembles `ℰ² = E² + h t_k E₁`.
//! * [`modes`] builds the longitudinal mode ψ, the boundary-layer mode
//!   `w(ρ, s)` and the 3-D quasimode `u(x, y, z)`.
//! * [`verify`] measures discrete residuals, fits their order in `h` and runs a
//!   finite-difference eigenvalue oracle.
//! * [`billiards`] integrates the reduced Hamiltonian flow and traces rays in
//!   the solid torus.
//!
//! ```
//! use std::sync::Arc;
//! use wgm::geometry::{build_curve, triangle_profile};
//! use wgm::semiclassics::{assemble_spectrum, ModeIndices, RegimeChoice, ScaleParams, Torus};
//!
//! let curve = Arc::new(build_curve(triangle_profile(0.4, std::f64::consts::TAU)?, 3.0)?);
//! let scale = ScaleParams::from_h(0.015, 1500)?;
//! let torus = Torus::new(curve, &scale);
//! let idx = ModeIndices::new(1500, 2, 5)?;
//! let spec = assemble_spectrum(&torus, &scale, &idx, RegimeChoice::Auto)?;
//! assert!((spec.e2 - 0.31169).abs() < 5e-4);
//! # Ok::<(), wgm::Error>(())
//! ```

pub mod billiards;
mod error;
pub mod geometry;
pub mod modes;
pub mod par;
pub mod quad;
pub mod semiclassics;
pub mod specfun;
pub mod verify;

pub use error::{Error, Result};
pub use par::Exec;

/// Library version, recorded in artifact metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
