//! Reduced Hamiltonian flow in `(s, ρ)` with a reflecting wall at `ρ = 0`,
//! straight-line ray billiards inside the solid torus and the action of the
//! longitudinal motion.

use crate::geometry::MeridianCurve;
use crate::par::{map_slice, Exec};
use crate::semiclassics::{action, stability_a, Longitudinal, SpectralData};
use crate::{Error, Result};
use serde::Serialize;

/// Allowed energy change per step, relative to `|H|`, before a step is
/// retried with half the time step.
pub const STEP_DRIFT_LIMIT: f64 = 1e-8;
pub const MAX_HALVINGS: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseState2D {
    pub s: f64,
    pub p_s: f64,
    pub rho: f64,
    pub p_rho: f64,
    pub energy: f64,
}

/// `H = p_s² + V(s; ℰ²) + h(p_ρ² + ρ𝒜³(s; ℰ²))`.
#[derive(Debug, Clone, Copy)]
pub struct ReducedHamiltonian<'a, M: Longitudinal + ?Sized> {
    pub model: &'a M,
    pub h: f64,
    pub curly_e2: f64,
}

impl<'a, M: Longitudinal + ?Sized> ReducedHamiltonian<'a, M> {
    pub fn new(model: &'a M, h: f64, curly_e2: f64) -> Self {
        Self { model, h, curly_e2 }
    }

    pub fn from_spectral(model: &'a M, spectral: &SpectralData) -> Self {
        Self::new(model, spectral.h, spectral.curly_e2)
    }

    pub fn h0(&self, s: f64, p_s: f64) -> f64 {
        p_s * p_s + self.model.u(s) - self.curly_e2
    }

    pub fn h1(&self, s: f64, rho: f64, p_rho: f64) -> f64 {
        p_rho * p_rho + rho * self.model.a3(s, self.curly_e2)
    }

    pub fn energy(&self, s: f64, p_s: f64, rho: f64, p_rho: f64) -> f64 {
        self.h0(s, p_s) + self.h * self.h1(s, rho, p_rho)
    }

    /// State with its energy filled in.
    pub fn state(&self, s: f64, p_s: f64, rho: f64, p_rho: f64) -> PhaseState2D {
        PhaseState2D { s, p_s, rho, p_rho, energy: self.energy(s, p_s, rho, p_rho) }
    }

    /// `∂H/∂s` and `∂H/∂ρ`.
    fn gradient(&self, s: f64, rho: f64) -> (f64, f64) {
        let e = self.curly_e2;
        (self.model.u_prime(s) + self.h * rho * self.model.a3_prime(s, e), self.h * self.model.a3(s, e))
    }

    /// One kick-drift-kick step of length `dt`.
    fn verlet(&self, x: &PhaseState2D, dt: f64) -> PhaseState2D {
        let (gs, gr) = self.gradient(x.s, x.rho);
        let ps = x.p_s - 0.5 * dt * gs;
        let pr = x.p_rho - 0.5 * dt * gr;
        let s = x.s + dt * 2.0 * ps;
        let rho = x.rho + dt * 2.0 * self.h * pr;
        let (gs, gr) = self.gradient(s, rho);
        let p_s = ps - 0.5 * dt * gs;
        let p_rho = pr - 0.5 * dt * gr;
        PhaseState2D { s, p_s, rho, p_rho, energy: x.energy }
    }

    /// Step of length `dt` with the wall at `ρ = 0`: the crossing time is
    /// located by bisection and `p_ρ` is reversed there. Returns the new
    /// state and the number of reflections.
    fn wall_step(&self, x: &PhaseState2D, dt: f64) -> (PhaseState2D, u32) {
        let mut cur = *x;
        let mut left = dt;
        let mut hits = 0;
        while left > 0.0 && hits < 4 {
            let y = self.verlet(&cur, left);
            if y.rho >= 0.0 {
                return (y, hits);
            }
            let (mut a, mut b) = (0.0, left);
            while b - a > 1e-12 * dt.max(1e-300) {
                let m = 0.5 * (a + b);
                if self.verlet(&cur, m).rho >= 0.0 {
                    a = m;
                } else {
                    b = m;
                }
            }
            let mut at = self.verlet(&cur, a);
            at.rho = at.rho.max(0.0);
            at.p_rho = at.p_rho.abs();
            cur = at;
            left -= a;
            hits += 1;
            if a == 0.0 {
                // the state sat on the wall moving outward
                cur.p_rho = cur.p_rho.abs();
            }
        }
        (self.verlet(&cur, left), hits)
    }
}

/// Maximum of `ρ` on one arc between wall reflections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArcPeak {
    pub s: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory2D {
    /// `(t, state)` every `stride` steps, first and last included.
    pub samples: Vec<(f64, PhaseState2D)>,
    pub reflections: usize,
    pub steps: usize,
    pub halvings: u32,
    /// `max |H(t) − H(0)| / |H(0)|`.
    pub max_relative_drift: f64,
    pub peaks: Vec<ArcPeak>,
}

/// Fixed-step Störmer–Verlet integration over `[0, t_end]`. A step whose
/// energy change exceeds `STEP_DRIFT_LIMIT·|H|` is redone with half the
/// time step, up to `MAX_HALVINGS` times.
pub fn flow_2d<M: Longitudinal + ?Sized>(
    ham: &ReducedHamiltonian<'_, M>,
    state0: PhaseState2D,
    t_end: f64,
    dt: f64,
    stride: usize,
) -> Result<Trajectory2D> {
    if !(dt > 0.0 && t_end > 0.0) {
        return Err(Error::Domain(format!("need positive T and dt, got T = {t_end}, dt = {dt}")));
    }
    if state0.rho < 0.0 {
        return Err(Error::Domain(format!("initial ρ = {} is negative", state0.rho)));
    }
    let stride = stride.max(1);
    let h0 = ham.energy(state0.s, state0.p_s, state0.rho, state0.p_rho);
    let scale = h0.abs().max(f64::MIN_POSITIVE);
    // step control falls back to the size of the terms when H is near zero
    let control = h0.abs().max(
        state0.p_s.powi(2)
            + (ham.model.u(state0.s) - ham.curly_e2).abs()
            + ham.h * (state0.p_rho.powi(2) + (state0.rho * ham.model.a3(state0.s, ham.curly_e2)).abs()),
    );
    let mut x = PhaseState2D { energy: h0, ..state0 };
    let steps = (t_end / dt).round().max(1.0) as usize;
    let mut out = Trajectory2D {
        samples: vec![(0.0, x)],
        reflections: 0,
        steps,
        halvings: 0,
        max_relative_drift: 0.0,
        peaks: Vec::new(),
    };
    let mut peak = ArcPeak { s: x.s, rho: x.rho };
    for step in 1..=steps {
        let mut level = 0;
        let (next, hits) = loop {
            let sub = 1usize << level;
            let dts = dt / sub as f64;
            let mut y = x;
            let mut hits = 0;
            for _ in 0..sub {
                let (z, k) = ham.wall_step(&y, dts);
                y = z;
                hits += k;
            }
            y.energy = ham.energy(y.s, y.p_s, y.rho, y.p_rho);
            if (y.energy - x.energy).abs() <= STEP_DRIFT_LIMIT * control {
                break (y, hits);
            }
            if level == MAX_HALVINGS {
                return Err(Error::Integration(format!(
                    "energy drift {:.3e} per step at t = {:.6} after {MAX_HALVINGS} halvings",
                    (y.energy - x.energy).abs() / control,
                    step as f64 * dt
                )));
            }
            level += 1;
            out.halvings = out.halvings.max(level);
        };
        if hits > 0 {
            out.peaks.push(peak);
            peak = ArcPeak { s: next.s, rho: next.rho };
            out.reflections += hits as usize;
        } else if next.rho > peak.rho {
            peak = ArcPeak { s: next.s, rho: next.rho };
        }
        x = next;
        out.max_relative_drift = out.max_relative_drift.max((x.energy - h0).abs() / scale);
        if step % stride == 0 || step == steps {
            out.samples.push((step as f64 * dt, x));
        }
    }
    Ok(out)
}

/// Independent trajectories, one per initial state.
pub fn flow_2d_batch<M: Longitudinal + ?Sized>(
    ham: &ReducedHamiltonian<'_, M>,
    states: &[PhaseState2D],
    t_end: f64,
    dt: f64,
    stride: usize,
    exec: Exec,
) -> Vec<Result<Trajectory2D>> {
    map_slice(states, exec, |x| flow_2d(ham, *x, t_end, dt, stride))
}

/// `1e−3·min(1, 1/max|V′|)` over the period.
pub fn default_dt<M: Longitudinal + ?Sized>(model: &M) -> f64 {
    let len = model.period();
    let vmax = (0..1024).map(|i| model.u_prime(len * i as f64 / 1024.0).abs()).fold(0.0f64, f64::max);
    1e-3 * (1.0f64).min(1.0 / vmax.max(f64::MIN_POSITIVE))
}

/// State on the wall at `s` with transverse energy `t_k𝒜²(s)` and the
/// longitudinal momentum that puts `H` at zero.
pub fn caustic_launch<M: Longitudinal + ?Sized>(
    ham: &ReducedHamiltonian<'_, M>,
    t_k: f64,
    s: f64,
) -> Result<PhaseState2D> {
    let a = stability_a(ham.model, s, ham.curly_e2)?;
    let p_rho = (t_k * a * a).sqrt();
    let p2 = -(ham.model.u(s) - ham.curly_e2 + ham.h * t_k * a * a);
    if p2 < 0.0 {
        return Err(Error::Domain(format!("s = {s} is classically forbidden at this energy")));
    }
    Ok(ham.state(s, p2.sqrt(), 0.0, p_rho))
}

/// Straight segment of a 3-D billiard path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ray3D {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub segment_length: f64,
}

impl Ray3D {
    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }

    /// `x·d_y − y·d_x`.
    pub fn angular_momentum_z(&self) -> f64 {
        self.origin[0] * self.direction[1] - self.origin[1] * self.direction[0]
    }

    pub fn speed(&self) -> f64 {
        norm3(self.direction)
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BilliardRun {
    /// One segment per bounce; the last one ends at the final bounce.
    pub rays: Vec<Ray3D>,
    pub bounce_points: Vec<[f64; 3]>,
    pub warnings: Vec<String>,
}

/// Signed distance to `∂T` in the meridian plane of `p`, positive inside.
fn depth(curve: &MeridianCurve, p: [f64; 3]) -> f64 {
    let xi = p[0].hypot(p[1]);
    match curve.project(xi, p[2]) {
        Ok((r, _)) => r,
        Err(_) => f64::INFINITY,
    }
}

/// Torus diameter `2(R + max|Q₁|)`.
pub fn torus_diameter(curve: &MeridianCurve) -> f64 {
    2.0 * (curve.radius + curve.extent().0)
}

/// Traces `bounces` reflections of a ray started inside `T`. Crossings are
/// bracketed by marching with step `diameter/200` and refined by bisection;
/// the direction is reflected about the surface normal.
pub fn billiard_3d(curve: &MeridianCurve, ray0: Ray3D, bounces: usize) -> Result<BilliardRun> {
    let speed = norm3(ray0.direction);
    if (speed - 1.0).abs() > 1e-14 {
        return Err(Error::Domain(format!("direction must be a unit vector, |d| = {speed}")));
    }
    if !(depth(curve, ray0.origin) > 0.0) {
        return Err(Error::Domain("ray origin lies outside the torus".into()));
    }
    let diameter = torus_diameter(curve);
    let step = diameter / 200.0;
    let limit = 10.0 * diameter;
    let mut run = BilliardRun { rays: Vec::with_capacity(bounces), bounce_points: Vec::new(), warnings: Vec::new() };
    let mut ray = Ray3D { segment_length: 0.0, ..ray0 };
    for bounce in 0..bounces {
        let mut lo = 0.0;
        let mut hi = step;
        loop {
            if depth(curve, ray.at(hi)) < 0.0 {
                break;
            }
            lo = hi;
            hi += step;
            if hi > limit {
                return Err(Error::Geometry(format!("no boundary crossing within {limit:.3} on bounce {bounce}")));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            if depth(curve, ray.at(mid)) >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let hit = ray.at(lo);
        let xi = hit[0].hypot(hit[1]);
        let (_, s) = curve.project(xi, hit[2])?;
        let (nxi, nz) = curve.inner_normal(s);
        let (ca, sa) = if xi > 0.0 { (hit[1] / xi, hit[0] / xi) } else { (1.0, 0.0) };
        let n = [nxi * sa, nxi * ca, nz];
        let d = ray.direction;
        let dn = d[0] * n[0] + d[1] * n[1] + d[2] * n[2];
        if dn.abs() < 1e-10 {
            run.warnings.push(format!("grazing incidence on bounce {bounce}: cos = {dn:.3e}"));
        }
        let mut out = [d[0] - 2.0 * dn * n[0], d[1] - 2.0 * dn * n[1], d[2] - 2.0 * dn * n[2]];
        let len = norm3(out);
        out.iter_mut().for_each(|c| *c /= len);
        ray.segment_length = lo;
        run.rays.push(ray);
        run.bounce_points.push(hit);
        ray = Ray3D { origin: hit, direction: out, segment_length: 0.0 };
    }
    Ok(run)
}

/// Polyline of a billiard run: the origin followed by every bounce point.
pub fn polyline(run: &BilliardRun) -> Vec<[f64; 3]> {
    let mut pts: Vec<[f64; 3]> = run.rays.first().map(|r| vec![r.origin]).unwrap_or_default();
    pts.extend(run.bounce_points.iter().copied());
    pts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ActionValue {
    #[serde(rename = "E2")]
    pub e2: f64,
    #[serde(rename = "I")]
    pub action: f64,
}

/// `I(E²) = (1/π)∫_{s₋}^{s₊} √(E² − U) ds`.
pub fn action_of_energy<M: Longitudinal + ?Sized>(model: &M, e2: f64) -> Result<ActionValue> {
    Ok(ActionValue { e2, action: action(model, e2)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_curve, triangle_profile, unit_circle_profile};
    use crate::semiclassics::{assemble_spectrum, ModeIndices, RegimeChoice, ScaleParams, Torus};
    use std::f64::consts::TAU;
    use std::sync::Arc;

    struct Harmonic {
        beta: f64,
    }

    impl Longitudinal for Harmonic {
        fn period(&self) -> f64 {
            100.0
        }
        fn u(&self, s: f64) -> f64 {
            let x = s - 50.0;
            self.beta * x * x
        }
        fn u_prime(&self, s: f64) -> f64 {
            2.0 * self.beta * (s - 50.0)
        }
        fn a3(&self, _s: f64, _e2: f64) -> f64 {
            1.0
        }
        fn a3_prime(&self, _s: f64, _e2: f64) -> f64 {
            0.0
        }
    }

    fn example() -> (Torus, SpectralData) {
        let curve = Arc::new(build_curve(triangle_profile(0.4, TAU).unwrap(), 3.0).unwrap());
        let scale = ScaleParams::from_h(0.015, 1500).unwrap();
        let t = Torus::new(curve, &scale);
        let d = assemble_spectrum(&t, &scale, &ModeIndices::new(1500, 2, 5).unwrap(), RegimeChoice::Auto).unwrap();
        (t, d)
    }

    #[test]
    fn harmonic_action_is_exact() {
        let m = Harmonic { beta: 0.7 };
        for e2 in [0.3, 1.1] {
            let a = action_of_energy(&m, e2).unwrap();
            assert!((a.action - e2 / (2.0 * 0.7f64.sqrt())).abs() < 1e-12);
        }
    }

    #[test]
    fn example_action_matches_quantum_number() {
        let (t, d) = example();
        let a = action_of_energy(&t, d.e2).unwrap();
        assert!((a.action / d.epsilon - 5.5).abs() < 1e-10);
        assert!(action_of_energy(&t, d.e2 + 1e-4).unwrap().action > a.action);
        assert!(action_of_energy(&t, 0.1).is_err());
    }

    #[test]
    fn decoupled_limit_keeps_rho() {
        let (t, d) = example();
        let ham = ReducedHamiltonian::new(&t, 0.0, d.curly_e2);
        let x0 = ham.state(4.0, 0.05, 1.5, 0.3);
        let tr = flow_2d(&ham, x0, 1.0, 1e-5, 1000).unwrap();
        let last = tr.samples.last().unwrap().1;
        assert_eq!((last.rho, last.p_rho), (1.5, 0.3));
        assert!((ham.h0(last.s, last.p_s) - ham.h0(x0.s, x0.p_s)).abs() < 1e-10);
    }

    #[test]
    fn caustic_is_upper_turning_locus() {
        let (t, d) = example();
        let ham = ReducedHamiltonian::from_spectral(&t, &d);
        let s0 = 4.0;
        let a = stability_a(&t, s0, d.curly_e2).unwrap();
        let x0 = ham.state(s0, 0.0, d.t_k / a, 0.0);
        let tr = flow_2d(&ham, x0, 0.5, 1e-3, 1).unwrap();
        assert!(tr.samples[1].1.rho < x0.rho);
        assert!(tr.samples.last().unwrap().1.rho < x0.rho);
    }

    #[test]
    fn reflection_reverses_normal_momentum() {
        let (t, d) = example();
        let ham = ReducedHamiltonian::from_spectral(&t, &d);
        let x0 = ham.state(4.0, 0.05, 1e-9, -0.2);
        let tr = flow_2d(&ham, x0, 0.01, 1e-3, 1).unwrap();
        assert_eq!(tr.reflections, 1);
        assert!(tr.samples.iter().all(|(_, x)| x.rho >= 0.0));
        assert!(tr.max_relative_drift < 1e-7);
    }

    #[test]
    fn normal_incidence_retraces() {
        let curve = build_curve(unit_circle_profile(), 3.0).unwrap();
        // equatorial plane z = 1 through the tube centre (3, 1)
        let ray = Ray3D { origin: [0.0, 3.0, 1.0], direction: [0.0, 1.0, 0.0], segment_length: 0.0 };
        let run = billiard_3d(&curve, ray, 2).unwrap();
        let p = run.bounce_points[0];
        assert!((p[1] - 4.0).abs() < 1e-9 && p[0].abs() < 1e-12 && (p[2] - 1.0).abs() < 1e-9);
        let back = run.rays[1].direction;
        assert!((back[1] + 1.0).abs() < 1e-9);
        assert!((run.bounce_points[1][1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn bad_rays_are_rejected() {
        let curve = build_curve(unit_circle_profile(), 3.0).unwrap();
        let outside = Ray3D { origin: [0.0, 10.0, 1.0], direction: [0.0, 1.0, 0.0], segment_length: 0.0 };
        assert!(billiard_3d(&curve, outside, 1).is_err());
        let slow = Ray3D { origin: [0.0, 3.0, 1.0], direction: [0.0, 0.5, 0.0], segment_length: 0.0 };
        assert!(billiard_3d(&curve, slow, 1).is_err());
    }
}
