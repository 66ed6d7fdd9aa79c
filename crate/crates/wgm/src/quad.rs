//! Quadrature and scalar root finding.
//!
//! * [`adaptive`]: globally adaptive Gauss–Kronrod (7/15) integration.
//! * [`Cumulative`]: composite Gauss–Legendre panels that evaluate
//!   `t ↦ ∫_a^t F` at arbitrary `t` by integrating the partial panel with the
//!   same rule, so the result is as smooth as `F`.
//! * [`bisect`]: bracketed bisection.

use crate::{Error, Result};
use std::sync::OnceLock;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// One Gauss–Kronrod 7/15 panel: `(kronrod, |kronrod − gauss|)`.
pub fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let hl = 0.5 * (b - a);
    let fc = f(c);
    let mut rk = WGK[7] * fc;
    let mut rg = WG[3] * fc;
    for j in 0..7 {
        let dx = hl * XGK[j];
        let s = f(c - dx) + f(c + dx);
        rk += WGK[j] * s;
        if j % 2 == 1 {
            rg += WG[j / 2] * s;
        }
    }
    (rk * hl, ((rk - rg) * hl).abs())
}

/// Globally adaptive integration of `f` over `[a, b]` until the summed error
/// estimate drops below `max(abs_tol, rel_tol·|I|)`.
pub fn adaptive<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (v, e) = gk15(&f, a, b);
    let mut panels = vec![(a, b, v, e)];
    let mut total = v;
    let mut err = e;
    for _ in 0..4000 {
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok(total);
        }
        let (i, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty panel list");
        let (pa, pb, pv, pe) = panels.swap_remove(i);
        let m = 0.5 * (pa + pb);
        let (v1, e1) = gk15(&f, pa, m);
        let (v2, e2) = gk15(&f, m, pb);
        total += v1 + v2 - pv;
        err += e1 + e2 - pe;
        panels.push((pa, m, v1, e1));
        panels.push((m, pb, v2, e2));
        // guard against drift of the running sums
        if panels.len() % 64 == 0 {
            total = panels.iter().map(|p| p.2).sum();
            err = panels.iter().map(|p| p.3).sum();
        }
    }
    total = panels.iter().map(|p| p.2).sum();
    err = panels.iter().map(|p| p.3).sum();
    if err <= abs_tol.max(rel_tol * total.abs()) * 10.0 {
        Ok(total)
    } else {
        Err(Error::Quadrature { estimate: err })
    }
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn gl10() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(10))
}

/// Ten-point Gauss–Legendre on `[a, b]`.
pub fn gl10_panel<F: Fn(f64) -> f64 + ?Sized>(f: &F, a: f64, b: f64) -> f64 {
    let (x, w) = gl10();
    let c = 0.5 * (a + b);
    let hl = 0.5 * (b - a);
    x.iter().zip(w).map(|(xi, wi)| wi * f(c + hl * xi)).sum::<f64>() * hl
}

/// Running integral `t ↦ ∫_a^t F` on `[a, b]` from composite ten-point
/// Gauss–Legendre panels.
#[derive(Clone)]
pub struct Cumulative<F> {
    f: F,
    a: f64,
    b: f64,
    width: f64,
    prefix: Vec<f64>,
}

impl<F> std::fmt::Debug for Cumulative<F> {
    fn fmt(&self, fm: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fm.debug_struct("Cumulative")
            .field("a", &self.a)
            .field("b", &self.b)
            .field("panels", &(self.prefix.len() - 1))
            .finish()
    }
}

impl<F: Fn(f64) -> f64> Cumulative<F> {
    pub fn new(f: F, a: f64, b: f64, panels: usize) -> Self {
        let width = (b - a) / panels as f64;
        let mut prefix = Vec::with_capacity(panels + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for i in 0..panels {
            let lo = a + i as f64 * width;
            acc += gl10_panel(&f, lo, lo + width);
            prefix.push(acc);
        }
        Self { f, a, b, width, prefix }
    }

    pub fn total(&self) -> f64 {
        *self.prefix.last().expect("at least one panel")
    }

    fn panel_of(&self, t: f64) -> usize {
        let n = self.prefix.len() - 1;
        (((t - self.a) / self.width).floor().max(0.0) as usize).min(n - 1)
    }

    /// `∫_a^t F`.
    pub fn head(&self, t: f64) -> f64 {
        let i = self.panel_of(t);
        let lo = self.a + i as f64 * self.width;
        self.prefix[i] + gl10_panel(&self.f, lo, t)
    }

    /// `∫_t^b F`, summed from the upper end to avoid cancellation near `b`.
    pub fn tail(&self, t: f64) -> f64 {
        let i = self.panel_of(t);
        let hi = self.a + (i + 1) as f64 * self.width;
        let hi = if i + 1 == self.prefix.len() - 1 { self.b } else { hi };
        (self.total() - self.prefix[i + 1]) + gl10_panel(&self.f, t, hi)
    }
}

/// Bisection for a sign change of `f` on `[lo, hi]`, stopping when the
/// bracket is narrower than `tol`.
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo * fhi > 0.0 {
        return Err(Error::Root(format!("no sign change on [{lo}, {hi}]")));
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= tol || mid == lo || mid == hi {
            return Ok(mid);
        }
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm * flo < 0.0 {
            hi = mid;
        } else {
            lo = mid;
            flo = fm;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gk_integrates_polynomials_exactly() {
        let (v, e) = gk15(&|x: f64| x.powi(20) - 3.0 * x.powi(7), -1.0, 2.0);
        let exact = (2f64.powi(21) + 1.0) / 21.0 - 3.0 * (2f64.powi(8) - 1.0) / 8.0;
        assert!((v - exact).abs() < 1e-9 * exact.abs());
        assert!(e >= 0.0);
    }

    #[test]
    fn adaptive_handles_sqrt_endpoint() {
        let v = adaptive(|x: f64| x.sqrt(), 0.0, 1.0, 1e-13, 0.0).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        let g = adaptive(|x: f64| (-x * x).exp(), -8.0, 8.0, 1e-14, 0.0).unwrap();
        assert!((g - std::f64::consts::PI.sqrt()).abs() < 1e-13);
    }

    #[test]
    fn gauss_legendre_weights() {
        for n in [2, 5, 10, 17] {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
            let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
            if n >= 3 {
                assert!((m4 - 0.4).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cumulative_head_and_tail() {
        let c = Cumulative::new(|t: f64| t.cos(), 0.0, 3.0, 16);
        for &t in &[0.0, 0.1, 1.234, 2.999, 3.0] {
            assert!((c.head(t) - t.sin()).abs() < 1e-14);
            assert!((c.tail(t) - (3f64.sin() - t.sin())).abs() < 1e-14);
        }
    }

    #[test]
    fn bisect_finds_root() {
        let r = bisect(|x| x * x - 2.0, 0.0, 2.0, 1e-15).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-14);
        assert!(bisect(|x| x * x + 1.0, 0.0, 1.0, 1e-12).is_err());
    }
}
