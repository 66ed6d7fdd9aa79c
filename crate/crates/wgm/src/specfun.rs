//! Airy functions, negative Airy roots and integer-order parabolic cylinder
//! functions.
//!
//! Ai and Ai′ use the Maclaurin series (summed in double-double) on
//! `[-AIRY_SWITCH_NEG, AIRY_SWITCH_POS]` and the large-argument asymptotic
//! expansions outside.

use crate::{Error, Result};
use serde::Serialize;
use std::f64::consts::PI;

/// Ai(0).
pub const AI_C1: f64 = 0.355_028_053_887_817_239_26;
/// −Ai′(0).
pub const AI_C2: f64 = 0.258_819_403_792_806_798_41;
/// Series is used for `x <= AIRY_SWITCH_POS`.
pub const AIRY_SWITCH_POS: f64 = 6.0;
/// Series is used for `x >= -AIRY_SWITCH_NEG`.
pub const AIRY_SWITCH_NEG: f64 = 8.0;

const MAX_ASYMPTOTIC_TERMS: usize = 60;

/// Ai and Ai′ evaluated at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AiryValue {
    pub ai: f64,
    pub ai_prime: f64,
}

/// The `k`-th negative zero of Ai, stored as `t_k > 0` with `Ai(-t_k) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AiryRoot {
    pub k: u32,
    pub t_k: f64,
}

fn check_finite(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("non-finite argument {x}")))
    }
}

/// Ai(x).
pub fn airy_ai(x: f64) -> Result<f64> {
    check_finite(x)?;
    Ok(airy(x).ai)
}

/// Ai′(x).
pub fn airy_ai_prime(x: f64) -> Result<f64> {
    check_finite(x)?;
    Ok(airy(x).ai_prime)
}

/// Both Ai and Ai′ at `x`. Returns NaN for non-finite input; use
/// [`airy_ai`] for the checked variant.
pub fn airy(x: f64) -> AiryValue {
    if x > AIRY_SWITCH_POS {
        asymptotic_pos(x)
    } else if x < -AIRY_SWITCH_NEG {
        asymptotic_neg(-x)
    } else {
        airy_series(x)
    }
}

/// Unevaluated sum `hi + lo` used to sum the Maclaurin series without
/// cancellation loss.
#[derive(Clone, Copy, Debug)]
struct Dd(f64, f64);

impl Dd {
    fn from(x: f64) -> Self {
        Dd(x, 0.0)
    }

    fn two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        let bb = s - a;
        Dd(s, (a - (s - bb)) + (b - bb))
    }

    fn add(self, o: Dd) -> Dd {
        let s = Dd::two_sum(self.0, o.0);
        let t = Dd::two_sum(self.1, o.1);
        let hi = Dd::two_sum(s.0, s.1 + t.0);
        Dd::two_sum(hi.0, hi.1 + t.1)
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.0 * o.0;
        let e = self.0.mul_add(o.0, -p);
        Dd::two_sum(p, e + self.0 * o.1 + self.1 * o.0)
    }

    fn div_f(self, d: f64) -> Dd {
        let q = self.0 / d;
        let r = self.add(Dd::from(d).mul(Dd::from(-q)));
        Dd::two_sum(q, r.0 / d)
    }

    fn neg(self) -> Dd {
        Dd(-self.0, -self.1)
    }

    fn value(self) -> f64 {
        self.0 + self.1
    }
}

const AI_C1_DD: Dd = Dd(0.3550280538878172, 2.05233632436212e-17);
const AI_C2_DD: Dd = Dd(0.2588194037928068, -2.522243111610832e-17);

/// Maclaurin series, `Ai = c1 f − c2 g`, summed in double-double.
pub(crate) fn airy_series(x: f64) -> AiryValue {
    let xd = Dd::from(x);
    let x3 = xd.mul(xd).mul(xd);
    let (mut f, mut g) = (Dd::from(1.0), xd);
    let (mut tf, mut tg) = (Dd::from(1.0), xd);
    // fp and gp accumulate x·f′(x) and x·g′(x)
    let (mut fp, mut gp) = (Dd::from(0.0), xd);
    for k in 0..400 {
        let k3 = 3.0 * k as f64;
        tf = tf.mul(x3).div_f((k3 + 2.0) * (k3 + 3.0));
        tg = tg.mul(x3).div_f((k3 + 3.0) * (k3 + 4.0));
        f = f.add(tf);
        g = g.add(tg);
        let dfp = tf.mul(Dd::from(k3 + 3.0));
        let dgp = tg.mul(Dd::from(k3 + 4.0));
        fp = fp.add(dfp);
        gp = gp.add(dgp);
        let small = |t: f64, s: f64| t.abs() <= 1e-34 * s.abs().max(1e-300);
        if k > 2 && small(tf.0, f.0) && small(tg.0, g.0) && small(dfp.0, fp.0) {
            break;
        }
    }
    let ai = AI_C1_DD.mul(f).add(AI_C2_DD.mul(g).neg()).value();
    let ai_prime = if x == 0.0 {
        -AI_C2
    } else {
        AI_C1_DD.mul(fp).add(AI_C2_DD.mul(gp).neg()).div_f(x).value()
    };
    AiryValue { ai, ai_prime }
}

fn u_coeffs() -> [f64; MAX_ASYMPTOTIC_TERMS] {
    let mut u = [0.0; MAX_ASYMPTOTIC_TERMS];
    u[0] = 1.0;
    for k in 1..MAX_ASYMPTOTIC_TERMS {
        let kf = k as f64;
        u[k] = u[k - 1] * (6.0 * kf - 5.0) * (6.0 * kf - 3.0) * (6.0 * kf - 1.0)
            / ((2.0 * kf - 1.0) * 216.0 * kf);
    }
    u
}

fn v_coeffs(u: &[f64; MAX_ASYMPTOTIC_TERMS]) -> [f64; MAX_ASYMPTOTIC_TERMS] {
    let mut v = [0.0; MAX_ASYMPTOTIC_TERMS];
    v[0] = 1.0;
    for k in 1..MAX_ASYMPTOTIC_TERMS {
        let kf = k as f64;
        v[k] = -(6.0 * kf + 1.0) / (6.0 * kf - 1.0) * u[k];
    }
    v
}

/// Sums `Σ (−1)^k c_k ζ^{−k}` up to the smallest term.
fn alternating_sum(c: &[f64], zeta: f64) -> f64 {
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut zk = 1.0;
    for (k, ck) in c.iter().enumerate() {
        let t = ck / zk;
        if k > 0 && t.abs() > prev {
            break;
        }
        prev = t.abs();
        sum += if k % 2 == 0 { t } else { -t };
        zk *= zeta;
    }
    sum
}

/// Splits the oscillatory series into even and odd parts, each summed up to
/// the smallest term of the full series.
fn split_sums(c: &[f64], zeta: f64) -> (f64, f64) {
    let (mut even, mut odd) = (0.0, 0.0);
    let mut prev = f64::INFINITY;
    let mut zk = 1.0;
    for (k, ck) in c.iter().enumerate() {
        let t = ck / zk;
        if k > 0 && t.abs() > prev {
            break;
        }
        prev = t.abs();
        let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
        if k % 2 == 0 {
            even += sign * t;
        } else {
            odd += sign * t;
        }
        zk *= zeta;
    }
    (even, odd)
}

fn asymptotic_pos(x: f64) -> AiryValue {
    let u = u_coeffs();
    let v = v_coeffs(&u);
    let zeta = 2.0 / 3.0 * x * x.sqrt();
    let e = (-zeta).exp() / (2.0 * PI.sqrt());
    let q = x.powf(0.25);
    AiryValue {
        ai: e / q * alternating_sum(&u, zeta),
        ai_prime: -e * q * alternating_sum(&v, zeta),
    }
}

/// Expansions for Ai(−z), Ai′(−z) with `z > 0`.
fn asymptotic_neg(z: f64) -> AiryValue {
    let u = u_coeffs();
    let v = v_coeffs(&u);
    let zeta = 2.0 / 3.0 * z * z.sqrt();
    let th = zeta - PI / 4.0;
    let (c, s) = (th.cos(), th.sin());
    let q = z.powf(0.25);
    let sp = PI.sqrt();
    let (ue, uo) = split_sums(&u, zeta);
    let (ve, vo) = split_sums(&v, zeta);
    AiryValue {
        ai: (c * ue + s * uo) / (sp * q),
        ai_prime: q / sp * (s * ve - c * vo),
    }
}

/// Initial guess `(3π(4k−1)/8)^{2/3}` for the `k`-th root.
pub fn airy_root_guess(k: u32) -> f64 {
    (3.0 * PI * (4.0 * k as f64 - 1.0) / 8.0).powf(2.0 / 3.0)
}

/// The `k`-th negative Airy root `t_k`, refined by safeguarded Newton
/// iteration on a sign-change bracket around the asymptotic guess.
pub fn airy_negative_root(k: i64) -> Result<AiryRoot> {
    if k < 1 {
        return Err(Error::Domain(format!("Airy root index must be >= 1, got {k}")));
    }
    let k = u32::try_from(k).map_err(|_| Error::Domain(format!("Airy root index {k} too large")))?;
    let guess = airy_root_guess(k);
    let f = |t: f64| airy(-t).ai;
    // the guess is within 0.02 of the root for every k
    let step = 0.05;
    let (mut lo, mut hi) = (guess, guess);
    let mut found = false;
    for _ in 0..12 {
        let (a, b) = (lo - step, hi + step);
        if f(a) * f(lo) <= 0.0 {
            hi = lo;
            lo = a;
            found = true;
            break;
        }
        if f(hi) * f(b) <= 0.0 {
            lo = hi;
            hi = b;
            found = true;
            break;
        }
        lo = a;
        hi = b;
    }
    if !found {
        return Err(Error::Root(format!("no sign change bracketing Airy root {k}")));
    }
    let t = refine_airy_root(0.5 * (lo + hi), lo, hi);
    Ok(AiryRoot { k, t_k: t })
}

/// Newton on `t ↦ Ai(−t)` kept inside `[lo, hi]`, bisecting when a step
/// leaves the bracket.
pub fn refine_airy_root(t0: f64, mut lo: f64, mut hi: f64) -> f64 {
    let f = |t: f64| airy(-t).ai;
    let flo = f(lo);
    let mut t = t0;
    for _ in 0..100 {
        let v = airy(-t);
        if v.ai == 0.0 {
            return t;
        }
        if v.ai * flo > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let mut next = t + v.ai / v.ai_prime;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - t).abs() <= 1e-15 * t.abs() {
            return next;
        }
        t = next;
    }
    t
}

/// Hermite polynomial `H_m(x)` by the three-term recurrence.
pub fn hermite(m: u32, x: f64) -> f64 {
    let (mut h0, mut h1) = (1.0, 2.0 * x);
    if m == 0 {
        return h0;
    }
    for k in 1..m {
        let h2 = 2.0 * x * h1 - 2.0 * k as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// Parabolic cylinder function `D_m(η) = 2^{−m/2} e^{−η²/4} H_m(η/√2)` for
/// integer `m ≥ 0`.
pub fn parabolic_cylinder_d(m: i64, eta: f64) -> Result<f64> {
    if m < 0 {
        return Err(Error::UnsupportedOrder(m));
    }
    check_finite(eta)?;
    let m = m as u32;
    Ok(parabolic_d(m, eta))
}

pub(crate) fn parabolic_d(m: u32, eta: f64) -> f64 {
    2f64.powf(-(m as f64) / 2.0) * (-eta * eta / 4.0).exp() * hermite(m, eta / 2f64.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_at_origin() {
        let v = airy(0.0);
        assert!((v.ai - 0.355028053887817).abs() < 1e-15);
        assert!((v.ai_prime + 0.258819403792807).abs() < 1e-15);
    }

    #[test]
    fn reference_values() {
        // independent high-precision values
        let cases = [
            (-10.0, 0.040241238486443191),
            (-5.0, 0.35076100902411432),
            (1.0, 0.13529241631288142),
            (7.0, 7.4921288639971671e-7),
        ];
        for (x, ai) in cases {
            assert!((airy(x).ai - ai).abs() < 1e-12, "x = {x}: {}", airy(x).ai);
        }
        assert!((airy(-2.0).ai_prime - 0.6182590207416910).abs() < 1e-12);
        assert!((airy(2.0).ai_prime + 0.05309038443365363).abs() < 1e-12);
        assert!((airy(-9.0).ai_prime + 0.97566398092633159).abs() < 1e-12);
    }

    #[test]
    fn decay_on_the_right() {
        let a = airy(20.0);
        assert!(a.ai > 0.0 && a.ai < 1e-15);
        assert!(a.ai_prime.abs() < 1e-14);
        let mut prev = airy(0.0).ai;
        for i in 1..200 {
            let v = airy(0.1 * i as f64).ai;
            assert!(v > 0.0 && v < prev);
            prev = v;
        }
    }

    #[test]
    fn branches_agree_across_switch() {
        for i in 0..=20 {
            let x = AIRY_SWITCH_POS + 0.05 * i as f64;
            let (s, a) = (airy_series(x), asymptotic_pos(x));
            assert!((s.ai - a.ai).abs() < 1e-13, "x = {x}");
            assert!((s.ai_prime - a.ai_prime).abs() < 1e-13, "x = {x}");
        }
        for i in 0..=20 {
            let x = AIRY_SWITCH_NEG + 0.05 * i as f64;
            let (s, a) = (airy_series(-x), asymptotic_neg(x));
            assert!((s.ai - a.ai).abs() < 1e-13, "x = -{x}");
            assert!((s.ai_prime - a.ai_prime).abs() < 1e-13, "x = -{x}");
        }
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(airy_ai(f64::NAN).is_err());
        assert!(airy_ai_prime(f64::INFINITY).is_err());
    }

    #[test]
    fn first_roots() {
        let t1 = airy_negative_root(1).unwrap().t_k;
        let t2 = airy_negative_root(2).unwrap().t_k;
        assert!((t1 - 2.338107410459767).abs() < 1e-12);
        assert!((t2 - 4.087949444130970).abs() < 1e-12);
        assert!(t1 < t2);
        assert!(airy(-t1).ai.abs() < 1e-12);
        assert!((airy(-t1).ai_prime.abs() - 0.70121).abs() < 1e-5);
        assert!(airy_negative_root(0).is_err());
        assert!(airy_negative_root(-3).is_err());
    }

    #[test]
    fn roots_are_ordered_and_idempotent() {
        let mut prev = 0.0;
        for k in 1..=20 {
            let r = airy_negative_root(k).unwrap();
            assert!(r.t_k > prev);
            assert!(airy(-r.t_k).ai.abs() <= 1e-12, "k = {k}");
            let again = refine_airy_root(r.t_k, r.t_k - 0.1, r.t_k + 0.1);
            assert!((again - r.t_k).abs() <= 1e-14 * r.t_k);
            prev = r.t_k;
        }
    }

    #[test]
    fn parabolic_small_orders() {
        assert!((parabolic_cylinder_d(0, 1.2).unwrap() - (-0.36f64).exp()).abs() < 1e-15);
        assert_eq!(parabolic_cylinder_d(1, 0.0).unwrap(), 0.0);
        assert!(matches!(parabolic_cylinder_d(-1, 0.0), Err(Error::UnsupportedOrder(-1))));
    }

    #[test]
    fn parabolic_order_five_matches_explicit_polynomial() {
        // H_5(x) = 32x^5 − 160x^3 + 120x with integer coefficients
        let eta = 2.0f64;
        let x = eta / 2f64.sqrt();
        let h5 = 32.0 * x.powi(5) - 160.0 * x.powi(3) + 120.0 * x;
        let d5 = 2f64.powf(-2.5) * (-1.0f64).exp() * h5;
        let got = parabolic_cylinder_d(5, eta).unwrap();
        assert!((got - d5).abs() < 1e-13 * d5.abs().max(1.0));
        // extended-precision reference
        assert!((got + 6.6218299410859618).abs() < 1e-13);
    }
}
