//! Deterministic moment machinery: the moment ODE right-hand side, the
//! hydrodynamic closed forms and theorem-level predictions, double
//! factorials, and two auxiliary identities (an integral and a scalar
//! recursion) used by the asymptotic analysis.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lattice::{ModelParams, Regime, ScaleTime};
use crate::oracle::{exact_cross_moment, exact_moments, PartitionLattice};

/// Estimates of `E‖X_{n,t}‖_p^p` and of cross moments
/// `E[‖X‖_a^a ‖X‖_b^b]`, all from one law or one replica set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentVector {
    pub n: u32,
    pub t: f64,
    pub marginal: BTreeMap<u32, f64>,
    pub cross: BTreeMap<(u32, u32), f64>,
}

impl MomentVector {
    pub fn new(n: u32, t: f64) -> Self {
        Self { n, t, ..Default::default() }
    }

    pub fn set_cross(&mut self, a: u32, b: u32, v: f64) {
        self.cross.insert((a.min(b), a.max(b)), v);
    }

    pub fn marginal(&self, p: u32) -> Result<f64> {
        self.marginal.get(&p).copied().ok_or_else(|| Error::MissingMoment(format!("E‖X‖_{p}^{p}")))
    }

    pub fn cross(&self, a: u32, b: u32) -> Result<f64> {
        self.cross
            .get(&(a.min(b), a.max(b)))
            .copied()
            .ok_or_else(|| Error::MissingMoment(format!("E[‖X‖_{a}^{a} ‖X‖_{b}^{b}]")))
    }

    /// Every marginal up to `p_max + 2` and every cross moment needed by
    /// [`lemma21_rhs`] up to `p_max`, from an exact law.
    pub fn from_exact(lattice: &PartitionLattice, law: &[f64], n: u32, t: f64, p_max: u32) -> Result<Self> {
        let mut v = Self::new(n, t);
        for p in 1..=p_max + 2 {
            v.marginal.insert(p, exact_moments(lattice, law, p)?);
        }
        for a in 2..=p_max {
            for b in a..=p_max {
                v.set_cross(a, b, exact_cross_moment(lattice, law, a, b)?);
            }
        }
        Ok(v)
    }

    /// The same from replica samples of mass lists (one set of replicas for
    /// every entry).
    pub fn from_samples<S: AsRef<[u64]>>(samples: &[S], n: u32, t: f64, p_max: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::TooFewSamples { need: 1, got: 0 });
        }
        let norms: Vec<Vec<f64>> =
            samples.iter().map(|s| (0..=p_max + 2).map(|p| crate::mass::power_sum(s.as_ref(), p)).collect()).collect();
        let r = samples.len() as f64;
        let mut v = Self::new(n, t);
        for p in 1..=p_max + 2 {
            v.marginal.insert(p, norms.iter().map(|x| x[p as usize]).sum::<f64>() / r);
        }
        for a in 2..=p_max {
            for b in a..=p_max {
                v.set_cross(a, b, norms.iter().map(|x| x[a as usize] * x[b as usize]).sum::<f64>() / r);
            }
        }
        Ok(v)
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `d/dt E‖X_t‖_p^p = ½ Σ_{k=1}^{p-1} C(p,k) E[‖X‖_{k+1}^{k+1} ‖X‖_{p-k+1}^{p-k+1}]
/// - (2^{p-1} - 1) E‖X‖_{p+2}^{p+2}`.
pub fn lemma21_rhs(m: &MomentVector, p: u32) -> Result<f64> {
    if p < 2 {
        return Err(invalid("the moment ODE needs p ≥ 2"));
    }
    let mut sum = 0.0;
    for k in 1..p {
        sum += binomial(p, k) * m.cross(k + 1, p - k + 1)?;
    }
    Ok(0.5 * sum - (2f64.powi(p as i32 - 1) - 1.0) * m.marginal(p + 2)?)
}

/// `(1/β_c)(L^α/(L^α-1) - t/t_n)^{-1} L^{(d+α)n}`, the hydrodynamic form of
/// `E‖X_{n,t}‖₂²` (and a lower bound for it at `β_c`).
pub fn hydro2(params: &ModelParams, beta_c: f64, n: u32, t: f64) -> Result<f64> {
    if !(beta_c > 0.0) {
        return Err(invalid("beta_c must be positive"));
    }
    let p = params.with_beta(beta_c);
    let st = ScaleTime::new(&p, n, t)?;
    let la = p.l_alpha();
    let d_alpha = p.d as f64 + p.alpha;
    Ok((la / (la - 1.0) - st.fraction(&p)).recip() / beta_c * (p.l as f64).powf(d_alpha * n as f64))
}

/// `(2p-5)!! m3^{p-2} / m2^{p-3}`.
pub fn hydro_p(p: u32, m2: f64, m3: f64) -> Result<f64> {
    if p < 3 {
        return Err(invalid("hydro_p needs p ≥ 3"));
    }
    if !(m2 > 0.0 && m3 > 0.0) {
        return Err(invalid("moments must be positive"));
    }
    let df = double_factorial_f64(2 * p as i64 - 5)?;
    Ok(df * m3.powi(p as i32 - 2) / m2.powi(p as i32 - 3))
}

/// Predicted `E|K_n|^p` (the low regime gives the order only, constant 1).
pub fn kn_prediction(params: &ModelParams, beta_c: f64, regime: Regime, p: u32, n: u32, a: f64) -> Result<f64> {
    params.require_critical_range()?;
    if params.regime() != regime {
        return Err(Error::RegimeMismatch(format!(
            "parameters are in the {:?} regime, not {regime:?}",
            params.regime()
        )));
    }
    if p < 1 {
        return Err(invalid("moment order must be at least 1"));
    }
    let l = params.l as f64;
    let (d, alpha, nf) = (params.d as f64, params.alpha, n as f64);
    let la = params.l_alpha();
    let high = |a: f64| -> Result<f64> {
        let df = double_factorial_f64(2 * p as i64 - 3)?;
        Ok(df * a.powi(p as i32 - 1) * (la - 1.0) / (la * beta_c) * l.powf((2 * p - 1) as f64 * alpha * nf))
    };
    match regime {
        Regime::Low => Ok(l.powf((alpha + (d + alpha) * (p - 1) as f64 / 2.0) * nf)),
        Regime::High => high(a),
        Regime::Critical => {
            let a = thm14_a(params, beta_c)?;
            Ok(high(a)? * nf.powf(-((p - 1) as f64) / 2.0))
        }
    }
}

/// `A = sqrt((L^α-1)/(β_c(5L^{4α}-2L^α-3)))` at `d = 3α`, after checking it
/// against the equivalent form `(L^α-1)^{3/2} β_c^{-3/2}(5L^{6α}-2L^{3α}-3L^{2α})^{-1/2}
/// = A (L^α-1)/(L^α β_c)` to `10⁻¹²`.
pub fn thm14_a(params: &ModelParams, beta_c: f64) -> Result<f64> {
    if (params.d as f64 - 3.0 * params.alpha).abs() > 1e-12 {
        return Err(Error::RegimeMismatch(format!("need d = 3α, got d = {}, α = {}", params.d, params.alpha)));
    }
    if !(beta_c > 0.0) {
        return Err(invalid("beta_c must be positive"));
    }
    let a = thm14_a_unchecked(params.l as f64, params.alpha, beta_c);
    let residual = thm14_residual(params.l as f64, params.alpha, beta_c);
    if residual > 1e-12 {
        return Err(Error::SelfCheck(format!("A identity residual {residual:e}")));
    }
    Ok(a)
}

fn thm14_a_unchecked(l: f64, alpha: f64, beta_c: f64) -> f64 {
    let la = l.powf(alpha);
    ((la - 1.0) / (beta_c * (5.0 * la.powi(4) - 2.0 * la - 3.0))).sqrt()
}

/// Relative gap between the two forms of the critical-dimension constant.
pub fn thm14_residual(l: f64, alpha: f64, beta_c: f64) -> f64 {
    let la = l.powf(alpha);
    let a = thm14_a_unchecked(l, alpha, beta_c);
    let lhs =
        (la - 1.0).powf(1.5) * beta_c.powf(-1.5) * (5.0 * la.powi(6) - 2.0 * la.powi(3) - 3.0 * la.powi(2)).powf(-0.5);
    let rhs = a * (la - 1.0) / (la * beta_c);
    ((lhs - rhs) / rhs).abs()
}

/// `k!!` for `k ≥ -1`, with `0!! = (-1)!! = 1`.
pub fn double_factorial(k: i64) -> Result<BigUint> {
    if k < -1 {
        return Err(invalid(format!("double factorial undefined for {k}")));
    }
    let mut acc = BigUint::from(1u32);
    let mut i = k;
    while i > 1 {
        acc *= BigUint::from(i as u64);
        i -= 2;
    }
    Ok(acc)
}

pub fn double_factorial_f64(k: i64) -> Result<f64> {
    let v = double_factorial(k)?;
    Ok(v.to_string().parse::<f64>().expect("decimal integer parses"))
}

fn binomial_big(n: u64, k: u64) -> BigUint {
    let mut acc = BigUint::from(1u32);
    for i in 0..k {
        acc *= BigUint::from(n - i);
        acc /= BigUint::from(i + 1);
    }
    acc
}

/// Both sides of `Σ_{k=1}^{n-1} C(n,k)(2k-3)!!(2n-2k-3)!! = 2(2n-3)!!`.
pub fn double_factorial_identity(n: u64) -> Result<(BigUint, BigUint)> {
    if n < 2 {
        return Err(invalid("identity needs n ≥ 2"));
    }
    let mut lhs = BigUint::from(0u32);
    for k in 1..n {
        lhs += binomial_big(n, k) * double_factorial(2 * k as i64 - 3)? * double_factorial(2 * (n - k) as i64 - 3)?;
    }
    let rhs = double_factorial(2 * n as i64 - 3)? * BigUint::from(2u32);
    Ok((lhs, rhs))
}

/// Partial sum `Σ_{n=1}^{terms} (2n-3)!! x^n / n!`, which tends to `1 - √(1-2x)`.
pub fn double_factorial_series(x: f64, terms: u32) -> Result<f64> {
    let mut sum = 0.0;
    let mut fact = 1.0;
    for n in 1..=terms {
        fact *= n as f64;
        sum += double_factorial_f64(2 * n as i64 - 3)? * x.powi(n as i32) / fact;
    }
    Ok(sum)
}

/// `-log(1 - (t/t_n)(L^α-1)/L^α)`, the closed form of
/// `(1/t_n) ∫_0^t (L^α/(L^α-1) - s/t_n)^{-1} ds`.
pub fn integral_identity(params: &ModelParams, n: u32, t: f64) -> Result<f64> {
    let st = ScaleTime::new(params, n, t)?;
    let la = params.l_alpha();
    Ok(-(-st.fraction(params) * (la - 1.0) / la).ln_1p())
}

/// The same integral by adaptive Simpson quadrature.
pub fn integral_quadrature(params: &ModelParams, n: u32, t: f64, tol: f64) -> Result<f64> {
    let st = ScaleTime::new(params, n, t)?;
    let tn = params.t_n(n);
    if st.t == 0.0 {
        return Ok(0.0);
    }
    let la = params.l_alpha();
    let f = |s: f64| (la / (la - 1.0) - s / tn).recip() / tn;
    Ok(adaptive_simpson(&f, 0.0, st.t, tol))
}

/// Adaptive Simpson integration to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Iterates `a_{n+1} = exp[-(1+δ_n) A a_n^γ] a_n` for `n < steps`, returning
/// `a_0, …, a_steps`.
pub fn seq_recursion<D: Fn(u64) -> f64>(a0: f64, a: f64, gamma: f64, delta: D, steps: u64) -> Result<Vec<f64>> {
    if !(a0 > 0.0 && a > 0.0 && gamma > 0.0) {
        return Err(invalid("a0, A and gamma must be positive"));
    }
    let mut out = Vec::with_capacity(steps as usize + 1);
    let mut x = a0;
    out.push(x);
    for n in 0..steps {
        x *= (-(1.0 + delta(n)) * a * x.powf(gamma)).exp();
        out.push(x);
    }
    Ok(out)
}

/// `a_N (γ A N)^{1/γ}`, which tends to 1.
pub fn seq_recursion_ratio(seq: &[f64], a: f64, gamma: f64) -> f64 {
    let n = (seq.len() - 1) as f64;
    seq[seq.len() - 1] * (gamma * a * n).powf(1.0 / gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{evolve, exact_recursive_law_at, unit_expansion};

    #[test]
    fn double_factorials() {
        assert_eq!(double_factorial(-1).unwrap(), BigUint::from(1u32));
        assert_eq!(double_factorial(0).unwrap(), BigUint::from(1u32));
        assert_eq!(double_factorial(7).unwrap(), BigUint::from(105u32));
        assert!(double_factorial(-2).is_err());
        let (l, r) = double_factorial_identity(4).unwrap();
        assert_eq!(l, BigUint::from(30u32));
        assert_eq!(r, BigUint::from(30u32));
        for n in 2..=30 {
            let (l, r) = double_factorial_identity(n).unwrap();
            assert_eq!(l, r, "n = {n}");
        }
    }

    #[test]
    fn generating_function() {
        let x = 0.2;
        let s = double_factorial_series(x, 30).unwrap();
        assert!((s - (1.0 - (1.0 - 2.0 * x).sqrt())).abs() < 1e-8);
    }

    #[test]
    fn hydro_forms() {
        let p = ModelParams::new(1, 2, 0.2, 1.0).unwrap();
        let bc = 0.7;
        let pc = p.with_beta(bc);
        let top = hydro2(&p, bc, 5, pc.t_n(5)).unwrap();
        let bottom = hydro2(&p, bc, 5, 0.0).unwrap();
        assert!((top / bottom - p.l_alpha()).abs() < 1e-12);
        let next = hydro2(&p, bc, 6, 0.0).unwrap();
        assert!((next / bottom - 2f64.powf(1.2)).abs() < 1e-12);
        assert_eq!(hydro_p(3, 2.0, 5.0).unwrap(), 5.0);
        assert!((hydro_p(4, 2.0, 5.0).unwrap() - 3.0 * 25.0 / 2.0).abs() < 1e-12);
        assert!((hydro_p(5, 2.0, 5.0).unwrap() - 15.0 * 125.0 / 4.0).abs() < 1e-12);
        assert!(hydro_p(2, 2.0, 5.0).is_err());
    }

    #[test]
    fn predictions() {
        let p = ModelParams::new(1, 2, 0.2, 1.0).unwrap();
        let bc = 0.5;
        let la = p.l_alpha();
        let one = kn_prediction(&p, bc, Regime::High, 1, 10, 123.0).unwrap();
        assert!((one - (la - 1.0) / (la * bc) * 2f64.powf(2.0)).abs() < 1e-12);
        assert!(kn_prediction(&p, bc, Regime::Low, 1, 10, 1.0).is_err());
        let low = ModelParams::new(1, 2, 0.6, 1.0).unwrap();
        assert!((kn_prediction(&low, bc, Regime::Low, 2, 10, 0.0).unwrap() - 2f64.powf(14.0)).abs() < 1e-6);
        let crit = ModelParams::new(1, 2, 1.0 / 3.0, 1.0).unwrap();
        let n = 12;
        let r = kn_prediction(&crit, bc, Regime::Critical, 2, n, 0.0).unwrap()
            / kn_prediction(&crit, bc, Regime::Critical, 1, n, 0.0).unwrap();
        let a = thm14_a(&crit, bc).unwrap();
        let expect = a / (n as f64).sqrt() * 2f64.powf(2.0 / 3.0 * n as f64);
        assert!((r / expect - 1.0).abs() < 1e-12);
    }

    #[test]
    fn critical_constant() {
        for (d, l, alpha) in [(1, 2, 1.0 / 3.0), (1, 3, 1.0 / 3.0), (2, 2, 2.0 / 3.0)] {
            let p = ModelParams::new(d, l, alpha, 1.0).unwrap();
            assert!(thm14_residual(l as f64, alpha, 0.9) <= 1e-12);
            let a1 = thm14_a(&p, 1.0).unwrap();
            let a4 = thm14_a(&p, 4.0).unwrap();
            assert!((a1 / a4 - 2.0).abs() < 1e-12);
        }
        let den = 5.0 * 2f64.powf(4.0 / 3.0) - 2.0 * 2f64.powf(1.0 / 3.0) - 3.0;
        assert!((den - 7.0794).abs() < 1e-4);
        assert!(thm14_a(&ModelParams::new(1, 2, 0.3, 1.0).unwrap(), 1.0).is_err());
    }

    #[test]
    fn integral() {
        let p = ModelParams::new(1, 2, 0.4, 2.0).unwrap();
        let n = 3;
        assert_eq!(integral_identity(&p, n, 0.0).unwrap(), 0.0);
        let end = integral_identity(&p, n, p.t_n(n)).unwrap();
        assert!((end - 0.4 * 2f64.ln()).abs() < 1e-14);
        for frac in [0.1, 0.5, 0.77] {
            let t = frac * p.t_n(n);
            let q = integral_quadrature(&p, n, t, 1e-13).unwrap();
            assert!((q - integral_identity(&p, n, t).unwrap()).abs() <= 1e-10);
        }
        assert!(integral_identity(&p, n, 2.0 * p.t_n(n)).is_err());
    }

    #[test]
    fn recursion() {
        let s = seq_recursion(1.0, 0.5, 2.0, |_| 0.0, 10_000).unwrap();
        let r = seq_recursion_ratio(&s, 0.5, 2.0);
        assert!((0.98..=1.02).contains(&r), "{r}");
        assert!(s.windows(2).all(|w| w[1] < w[0]));
        let s = seq_recursion(1.0, 1.0, 1.0, |_| 0.0, 10_000).unwrap();
        let r = s[10_000] * 1.0 * 1e4;
        assert!((0.97..=1.03).contains(&r), "{r}");
        assert!(seq_recursion(0.0, 1.0, 1.0, |_| 0.0, 3).is_err());
    }

    #[test]
    fn rhs_on_two_vertices_and_single_mass() {
        // {1,1}: E‖X_t‖₂² = 2 + 2(1 - e^{-t}), derivative 2e^{-t}
        let (l, init) = unit_expansion(&[1, 1]).unwrap();
        let g = l.generator();
        let t = 0.4;
        let law = evolve(&g, &l.point_mass(l.index_of(&init).unwrap()), t).unwrap();
        let mv = MomentVector::from_exact(&l, &law, 1, t, 4).unwrap();
        assert!((lemma21_rhs(&mv, 2).unwrap() - 2.0 * (-t).exp()).abs() < 1e-12);
        let (l1, init1) = unit_expansion(&[3]).unwrap();
        let law1 = l1.point_mass(l1.index_of(&init1).unwrap());
        let mv1 = MomentVector::from_exact(&l1, &law1, 0, 0.0, 4).unwrap();
        for p in 2..=4 {
            assert!(lemma21_rhs(&mv1, p).unwrap().abs() < 1e-9);
        }
        assert!(matches!(lemma21_rhs(&MomentVector::new(0, 0.0), 2), Err(Error::MissingMoment(_))));
    }

    #[test]
    fn rhs_matches_finite_differences_on_four_vertices() {
        let p = ModelParams::new(1, 2, 0.5, 6.0).unwrap();
        let n = 2;
        let h = 1e-4;
        let tn = p.t_n(n);
        let m3 = |t: f64| {
            let (l, law) = exact_recursive_law_at(&p, n, t).unwrap();
            exact_moments(&l, &law, 3).unwrap()
        };
        for frac in [0.3, 0.6] {
            let t = frac * tn;
            let fd = (-m3(t + 2.0 * h) + 8.0 * m3(t + h) - 8.0 * m3(t - h) + m3(t - 2.0 * h)) / (12.0 * h);
            let (l, law) = exact_recursive_law_at(&p, n, t).unwrap();
            let mv = MomentVector::from_exact(&l, &law, n, t, 3).unwrap();
            let rhs = lemma21_rhs(&mv, 3).unwrap();
            assert!((fd - rhs).abs() < 1e-6, "fd {fd} rhs {rhs}");
        }
    }
}
