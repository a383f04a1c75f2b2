//! Index arithmetic on the hierarchical lattice `H^d_L`.
//!
//! A vertex of the `n`-block `Λ_n` is stored as a flat integer below `L^{dn}`
//! whose base-`L^d` digits are its coordinates in successive coarsening
//! levels: digit 1 (least significant) selects the vertex inside its 1-block,
//! digit `i` selects the `(i-1)`-block inside its `i`-block. Distances are
//! `‖x - y‖ = L^{h(x,y)}` with `h` the position of the most significant
//! differing digit.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Largest exponent `k` such that vertex counts up to `2^k` are accepted.
const MAX_VOLUME_BITS: u32 = 62;

/// Full parameterization of the model: dimension `d`, side `L`, decay
/// exponent `α` and coupling `β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub d: u32,
    #[serde(rename = "L")]
    pub l: u64,
    pub alpha: f64,
    pub beta: f64,
}

/// Which of the three critical regimes `(d, α)` falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// `d < 3α`
    Low,
    /// `d = 3α`
    Critical,
    /// `d > 3α`
    High,
}

impl ModelParams {
    pub fn new(d: u32, l: u64, alpha: f64, beta: f64) -> Result<Self> {
        let p = Self { d, l, alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(invalid("d must be at least 1"));
        }
        if self.l < 2 {
            return Err(invalid("L must be at least 2"));
        }
        if !self.alpha.is_finite() {
            return Err(invalid("alpha must be finite"));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(invalid(format!("beta must be finite and nonnegative, got {}", self.beta)));
        }
        if self.l.checked_pow(self.d).is_none() {
            return Err(invalid("L^d overflows"));
        }
        Ok(())
    }

    /// Checks `0 < α < d`, the range in which the critical point is finite.
    pub fn require_critical_range(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.alpha >= self.d as f64 {
            return Err(invalid(format!(
                "operation presumes 0 < alpha < d, got alpha = {} with d = {}",
                self.alpha, self.d
            )));
        }
        Ok(())
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self { beta, ..*self }
    }

    /// `L^d`, the number of children of every block.
    pub fn branching(&self) -> u64 {
        self.l.pow(self.d)
    }

    /// Largest admissible scale.
    pub fn scale_cap(&self) -> u32 {
        let bits_per_level = (self.branching() as f64).log2();
        ((MAX_VOLUME_BITS as f64 + 1e-9) / bits_per_level).floor() as u32
    }

    pub fn check_scale(&self, n: u32) -> Result<()> {
        let cap = self.scale_cap();
        if n > cap {
            return Err(Error::ScaleCap { n, cap, base: self.branching() });
        }
        Ok(())
    }

    /// Number of vertices `L^{dn}` of an `n`-block.
    pub fn volume(&self, n: u32) -> Result<u64> {
        self.check_scale(n)?;
        Ok(self.branching().pow(n))
    }

    /// `L^{-(d+α)m}`, the per-pair weight contributed by layer `m`.
    pub fn layer_weight(&self, m: u32) -> f64 {
        (self.l as f64).powf(-(self.d as f64 + self.alpha) * m as f64)
    }

    /// `t_n = β L^{-(d+α)n}`.
    pub fn t_n(&self, n: u32) -> f64 {
        self.beta * self.layer_weight(n)
    }

    /// `L^α`.
    pub fn l_alpha(&self) -> f64 {
        (self.l as f64).powf(self.alpha)
    }

    pub fn regime(&self) -> Regime {
        let gap = self.d as f64 - 3.0 * self.alpha;
        if gap.abs() <= 1e-12 {
            Regime::Critical
        } else if gap > 0.0 {
            Regime::High
        } else {
            Regime::Low
        }
    }
}

/// A vertex of an `n`-block, stored as its flat base-`L^d` index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VertexId(pub u64);

impl VertexId {
    pub fn check(self, params: &ModelParams, n: u32) -> Result<Self> {
        let vol = params.volume(n)?;
        if self.0 >= vol {
            return Err(Error::VertexOutOfRange { vertex: self.0, n });
        }
        Ok(self)
    }

    /// The `n` base-`L^d` digits, least significant (finest level) first.
    pub fn digits(self, params: &ModelParams, n: u32) -> Result<Vec<u64>> {
        self.check(params, n)?;
        let b = params.branching();
        let mut v = self.0;
        Ok((0..n)
            .map(|_| {
                let digit = v % b;
                v /= b;
                digit
            })
            .collect())
    }

    pub fn from_digits(params: &ModelParams, digits: &[u64]) -> Result<Self> {
        let b = params.branching();
        params.check_scale(digits.len() as u32)?;
        let mut v = 0u64;
        for &digit in digits.iter().rev() {
            if digit >= b {
                return Err(invalid(format!("digit {digit} not below L^d = {b}")));
            }
            v = v * b + digit;
        }
        Ok(VertexId(v))
    }

    /// Index of the `m`-block containing this vertex.
    pub fn block(self, params: &ModelParams, m: u32) -> u64 {
        self.0 / params.branching().pow(m)
    }

    /// Digitwise group difference `y - x` (coordinates live in `Z/L^d`).
    pub fn difference(self, other: VertexId, params: &ModelParams, n: u32) -> Result<VertexId> {
        let dx = self.digits(params, n)?;
        let dy = other.digits(params, n)?;
        let b = params.branching();
        let diff: Vec<u64> = dx.iter().zip(&dy).map(|(a, c)| (c + b - a) % b).collect();
        VertexId::from_digits(params, &diff)
    }
}

/// A scale together with a time in `[0, t_n]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleTime {
    pub n: u32,
    pub t: f64,
}

impl ScaleTime {
    pub fn new(params: &ModelParams, n: u32, t: f64) -> Result<Self> {
        params.check_scale(n)?;
        let t_max = params.t_n(n);
        if !(0.0..=t_max).contains(&t) {
            return Err(Error::TimeOutOfRange { t, t_max });
        }
        Ok(Self { n, t })
    }

    /// The endpoint `t = t_n`.
    pub fn end(params: &ModelParams, n: u32) -> Result<Self> {
        Self::new(params, n, params.t_n(n))
    }

    /// `t / t_n`, with the convention that the endpoint has fraction 1 even
    /// when `t_n = 0`.
    pub fn fraction(&self, params: &ModelParams) -> f64 {
        let t_max = params.t_n(self.n);
        if self.t == t_max {
            1.0
        } else {
            self.t / t_max
        }
    }
}

/// Ultrametric distance exponent `h(x, y)`: 0 when `x = y`, otherwise the
/// 1-based position of the most significant differing digit.
pub fn hdist(x: VertexId, y: VertexId, params: &ModelParams, n: u32) -> Result<u32> {
    x.check(params, n)?;
    y.check(params, n)?;
    Ok(hdist_unchecked(x.0, y.0, params.branching()))
}

#[inline]
pub(crate) fn hdist_unchecked(mut x: u64, mut y: u64, base: u64) -> u32 {
    let mut h = 0;
    while x != y {
        x /= base;
        y /= base;
        h += 1;
    }
    h
}

/// Ultrametric norm `‖x - y‖ = L^{h(x,y)}` (0 on the diagonal).
pub fn norm(x: VertexId, y: VertexId, params: &ModelParams, n: u32) -> Result<f64> {
    let h = hdist(x, y, params, n)?;
    Ok(if h == 0 { 0.0 } else { (params.l as f64).powi(h as i32) })
}

/// `Σ_{m=from}^{to} r^m` in closed form (`from ≤ to`, `0 < r < 1`).
fn geometric(r: f64, from: u32, to: u32) -> f64 {
    if to < from {
        return 0.0;
    }
    r.powi(from as i32) * (1.0 - r.powi((to - from + 1) as i32)) / (1.0 - r)
}

/// Free kernel `J(x, y) = Σ_{m ≥ h} L^{-(d+α)m}` as a function of `h ≥ 1`.
pub fn kernel_free_h(h: u32, params: &ModelParams) -> f64 {
    let r = params.layer_weight(1);
    r.powi(h as i32) / (1.0 - r)
}

/// Free kernel between two distinct vertices.
pub fn kernel_free(x: VertexId, y: VertexId, params: &ModelParams, n: u32) -> Result<f64> {
    let h = hdist(x, y, params, n)?;
    if h == 0 {
        return Err(Error::Diagonal);
    }
    Ok(kernel_free_h(h, params))
}

/// Interpolated kernel `J_{n,t}` as a function of `1 ≤ h ≤ n`:
/// `(t/t_n) L^{-(d+α)n} + Σ_{m=h}^{n-1} L^{-(d+α)m}`.
pub fn kernel_interpolated_h(h: u32, st: ScaleTime, params: &ModelParams) -> Result<f64> {
    if h == 0 {
        return Err(Error::Diagonal);
    }
    if h > st.n {
        return Err(invalid(format!("hdist {h} exceeds scale {}", st.n)));
    }
    let r = params.layer_weight(1);
    Ok(st.fraction(params) * params.layer_weight(st.n) + geometric(r, h, st.n - 1))
}

pub fn kernel_interpolated(x: VertexId, y: VertexId, n: u32, t: f64, params: &ModelParams) -> Result<f64> {
    let st = ScaleTime::new(params, n, t)?;
    let h = hdist(x, y, params, n)?;
    kernel_interpolated_h(h, st, params)
}

/// Number of terms in the partial-sum self-check of [`periodic_constant`].
const PERIODIC_CHECK_TERMS: u32 = 1000;

/// Constant `A` with `J_quot = J_free + A L^{-(d+α)n}` for the quotient
/// (periodic) kernel on an `n`-block. With `c = L^{d+α}/(L^{d+α}-1)`:
///
/// `A = c [L^{-(d+α)} + (L^d - 1) L^{-d} / (L^α - 1)]`.
///
/// The closed form is checked against an explicit 1000-term summation of the
/// series before it is returned.
pub fn periodic_constant(params: &ModelParams) -> Result<f64> {
    params.validate()?;
    if params.alpha <= 0.0 {
        return Err(invalid("periodic constant diverges for alpha <= 0"));
    }
    let ld = params.branching() as f64;
    let r = params.layer_weight(1);
    let c = 1.0 / (1.0 - r);
    let la = params.l_alpha();
    let closed = c * (r + (ld - 1.0) / (ld * (la - 1.0)));

    let partial = periodic_partial_sum(params, PERIODIC_CHECK_TERMS);
    let inv_la = 1.0 / la;
    let truncated_closed =
        c * (r + (ld - 1.0) / ld * inv_la * (1.0 - inv_la.powi(PERIODIC_CHECK_TERMS as i32)) / (1.0 - inv_la));
    let tol = 1e-12 * closed.max(1.0);
    if (partial - truncated_closed).abs() > tol || partial > closed + tol {
        return Err(Error::SelfCheck(format!(
            "periodic constant: closed form {closed} inconsistent with partial sum {partial}"
        )));
    }
    Ok(closed)
}

/// Explicit summation of the first `terms` terms of the quotient-kernel
/// surplus series (divided by `L^{-(d+α)n}`).
fn periodic_partial_sum(params: &ModelParams, terms: u32) -> f64 {
    let l = params.l as f64;
    let ld = params.branching() as f64;
    let dd = params.d as f64;
    let r = params.layer_weight(1);
    let c = 1.0 / (1.0 - r);
    let mut partial = c * r;
    for m in 1..=terms {
        let mf = m as f64;
        // L^{d(m-1)} L^{-(d+α)m}, combined in the exponent to avoid overflow.
        let scale = l.powf(dd * (mf - 1.0) - (dd + params.alpha) * mf);
        partial += (ld - 1.0) * c * scale;
    }
    partial
}

/// `|closed form - 1000-term partial sum|` of [`periodic_constant`].
pub fn periodic_constant_residual(params: &ModelParams) -> Result<f64> {
    let closed = periodic_constant(params)?;
    Ok((closed - periodic_partial_sum(params, PERIODIC_CHECK_TERMS)).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(d: u32, l: u64, alpha: f64, beta: f64) -> ModelParams {
        ModelParams::new(d, l, alpha, beta).unwrap()
    }

    #[test]
    fn hdist_examples() {
        let params = p(1, 2, 1.0, 1.0);
        assert_eq!(hdist(VertexId(3), VertexId(3), &params, 3).unwrap(), 0);
        assert_eq!(norm(VertexId(3), VertexId(3), &params, 3).unwrap(), 0.0);
        assert_eq!(hdist(VertexId(0), VertexId(1), &params, 3).unwrap(), 1);
        assert_eq!(norm(VertexId(0), VertexId(1), &params, 3).unwrap(), 2.0);
        assert_eq!(hdist(VertexId(0), VertexId(4), &params, 3).unwrap(), 3);
        assert_eq!(norm(VertexId(0), VertexId(4), &params, 3).unwrap(), 8.0);
        assert!(matches!(hdist(VertexId(0), VertexId(8), &params, 3), Err(Error::VertexOutOfRange { .. })));
    }

    #[test]
    fn scale_cap_is_enforced() {
        let params = p(1, 2, 0.5, 1.0);
        assert_eq!(params.scale_cap(), 62);
        assert!(params.volume(62).is_ok());
        assert!(matches!(params.volume(63), Err(Error::ScaleCap { .. })));
        let params = p(2, 3, 0.5, 1.0);
        assert!(params.volume(params.scale_cap() + 1).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::new(0, 2, 0.5, 1.0).is_err());
        assert!(ModelParams::new(1, 1, 0.5, 1.0).is_err());
        assert!(ModelParams::new(1, 2, 0.5, -1.0).is_err());
        assert!(ModelParams::new(1, 2, 0.5, f64::NAN).is_err());
        assert!(p(1, 2, 1.5, 1.0).require_critical_range().is_err());
        assert!(p(1, 2, 0.0, 1.0).require_critical_range().is_err());
        assert!(p(1, 2, 0.5, 1.0).require_critical_range().is_ok());
        assert_eq!(p(1, 2, 1.0 / 3.0, 1.0).regime(), Regime::Critical);
        assert_eq!(p(1, 2, 0.2, 1.0).regime(), Regime::High);
        assert_eq!(p(1, 2, 0.6, 1.0).regime(), Regime::Low);
    }

    #[test]
    fn kernel_free_examples() {
        let params = p(1, 2, 1.0, 1.0);
        assert!((kernel_free_h(1, &params) - 1.0 / 3.0).abs() < 1e-15);
        let a = kernel_free(VertexId(1), VertexId(6), &params, 3).unwrap();
        let b = kernel_free(VertexId(6), VertexId(1), &params, 3).unwrap();
        assert_eq!(a, b);
        for h in 1..10 {
            let ratio = kernel_free_h(h + 1, &params) / kernel_free_h(h, &params);
            assert!((ratio - 2f64.powf(-2.0)).abs() < 1e-14);
        }
        assert_eq!(kernel_free(VertexId(2), VertexId(2), &params, 3), Err(Error::Diagonal));
    }

    #[test]
    fn kernel_interpolated_examples() {
        let params = p(1, 2, 1.0, 0.7);
        let n = 2;
        let half = ScaleTime::new(&params, n, params.t_n(n) / 2.0).unwrap();
        assert!((kernel_interpolated_h(1, half, &params).unwrap() - 0.28125).abs() < 1e-15);

        let end = ScaleTime::end(&params, n).unwrap();
        let full: f64 = (1..=n).map(|m| params.layer_weight(m)).sum();
        assert!((kernel_interpolated_h(1, end, &params).unwrap() - full).abs() < 1e-15);

        let zero = ScaleTime::new(&params, n, 0.0).unwrap();
        assert_eq!(kernel_interpolated_h(n, zero, &params).unwrap(), 0.0);

        assert!(matches!(
            kernel_interpolated(VertexId(0), VertexId(1), n, 2.0 * params.t_n(n), &params),
            Err(Error::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn free_minus_interpolated_is_tail() {
        let params = p(1, 3, 0.4, 1.3);
        let n = 4;
        let end = ScaleTime::end(&params, n).unwrap();
        let tail = kernel_free_h(n + 1, &params);
        for h in 1..=n {
            let diff = kernel_free_h(h, &params) - kernel_interpolated_h(h, end, &params).unwrap();
            assert!(diff > 0.0);
            assert!((diff - tail).abs() < 1e-15);
        }
    }

    #[test]
    fn periodic_constant_checks() {
        for &(d, l, alpha) in &[(1, 2, 0.2), (1, 2, 0.5), (1, 2, 0.6), (2, 3, 0.7), (3, 2, 1.0)] {
            let params = p(d, l, alpha, 1.0);
            let a = periodic_constant(&params).unwrap();
            assert!(a > 0.0);
            assert!(periodic_constant_residual(&params).unwrap() < 1e-12);
        }
        assert!(periodic_constant(&p(1, 2, 0.0, 1.0)).is_err());
        assert!(periodic_constant(&p(1, 2, -0.5, 1.0)).is_err());
    }

    #[test]
    fn digits_round_trip_and_blocks() {
        let params = p(2, 3, 0.5, 1.0);
        let v = VertexId(1234);
        let digits = v.digits(&params, 4).unwrap();
        assert_eq!(VertexId::from_digits(&params, &digits).unwrap(), v);
        assert_eq!(v.block(&params, 1), 1234 / 9);
    }

    proptest! {
        #[test]
        fn ultrametric_inequality(x in 0u64..4096, y in 0u64..4096, z in 0u64..4096) {
            let params = p(1, 4, 0.5, 1.0);
            let (x, y, z) = (VertexId(x), VertexId(y), VertexId(z));
            let hxz = hdist(x, z, &params, 6).unwrap();
            let hxy = hdist(x, y, &params, 6).unwrap();
            let hyz = hdist(y, z, &params, 6).unwrap();
            prop_assert!(hxz <= hxy.max(hyz));
        }

        #[test]
        fn translation_invariance(x in 0u64..729, y in 0u64..729, s in 0u64..729) {
            let params = p(2, 3, 0.5, 1.0);
            let n = 3;
            let (x, y, s) = (VertexId(x), VertexId(y), VertexId(s));
            // Digitwise translation by s.
            let b = params.branching();
            let shift = |v: VertexId| {
                let dv = v.digits(&params, n).unwrap();
                let ds = s.digits(&params, n).unwrap();
                let moved: Vec<u64> = dv.iter().zip(&ds).map(|(a, c)| (a + c) % b).collect();
                VertexId::from_digits(&params, &moved).unwrap()
            };
            prop_assert_eq!(hdist(x, y, &params, n).unwrap(), hdist(shift(x), shift(y), &params, n).unwrap());
            let diff = x.difference(y, &params, n).unwrap();
            prop_assert_eq!(hdist(x, y, &params, n).unwrap(), hdist(VertexId(0), diff, &params, n).unwrap());
        }

        #[test]
        fn digits_round_trip(v in 0u64..(1u64 << 40)) {
            let params = p(1, 2, 0.5, 1.0);
            let digits = VertexId(v).digits(&params, 40).unwrap();
            prop_assert_eq!(VertexId::from_digits(&params, &digits).unwrap(), VertexId(v));
        }
    }
}
