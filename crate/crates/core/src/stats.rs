//! Estimators with merged-replica error bars: moment accumulators, tails,
//! size-biased moments, normalized norms, the error terms `E₂`, `E₃`, `H`,
//! variance ratios, the ghost transform, plus the small statistical toolkit
//! (two-sample KS, least squares, bootstrap) the experiments share.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, gamma_ur};

use crate::error::{invalid, Error, Result};
use crate::lattice::ModelParams;
use crate::mass::{kahan_sum, SizeMultiset};
use crate::rng::{Aux, StreamKey};

/// Running mean and variance (Welford), mergeable with Chan's formula.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    count: u64,
    mean: f64,
    m2: f64,
}

impl MomentEstimate {
    pub fn from_slice(values: &[f64]) -> Self {
        let mut e = Self::default();
        for &v in values {
            e.push(v);
        }
        e
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &Self) -> Self {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = self.count + other.count;
        let (na, nb) = (self.count as f64, other.count as f64);
        let delta = other.mean - self.mean;
        let mean = (na * self.mean + nb * other.mean) / n as f64;
        let m2 = self.m2 + other.m2 + delta * delta * na * nb / n as f64;
        Self { count: n, mean, m2 }
    }

    /// Rescales every observation by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self { count: self.count, mean: self.mean * c, m2: self.m2 * c * c }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance (0 for fewer than two observations).
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        (self.variance() / self.count as f64).sqrt()
    }
}

impl FromIterator<f64> for MomentEstimate {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut e = Self::default();
        for v in iter {
            e.push(v);
        }
        e
    }
}

// ---------------------------------------------------------------------------
// Generic tools

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Kolmogorov survival function `Q(λ) = 2 Σ (-1)^{k-1} e^{-2k²λ²}`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value
/// (Stephens' small-sample correction). Ties are handled by stepping both
/// empirical distribution functions past equal values together, which makes
/// the test conservative for discrete data.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    assert!(!a.is_empty() && !b.is_empty(), "KS needs two nonempty samples");
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    let p_value = kolmogorov_q((en + 0.12 + 0.11 / en) * d);
    KsResult { statistic: d, p_value }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub r2: f64,
    pub points: usize,
}

/// Weighted least squares `y ≈ a + b x`. The slope error uses the weights
/// as inverse variances when `absolute` is set, and the residual scatter
/// otherwise.
fn least_squares(x: &[f64], y: &[f64], w: &[f64], absolute: bool) -> Result<LinearFit> {
    let k = x.len();
    if k < 2 || y.len() != k || w.len() != k {
        return Err(Error::TooFewSamples { need: 2, got: k });
    }
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..k {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxx += w[i] * dx * dx;
        sxy += w[i] * dx * dy;
        syy += w[i] * dy * dy;
    }
    if !(sxx > 0.0) {
        return Err(Error::Degenerate("regression abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = (0..k).map(|i| w[i] * (y[i] - intercept - slope * x[i]).powi(2)).sum();
    let slope_se = if absolute {
        (1.0 / sxx).sqrt()
    } else if k > 2 {
        (rss / (k - 2) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    let r2 = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };
    Ok(LinearFit { slope, intercept, slope_se, r2, points: k })
}

pub fn ols(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    least_squares(x, y, &vec![1.0; x.len()], false)
}

/// Least squares with inverse-variance weights `w`.
pub fn wls(x: &[f64], y: &[f64], w: &[f64]) -> Result<LinearFit> {
    least_squares(x, y, w, true)
}

/// Percentile bootstrap interval, widened if needed so it always contains
/// the point estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub se: f64,
}

impl BootstrapCi {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// Bootstraps `stat` over resampled index sets of `0..n`.
pub fn bootstrap<F>(n: usize, resamples: usize, key: StreamKey, stat: F) -> Result<BootstrapCi>
where
    F: Fn(&mut dyn Iterator<Item = usize>) -> f64,
{
    if n == 0 {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let estimate = stat(&mut (0..n));
    let mut rng = key.aux(Aux::Bootstrap, 0).rng();
    let mut reps: Vec<f64> = (0..resamples)
        .map(|_| {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            stat(&mut idx.into_iter())
        })
        .filter(|v| v.is_finite())
        .collect();
    reps.sort_by(f64::total_cmp);
    if reps.is_empty() {
        return Err(Error::Degenerate("bootstrap produced no finite replicates".into()));
    }
    let q = |f: f64| reps[((f * (reps.len() - 1) as f64).round() as usize).min(reps.len() - 1)];
    let se = MomentEstimate::from_slice(&reps).variance().sqrt();
    Ok(BootstrapCi { estimate, lo: q(0.025).min(estimate), hi: q(0.975).max(estimate), se })
}

// ---------------------------------------------------------------------------
// Per-replica summaries

/// `‖X‖_p^p` for `p = 2..=5` of one replica.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSums {
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
    pub m5: f64,
}

impl PowerSums {
    pub fn from_multiset(s: &SizeMultiset) -> Self {
        Self { m2: s.power_sum(2), m3: s.power_sum(3), m4: s.power_sum(4), m5: s.power_sum(5) }
    }

    pub fn from_sizes(sizes: &[u64]) -> Self {
        Self::from_multiset(&SizeMultiset::from_sizes(sizes))
    }

    pub fn get(&self, p: u32) -> Option<f64> {
        match p {
            2 => Some(self.m2),
            3 => Some(self.m3),
            4 => Some(self.m4),
            5 => Some(self.m5),
            _ => None,
        }
    }
}

/// Typical maximum `M_n = min{m ≥ 0 : P(max ≥ m) ≤ e^{-1}}`, plug-in.
pub fn estimate_mn(max_samples: &[u64]) -> Result<u64> {
    if max_samples.len() < 100 {
        return Err(Error::TooFewSamples { need: 100, got: max_samples.len() });
    }
    let mut s = max_samples.to_vec();
    s.sort_unstable_by(|a, b| b.cmp(a));
    // #{x ≥ m} ≤ N/e  ⇔  m > s[K] with K = ⌊N/e⌋
    let k = (s.len() as f64 * (-1.0f64).exp()).floor() as usize;
    Ok(if k < s.len() { s[k] + 1 } else { 0 })
}

/// `E|K_n|^p` from whole-block samples: `L^{-dn} E‖X‖_{p+1}^{p+1}`, where
/// `L^{dn}` is each sample's total mass.
pub fn kn_moments(samples: &[SizeMultiset], p: u32) -> Result<MomentEstimate> {
    if p < 1 {
        return Err(invalid("moment order must be at least 1"));
    }
    Ok(samples.iter().map(|s| s.power_sum(p + 1) / s.total_mass() as f64).collect())
}

/// `E|K_n|^p` from direct samples of the origin's cluster size.
pub fn kn_moments_tagged(samples: &[u64], p: u32) -> Result<MomentEstimate> {
    if p < 1 {
        return Err(invalid("moment order must be at least 1"));
    }
    Ok(samples.iter().map(|&k| (k as f64).powi(p as i32)).collect())
}

// ---------------------------------------------------------------------------
// Tails

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub k: u64,
    pub survival: f64,
    pub stderr: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailCurve {
    pub points: Vec<TailPoint>,
    /// Slope of `log P(|K| ≥ k)` against `log k` over the fit window.
    pub fit: LinearFit,
    pub window: (u64, u64),
}

/// Smallest survival value kept in the fit window (the top 2% of the law).
pub const TAIL_TOP_FRACTION: f64 = 0.02;

fn check_grid(grid: &[u64]) -> Result<()> {
    if grid.is_empty() || grid[0] == 0 || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("grid must be nonempty, positive and strictly increasing"));
    }
    Ok(())
}

/// Geometric grid of integers `lo ≤ k ≤ hi` with `per_decade` points per decade.
pub fn log_grid(lo: u64, hi: u64, per_decade: u32) -> Vec<u64> {
    let mut g: Vec<u64> = Vec::new();
    let steps = ((hi as f64 / lo as f64).log10() * per_decade as f64).ceil() as u32;
    for i in 0..=steps {
        let k = (lo as f64 * 10f64.powf(i as f64 / per_decade as f64)).round() as u64;
        let k = k.min(hi);
        if g.last() != Some(&k) {
            g.push(k);
        }
    }
    g
}

/// Fits the tail slope over `k ≥ 10·grid[0]` (the lowest decade is dropped)
/// and `survival ≥ 2%` (the top 2% of the law is dropped).
pub fn fit_tail(points: Vec<TailPoint>, replicas: u64) -> Result<TailCurve> {
    let k0 = points.first().map(|p| p.k).unwrap_or(1);
    let window: Vec<&TailPoint> = points.iter().filter(|p| p.k >= 10 * k0 && p.survival >= TAIL_TOP_FRACTION).collect();
    if window.len() < 3 {
        return Err(Error::Degenerate(format!("tail fit window has {} points", window.len())));
    }
    if window.iter().all(|p| p.survival == window[0].survival) {
        return Err(Error::Degenerate("survival is flat over the fit window".into()));
    }
    let x: Vec<f64> = window.iter().map(|p| (p.k as f64).ln()).collect();
    let y: Vec<f64> = window.iter().map(|p| p.survival.ln()).collect();
    let floor = 1.0 / (replicas as f64).powi(2);
    let w: Vec<f64> = window.iter().map(|p| p.survival * p.survival / (p.stderr * p.stderr).max(floor)).collect();
    let fit = wls(&x, &y, &w)?;
    let win = (window[0].k, window[window.len() - 1].k);
    Ok(TailCurve { points, fit, window: win })
}

/// Empirical survival of direct samples of `|K|` on `grid`.
pub fn tail_points(samples: &[u64], grid: &[u64]) -> Result<Vec<TailPoint>> {
    check_grid(grid)?;
    if samples.is_empty() {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let mut s = samples.to_vec();
    s.sort_unstable();
    let n = s.len() as f64;
    Ok(grid
        .iter()
        .map(|&k| {
            let above = (s.len() - s.partition_point(|&x| x < k)) as f64;
            let p = above / n;
            let (lo, hi) = wilson(above, n);
            TailPoint { k, survival: p, stderr: (p * (1.0 - p) / n).sqrt(), lo, hi }
        })
        .collect())
}

fn wilson(successes: f64, n: f64) -> (f64, f64) {
    let z = 1.96;
    let p = successes / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).clamp(0.0, p), (centre + half).clamp(p, 1.0))
}

/// Tail curve of direct samples of `|K|`.
pub fn tail_curve(samples: &[u64], grid: &[u64]) -> Result<TailCurve> {
    fit_tail(tail_points(samples, grid)?, samples.len() as u64)
}

/// Tail of `|K_n|` from whole-block samples: by translation invariance
/// `P(|K_n| ≥ k) = E[Σ_{|C| ≥ k} |C|] / L^{dn}`.
pub fn tail_points_blocks(samples: &[SizeMultiset], grid: &[u64]) -> Result<Vec<TailPoint>> {
    check_grid(grid)?;
    if samples.is_empty() {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let mut est = vec![MomentEstimate::default(); grid.len()];
    for s in samples {
        let vol = s.total_mass() as f64;
        // mass in clusters of size ≥ k, for decreasing k
        let mut acc = 0u64;
        let mut it = s.iter().collect::<Vec<_>>().into_iter().rev().peekable();
        for (gi, &k) in grid.iter().enumerate().rev() {
            while let Some(&(size, count)) = it.peek() {
                if size >= k {
                    acc += size * count;
                    it.next();
                } else {
                    break;
                }
            }
            est[gi].push(acc as f64 / vol);
        }
    }
    Ok(grid
        .iter()
        .zip(est)
        .map(|(&k, e)| {
            let se = e.stderr();
            TailPoint {
                k,
                survival: e.mean(),
                stderr: se,
                lo: (e.mean() - 1.96 * se).max(0.0),
                hi: (e.mean() + 1.96 * se).min(1.0),
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Size-biased law

/// `p`-th moment of the size-biased law rescaled by its mean,
/// `E|K|^{p+1} (E|K|)^{p-1} / (E|K|²)^p`.
pub fn size_biased_moments(samples: &[u64], p: u32) -> Result<f64> {
    let m = |q: i32| kahan_sum(samples.iter().map(|&k| (k as f64).powi(q))) / samples.len() as f64;
    size_biased_from(m(p as i32 + 1), m(1), m(2), p)
}

/// Same statistic for real-valued samples.
pub fn size_biased_moments_real(samples: &[f64], p: u32) -> Result<f64> {
    let m = |q: i32| kahan_sum(samples.iter().map(|&k| k.powi(q))) / samples.len() as f64;
    size_biased_from(m(p as i32 + 1), m(1), m(2), p)
}

fn size_biased_from(mp1: f64, m1: f64, m2: f64, p: u32) -> Result<f64> {
    if p < 1 {
        return Err(invalid("moment order must be at least 1"));
    }
    if !(m2 > 0.0) {
        return Err(Error::Degenerate("zero second moment".into()));
    }
    Ok(mp1 * m1.powi(p as i32 - 1) / m2.powi(p as i32))
}

/// The same statistic from whole-block samples, via `E|K_n|^q = L^{-dn}
/// E‖X‖_{q+1}^{q+1}`: `m_{p+2} m_2^{p-1} / m_3^p` with `m_q = E‖X‖_q^q`.
pub fn size_biased_from_norms(samples: &[SizeMultiset], p: u32) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let m = |q: u32| kahan_sum(samples.iter().map(|s| s.power_sum(q))) / samples.len() as f64;
    let (m2, m3) = (m(2), m(3));
    size_biased_from(m(p + 2), m2, m3, p)
}

/// Draws from the density `∝ x^{-3/2} e^{-x/2}` on `[a, ∞)`: a law whose
/// size-biased, mean-rescaled version is chi-squared(1) conditioned on
/// `x ≥ a`. Pareto proposals `a/U²`, accepted with probability `e^{-(x-a)/2}`.
pub fn synthetic_size_biased_samples(a: f64, draws: usize, key: StreamKey) -> Result<Vec<f64>> {
    if !(a > 0.0) {
        return Err(invalid("truncation point must be positive"));
    }
    let mut rng = key.aux(Aux::Synthetic, 0).rng();
    let mut out = Vec::with_capacity(draws);
    while out.len() < draws {
        let u: f64 = 1.0 - rng.random::<f64>();
        let x = a / (u * u);
        if rng.random::<f64>() < (-(x - a) / 2.0).exp() {
            out.push(x);
        }
    }
    Ok(out)
}

/// `∫_a^∞ x^{q-3/2} e^{-x/2} dx`.
fn truncated_integral(a: f64, q: i32) -> f64 {
    if q == 0 {
        // integrate by parts: 2a^{-1/2}e^{-a/2} - ∫ x^{-1/2} e^{-x/2}
        return 2.0 * a.powf(-0.5) * (-a / 2.0).exp() - truncated_integral(a, 1);
    }
    let s = q as f64 - 0.5;
    2f64.powf(s) * gamma(s) * gamma_ur(s, a / 2.0)
}

/// Exact value of [`size_biased_moments`] for the law sampled by
/// [`synthetic_size_biased_samples`]; tends to `(2p-1)!!` as `a → 0`.
pub fn synthetic_size_biased_exact(a: f64, p: u32) -> f64 {
    let i = |q: i32| truncated_integral(a, q);
    let p = p as i32;
    // E X^q = I(q)/I(0)
    (i(p + 1) / i(0)) * (i(1) / i(0)).powi(p - 1) / (i(2) / i(0)).powi(p)
}

// ---------------------------------------------------------------------------
// Normalized norms and truncated second moments

/// `E Σ_i (L^{-(d+α)n/2} |K_{n,i}|)^p`.
pub fn lp_normalized(samples: &[SizeMultiset], p: f64, n: u32, params: &ModelParams) -> Result<MomentEstimate> {
    if !(p >= 1.0) {
        return Err(invalid("p must be at least 1"));
    }
    let scale = (params.l as f64).powf(-(params.d as f64 + params.alpha) * n as f64 / 2.0);
    Ok(samples.iter().map(|s| s.power_sum_real(p) * scale.powf(p)).collect())
}

/// `Σ_A |A| (|A| ∧ m)` for one partition.
pub fn truncated_norm(sample: &SizeMultiset, m: u64) -> f64 {
    kahan_sum(sample.iter().map(|(s, c)| (c * s) as f64 * s.min(m) as f64))
}

pub fn truncated_m2(samples: &[SizeMultiset], m: u64) -> Result<MomentEstimate> {
    if m < 1 {
        return Err(invalid("truncation level must be at least 1"));
    }
    Ok(samples.iter().map(|s| truncated_norm(s, m)).collect())
}

// ---------------------------------------------------------------------------
// Error terms and variance ratios

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorTerms {
    pub e2: BootstrapCi,
    pub e3: BootstrapCi,
    pub h: BootstrapCi,
}

struct Pooled {
    m2: f64,
    m3: f64,
    m4: f64,
    m5: f64,
    var2: f64,
    cov23: f64,
}

fn pooled(samples: &[PowerSums], idx: &mut dyn Iterator<Item = usize>) -> Pooled {
    let mut n = 0.0;
    let (mut s2, mut s3, mut s4, mut s5, mut s22, mut s23) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in idx {
        let x = &samples[i];
        n += 1.0;
        s2 += x.m2;
        s3 += x.m3;
        s4 += x.m4;
        s5 += x.m5;
        s22 += x.m2 * x.m2;
        s23 += x.m2 * x.m3;
    }
    let (m2, m3) = (s2 / n, s3 / n);
    Pooled { m2, m3, m4: s4 / n, m5: s5 / n, var2: s22 / n - m2 * m2, cov23: s23 / n - m2 * m3 }
}

/// Plug-in `E₂ = (E‖X‖₄⁴ - Var ‖X‖₂²)/(E‖X‖₂²)²`,
/// `E₃ = (E‖X‖₅⁵ - Cov(‖X‖₂², ‖X‖₃³))/(E‖X‖₂² E‖X‖₃³)` and
/// `H = (L^α/(L^α-1) - t/t_n) t_n E‖X‖₂² - 1`, all from the same replicas.
pub fn error_terms(samples: &[PowerSums], n: u32, t: f64, params: &ModelParams, key: StreamKey) -> Result<ErrorTerms> {
    if samples.len() < 50 {
        return Err(Error::TooFewSamples { need: 50, got: samples.len() });
    }
    let st = crate::lattice::ScaleTime::new(params, n, t)?;
    let la = params.l_alpha();
    let tn = params.t_n(n);
    let frac = st.fraction(params);
    let e2 = bootstrap(samples.len(), BOOTSTRAP_RESAMPLES, key.replica(2), |idx| {
        let p = pooled(samples, idx);
        (p.m4 - p.var2) / (p.m2 * p.m2)
    })?;
    let e3 = bootstrap(samples.len(), BOOTSTRAP_RESAMPLES, key.replica(3), |idx| {
        let p = pooled(samples, idx);
        (p.m5 - p.cov23) / (p.m2 * p.m3)
    })?;
    let h = bootstrap(samples.len(), BOOTSTRAP_RESAMPLES, key.replica(4), |idx| {
        let p = pooled(samples, idx);
        (la / (la - 1.0) - frac) * tn * p.m2 - 1.0
    })?;
    Ok(ErrorTerms { e2, e3, h })
}

/// `Var(‖X‖₂²)/E‖X‖₄⁴` and `Cov(‖X‖₂², ‖X‖₃³)/E‖X‖₅⁵`.
pub fn var_cov_ratios(samples: &[PowerSums], key: StreamKey) -> Result<(BootstrapCi, BootstrapCi)> {
    if samples.len() < 1000 {
        return Err(Error::TooFewSamples { need: 1000, got: samples.len() });
    }
    let p = pooled(samples, &mut (0..samples.len()));
    if !(p.var2 > 0.0) {
        return Err(Error::Degenerate("‖X‖₂² has zero variance".into()));
    }
    let var = bootstrap(samples.len(), BOOTSTRAP_RESAMPLES, key.replica(5), |idx| {
        let p = pooled(samples, idx);
        p.var2 / p.m4
    })?;
    let cov = bootstrap(samples.len(), BOOTSTRAP_RESAMPLES, key.replica(6), |idx| {
        let p = pooled(samples, idx);
        p.cov23 / p.m5
    })?;
    Ok((var, cov))
}

// ---------------------------------------------------------------------------
// Ghost transform and tightness

/// `E[1 - e^{-h|K|}]`.
pub fn ghost_transform(samples: &[u64], h: f64) -> Result<MomentEstimate> {
    if !(h >= 0.0) {
        return Err(invalid("ghost intensity must be nonnegative"));
    }
    Ok(samples.iter().map(|&k| -(-h * k as f64).exp_m1()).collect())
}

/// `P(X ≥ a·E X)` for each threshold `a`, from the samples' own mean.
pub fn tightness_survival(values: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    let mean = kahan_sum(values.iter().copied()) / values.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::Degenerate("nonpositive mean".into()));
    }
    Ok(thresholds
        .iter()
        .map(|&a| values.iter().filter(|&&v| v >= a * mean).count() as f64 / values.len() as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn moment_estimate_basics() {
        let e = MomentEstimate::from_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.count(), 4);
        assert!((e.mean() - 2.5).abs() < 1e-15);
        assert!((e.variance() - 5.0 / 3.0).abs() < 1e-14);
        assert!(MomentEstimate::default().stderr().is_nan());
    }

    proptest! {
        #[test]
        fn merge_is_exact_and_associative(
            a in proptest::collection::vec(-1e3f64..1e3, 0..40),
            b in proptest::collection::vec(-1e3f64..1e3, 0..40),
            c in proptest::collection::vec(-1e3f64..1e3, 0..40),
        ) {
            let (ea, eb, ec) = (MomentEstimate::from_slice(&a), MomentEstimate::from_slice(&b), MomentEstimate::from_slice(&c));
            let all: Vec<f64> = a.iter().chain(&b).chain(&c).copied().collect();
            let whole = MomentEstimate::from_slice(&all);
            let left = ea.merge(&eb).merge(&ec);
            let right = ea.merge(&eb.merge(&ec));
            let swapped = ec.merge(&ea).merge(&eb);
            for m in [left, right, swapped] {
                prop_assert_eq!(m.count(), whole.count());
                prop_assert!((m.mean() - whole.mean()).abs() <= 1e-9 * (1.0 + whole.mean().abs()));
                prop_assert!((m.variance() - whole.variance()).abs() <= 1e-7 * (1.0 + whole.variance()));
            }
        }

        #[test]
        fn survival_is_monotone(samples in proptest::collection::vec(1u64..500, 1..200)) {
            let grid: Vec<u64> = (1..=600).step_by(7).collect();
            let pts = tail_points(&samples, &grid).unwrap();
            prop_assert_eq!(pts[0].survival, 1.0);
            for w in pts.windows(2) {
                prop_assert!(w[1].survival <= w[0].survival);
            }
            for p in &pts {
                prop_assert!(p.lo <= p.survival && p.survival <= p.hi);
            }
        }
    }

    #[test]
    fn mn_plug_in() {
        assert_eq!(estimate_mn(&[5; 100]).unwrap(), 6);
        assert_eq!(estimate_mn(&[1; 100]).unwrap(), 2);
        assert!(estimate_mn(&[1; 99]).is_err());
        // 37 of 100 samples at 10, the rest at 1: P(≥10) = 0.37 > 1/e
        let mut s = vec![10u64; 37];
        s.extend(vec![1u64; 63]);
        assert_eq!(estimate_mn(&s).unwrap(), 11);
        s[0] = 1;
        assert_eq!(estimate_mn(&s).unwrap(), 2);
    }

    #[test]
    fn truncated_second_moment() {
        let s = SizeMultiset::from_sizes(&[3, 2]);
        assert_eq!(truncated_norm(&s, 2), 10.0);
        assert_eq!(truncated_norm(&s, 1), 5.0);
        assert_eq!(truncated_norm(&s, 3), s.power_sum(2));
        assert!(truncated_m2(&[s], 0).is_err());
    }

    #[test]
    fn size_biased_edge_cases() {
        for p in 1..=3 {
            assert!((size_biased_moments(&[7; 10], p).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(size_biased_moments(&[7; 10], 0).is_err());
    }

    #[test]
    fn synthetic_exact_ratio_tends_to_double_factorials() {
        for (p, target) in [(1, 1.0), (2, 3.0), (3, 15.0)] {
            let v = synthetic_size_biased_exact(1e-10, p);
            assert!((v - target).abs() < 1e-3 * target, "p={p}: {v}");
        }
        // a = 0.01 truncation is visible
        assert!(synthetic_size_biased_exact(0.01, 2) < 3.0);
    }

    #[test]
    fn ghost_limits() {
        let s = [1u64, 5, 20];
        assert_eq!(ghost_transform(&s, 0.0).unwrap().mean(), 0.0);
        assert!((ghost_transform(&s, 1e6).unwrap().mean() - 1.0).abs() < 1e-12);
        assert!(ghost_transform(&s, -1.0).is_err());
    }

    #[test]
    fn ks_behaviour() {
        let a: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let same = ks_two_sample(&a, &a);
        assert_eq!(same.statistic, 0.0);
        assert!(same.p_value > 0.99);
        let b: Vec<f64> = (0..1000).map(|i| i as f64 + 300.0).collect();
        assert!(ks_two_sample(&a, &b).p_value < 1e-10);
    }

    #[test]
    fn regression_recovers_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = ols(&x, &y).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12 && (f.intercept - 2.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(ols(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn tail_fit_on_exact_power_law() {
        // P(K ≥ k) = k^{-1/2} on k = 1..=10^6, discretised
        let grid = log_grid(1, 1_000_000, 8);
        let points: Vec<TailPoint> = grid
            .iter()
            .map(|&k| {
                let s = (k as f64).powf(-0.5);
                TailPoint { k, survival: s, stderr: 1e-3 * s, lo: s, hi: s }
            })
            .collect();
        let c = fit_tail(points, 1_000_000).unwrap();
        assert!((c.fit.slope + 0.5).abs() < 1e-9);
        assert!(c.window.0 >= 10 && c.window.1 <= 2500);
        // all-equal samples: degenerate
        assert!(tail_curve(&[5; 1000], &log_grid(1, 100, 5)).is_err());
        assert!(tail_curve(&[1000; 1000], &log_grid(1, 2000, 5)).is_err());
    }

    #[test]
    fn block_tail_matches_definition() {
        let s = SizeMultiset::from_sizes(&[4, 2, 1, 1]);
        let pts = tail_points_blocks(&[s], &[1, 2, 3, 5]).unwrap();
        let got: Vec<f64> = pts.iter().map(|p| p.survival).collect();
        assert_eq!(got, vec![1.0, 0.75, 0.5, 0.0]);
    }

    #[test]
    fn tightness_thresholds() {
        let v = [1.0, 1.0, 1.0, 5.0];
        assert_eq!(tightness_survival(&v, &[1.0, 2.0]).unwrap(), vec![0.25, 0.25]);
    }

    #[test]
    fn variance_ratio_is_invariant_under_iid_unions() {
        // disjoint union of k iid states multiplies Var(‖·‖₂²) and E‖·‖₄⁴ by k
        let p = ModelParams::new(1, 2, 0.5, 1.0).unwrap();
        let sampler = crate::percsim::BlockSampler::new(&p, 5).unwrap();
        let k = 3u64;
        let single: Vec<PowerSums> =
            (0..4000).map(|r| PowerSums::from_sizes(&sampler.sample(StreamKey::new(1).replica(r)))).collect();
        let union: Vec<PowerSums> = (0..4000)
            .map(|r| {
                let mut sizes = Vec::new();
                for j in 0..k {
                    sizes.extend(sampler.sample(StreamKey::new(2).replica(r * k + j)));
                }
                PowerSums::from_sizes(&sizes)
            })
            .collect();
        let (a, _) = var_cov_ratios(&single, StreamKey::new(3)).unwrap();
        let (b, _) = var_cov_ratios(&union, StreamKey::new(4)).unwrap();
        assert!((a.estimate - b.estimate).abs() < 4.0 * (a.se.hypot(b.se)), "{a:?} {b:?}");
        assert!(var_cov_ratios(&single[..10], StreamKey::new(3)).is_err());
    }

    #[test]
    fn error_terms_need_replicas_and_bracket_estimates() {
        let p = ModelParams::new(1, 2, 0.5, 1.0).unwrap();
        let sampler = crate::percsim::BlockSampler::new(&p, 5).unwrap();
        let samples: Vec<PowerSums> =
            (0..400).map(|r| PowerSums::from_sizes(&sampler.sample(StreamKey::new(8).replica(r)))).collect();
        let e = error_terms(&samples, 5, p.t_n(5), &p, StreamKey::new(1)).unwrap();
        for ci in [e.e2, e.e3, e.h] {
            assert!(ci.contains(ci.estimate));
        }
        assert!(e.e2.hi >= 0.0);
        assert!(error_terms(&samples[..49], 5, p.t_n(5), &p, StreamKey::new(1)).is_err());
        // a deterministic state: Var = 0, so E₂ = E‖X‖₄⁴/(E‖X‖₂²)²
        let det = vec![PowerSums::from_sizes(&[2, 1, 1]); 60];
        let e = error_terms(&det, 5, p.t_n(5), &p, StreamKey::new(1)).unwrap();
        assert!((e.e2.estimate - 18.0 / 36.0).abs() < 1e-12);
    }
}
