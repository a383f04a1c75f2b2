//! Critical-point bracketing.
//!
//! The indicator is the scale flow of the normalized susceptibility
//! `g_m = L^{-(d+α)m} E‖X_{m,t_m}‖₂² = L^{-αm} E|K_m|`: its per-scale log
//! slope tends to `-α` below `β_c`, to `d-α` above, and to 0 at `β_c`.
//! `g_m` is estimated for every scale of a window at once, either from lazy
//! explorations of the origin's cluster (one exploration yields the coupled
//! sizes `|K_m|` for all `m`) or from whole-block samples.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lattice::ModelParams;
use crate::momentode::hydro2;
use crate::percsim::{explore_origin_profile, BlockSampler, TopLayer};
use crate::replicas::{map_replicas, Execution};
use crate::rng::StreamKey;
use crate::stats::MomentEstimate;

/// How `g_m` is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowEstimator {
    /// `L^{-αm} |K_m|` from lazy explorations of the origin's cluster.
    Explorer,
    /// `L^{-(d+α)m} ‖X_m‖₂²` averaged over all `m`-blocks of a sampled block.
    Blocks,
}

/// Replicas are processed in chunks of this size; a probe stops early once
/// censoring has made the classification certain.
const CHUNK: u64 = 64;

/// Fraction of censored explorations above which a probe is supercritical.
pub const CENSOR_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Top scale of the window.
    pub n: u32,
    /// Number of consecutive scales in the window (at least 3).
    pub window: u32,
    pub reps: u64,
    pub estimator: FlowEstimator,
    /// Exploration cap; `0` picks a default from the scale.
    pub cap: u64,
}

impl FlowConfig {
    pub fn new(n: u32, reps: u64) -> Self {
        Self { n, window: 4, reps, estimator: FlowEstimator::Explorer, cap: 0 }
    }

    fn lowest(&self) -> u32 {
        self.n + 1 - self.window
    }

    /// Default cap: 16 times the typical cluster scale
    /// `M_n = L^{min(2α, (d+α)/2)n}`, bounded to `[2^16, 2^21]`.
    pub fn effective_cap(&self, params: &ModelParams) -> u64 {
        if self.cap > 0 {
            return self.cap;
        }
        let e = (2.0 * params.alpha).min((params.d as f64 + params.alpha) / 2.0) * self.n as f64;
        let typical = (params.l as f64).powf(e);
        (16.0 * typical).clamp(65536.0, (1u64 << 21) as f64) as u64
    }
}

/// Per-scale log slope of `g_m` over a window, with its delta-method error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSlope {
    pub beta: f64,
    pub config: FlowConfig,
    pub slope: f64,
    pub se: f64,
    /// `(m, ĝ_m, stderr)` for each scale of the window.
    pub g: Vec<(u32, f64, f64)>,
    pub reps_used: u64,
    pub censored: u64,
    /// Number of vertices revealed or sampled (a deterministic cost measure).
    pub work: u64,
}

impl FlowSlope {
    pub fn censored_fraction(&self) -> f64 {
        self.censored as f64 / self.reps_used.max(1) as f64
    }
}

struct FlowSample {
    /// `g_m` contributions for each window scale
    g: Vec<f64>,
    censored: bool,
    work: u64,
}

fn flow_sample(params: &ModelParams, cfg: &FlowConfig, cap: u64, key: StreamKey) -> Result<FlowSample> {
    let l = params.l as f64;
    let lo = cfg.lowest();
    match cfg.estimator {
        FlowEstimator::Explorer => {
            let prof = explore_origin_profile(params, cfg.n, key, cap)?;
            let g = (lo..=cfg.n).map(|m| prof.at_or(m, cap) as f64 * l.powf(-params.alpha * m as f64)).collect();
            let work = prof.sizes.last().copied().unwrap_or(cap).min(cap);
            Ok(FlowSample { g, censored: prof.censored, work })
        }
        FlowEstimator::Blocks => {
            let mut sums = vec![0.0; cfg.window as usize];
            let mut counts = vec![0u64; cfg.window as usize];
            BlockSampler::new(params, cfg.n)?.with_top(TopLayer::End).sample_observed(key, &mut |m: u32, s: &[u64]| {
                if m >= lo {
                    let i = (m - lo) as usize;
                    sums[i] += s.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
                    counts[i] += 1;
                }
            });
            let g = (lo..=cfg.n)
                .enumerate()
                .map(|(i, m)| sums[i] / counts[i] as f64 * l.powf(-(params.d as f64 + params.alpha) * m as f64))
                .collect();
            Ok(FlowSample { g, censored: false, work: params.volume(cfg.n)? })
        }
    }
}

/// Log-`L` slope of `ĝ` between the ends of the window, i.e. the mean of
/// `log_L(ĝ_{m+1}/ĝ_m)` over the window.
pub fn flow_slope(params: &ModelParams, cfg: &FlowConfig, key: StreamKey, exec: Execution) -> Result<FlowSlope> {
    params.validate()?;
    params.require_critical_range()?;
    if cfg.window < 3 || cfg.window > cfg.n + 1 {
        return Err(invalid(format!("window must span at least 3 scales within 0..={}", cfg.n)));
    }
    params.check_scale(cfg.n)?;
    if cfg.reps < 2 {
        return Err(Error::TooFewSamples { need: 2, got: cfg.reps as usize });
    }
    let cap = cfg.effective_cap(params);
    let w = cfg.window as usize;
    let mut samples: Vec<FlowSample> = Vec::with_capacity(cfg.reps as usize);
    let mut censored = 0;
    let mut start = 0;
    while start < cfg.reps {
        let len = CHUNK.min(cfg.reps - start);
        let chunk = map_replicas(exec, len, |r| flow_sample(params, cfg, cap, key.replica(start + r)));
        for s in chunk {
            let s = s?;
            censored += s.censored as u64;
            samples.push(s);
        }
        start += len;
        // enough censored samples to be decisive
        if censored as f64 > CENSOR_FRACTION * cfg.reps as f64 {
            break;
        }
    }
    let r = samples.len() as f64;
    let est: Vec<MomentEstimate> = (0..w).map(|i| samples.iter().map(|s| s.g[i]).collect()).collect();
    let (a, b) = (0, w - 1);
    let (ma, mb) = (est[a].mean(), est[b].mean());
    let ln_l = (params.l as f64).ln();
    let span = (w - 1) as f64;
    let slope = (mb.ln() - ma.ln()) / (ln_l * span);
    let cov = samples.iter().map(|s| (s.g[a] - ma) * (s.g[b] - mb)).sum::<f64>() / (r - 1.0);
    let var_log = est[a].variance() / (ma * ma) + est[b].variance() / (mb * mb) - 2.0 * cov / (ma * mb);
    let se = if ma > 0.0 && mb > 0.0 { (var_log.max(0.0) / r).sqrt() / (ln_l * span) } else { f64::NAN };
    let g = est.iter().enumerate().map(|(i, e)| (cfg.lowest() + i as u32, e.mean(), e.stderr())).collect();
    Ok(FlowSlope {
        beta: params.beta,
        config: *cfg,
        slope,
        se,
        g,
        reps_used: samples.len() as u64,
        censored,
        work: samples.iter().map(|s| s.work).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Subcritical,
    Supercritical,
    Inconclusive,
}

/// Classifies a flow slope against `τ`: subcritical if `s + 4·SE < -τ`,
/// supercritical if `s - 4·SE > τ` or if more than 1% of explorations hit
/// the cap.
pub fn classify(f: &FlowSlope, tau: f64) -> Class {
    if f.censored_fraction() > CENSOR_FRACTION {
        return Class::Supercritical;
    }
    if !f.se.is_finite() {
        return Class::Inconclusive;
    }
    if f.slope + 4.0 * f.se < -tau {
        Class::Subcritical
    } else if f.slope - 4.0 * f.se > tau {
        Class::Supercritical
    } else {
        Class::Inconclusive
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub beta: f64,
    pub n: u32,
    pub reps: u64,
    pub slope: f64,
    pub se: f64,
    pub censored: u64,
    pub class: Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BisectConfig {
    /// Target relative width `(upper - lower)/midpoint`.
    pub tolerance: f64,
    /// Work budget in revealed vertices.
    pub budget: u64,
    pub n_start: u32,
    pub n_max: u32,
    pub n_step: u32,
    pub window: u32,
    pub reps_start: u64,
    pub reps_max: u64,
    pub estimator: FlowEstimator,
    /// Optional starting bracket; by default `[0, u]` with `u` found by doubling from 1.
    pub initial: Option<(f64, f64)>,
}

impl BisectConfig {
    pub fn new(tolerance: f64, budget: u64) -> Self {
        Self {
            tolerance,
            budget,
            n_start: 12,
            n_max: 60,
            n_step: 4,
            window: 4,
            reps_start: 256,
            reps_max: 4096,
            estimator: FlowEstimator::Explorer,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BracketStatus {
    Converged,
    /// Budget or scale cap reached; the bracket is the best found so far.
    Exhausted,
    /// No probe was ever classified.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetacBracket {
    pub lower: f64,
    pub upper: f64,
    pub lower_evidence: Option<Probe>,
    pub upper_evidence: Option<Probe>,
    pub probes: Vec<Probe>,
    pub status: BracketStatus,
    pub work: u64,
}

impl BetacBracket {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn relative_width(&self) -> f64 {
        relative_width(self.lower, self.upper)
    }

    /// Every classified-subcritical probe lies below every
    /// classified-supercritical one.
    pub fn monotone(&self) -> bool {
        let max_sub = self
            .probes
            .iter()
            .filter(|p| p.class == Class::Subcritical)
            .map(|p| p.beta)
            .fold(f64::NEG_INFINITY, f64::max);
        let min_sup = self
            .probes
            .iter()
            .filter(|p| p.class == Class::Supercritical)
            .map(|p| p.beta)
            .fold(f64::INFINITY, f64::min);
        max_sub < min_sup
    }

    /// Zero crossing of the slope, linearly interpolated between the two
    /// endpoint probes when they were taken at the same scale; the midpoint
    /// otherwise.
    pub fn crossing_estimate(&self) -> f64 {
        match (&self.lower_evidence, &self.upper_evidence) {
            (Some(a), Some(b)) if a.n == b.n && b.slope > a.slope && a.beta > 0.0 => {
                let x = a.beta + (b.beta - a.beta) * (-a.slope) / (b.slope - a.slope);
                x.clamp(self.lower, self.upper)
            }
            _ => self.midpoint(),
        }
    }
}

/// Smallest power of two, at least `start`, that samples the rare clusters
/// of typical size `M_n` (probability about `L^{αn}/M_n`) some 32 times.
pub fn replica_floor(params: &ModelParams, n: u32, start: u64) -> u64 {
    let excess = (2.0 * params.alpha).min((params.d as f64 + params.alpha) / 2.0) - params.alpha;
    let need = 32.0 * (params.l as f64).powf(excess * n as f64);
    (need.min(1e12) as u64).max(start).max(2).next_power_of_two()
}

fn relative_width(lo: f64, hi: f64) -> f64 {
    (hi - lo) / (0.5 * (hi + lo))
}

/// Bisection for `β_c` with threshold `τ = α/4`. An inconclusive probe is
/// escalated: if it is confidently flat (`|s| + 4·SE ≤ τ`) the scale is
/// raised, otherwise replicas are doubled up to the cap and then the scale
/// is raised. Scale and replica levels persist across probes.
pub fn bisect_betac(params: &ModelParams, cfg: &BisectConfig, seed: u64, exec: Execution) -> Result<BetacBracket> {
    params.validate()?;
    params.require_critical_range()?;
    if !(cfg.tolerance > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    if cfg.window < 3 {
        return Err(invalid("window must span at least 3 scales"));
    }
    let tau = params.alpha / 4.0;
    let root = StreamKey::new(seed);
    let mut probes: Vec<Probe> = Vec::new();
    let mut work = 0u64;
    let mut n = cfg.n_start.max(cfg.window - 1).min(params.scale_cap());
    let mut reps = replica_floor(params, n, cfg.reps_start);
    let n_max = cfg.n_max.min(params.scale_cap());

    let run_probe = |beta: f64, n: u32, reps: u64, probes: &mut Vec<Probe>, work: &mut u64| -> Result<Probe> {
        let fc = FlowConfig { n, window: cfg.window, reps, estimator: cfg.estimator, cap: 0 };
        let key = StreamKey::new(root.derive_seed(probes.len() as u64));
        let f = flow_slope(&params.with_beta(beta), &fc, key, exec)?;
        *work += f.work;
        let p = Probe { beta, n, reps, slope: f.slope, se: f.se, censored: f.censored, class: classify(&f, tau) };
        log::info!("probe beta={beta:.6} n={n} reps={reps} slope={:.4}±{:.4} {:?}", p.slope, p.se, p.class);
        probes.push(p.clone());
        Ok(p)
    };

    let beta_zero =
        Probe { beta: 0.0, n, reps: 0, slope: -params.alpha, se: 0.0, censored: 0, class: Class::Subcritical };
    let (mut lower, mut upper, mut lower_ev, mut upper_ev) = match cfg.initial {
        Some((lo, hi)) => {
            if !(0.0 <= lo && lo < hi) {
                return Err(invalid("initial bracket must satisfy 0 ≤ lower < upper"));
            }
            (lo, hi, None, None)
        }
        None => (0.0, f64::NAN, Some(beta_zero), None),
    };
    if cfg.initial.is_some() && relative_width(lower, upper) <= cfg.tolerance {
        return Ok(BetacBracket {
            lower,
            upper,
            lower_evidence: None,
            upper_evidence: None,
            probes,
            status: BracketStatus::Converged,
            work,
        });
    }
    if cfg.initial.is_none() {
        // find a supercritical upper bound by doubling from 1
        let mut b = 1.0;
        loop {
            if work > cfg.budget {
                return Ok(BetacBracket {
                    lower,
                    upper: f64::INFINITY,
                    lower_evidence: lower_ev,
                    upper_evidence: None,
                    probes,
                    status: BracketStatus::Inconclusive,
                    work,
                });
            }
            let p = run_probe(b, n, reps, &mut probes, &mut work)?;
            match p.class {
                Class::Supercritical => {
                    upper = b;
                    upper_ev = Some(p);
                    break;
                }
                Class::Subcritical => {
                    lower = b;
                    lower_ev = Some(p);
                    b *= 2.0;
                }
                Class::Inconclusive => b *= 2.0,
            }
            if b > 1e9 {
                return Err(Error::Degenerate("no supercritical coupling found below 1e9".into()));
            }
        }
    }

    let mut status = BracketStatus::Converged;
    while relative_width(lower, upper) > cfg.tolerance {
        if work > cfg.budget {
            status = BracketStatus::Exhausted;
            break;
        }
        let mid = 0.5 * (lower + upper);
        let p = run_probe(mid, n, reps, &mut probes, &mut work)?;
        match p.class {
            Class::Subcritical => {
                lower = mid;
                lower_ev = Some(p);
            }
            Class::Supercritical => {
                upper = mid;
                upper_ev = Some(p);
            }
            Class::Inconclusive => {
                let flat = p.slope.abs() + 4.0 * p.se <= tau;
                let reps_max = cfg.reps_max.max(4 * replica_floor(params, n, 2));
                if !flat && reps * 2 <= reps_max {
                    reps *= 2;
                } else if n + cfg.n_step <= n_max {
                    n += cfg.n_step;
                    reps = replica_floor(params, n, cfg.reps_start);
                } else if reps * 2 <= reps_max {
                    reps *= 2;
                } else {
                    status = BracketStatus::Exhausted;
                    break;
                }
            }
        }
    }
    if lower_ev.is_none() && upper_ev.is_none() {
        status = BracketStatus::Inconclusive;
    }
    Ok(BetacBracket { lower, upper, lower_evidence: lower_ev, upper_evidence: upper_ev, probes, status, work })
}

/// Zero crossing of the flow slope at one fixed window, interpolated
/// between the two neighbouring probes whose slopes straddle zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub beta: f64,
    pub se: f64,
    pub probes: Vec<FlowSlope>,
}

/// Probes `points ≥ 2` equally spaced couplings in `[lower, upper]` with the
/// same window and replica count.
pub fn crossing_fit(
    params: &ModelParams,
    lower: f64,
    upper: f64,
    points: usize,
    cfg: &FlowConfig,
    seed: u64,
    exec: Execution,
) -> Result<Crossing> {
    if !(0.0 < lower && lower < upper) || points < 2 {
        return Err(invalid("crossing fit needs 0 < lower < upper and at least 2 points"));
    }
    let root = StreamKey::new(seed);
    let probes = (0..points)
        .map(|i| {
            let b = lower + (upper - lower) * i as f64 / (points - 1) as f64;
            flow_slope(&params.with_beta(b), cfg, StreamKey::new(root.derive_seed(i as u64)), exec)
        })
        .collect::<Result<Vec<_>>>()?;
    let i = probes
        .windows(2)
        .position(|w| w[0].slope < 0.0 && w[1].slope >= 0.0)
        .ok_or_else(|| Error::Degenerate("flow slope does not cross zero inside the range".into()))?;
    let (a, b) = (&probes[i], &probes[i + 1]);
    let (db, ds) = (b.beta - a.beta, b.slope - a.slope);
    let beta = a.beta - db * a.slope / ds;
    let se = db / (ds * ds) * (b.slope * b.slope * a.se * a.se + a.slope * a.slope * b.se * b.se).sqrt();
    Ok(Crossing { beta, se, probes })
}

/// One row of the lower-bound audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub n: u32,
    pub t: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Checks `Ê‖X_{n,t}‖₂² ≥ (1/β)(L^α/(L^α-1) - t/t_n)^{-1} L^{(d+α)n} - 4·SE`
/// at coupling `params.beta` for every `n` in `scales` and `t = f·t_n` for
/// every `f` in `fractions`. At `β ≥ β_c` the inequality holds in
/// expectation, so a violation means the coupling is below `β_c`.
pub fn lower_bound_audit(
    params: &ModelParams,
    scales: &[u32],
    fractions: &[f64],
    reps: u64,
    key: StreamKey,
    exec: Execution,
) -> Result<Vec<AuditRow>> {
    let mut rows = Vec::new();
    for &n in scales {
        for &f in fractions {
            let t = (f * params.t_n(n)).min(params.t_n(n));
            let sampler = BlockSampler::new(params, n)?.with_top(TopLayer::Time(t));
            let row = StreamKey::new(key.derive_seed(rows.len() as u64));
            let vals = map_replicas(exec, reps, |r| {
                sampler.sample(row.replica(r)).iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()
            });
            let e = MomentEstimate::from_slice(&vals);
            let bound = hydro2(params, params.beta, n, t)?;
            let pass = e.mean() >= bound - 4.0 * e.stderr();
            rows.push(AuditRow { n, t, estimate: e.mean(), stderr: e.stderr(), bound, pass });
        }
    }
    Ok(rows)
}
