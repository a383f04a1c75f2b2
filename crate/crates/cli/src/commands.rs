use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use hierperc_core::betac::{
    bisect_betac, crossing_fit, lower_bound_audit, BisectConfig, BracketStatus, FlowConfig, FlowEstimator,
};
use hierperc_core::coalescent::{coalesce_in_place, Scratch};
use hierperc_core::mass::{power_sum, SizeMultiset};
use hierperc_core::momentode::double_factorial_f64;
use hierperc_core::oracle::{exact_coalescent_law, exact_moments, unit_expansion, MAX_GROUND_SET};
use hierperc_core::percsim::{
    capped_origin_samples, origin_cluster_samples, two_point_profile, BlockSampler, TopLayer,
};
use hierperc_core::renorm::{bridge_check, iterate_renorm};
use hierperc_core::replicas::{map_replicas, worker_count, Execution};
use hierperc_core::rng::StreamKey;
use hierperc_core::stats::{
    bootstrap, fit_tail, kn_moments, log_grid, lp_normalized, size_biased_from_norms, size_biased_moments, tail_points,
    tail_points_blocks, MomentEstimate, BOOTSTRAP_RESAMPLES,
};
use hierperc_core::verify;
use hierperc_core::ModelParams;

use crate::config::resolve_seed;
use crate::output::{
    artifact_version, cache_key, read_cache, write_cache, BetaInfo, CachedBracket, CliError, Output, Sidecar, SCHEMA,
};
use crate::{Cli, Command, ModelArgs, Source, EXIT_FAILED, EXIT_INCONCLUSIVE};

/// Lower-bound audit settings used after every bisection.
const AUDIT_SCALES: [u32; 3] = [6, 8, 10];
const AUDIT_FRACTIONS: [f64; 3] = [0.0, 0.5, 1.0];
const AUDIT_REPS: u64 = 1000;

struct Ctx {
    seed: u64,
    exec: Execution,
    out: Output,
}

impl Ctx {
    fn key(&self, tag: u64) -> StreamKey {
        StreamKey::new(StreamKey::new(self.seed).derive_seed(tag))
    }
}

/// Everything a command hands back for writing.
struct Report {
    result: serde_json::Value,
    beta: Option<BetaInfo>,
    code: u8,
}

impl Report {
    fn ok(result: serde_json::Value, beta: Option<BetaInfo>) -> Self {
        Self { result, beta, code: 0 }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

fn base_params(m: &ModelArgs) -> Result<ModelParams, CliError> {
    Ok(ModelParams::new(m.d, m.l, m.alpha, 0.0)?)
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable result")
}

pub fn dispatch(cli: Cli) -> Result<u8, CliError> {
    let seed = resolve_seed(cli.run.seed).map_err(CliError::Invalid)?;
    #[cfg(feature = "parallel")]
    if cli.run.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.run.workers)
            .build_global()
            .map_err(|e| CliError::Io(e.to_string()))?;
    }
    let ctx = Ctx { seed, exec: Execution::default(), out: Output::new(&cli.run.out, cli.command.name())? };
    let start = Instant::now();
    let report = match &cli.command {
        Command::Betac { .. } => betac(&cli, &ctx)?,
        Command::Verify => verify_suite(&ctx)?,
        Command::Coalescent { masses, t, reps } => coalescent(masses, *t, *reps, &ctx)?,
        _ => {
            let (params, beta) = match resolve_beta(&cli.model, &ctx)? {
                Ok(v) => v,
                Err(code) => return Ok(code),
            };
            let mut r = modelled(&cli.command, &params, &ctx)?;
            r.beta = Some(beta);
            r
        }
    };
    let sidecar = Sidecar {
        schema: SCHEMA,
        command: cli.command.name(),
        version: artifact_version(),
        seed,
        workers: worker_count(),
        wall_time_s: start.elapsed().as_secs_f64(),
        config: to_json(&cli),
        beta: report.beta,
        result: report.result,
    };
    ctx.out.write_sidecar(&sidecar)?;
    Ok(report.code)
}

/// `Ok(Err(code))` when `beta = auto` and the search was inconclusive.
fn resolve_beta(m: &ModelArgs, ctx: &Ctx) -> Result<Result<(ModelParams, BetaInfo), u8>, CliError> {
    let base = base_params(m)?;
    if m.beta != "auto" {
        let b: f64 = m.beta.parse().map_err(|_| invalid(format!("beta must be a number or `auto`, got {}", m.beta)))?;
        let p = base.with_beta(b);
        p.validate()?;
        return Ok(Ok((p, BetaInfo { value: b, source: "given".into(), lower: None, upper: None })));
    }
    let dir = ctx.out.dir();
    let key = cache_key(m.d, m.l, m.alpha, m.tolerance);
    if let Some(c) = read_cache(&dir).get(&key).filter(|c| c.converged) {
        let info = BetaInfo { value: c.estimate, source: "cache".into(), lower: Some(c.lower), upper: Some(c.upper) };
        return Ok(Ok((base.with_beta(c.estimate), info)));
    }
    let b = bisect_betac(&base, &BisectConfig::new(m.tolerance, m.budget), ctx.seed, ctx.exec)?;
    if b.status != BracketStatus::Converged {
        eprintln!("critical-point search did not converge: [{}, {}] ({:?})", b.lower, b.upper, b.status);
        return Ok(Err(EXIT_INCONCLUSIVE));
    }
    let estimate = b.crossing_estimate();
    write_cache(&dir, key, CachedBracket { lower: b.lower, upper: b.upper, estimate, converged: true })?;
    let info = BetaInfo { value: estimate, source: "bisection".into(), lower: Some(b.lower), upper: Some(b.upper) };
    Ok(Ok((base.with_beta(estimate), info)))
}

#[derive(Serialize)]
struct ProbeRow {
    beta: f64,
    n: u32,
    reps: u64,
    slope: f64,
    stderr: f64,
    censored: u64,
    class: String,
}

fn betac(cli: &Cli, ctx: &Ctx) -> Result<Report, CliError> {
    let Command::Betac {
        n_start,
        n_max,
        window,
        reps_start,
        reps_max,
        estimator,
        refine_n,
        refine_reps,
        refine_points,
    } = &cli.command
    else {
        unreachable!("dispatched on the command")
    };
    let m = &cli.model;
    let base = base_params(m)?;
    let estimator = match estimator {
        Source::Explorer => FlowEstimator::Explorer,
        Source::Blocks => FlowEstimator::Blocks,
    };
    let cfg = BisectConfig {
        n_start: *n_start,
        n_max: *n_max,
        window: *window,
        reps_start: *reps_start,
        reps_max: *reps_max,
        estimator,
        ..BisectConfig::new(m.tolerance, m.budget)
    };
    let b = bisect_betac(&base, &cfg, ctx.seed, ctx.exec)?;
    let rows: Vec<ProbeRow> = b
        .probes
        .iter()
        .map(|p| ProbeRow {
            beta: p.beta,
            n: p.n,
            reps: p.reps,
            slope: p.slope,
            stderr: p.se,
            censored: p.censored,
            class: format!("{:?}", p.class).to_lowercase(),
        })
        .collect();
    ctx.out.write_csv(&rows)?;

    let crossing = match refine_n {
        Some(n) if b.lower > 0.0 && b.upper.is_finite() => {
            let fc = FlowConfig { estimator, ..FlowConfig::new(*n, *refine_reps) };
            match crossing_fit(&base, b.lower, b.upper, *refine_points, &fc, ctx.key(1).derive_seed(0), ctx.exec) {
                Ok(c) => Some(c),
                Err(e) => {
                    log::warn!("zero-crossing refinement failed: {e}");
                    None
                }
            }
        }
        _ => None,
    };
    let estimate = crossing.as_ref().map(|c| c.beta).unwrap_or_else(|| b.crossing_estimate());
    let audit = if b.upper.is_finite() {
        Some(lower_bound_audit(
            &base.with_beta(b.upper),
            &AUDIT_SCALES,
            &AUDIT_FRACTIONS,
            AUDIT_REPS,
            ctx.key(2),
            ctx.exec,
        )?)
    } else {
        None
    };
    let converged = b.status == BracketStatus::Converged;
    if b.status != BracketStatus::Inconclusive {
        let key = cache_key(m.d, m.l, m.alpha, m.tolerance);
        write_cache(&ctx.out.dir(), key, CachedBracket { lower: b.lower, upper: b.upper, estimate, converged })?;
    }
    let result = json!({
        "lower": b.lower,
        "upper": b.upper,
        "relative_width": b.relative_width(),
        "status": b.status,
        "monotone": b.monotone(),
        "work": b.work,
        "estimate": estimate,
        "crossing": crossing.as_ref().map(|c| json!({"beta": c.beta, "stderr": c.se})),
        "lower_evidence": b.lower_evidence,
        "upper_evidence": b.upper_evidence,
        "audit": audit,
        "audit_pass": audit.as_ref().map(|a| a.iter().all(|r| r.pass)),
    });
    let beta = BetaInfo { value: estimate, source: "bisection".into(), lower: Some(b.lower), upper: Some(b.upper) };
    Ok(Report { result, beta: Some(beta), code: if converged { 0 } else { EXIT_INCONCLUSIVE } })
}

#[derive(Serialize)]
struct CheckRow {
    check: String,
    pass: bool,
    value: f64,
    tolerance: f64,
    detail: String,
}

fn verify_suite(ctx: &Ctx) -> Result<Report, CliError> {
    let checks = verify::run_all(ctx.seed, ctx.exec)?;
    let rows: Vec<CheckRow> = checks
        .iter()
        .map(|c| CheckRow {
            check: c.name.clone(),
            pass: c.pass,
            value: c.value,
            tolerance: c.tolerance,
            detail: c.detail.clone(),
        })
        .collect();
    ctx.out.write_csv(&rows)?;
    let all = checks.iter().all(|c| c.pass);
    for c in &checks {
        eprintln!("{} {}", if c.pass { "PASS" } else { "FAIL" }, c.name);
    }
    Ok(Report {
        result: json!({ "all_pass": all, "checks": checks }),
        beta: None,
        code: if all { 0 } else { EXIT_FAILED },
    })
}

#[derive(Serialize)]
struct CoalescentRow {
    p: u32,
    estimate: f64,
    stderr: f64,
    replicas: u64,
    exact: Option<f64>,
}

fn coalescent(masses: &[u64], t: f64, reps: u64, ctx: &Ctx) -> Result<Report, CliError> {
    if masses.is_empty() || masses.contains(&0) {
        return Err(invalid("masses must be a nonempty list of positive integers"));
    }
    if t.is_nan() || t < 0.0 || reps == 0 {
        return Err(invalid("need t ≥ 0 and reps > 0"));
    }
    let key = ctx.key(0);
    let samples = map_replicas(ctx.exec, reps, |r| {
        let mut buf = masses.to_vec();
        coalesce_in_place(&mut buf, 0, t, &mut key.replica(r).rng(), &mut Scratch::new());
        buf
    });
    let total: u64 = masses.iter().sum();
    let exact_law = if total as usize <= MAX_GROUND_SET {
        let (lattice, init) = unit_expansion(masses)?;
        Some((exact_coalescent_law(&lattice, &init, t)?, lattice))
    } else {
        None
    };
    let mut rows = Vec::new();
    for p in 1..=4 {
        let est: MomentEstimate = samples.iter().map(|s| power_sum(s, p)).collect();
        let exact = match &exact_law {
            Some((law, lattice)) => Some(exact_moments(lattice, law, p)?),
            None => None,
        };
        rows.push(CoalescentRow { p, estimate: est.mean(), stderr: est.stderr(), replicas: reps, exact });
    }
    ctx.out.write_csv(&rows)?;
    Ok(Report::ok(json!({ "masses": masses, "t": t, "exact_available": exact_law.is_some() }), None))
}

fn block_samples(
    params: &ModelParams,
    n: u32,
    frac: f64,
    reps: u64,
    key: StreamKey,
    exec: Execution,
) -> Result<Vec<SizeMultiset>, CliError> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(invalid("t must be a fraction of t_n in [0, 1]"));
    }
    let s = BlockSampler::new(params, n)?.with_top(TopLayer::Time(frac * params.t_n(n)));
    Ok(map_replicas(exec, reps, |r| s.sample_multiset(key.replica(r))))
}

#[derive(Serialize)]
struct SampleRow {
    replica: u64,
    size: u64,
    count: u64,
}

#[derive(Serialize)]
struct MomentRow {
    n: u32,
    t: f64,
    p: u32,
    estimate: f64,
    stderr: f64,
    replicas: u64,
}

#[derive(Serialize)]
struct TailRow {
    k: u64,
    survival: f64,
    stderr: f64,
    lo: f64,
    hi: f64,
}

#[derive(Serialize)]
struct SizeBiasRow {
    p: u32,
    estimate: f64,
    stderr: f64,
    lo: f64,
    hi: f64,
    reference: f64,
}

#[derive(Serialize)]
struct LpRow {
    n: u32,
    p: f64,
    estimate: f64,
    stderr: f64,
    replicas: u64,
}

#[derive(Serialize)]
struct TwoPointRow {
    h: u32,
    distance: f64,
    probability: f64,
    stderr: f64,
    replicas: u64,
}

#[derive(Serialize)]
struct RenormRow {
    step: u32,
    mean_norm2: f64,
    stderr: f64,
    largest_q25: f64,
    largest_q50: f64,
    largest_q75: f64,
    deficit: f64,
}

#[derive(Serialize)]
struct BridgeCsvRow {
    step: u32,
    ks_norm2: f64,
    p_norm2: f64,
    ks_largest: f64,
    p_largest: f64,
    deficit: f64,
}

fn modelled(cmd: &Command, params: &ModelParams, ctx: &Ctx) -> Result<Report, CliError> {
    let exec = ctx.exec;
    match cmd {
        Command::Sample { n, reps, t, periodic } => {
            let sampler = if *periodic {
                BlockSampler::periodic(params, *n)?
            } else {
                if !(0.0..=1.0).contains(t) {
                    return Err(invalid("t must be a fraction of t_n in [0, 1]"));
                }
                BlockSampler::new(params, *n)?.with_top(TopLayer::Time(t * params.t_n(*n)))
            };
            let key = ctx.key(0);
            let draws = map_replicas(exec, *reps, |r| sampler.sample_multiset(key.replica(r)));
            let rows: Vec<SampleRow> = draws
                .iter()
                .enumerate()
                .flat_map(|(r, s)| s.iter().map(move |(size, count)| SampleRow { replica: r as u64, size, count }))
                .collect();
            ctx.out.write_csv(&rows)?;
            let max: Vec<u64> = draws.iter().map(|s| s.max()).collect();
            Ok(Report::ok(json!({ "n": n, "replicas": reps, "largest": max }), None))
        }
        Command::Moments { n, p, t, reps } => {
            let mut rows = Vec::new();
            for (i, &nn) in n.iter().enumerate() {
                for (j, &frac) in t.iter().enumerate() {
                    let samples = block_samples(params, nn, frac, *reps, ctx.key((i * t.len() + j) as u64), exec)?;
                    for &pp in p {
                        let e = kn_moments(&samples, pp)?;
                        rows.push(MomentRow {
                            n: nn,
                            t: frac * params.t_n(nn),
                            p: pp,
                            estimate: e.mean(),
                            stderr: e.stderr(),
                            replicas: *reps,
                        });
                    }
                }
            }
            ctx.out.write_csv(&rows)?;
            Ok(Report::ok(json!({ "quantity": "E|K_{n,t}|^p" }), None))
        }
        Command::Tail { n, reps, cap, per_decade, source } => {
            let (points, replicas) = match source {
                Source::Explorer => {
                    let s = capped_origin_samples(params, *n, *reps, *cap, ctx.key(0), exec)?;
                    (tail_points(&s, &log_grid(1, *cap, *per_decade))?, *reps)
                }
                Source::Blocks => {
                    let samples = block_samples(params, *n, 1.0, *reps, ctx.key(0), exec)?;
                    (tail_points_blocks(&samples, &log_grid(1, params.volume(*n)?, *per_decade))?, *reps)
                }
            };
            let rows: Vec<TailRow> = points
                .iter()
                .map(|q| TailRow { k: q.k, survival: q.survival, stderr: q.stderr, lo: q.lo, hi: q.hi })
                .collect();
            ctx.out.write_csv(&rows)?;
            let fit = fit_tail(points, replicas)
                .map(|c| json!({ "slope": c.fit.slope, "stderr": c.fit.slope_se, "r2": c.fit.r2, "window": c.window }));
            Ok(Report::ok(json!({ "fit": fit.ok() }), None))
        }
        Command::Sizebias { n, reps, p, source } => {
            let key = ctx.key(0);
            let mut rows = Vec::new();
            match source {
                Source::Explorer => {
                    let s = origin_cluster_samples(params, *n, *reps, key, exec)?;
                    for &pp in p {
                        let est = size_biased_moments(&s, pp)?;
                        let ci = bootstrap(s.len(), BOOTSTRAP_RESAMPLES, key.replica(pp as u64), |idx| {
                            let sub: Vec<u64> = idx.map(|i| s[i]).collect();
                            size_biased_moments(&sub, pp).unwrap_or(f64::NAN)
                        })?;
                        rows.push(SizeBiasRow {
                            p: pp,
                            estimate: est,
                            stderr: ci.se,
                            lo: ci.lo,
                            hi: ci.hi,
                            reference: double_factorial_f64(2 * pp as i64 - 1)?,
                        });
                    }
                }
                Source::Blocks => {
                    let s = block_samples(params, *n, 1.0, *reps, key, exec)?;
                    for &pp in p {
                        let est = size_biased_from_norms(&s, pp)?;
                        let ci = bootstrap(s.len(), BOOTSTRAP_RESAMPLES, key.replica(pp as u64), |idx| {
                            let sub: Vec<SizeMultiset> = idx.map(|i| s[i].clone()).collect();
                            size_biased_from_norms(&sub, pp).unwrap_or(f64::NAN)
                        })?;
                        rows.push(SizeBiasRow {
                            p: pp,
                            estimate: est,
                            stderr: ci.se,
                            lo: ci.lo,
                            hi: ci.hi,
                            reference: double_factorial_f64(2 * pp as i64 - 1)?,
                        });
                    }
                }
            }
            ctx.out.write_csv(&rows)?;
            Ok(Report::ok(json!({ "reference": "(2p-1)!!" }), None))
        }
        Command::Lpnorm { n, p, reps } => {
            let mut rows = Vec::new();
            for (i, &nn) in n.iter().enumerate() {
                let samples = block_samples(params, nn, 1.0, *reps, ctx.key(i as u64), exec)?;
                for &pp in p {
                    let e = lp_normalized(&samples, pp, nn, params)?;
                    rows.push(LpRow { n: nn, p: pp, estimate: e.mean(), stderr: e.stderr(), replicas: *reps });
                }
            }
            ctx.out.write_csv(&rows)?;
            Ok(Report::ok(json!({ "quantity": "E‖L^{-(d+α)n/2} X_n‖_p^p" }), None))
        }
        Command::Twopoint { n, reps } => {
            let est = two_point_profile(params, *n, *reps, ctx.key(0), exec)?;
            let rows: Vec<TwoPointRow> = est
                .iter()
                .enumerate()
                .map(|(i, e)| TwoPointRow {
                    h: i as u32 + 1,
                    distance: (params.l as f64).powi(i as i32 + 1),
                    probability: e.mean(),
                    stderr: e.stderr(),
                    replicas: *reps,
                })
                .collect();
            ctx.out.write_csv(&rows)?;
            Ok(Report::ok(json!({ "n": n }), None))
        }
        Command::Renorm { steps, draws, bridge } => {
            let s = iterate_renorm(params, *steps, *draws, ctx.key(0), exec)?;
            let rows: Vec<RenormRow> = s
                .iter()
                .map(|r| RenormRow {
                    step: r.step,
                    mean_norm2: r.mean_norm2,
                    stderr: r.norm2_stderr,
                    largest_q25: r.largest_quartiles[0],
                    largest_q50: r.largest_quartiles[1],
                    largest_q75: r.largest_quartiles[2],
                    deficit: r.deficit,
                })
                .collect();
            ctx.out.write_csv(&rows)?;
            let bridge_rows = if *bridge {
                let b = bridge_check(params, *steps, *draws, ctx.key(1), exec)?;
                Some(
                    b.iter()
                        .map(|r| BridgeCsvRow {
                            step: r.step,
                            ks_norm2: r.norm2.statistic,
                            p_norm2: r.norm2.p_value,
                            ks_largest: r.largest.statistic,
                            p_largest: r.largest.p_value,
                            deficit: r.deficit,
                        })
                        .collect::<Vec<_>>(),
                )
            } else {
                None
            };
            Ok(Report::ok(json!({ "bridge": bridge_rows }), None))
        }
        Command::Betac { .. } | Command::Verify | Command::Coalescent { .. } => unreachable!("handled without a model"),
    }
}
