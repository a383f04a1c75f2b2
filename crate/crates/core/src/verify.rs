//! Oracle and identity checks shared by the `verify` command and the test
//! suites. Every check is deterministic given its seed.

use serde::{Deserialize, Serialize};

use crate::coalescent::{coalesce_in_place, Scratch};
use crate::error::Result;
use crate::lattice::{periodic_constant_residual, ModelParams};
use crate::mass::power_sum;
use crate::momentode::{
    double_factorial_identity, integral_identity, integral_quadrature, lemma21_rhs, seq_recursion, seq_recursion_ratio,
    thm14_residual, MomentVector,
};
use crate::oracle::{
    evolve, exact_coalescent_law, exact_eta_law, exact_moments, exact_recursive_law_at, unit_expansion,
};
use crate::percsim::{sample_eta_forest, sample_sizes};
use crate::replicas::{map_replicas, Execution};
use crate::rng::StreamKey;
use crate::stats::{ks_two_sample, MomentEstimate};

/// Outcome of one check: `value` is compared against `tolerance` in the
/// direction given by the check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        Self { name: name.into(), pass: value <= tolerance, value, tolerance, detail }
    }

    fn at_least(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        Self { name: name.into(), pass: value >= tolerance, value, tolerance, detail }
    }
}

/// All integer partitions of every total in `1..=max_total`, parts decreasing.
pub fn mass_lists(max_total: u64) -> Vec<Vec<u64>> {
    fn rec(rem: u64, max: u64, cur: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if rem == 0 {
            out.push(cur.clone());
            return;
        }
        for part in (1..=rem.min(max)).rev() {
            cur.push(part);
            rec(rem - part, part, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for total in 1..=max_total {
        rec(total, total, &mut Vec::new(), &mut out);
    }
    out
}

/// Monte Carlo `E‖X_t‖_p^p` against the exact law for every mass list of
/// total at most `max_total`, each `t` in `times` and `p ∈ {2, 3, 4}`.
/// `value` is the largest `|z|`.
pub fn oracle_monte_carlo(max_total: u64, times: &[f64], reps: u64, seed: u64, exec: Execution) -> Result<Check> {
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut cases = 0;
    for (ci, masses) in mass_lists(max_total).iter().enumerate() {
        let (lattice, init) = unit_expansion(masses)?;
        for (ti, &t) in times.iter().enumerate() {
            let law = exact_coalescent_law(&lattice, &init, t)?;
            let key = StreamKey::new(StreamKey::new(seed).derive_seed((ci * times.len() + ti) as u64));
            let samples = map_replicas(exec, reps, |r| {
                let mut buf = masses.clone();
                let mut rng = key.replica(r).rng();
                coalesce_in_place(&mut buf, 0, t, &mut rng, &mut Scratch::new());
                [power_sum(&buf, 2), power_sum(&buf, 3), power_sum(&buf, 4)]
            });
            for (i, p) in (2..=4).enumerate() {
                let exact = exact_moments(&lattice, &law, p)?;
                let est: MomentEstimate = samples.iter().map(|s| s[i]).collect();
                let z = if est.stderr() > 0.0 {
                    (est.mean() - exact) / est.stderr()
                } else if (est.mean() - exact).abs() < 1e-9 {
                    0.0
                } else {
                    f64::INFINITY
                };
                cases += 1;
                if z.abs() > worst {
                    worst = z.abs();
                    worst_at = format!("masses {masses:?} t={t} p={p}");
                }
            }
        }
    }
    Ok(Check::at_most("oracle_monte_carlo", worst, 4.0, format!("{cases} cases, worst at {worst_at}")))
}

/// Internal consistency of the exact laws: normalization, conservation of
/// `‖X‖₁`, and the semigroup property `P_{s+t} = P_t P_s`.
pub fn oracle_consistency(max_total: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    for masses in mass_lists(max_total) {
        let (lattice, init) = unit_expansion(&masses)?;
        let total: u64 = masses.iter().sum();
        for t in [0.1, 0.5, 1.0] {
            let law = exact_coalescent_law(&lattice, &init, t)?;
            worst = worst.max((law.iter().sum::<f64>() - 1.0).abs());
            worst = worst.max((exact_moments(&lattice, &law, 1)? - total as f64).abs());
            let half = exact_coalescent_law(&lattice, &init, t / 2.0)?;
            let twice = evolve(&lattice.generator(), &half, t / 2.0)?;
            worst = worst.max(law.iter().zip(&twice).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    Ok(Check::at_most("oracle_consistency", worst, 1e-9, "normalization, mass, semigroup".into()))
}

/// Five-point central difference of `E‖X_t‖_p^p` on the 4-vertex recursive
/// law against the moment ODE, for `p ∈ {2, 3}`.
pub fn moment_derivative_check() -> Result<Check> {
    let h = 1e-4;
    let mut worst = 0.0f64;
    for (alpha, beta) in [(0.5, 6.0), (0.2, 3.0), (0.6, 10.0)] {
        let params = ModelParams::new(1, 2, alpha, beta)?;
        let n = 2;
        let tn = params.t_n(n);
        for p in [2, 3] {
            let m = |t: f64| -> Result<f64> {
                let (l, law) = exact_recursive_law_at(&params, n, t)?;
                exact_moments(&l, &law, p)
            };
            for frac in [0.25, 0.5, 0.75] {
                let t = frac * tn;
                let fd = (-m(t + 2.0 * h)? + 8.0 * m(t + h)? - 8.0 * m(t - h)? + m(t - 2.0 * h)?) / (12.0 * h);
                let (l, law) = exact_recursive_law_at(&params, n, t)?;
                let rhs = lemma21_rhs(&MomentVector::from_exact(&l, &law, n, t, p)?, p)?;
                worst = worst.max((fd - rhs).abs());
            }
        }
    }
    Ok(Check::at_most("moment_derivative_identity", worst, 1e-6, "4 vertices, p = 2, 3".into()))
}

/// Exact law of `η_2` on 4 vertices by pair enumeration against the composed
/// block coalescents.
pub fn eta_equals_recursive() -> Result<Check> {
    let mut worst = 0.0f64;
    for (alpha, beta) in [(0.2, 0.5), (0.5, 2.0), (0.6, 7.0)] {
        let params = ModelParams::new(1, 2, alpha, beta)?;
        for n in 0..=2 {
            let (_, a) = exact_eta_law(&params, n)?;
            let (_, b) = exact_recursive_law_at(&params, n, params.t_n(n))?;
            worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    Ok(Check::at_most("eta_equals_recursive", worst, 1e-8, "d=1, L=2, n ≤ 2".into()))
}

/// Size sampler against the vertex-level forest sampler: KS on `‖X‖₂²` and
/// on the largest cluster. `value` is the smaller p-value.
pub fn sizes_match_forest(params: &ModelParams, n: u32, reps: u64, seed: u64, exec: Execution) -> Result<Check> {
    let ka = StreamKey::new(StreamKey::new(seed).derive_seed(0));
    let kb = StreamKey::new(StreamKey::new(seed).derive_seed(1));
    let a =
        map_replicas(exec, reps, |r| sample_sizes(params, n, ka.replica(r)).map(|s| (s.power_sum(2), s.max() as f64)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
    let b = map_replicas(exec, reps, |r| {
        sample_eta_forest(params, n, kb.replica(r), &[]).map(|s| {
            let sizes = s.forest.root_sizes();
            (power_sum(&sizes, 2), sizes.iter().copied().max().unwrap_or(0) as f64)
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let split = |v: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { v.iter().copied().unzip() };
    let ((a2, amax), (b2, bmax)) = (split(&a), split(&b));
    let k2 = ks_two_sample(&a2, &b2);
    let kmax = ks_two_sample(&amax, &bmax);
    let p = k2.p_value.min(kmax.p_value);
    Ok(Check::at_least(
        "sizes_match_forest",
        p,
        1e-3,
        format!("n={n}, {reps} reps, KS p(‖X‖₂²)={:.3}, p(max)={:.3}", k2.p_value, kmax.p_value),
    ))
}

/// The double-factorial convolution identity, in exact arithmetic.
pub fn double_factorial_check(max_n: u64) -> Result<Check> {
    let mut bad = Vec::new();
    for n in 2..=max_n {
        let (l, r) = double_factorial_identity(n)?;
        if l != r {
            bad.push(n);
        }
    }
    Ok(Check::at_most("double_factorial_identity", bad.len() as f64, 0.0, format!("2 ≤ n ≤ {max_n}, failures {bad:?}")))
}

/// Closed-form integral against adaptive quadrature.
pub fn integral_check() -> Result<Check> {
    let mut worst = 0.0f64;
    for (alpha, beta) in [(0.2, 0.18), (0.5, 0.77), (0.6, 1.17), (1.0 / 3.0, 0.4)] {
        let params = ModelParams::new(1, 2, alpha, beta)?;
        for n in [0, 3, 10] {
            for frac in [0.0, 0.1, 0.5, 0.9, 1.0] {
                let t = frac * params.t_n(n);
                let exact = integral_identity(&params, n, t)?;
                let quad = integral_quadrature(&params, n, t, 1e-14)?;
                worst = worst.max((exact - quad).abs());
            }
        }
    }
    Ok(Check::at_most("integral_identity", worst, 1e-10, "closed form vs adaptive Simpson".into()))
}

/// Agreement of the two algebraic forms of the critical-dimension constant.
pub fn critical_constant_check() -> Result<Check> {
    let mut worst = 0.0f64;
    for l in [2.0, 3.0, 4.0] {
        for beta_c in [0.1, 0.5, 1.0, 3.0] {
            worst = worst.max(thm14_residual(l, 1.0 / 3.0, beta_c));
        }
    }
    Ok(Check::at_most("critical_constant_identity", worst, 1e-12, "relative gap".into()))
}

/// Closed-form periodic-kernel constant against its partial sums.
pub fn periodic_check() -> Result<Check> {
    let mut worst = 0.0f64;
    for (d, l) in [(1, 2), (1, 3), (2, 2)] {
        for alpha in [0.2, 0.5, 0.6, 0.9] {
            worst = worst.max(periodic_constant_residual(&ModelParams::new(d, l, alpha, 1.0)?)?);
        }
    }
    Ok(Check::at_most("periodic_constant", worst, 1e-12, "closed form vs 1000-term sum".into()))
}

/// Relative errors of the scalar recursion at `n = steps` against the
/// plain asymptotic `(γ A n)^{-1/γ}` and against the δ-corrected form
/// `(γ A Σ_{i<n} (1 + δ_i))^{-1/γ}`, for `δ_i = 0` or `δ_i = (i+1)^{-1/2}`.
pub fn seq_recursion_errors(a0: f64, a: f64, gamma: f64, decaying: bool, steps: u64) -> Result<(f64, f64)> {
    let delta = |n: u64| if decaying { ((n + 1) as f64).powf(-0.5) } else { 0.0 };
    let seq = seq_recursion(a0, a, gamma, delta, steps)?;
    let plain = (seq_recursion_ratio(&seq, a, gamma) - 1.0).abs();
    let eff: f64 = (0..steps).map(|i| 1.0 + delta(i)).sum();
    let corrected = (seq[steps as usize] * (gamma * a * eff).powf(1.0 / gamma) - 1.0).abs();
    Ok((plain, corrected))
}

/// The recursion at `n = steps`: plain asymptotic for `δ ≡ 0`, δ-corrected
/// form for `δ_n = n^{-1/2}`, both to 1%.
pub fn seq_recursion_check(steps: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for (a0, a, gamma) in [(1.0, 0.5, 2.0), (1.0, 1.0, 1.0), (0.5, 2.0, 0.5)] {
        let (plain, _) = seq_recursion_errors(a0, a, gamma, false, steps)?;
        let (_, corrected) = seq_recursion_errors(a0, a, gamma, true, steps)?;
        detail.push(format!("A={a} γ={gamma}: {plain:.2e}, {corrected:.2e}"));
        worst = worst.max(plain).max(corrected);
    }
    Ok(Check::at_most("seq_recursion", worst, 0.01, detail.join("; ")))
}

/// The fast suite run by `hierperc verify`.
pub fn run_all(seed: u64, exec: Execution) -> Result<Vec<Check>> {
    Ok(vec![
        oracle_consistency(5)?,
        oracle_monte_carlo(4, &[0.1, 0.5, 1.0], 20_000, seed, exec)?,
        moment_derivative_check()?,
        eta_equals_recursive()?,
        sizes_match_forest(&ModelParams::new(1, 2, 0.5, 1.0)?, 6, 4000, seed, exec)?,
        double_factorial_check(30)?,
        integral_check()?,
        critical_constant_check()?,
        periodic_check()?,
        seq_recursion_check(10_000)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mass_lists_count_partitions() {
        assert_eq!(mass_lists(5).len(), 1 + 2 + 3 + 5 + 7);
        assert!(mass_lists(4).iter().all(|m| m.windows(2).all(|w| w[0] >= w[1])));
    }

    #[test]
    fn deterministic_checks_pass() {
        for c in [
            oracle_consistency(4).unwrap(),
            moment_derivative_check().unwrap(),
            eta_equals_recursive().unwrap(),
            double_factorial_check(30).unwrap(),
            integral_check().unwrap(),
            critical_constant_check().unwrap(),
            periodic_check().unwrap(),
            seq_recursion_check(10_000).unwrap(),
        ] {
            assert!(c.pass, "{c:?}");
        }
    }

    #[test]
    fn small_monte_carlo_checks_pass() {
        let c = oracle_monte_carlo(3, &[0.5], 5000, 3, Execution::default()).unwrap();
        assert!(c.pass, "{c:?}");
        let c =
            sizes_match_forest(&ModelParams::new(1, 2, 0.5, 1.0).unwrap(), 4, 2000, 3, Execution::default()).unwrap();
        assert!(c.pass, "{c:?}");
    }
}
