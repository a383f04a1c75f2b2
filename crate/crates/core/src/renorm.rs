//! The renormalization map `R = S∘M∘I` on laws of decreasing mass lists.
//!
//! `I` takes the disjoint union of `L^d` independent draws, `M` runs the
//! multiplicative coalescent for time `L^{-(d+α)}` and `S` scales every mass
//! by `L^{-(d+α)/2}`. Laws are carried as particle approximations; started
//! from the Dirac mass at `(√β, 0, …)`, `n` steps reproduce the law of
//! `√β L^{-(d+α)n/2} (K_{n,1}, K_{n,2}, …)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coalescent::{coalesce_in_place, truncate_below, Scratch};
use crate::error::{invalid, Error, Result};
use crate::lattice::ModelParams;
use crate::mass::{kahan_sum, MassList};
use crate::percsim::BlockSampler;
use crate::replicas::{map_replicas, Execution};
use crate::rng::{Aux, StreamKey};
use crate::stats::{ks_two_sample, KsResult, MomentEstimate};

/// Masses below this fraction of a draw's total are dropped after each step.
pub const MASS_FLOOR: f64 = 1e-12;

/// Largest tolerated per-step relative mass deficit.
pub const MAX_DEFICIT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalLaw {
    pub draws: Vec<MassList>,
    /// Number of renormalization steps applied.
    pub steps: u32,
    /// Largest relative mass deficit of any draw, per step.
    pub deficits: Vec<f64>,
}

impl EmpiricalLaw {
    pub fn new(draws: Vec<MassList>) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::Degenerate("empirical law has no draws".into()));
        }
        Ok(Self { draws, steps: 0, deficits: Vec::new() })
    }

    /// `draws` copies of the single-mass list `(mass)`; `mass = 0` gives the
    /// zero law.
    pub fn dirac(mass: f64, draws: usize) -> Result<Self> {
        if !(mass >= 0.0) || !mass.is_finite() {
            return Err(invalid("mass must be finite and nonnegative"));
        }
        Self::new(vec![MassList::new(vec![mass]); draws])
    }

    /// The starting law `μ_β`.
    pub fn mu_beta(params: &ModelParams, draws: usize) -> Result<Self> {
        params.validate()?;
        Self::dirac(params.beta.sqrt(), draws)
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn norms2(&self) -> Vec<f64> {
        self.draws.iter().map(|d| d.power_sum(2.0)).collect()
    }

    pub fn largest(&self) -> Vec<f64> {
        self.draws.iter().map(MassList::largest).collect()
    }
}

/// Applies `R` once. Every output draw combines `L^d` draws chosen
/// uniformly with replacement from `law`.
pub fn renorm_step(law: &EmpiricalLaw, params: &ModelParams, key: StreamKey, exec: Execution) -> Result<EmpiricalLaw> {
    params.validate()?;
    if law.draws.is_empty() {
        return Err(Error::Degenerate("empirical law has no draws".into()));
    }
    let b = params.branching() as usize;
    let da = params.d as f64 + params.alpha;
    let duration = (params.l as f64).powf(-da);
    let scale = (params.l as f64).powf(-da / 2.0);
    let outputs = map_replicas(exec, law.draws.len() as u64, |i| {
        let mut rng = key.aux(Aux::Renorm, i).rng();
        let mut buf: Vec<f64> = Vec::new();
        for _ in 0..b {
            let j = rng.random_range(0..law.draws.len());
            buf.extend_from_slice(law.draws[j].as_slice());
        }
        let mut scratch = Scratch::new();
        coalesce_in_place(&mut buf, 0, duration, &mut rng, &mut scratch);
        for m in buf.iter_mut() {
            *m *= scale;
        }
        let tot = kahan_sum(buf.iter().copied());
        let lost = truncate_below(&mut buf, MASS_FLOOR);
        let rel = if tot > 0.0 { lost / tot } else { 0.0 };
        (MassList::new(buf), rel)
    });
    let deficit = outputs.iter().map(|o| o.1).fold(0.0, f64::max);
    if deficit > MAX_DEFICIT {
        log::warn!("renormalization step lost {deficit:e} of the mass of some draw");
    }
    let mut deficits = law.deficits.clone();
    deficits.push(deficit);
    Ok(EmpiricalLaw { draws: outputs.into_iter().map(|o| o.0).collect(), steps: law.steps + 1, deficits })
}

/// Summary of a law after a number of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenormSummary {
    pub step: u32,
    pub mean_norm2: f64,
    pub norm2_stderr: f64,
    /// Quartiles of the largest entry.
    pub largest_quartiles: [f64; 3],
    pub deficit: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

pub fn summarize(law: &EmpiricalLaw) -> RenormSummary {
    let n2 = MomentEstimate::from_slice(&law.norms2());
    let mut big = law.largest();
    big.sort_by(f64::total_cmp);
    RenormSummary {
        step: law.steps,
        mean_norm2: n2.mean(),
        norm2_stderr: n2.stderr(),
        largest_quartiles: [quantile(&big, 0.25), quantile(&big, 0.5), quantile(&big, 0.75)],
        deficit: law.deficits.last().copied().unwrap_or(0.0),
    }
}

/// Iterates `R` from `μ_β`; the summary of the starting law comes first.
pub fn iterate_renorm(
    params: &ModelParams,
    steps: u32,
    draws: usize,
    key: StreamKey,
    exec: Execution,
) -> Result<Vec<RenormSummary>> {
    if steps == 0 {
        return Err(invalid("steps must be at least 1"));
    }
    let mut law = EmpiricalLaw::mu_beta(params, draws)?;
    let mut out = vec![summarize(&law)];
    for s in 0..steps {
        law = renorm_step(&law, params, StreamKey::new(key.derive_seed(s as u64)), exec)?;
        out.push(summarize(&law));
    }
    Ok(out)
}

/// Two-sample comparison of `R^n[μ_β]` with the normalized direct sample at
/// one scale. Both sides are mapped back to integer cluster sizes first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeRow {
    pub step: u32,
    pub norm2: KsResult,
    pub largest: KsResult,
    pub deficit: f64,
}

/// Runs `R` for `steps` steps and compares each step `n` with direct
/// samples of the `n`-block cluster sizes.
pub fn bridge_check(
    params: &ModelParams,
    steps: u32,
    draws: usize,
    key: StreamKey,
    exec: Execution,
) -> Result<Vec<BridgeRow>> {
    if !(params.beta > 0.0) {
        return Err(invalid("bridge check needs beta > 0"));
    }
    if steps == 0 {
        return Err(invalid("steps must be at least 1"));
    }
    params.check_scale(steps)?;
    let da = params.d as f64 + params.alpha;
    let mut law = EmpiricalLaw::mu_beta(params, draws)?;
    let mut rows = Vec::new();
    for n in 1..=steps {
        law = renorm_step(&law, params, StreamKey::new(key.derive_seed(n as u64)), exec)?;
        let unit = params.beta.sqrt() * (params.l as f64).powf(-da * n as f64 / 2.0);
        let to_int = |x: f64| (x / unit).round();
        let r_norm: Vec<f64> =
            law.draws.iter().map(|d| d.as_slice().iter().map(|&x| to_int(x).powi(2)).sum()).collect();
        let r_big: Vec<f64> = law.draws.iter().map(|d| to_int(d.largest())).collect();
        let sampler = BlockSampler::new(params, n)?;
        let direct_key = StreamKey::new(key.derive_seed(1000 + n as u64));
        let direct = map_replicas(exec, draws as u64, |r| sampler.sample(direct_key.replica(r)));
        let d_norm: Vec<f64> = direct.iter().map(|s| s.iter().map(|&k| (k as f64).powi(2)).sum()).collect();
        let d_big: Vec<f64> = direct.iter().map(|s| s.iter().copied().max().unwrap_or(0) as f64).collect();
        rows.push(BridgeRow {
            step: n,
            norm2: ks_two_sample(&r_norm, &d_norm),
            largest: ks_two_sample(&r_big, &d_big),
            deficit: *law.deficits.last().expect("one deficit per step"),
        });
    }
    Ok(rows)
}
