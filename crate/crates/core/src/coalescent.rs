//! The multiplicative coalescent: blocks `A`, `B` merge at rate `|A|·|B|`.
//!
//! Two samplers share the [`Mass`] abstraction:
//!
//! * [`run_gillespie`] simulates the continuous-time chain event by event;
//! * [`run_final`] samples only the state at the end of the interval. Over a
//!   duration `t`, a Poisson(`t S²/2`) number of endpoint pairs is drawn with
//!   both endpoints size-biased, so that every unordered pair of distinct
//!   clusters receives a Poisson(`t |A||B|`) number of edges and is joined
//!   with probability `1 - exp(-t |A||B|)`. Pairs landing twice in one cluster
//!   are kept as no-ops.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::forest::LocalDsu;
use crate::lattice::{ModelParams, ScaleTime};
use crate::mass::{total, Mass};
use crate::percsim::{BlockSampler, TopLayer};
use crate::rng::{exponential, poisson_count, Aux, StreamKey};

/// Masses of a coalescent together with the time already elapsed.
#[derive(Debug, Clone, PartialEq)]
pub struct CoalescentState<M: Mass> {
    pub masses: Vec<M>,
    pub elapsed: f64,
}

impl<M: Mass> CoalescentState<M> {
    pub fn new(masses: Vec<M>) -> Result<Self> {
        if masses.is_empty() {
            return Err(invalid("coalescent state must be nonempty"));
        }
        if masses.iter().any(|m| !m.is_positive()) {
            return Err(invalid("coalescent masses must be strictly positive"));
        }
        Ok(Self { masses, elapsed: 0.0 })
    }

    pub fn total(&self) -> M {
        total(&self.masses)
    }

    /// Masses sorted in decreasing order.
    pub fn sorted(&self) -> Vec<M> {
        let mut v = self.masses.clone();
        v.sort_by(|a, b| b.partial_cmp(a).expect("masses are comparable"));
        v
    }
}

fn check_duration(duration: f64) -> Result<()> {
    if !(duration >= 0.0) || duration.is_nan() {
        return Err(invalid(format!("duration must be nonnegative, got {duration}")));
    }
    Ok(())
}

/// Reusable buffers for [`coalesce_in_place`].
#[derive(Debug, Default)]
pub struct Scratch<M: Mass> {
    prefix: Vec<M>,
    sums: Vec<M>,
    dsu: LocalDsu,
}

impl<M: Mass> Scratch<M> {
    pub fn new() -> Self {
        Self { prefix: Vec::new(), sums: Vec::new(), dsu: LocalDsu::default() }
    }
}

/// Index of the cluster holding the point `u` given inclusive prefix sums.
#[inline]
fn locate<M: Mass>(prefix: &[M], u: M) -> usize {
    let i = prefix.partition_point(|&p| p <= u);
    i.min(prefix.len() - 1)
}

/// Runs the final-state sampler over `buf[start..]` and replaces that
/// segment with the merged masses. Returns the number of endpoint pairs drawn.
///
/// `rate` multiplies every pair's merge rate; pass the duration for a plain
/// coalescent.
pub fn coalesce_in_place<M: Mass, R: Rng + ?Sized>(
    buf: &mut Vec<M>,
    start: usize,
    rate: f64,
    rng: &mut R,
    scratch: &mut Scratch<M>,
) -> u64 {
    let k = buf.len() - start;
    if k <= 1 || rate <= 0.0 {
        return 0;
    }
    let seg = &buf[start..];
    scratch.prefix.clear();
    let mut acc = M::default();
    for &m in seg {
        acc = acc.add(m);
        scratch.prefix.push(acc);
    }
    let s = acc;
    let s_f = s.to_f64();
    let edges = poisson_count(rng, rate * s_f * s_f / 2.0);
    if edges == 0 {
        return 0;
    }
    scratch.dsu.reset(k);
    for _ in 0..edges {
        let a = locate(&scratch.prefix, M::uniform_below(s, rng));
        let b = locate(&scratch.prefix, M::uniform_below(s, rng));
        scratch.dsu.union(a as u32, b as u32);
        if scratch.dsu.components() == 1 {
            // every remaining pair would be a no-op
            break;
        }
    }
    if scratch.dsu.components() == k {
        return edges;
    }
    scratch.sums.clear();
    scratch.sums.resize(k, M::default());
    for i in 0..k {
        let r = scratch.dsu.find(i as u32) as usize;
        scratch.sums[r] = scratch.sums[r].add(buf[start + i]);
    }
    buf.truncate(start);
    for i in 0..k {
        if scratch.dsu.find(i as u32) as usize == i {
            buf.push(scratch.sums[i]);
        }
    }
    edges
}

/// Samples the state after `duration` directly (no intermediate events).
pub fn run_final<M: Mass>(state: &CoalescentState<M>, duration: f64, key: StreamKey) -> Result<CoalescentState<M>> {
    check_duration(duration)?;
    if state.masses.is_empty() {
        return Err(invalid("coalescent state must be nonempty"));
    }
    let mut rng = key.aux(Aux::Coalescent, 0).rng();
    let mut masses = state.masses.clone();
    let mut scratch = Scratch::new();
    coalesce_in_place(&mut masses, 0, duration, &mut rng, &mut scratch);
    Ok(CoalescentState { masses, elapsed: state.elapsed + duration })
}

/// One merge event of a Gillespie path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeEvent<M: Mass> {
    pub time: f64,
    pub first: M,
    pub second: M,
}

/// Fenwick tree over masses supporting size-biased selection.
struct Fenwick<M: Mass> {
    tree: Vec<M>,
}

impl<M: Mass> Fenwick<M> {
    fn new(values: &[M]) -> Self {
        let n = values.len();
        let mut tree = vec![M::default(); n + 1];
        for (i, &v) in values.iter().enumerate() {
            let mut j = i + 1;
            while j <= n {
                tree[j] = tree[j].add(v);
                j += j & j.wrapping_neg();
            }
        }
        Self { tree }
    }

    fn add(&mut self, i: usize, v: M) {
        let n = self.tree.len() - 1;
        let mut j = i + 1;
        while j <= n {
            self.tree[j] = self.tree[j].add(v);
            j += j & j.wrapping_neg();
        }
    }

    fn sub(&mut self, i: usize, v: M) {
        let n = self.tree.len() - 1;
        let mut j = i + 1;
        while j <= n {
            self.tree[j] = self.tree[j].sub(v);
            j += j & j.wrapping_neg();
        }
    }

    /// Smallest index whose inclusive prefix exceeds `u`.
    fn search(&self, mut u: M) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= u {
                pos = next;
                u = u.sub(self.tree[next]);
            }
            step >>= 1;
        }
        pos.min(n - 1)
    }
}

/// Exact event-driven simulation for `duration`.
///
/// The total merge rate is `(‖X‖₁² - ‖X‖₂²)/2`. The merging pair is drawn as
/// two independent size-biased picks, redrawn whenever both land on the same
/// cluster, which gives probability proportional to `|A||B|` over distinct
/// pairs. Each pick is `O(log k)`. Intended for small and moderate states:
/// when one cluster carries almost all the mass the rejection loop slows down.
pub fn run_gillespie<M: Mass>(
    state: &CoalescentState<M>,
    duration: f64,
    key: StreamKey,
    trace: Option<&mut Vec<MergeEvent<M>>>,
) -> Result<CoalescentState<M>> {
    check_duration(duration)?;
    if state.masses.is_empty() {
        return Err(invalid("coalescent state must be nonempty"));
    }
    let mut rng = key.aux(Aux::Gillespie, 0).rng();
    let mut masses = state.masses.clone();
    let mut fen = Fenwick::new(&masses);
    let s = total(&masses);
    let s_f = s.to_f64();
    let mut sum_sq: f64 = masses.iter().map(|m| m.to_f64() * m.to_f64()).sum();
    let mut alive = masses.len();
    let mut time = 0.0;
    let mut trace = trace;
    while alive > 1 {
        let rate = 0.5 * (s_f * s_f - sum_sq);
        if rate <= 0.0 {
            break;
        }
        time += exponential(&mut rng, rate);
        if time > duration {
            break;
        }
        let (a, b) = loop {
            let a = fen.search(M::uniform_below(s, &mut rng));
            let b = fen.search(M::uniform_below(s, &mut rng));
            if a != b && masses[a].is_positive() && masses[b].is_positive() {
                break (a, b);
            }
        };
        let (ma, mb) = (masses[a], masses[b]);
        if let Some(t) = trace.as_deref_mut() {
            t.push(MergeEvent { time: state.elapsed + time, first: ma, second: mb });
        }
        masses[a] = ma.add(mb);
        masses[b] = M::default();
        fen.add(a, mb);
        fen.sub(b, mb);
        sum_sq += 2.0 * ma.to_f64() * mb.to_f64();
        alive -= 1;
    }
    masses.retain(|m| m.is_positive());
    Ok(CoalescentState { masses, elapsed: state.elapsed + duration })
}

/// Samples `X_{n,t}`: the `L^d` children of the `n`-block are built to their
/// final times `t_{n-1}`, merged by disjoint union, and the top layer runs
/// for duration `t ∈ [0, t_n]`.
pub fn recursive_x(params: &ModelParams, n: u32, t: f64, key: StreamKey) -> Result<CoalescentState<u64>> {
    let st = ScaleTime::new(params, n, t)?;
    let sampler = BlockSampler::new(params, n)?.with_top(TopLayer::Time(st.t));
    let sizes = sampler.sample(key);
    Ok(CoalescentState { masses: sizes, elapsed: t })
}

/// Drops masses below `floor_fraction · total` and returns the dropped mass.
pub fn truncate_below(masses: &mut Vec<f64>, floor_fraction: f64) -> f64 {
    let tot: f64 = masses.iter().sum();
    let floor = floor_fraction * tot;
    let mut deficit = 0.0;
    masses.retain(|&m| {
        if m < floor {
            deficit += m;
            false
        } else {
            true
        }
    });
    if deficit > 0.0 {
        log::debug!("dropped mass {deficit:e} below floor {floor:e}");
    }
    deficit
}

/// `Err` unless the state is nonempty with positive masses.
pub fn validate<M: Mass>(masses: &[M]) -> Result<()> {
    if masses.is_empty() {
        return Err(Error::Degenerate("empty state".into()));
    }
    if masses.iter().any(|m| !m.is_positive()) {
        return Err(invalid("masses must be strictly positive"));
    }
    Ok(())
}
