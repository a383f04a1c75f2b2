//! Exact Monte Carlo sampling of hierarchical percolation `η_n`.
//!
//! Every layer `m = 1..n` contributes, inside each `m`-block of `S = L^{dm}`
//! vertices, a Poisson number of multi-edges: each unordered vertex pair
//! carries Poisson(`β L^{-(d+α)m}`) of them, so the pair is joined by that
//! layer with probability `1 - exp(-β L^{-(d+α)m})`. Three samplers build on
//! this:
//!
//! * [`sample_eta_forest`] works on the vertex set with a [`ClusterForest`];
//! * [`BlockSampler`] works on cluster sizes only, recursively: the children's
//!   size lists are concatenated and coalesced for `t_m` (multi-edges between
//!   two clusters are size-biased endpoint pairs);
//! * [`explore_origin_cluster`] reveals only the cluster of the origin, lazily,
//!   so its cost scales with the cluster rather than the block.

use rand::Rng;
use rustc_hash::FxHashMap;

use crate::coalescent::{coalesce_in_place, Scratch};
use crate::error::{invalid, Error, Result};
use crate::forest::ClusterForest;
use crate::lattice::{periodic_constant, ModelParams, VertexId};
use crate::mass::SizeMultiset;
use crate::replicas::{map_replicas, Execution};
use crate::rng::{poisson_count, Aux, StreamKey, StreamRng};
use crate::stats::MomentEstimate;

/// Default vertex cap for forest mode.
pub const DEFAULT_FOREST_CAP: u64 = 1 << 27;

/// Receives the final cluster sizes of every block as it is completed.
pub trait ScaleObserver {
    fn observe(&mut self, scale: u32, sizes: &[u64]);
}

impl<F: FnMut(u32, &[u64])> ScaleObserver for F {
    fn observe(&mut self, scale: u32, sizes: &[u64]) {
        self(scale, sizes)
    }
}

struct NoObserver;

impl ScaleObserver for NoObserver {
    fn observe(&mut self, _: u32, _: &[u64]) {}
}

/// How long the top layer of the sampled block runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TopLayer {
    /// The full time `t_n`.
    End,
    /// An intermediate time `t ∈ [0, t_n]`.
    Time(f64),
}

fn check_beta(params: &ModelParams) -> Result<()> {
    if !params.beta.is_finite() || params.beta < 0.0 {
        return Err(invalid(format!("beta must be finite and nonnegative, got {}", params.beta)));
    }
    Ok(())
}

/// Recursive size-only sampler of an `n`-block.
#[derive(Debug, Clone)]
pub struct BlockSampler {
    params: ModelParams,
    n: u32,
    top: TopLayer,
    periodic_extra: f64,
}

impl BlockSampler {
    pub fn new(params: &ModelParams, n: u32) -> Result<Self> {
        params.validate()?;
        check_beta(params)?;
        params.check_scale(n)?;
        Ok(Self { params: *params, n, top: TopLayer::End, periodic_extra: 0.0 })
    }

    pub fn with_top(mut self, top: TopLayer) -> Self {
        self.top = top;
        self
    }

    /// Adds `extra` to the merge rate of the top layer only.
    pub fn with_top_extra(mut self, extra: f64) -> Self {
        self.periodic_extra = extra;
        self
    }

    /// Periodic boundary: the top layer runs to `t_n + β A L^{-(d+α)n}`.
    pub fn periodic(params: &ModelParams, n: u32) -> Result<Self> {
        let a = periodic_constant(params)?;
        Ok(Self::new(params, n)?.with_top_extra(params.beta * a * params.layer_weight(n)))
    }

    pub fn scale(&self) -> u32 {
        self.n
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn sample(&self, key: StreamKey) -> Vec<u64> {
        self.sample_observed(key, &mut NoObserver)
    }

    pub fn sample_multiset(&self, key: StreamKey) -> SizeMultiset {
        SizeMultiset::from_sizes(&self.sample(key))
    }

    /// Samples the block, reporting every completed sub-block to `obs`
    /// (including the top block itself, last).
    pub fn sample_observed<O: ScaleObserver + ?Sized>(&self, key: StreamKey, obs: &mut O) -> Vec<u64> {
        let mut buf = Vec::with_capacity(1024);
        let mut scratch = Scratch::new();
        self.build(self.n, 0, key, &mut buf, &mut scratch, obs);
        buf
    }

    fn build<O: ScaleObserver + ?Sized>(
        &self,
        m: u32,
        block: u64,
        key: StreamKey,
        buf: &mut Vec<u64>,
        scratch: &mut Scratch<u64>,
        obs: &mut O,
    ) {
        let start = buf.len();
        if m == 0 {
            buf.push(1);
            obs.observe(0, &buf[start..]);
            return;
        }
        let b = self.params.branching();
        if m == 1 {
            buf.extend(std::iter::repeat_n(1u64, b as usize));
            for i in 0..b as usize {
                obs.observe(0, &buf[start + i..start + i + 1]);
            }
        } else {
            for child in 0..b {
                self.build(m - 1, block * b + child, key, buf, scratch, obs);
            }
        }
        let rate = if m == self.n {
            match self.top {
                TopLayer::End => self.params.t_n(m),
                TopLayer::Time(t) => t,
            }
        } else {
            self.params.t_n(m)
        };
        let mut rng = key.layer(m, block).rng();
        coalesce_in_place(buf, start, rate, &mut rng, scratch);
        if m == self.n && self.periodic_extra > 0.0 {
            let mut extra = key.aux(Aux::PeriodicTop, block).rng();
            coalesce_in_place(buf, start, self.periodic_extra, &mut extra, scratch);
        }
        obs.observe(m, &buf[start..]);
    }
}

/// Cluster-size multiset of `η_n`, built recursively.
pub fn sample_sizes(params: &ModelParams, n: u32, key: StreamKey) -> Result<SizeMultiset> {
    Ok(BlockSampler::new(params, n)?.sample_multiset(key))
}

/// Cluster sizes under periodic boundary conditions.
pub fn sample_eta_periodic(params: &ModelParams, n: u32, key: StreamKey) -> Result<SizeMultiset> {
    Ok(BlockSampler::periodic(params, n)?.sample_multiset(key))
}

/// A vertex-level sample together with the number of multi-edges drawn.
#[derive(Debug, Clone)]
pub struct ForestSample {
    pub forest: ClusterForest,
    pub edges: u64,
}

fn forest_volume(params: &ModelParams, n: u32, cap: u64) -> Result<u64> {
    let vol = params.volume(n)?;
    if vol > cap {
        return Err(Error::ScaleCap {
            n,
            cap: (cap as f64).log(params.branching() as f64) as u32,
            base: params.branching(),
        });
    }
    Ok(vol)
}

#[inline]
fn draw_pair<R: Rng + ?Sized>(rng: &mut R, s: u64) -> (u64, u64) {
    let u = rng.random_range(0..s);
    let mut v = rng.random_range(0..s - 1);
    if v >= u {
        v += 1;
    }
    (u, v)
}

/// Vertex-level sample of `η_n` with optional tagged vertices.
pub fn sample_eta_forest(params: &ModelParams, n: u32, key: StreamKey, tags: &[VertexId]) -> Result<ForestSample> {
    sample_eta_forest_capped(params, n, key, tags, DEFAULT_FOREST_CAP)
}

pub fn sample_eta_forest_capped(
    params: &ModelParams,
    n: u32,
    key: StreamKey,
    tags: &[VertexId],
    cap: u64,
) -> Result<ForestSample> {
    params.validate()?;
    check_beta(params)?;
    let vol = forest_volume(params, n, cap)?;
    for t in tags {
        t.check(params, n)?;
    }
    let mut forest = ClusterForest::new(vol as usize, tags);
    let b = params.branching();
    let mut edges = 0;
    for m in 1..=n {
        let s = b.pow(m);
        let blocks = vol / s;
        let lambda = params.t_n(m) * (s as f64) * (s as f64 - 1.0) / 2.0;
        for block in 0..blocks {
            let mut rng = key.layer(m, block).rng();
            let count = poisson_count(&mut rng, lambda);
            edges += count;
            let base = block * s;
            for _ in 0..count {
                let (u, v) = draw_pair(&mut rng, s);
                forest.union((base + u) as u32, (base + v) as u32);
            }
        }
    }
    Ok(ForestSample { forest, edges })
}

/// Expected total number of multi-edges drawn by [`sample_eta_forest`].
pub fn expected_edge_count(params: &ModelParams, n: u32) -> Result<f64> {
    let vol = params.volume(n)? as f64;
    let b = params.branching();
    Ok((1..=n)
        .map(|m| {
            let s = b.pow(m) as f64;
            (vol / s) * params.t_n(m) * s * (s - 1.0) / 2.0
        })
        .sum())
}

/// Forests for several couplings from one Poisson stream: edges are drawn at
/// the largest `β` and each carries a uniform mark, kept at `β` iff
/// `mark < β / β_max`. Raising `β` therefore only adds edges.
pub fn sample_forests_coupled(
    params: &ModelParams,
    n: u32,
    betas: &[f64],
    key: StreamKey,
) -> Result<Vec<ClusterForest>> {
    params.validate()?;
    if betas.iter().any(|b| !b.is_finite() || *b < 0.0) {
        return Err(invalid("betas must be finite and nonnegative"));
    }
    let vol = forest_volume(params, n, DEFAULT_FOREST_CAP)?;
    let beta_max = betas.iter().copied().fold(0.0, f64::max);
    let mut forests: Vec<ClusterForest> = betas.iter().map(|_| ClusterForest::new(vol as usize, &[])).collect();
    if beta_max == 0.0 {
        return Ok(forests);
    }
    let top = params.with_beta(beta_max);
    let b = params.branching();
    for m in 1..=n {
        let s = b.pow(m);
        let lambda = top.t_n(m) * (s as f64) * (s as f64 - 1.0) / 2.0;
        for block in 0..vol / s {
            let mut rng = key.layer(m, block).rng();
            let count = poisson_count(&mut rng, lambda);
            let base = block * s;
            for _ in 0..count {
                let (u, v) = draw_pair(&mut rng, s);
                let mark: f64 = rng.random();
                for (f, &beta) in forests.iter_mut().zip(betas) {
                    if mark * beta_max < beta {
                        f.union((base + u) as u32, (base + v) as u32);
                    }
                }
            }
        }
    }
    Ok(forests)
}

/// Connection frequency for each vertex pair over `reps` tagged forests.
pub fn two_point_mc(
    params: &ModelParams,
    n: u32,
    pairs: &[(VertexId, VertexId)],
    reps: u64,
    key: StreamKey,
    exec: Execution,
) -> Result<Vec<MomentEstimate>> {
    if reps == 0 {
        return Err(invalid("reps must be positive"));
    }
    let mut tags: Vec<VertexId> = pairs.iter().flat_map(|&(x, y)| [x, y]).collect();
    tags.sort();
    tags.dedup();
    for t in &tags {
        t.check(params, n)?;
    }
    let hits = map_replicas(exec, reps, |r| -> Result<Vec<f64>> {
        let mut s = sample_eta_forest(params, n, key.replica(r), &tags)?;
        Ok(pairs.iter().map(|&(x, y)| s.forest.connected(x, y) as u8 as f64).collect())
    });
    let mut est = vec![MomentEstimate::default(); pairs.len()];
    for h in hits {
        for (e, v) in est.iter_mut().zip(h?) {
            e.push(v);
        }
    }
    Ok(est)
}

/// Connection probability as a function of the distance exponent `h = 1..=n`,
/// averaged over every vertex pair at that distance in each sample (all such
/// pairs have the same connection probability by translation invariance).
pub fn two_point_profile(
    params: &ModelParams,
    n: u32,
    reps: u64,
    key: StreamKey,
    exec: Execution,
) -> Result<Vec<MomentEstimate>> {
    if reps == 0 {
        return Err(invalid("reps must be positive"));
    }
    forest_volume(params, n, DEFAULT_FOREST_CAP)?;
    let b = params.branching();
    let per_rep = map_replicas(exec, reps, |r| -> Result<Vec<f64>> {
        let mut s = sample_eta_forest(params, n, key.replica(r), &[])?;
        let labels = s.forest.labels();
        let vol = labels.len() as u64;
        let mut same_within = vec![0u64; n as usize + 1];
        let mut chunk: Vec<u32> = Vec::new();
        for h in 1..=n {
            let size = b.pow(h) as usize;
            let mut total = 0u64;
            for blk in labels.chunks(size) {
                chunk.clear();
                chunk.extend_from_slice(blk);
                chunk.sort_unstable();
                let mut run = 1u64;
                for w in chunk.windows(2) {
                    if w[0] == w[1] {
                        run += 1;
                    } else {
                        total += run * (run - 1) / 2;
                        run = 1;
                    }
                }
                total += run * (run - 1) / 2;
            }
            same_within[h as usize] = total;
        }
        Ok((1..=n)
            .map(|h| {
                let exact = same_within[h as usize] - same_within[h as usize - 1];
                let pairs = vol * (b.pow(h) - b.pow(h - 1)) / 2;
                exact as f64 / pairs as f64
            })
            .collect())
    });
    let mut est = vec![MomentEstimate::default(); n as usize];
    for v in per_rep {
        for (e, x) in est.iter_mut().zip(v?) {
            e.push(x);
        }
    }
    Ok(est)
}

/// Lazy exploration of the cluster of a vertex in `η_n`.
///
/// Layers are revealed bottom-up. At layer `i` the current cluster sends a
/// Poisson(`t_i · |frontier| · |U|`) number of edges to uniform targets in
/// `U`, the not-yet-revealed vertices of its `i`-block; every target's own
/// cluster inside its `(i-1)`-block is then explored recursively with all
/// revealed vertices excluded. Revealed vertices always form clusters closed
/// under the lower layers, so the exclusion leaves the law of the remaining
/// edges untouched.
struct Explorer {
    vols: Vec<u64>,
    rates: Vec<f64>,
    /// vertex → reveal sequence number
    seq: FxHashMap<u64, u64>,
    next_seq: u64,
    /// per level: block index → number of revealed vertices in it
    counts: Vec<FxHashMap<u64, u64>>,
    cap: u64,
    aborted: bool,
    rng: StreamRng,
}

impl Explorer {
    fn new(params: &ModelParams, n: u32, cap: u64, rng: StreamRng) -> Self {
        let b = params.branching();
        Self {
            vols: (0..=n).map(|i| b.pow(i)).collect(),
            rates: (0..=n).map(|i| params.t_n(i)).collect(),
            seq: FxHashMap::default(),
            next_seq: 0,
            counts: vec![FxHashMap::default(); n as usize + 1],
            cap,
            aborted: false,
            rng,
        }
    }

    fn reveal(&mut self, v: u64) {
        self.seq.insert(v, self.next_seq);
        self.next_seq += 1;
        if self.next_seq > self.cap {
            self.aborted = true;
        }
        for i in 1..self.vols.len() {
            *self.counts[i].entry(v / self.vols[i]).or_insert(0) += 1;
        }
    }

    /// Uniform vertex among the `unrevealed` vertices of the block that were
    /// not yet revealed when the batch started (sequence number `batch_seq`).
    /// `None` means the draw hit a vertex revealed during the batch, which is
    /// a no-op edge.
    fn draw_target(&mut self, level: usize, block: u64, unrevealed: u64, batch_seq: u64) -> Option<u64> {
        let s = self.vols[level];
        let base = block * s;
        if s <= 1 << 16 && unrevealed * 16 < s {
            let r = self.rng.random_range(0..unrevealed);
            let mut idx = 0;
            for w in base..base + s {
                let fresh = match self.seq.get(&w) {
                    Some(&q) if q < batch_seq => continue,
                    Some(_) => false,
                    None => true,
                };
                if idx == r {
                    return fresh.then_some(w);
                }
                idx += 1;
            }
            unreachable!("target enumeration out of range");
        }
        loop {
            let w = base + self.rng.random_range(0..s);
            match self.seq.get(&w) {
                None => return Some(w),
                Some(&q) if q >= batch_seq => return None,
                Some(_) => {}
            }
        }
    }

    /// Explores the cluster of `v` up to layer `top`. When `profile` is given,
    /// the cluster size after closing each layer is appended to it.
    fn explore(&mut self, v: u64, top: u32, mut profile: Option<&mut Vec<u64>>) -> Vec<u64> {
        self.reveal(v);
        let mut cluster = vec![v];
        if let Some(p) = profile.as_deref_mut() {
            p.push(1);
        }
        for level in 1..=top as usize {
            let block = v / self.vols[level];
            let mut frontier = 0;
            while frontier < cluster.len() && !self.aborted {
                let q = (cluster.len() - frontier) as f64;
                frontier = cluster.len();
                let unrevealed = self.vols[level] - self.counts[level].get(&block).copied().unwrap_or(0);
                if unrevealed == 0 {
                    break;
                }
                let hits = poisson_count(&mut self.rng, self.rates[level] * q * unrevealed as f64);
                let batch_seq = self.next_seq;
                for _ in 0..hits {
                    if self.aborted {
                        break;
                    }
                    if let Some(u) = self.draw_target(level, block, unrevealed, batch_seq) {
                        let sub = self.explore(u, level as u32 - 1, None);
                        cluster.extend(sub);
                    }
                }
            }
            if self.aborted {
                break;
            }
            if let Some(p) = profile.as_deref_mut() {
                p.push(cluster.len() as u64);
            }
        }
        cluster
    }
}

/// Sizes `|K_0| ≤ |K_1| ≤ … ≤ |K_n|` of the origin's cluster at every scale,
/// all from one exploration (so they are coupled). If more than `cap`
/// vertices would be revealed, exploration stops: `sizes` then covers only
/// the scales completed so far and every larger scale has `|K_m| > cap`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OriginProfile {
    pub sizes: Vec<u64>,
    pub censored: bool,
}

impl OriginProfile {
    /// `|K_m|`, or `None` if censored at that scale.
    pub fn at(&self, m: u32) -> Option<u64> {
        self.sizes.get(m as usize).copied()
    }

    /// `min(|K_m|, cap)`-style value: the exact size or `cap` if censored.
    pub fn at_or(&self, m: u32, cap: u64) -> u64 {
        self.at(m).unwrap_or(cap)
    }
}

pub fn explore_origin_profile(params: &ModelParams, n: u32, key: StreamKey, cap: u64) -> Result<OriginProfile> {
    params.validate()?;
    check_beta(params)?;
    params.check_scale(n)?;
    if cap == 0 {
        return Err(invalid("exploration cap must be positive"));
    }
    let mut ex = Explorer::new(params, n, cap, key.aux(Aux::Explore, 0).rng());
    let mut sizes = Vec::with_capacity(n as usize + 1);
    ex.explore(0, n, Some(&mut sizes));
    Ok(OriginProfile { sizes, censored: ex.aborted })
}

/// The vertices of the cluster of `vertex` in `η_n`, revealed lazily.
pub fn explore_cluster(params: &ModelParams, n: u32, vertex: VertexId, key: StreamKey) -> Result<Vec<u64>> {
    params.validate()?;
    check_beta(params)?;
    vertex.check(params, n)?;
    let mut ex = Explorer::new(params, n, u64::MAX, key.aux(Aux::Explore, vertex.0).rng());
    let mut c = ex.explore(vertex.0, n, None);
    c.sort_unstable();
    Ok(c)
}

/// `|K_n|`, the size of the origin's cluster, revealed lazily.
pub fn explore_origin_cluster(params: &ModelParams, n: u32, key: StreamKey) -> Result<u64> {
    let p = explore_origin_profile(params, n, key, u64::MAX)?;
    Ok(*p.sizes.last().expect("profile is nonempty"))
}

/// `reps` independent samples of `|K_n|`.
pub fn origin_cluster_samples(
    params: &ModelParams,
    n: u32,
    reps: u64,
    key: StreamKey,
    exec: Execution,
) -> Result<Vec<u64>> {
    map_replicas(exec, reps, |r| explore_origin_cluster(params, n, key.replica(r))).into_iter().collect()
}

/// `reps` independent samples of `min(|K_n|, cap)`; exploration stops at
/// the cap, so the survival function is exact for `k ≤ cap`.
pub fn capped_origin_samples(
    params: &ModelParams,
    n: u32,
    reps: u64,
    cap: u64,
    key: StreamKey,
    exec: Execution,
) -> Result<Vec<u64>> {
    map_replicas(exec, reps, |r| {
        explore_origin_profile(params, n, key.replica(r), cap).map(|p| p.at_or(n, cap).min(cap))
    })
    .into_iter()
    .collect()
}

/// Size of the origin's cluster read from a tagged forest.
pub fn forest_origin_cluster(params: &ModelParams, n: u32, key: StreamKey) -> Result<u64> {
    let mut s = sample_eta_forest(params, n, key, &[VertexId(0)])?;
    Ok(s.forest.cluster_size(VertexId(0)))
}
