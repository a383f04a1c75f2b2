//! Exact laws on tiny instances.
//!
//! Set partitions of a ground set of at most six weighted elements are
//! enumerated in restricted-growth-string order; the multiplicative
//! coalescent is then a finite Markov chain whose transition law `exp(tG)` is
//! computed by uniformization. Percolation laws on at most four vertices are
//! obtained by enumerating every edge subset.

use std::collections::HashMap;

use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::forest::LocalDsu;
use crate::lattice::{hdist_unchecked, kernel_interpolated_h, ModelParams, ScaleTime};

pub const MAX_GROUND_SET: usize = 6;
pub const MAX_ETA_VERTICES: u64 = 4;

/// Absolute tolerance of the uniformization series.
pub const UNIFORMIZATION_TOL: f64 = 1e-14;

/// A set partition as a restricted growth string: `rgs[i]` is the block of
/// element `i`, blocks numbered in order of first appearance.
pub type Partition = Vec<u8>;

fn canonical(labels: &[u32]) -> Partition {
    let mut map: HashMap<u32, u8> = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len() as u8;
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

fn all_partitions(k: usize) -> Vec<Partition> {
    fn rec(cur: &mut Partition, k: usize, max: u8, out: &mut Vec<Partition>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for b in 0..=max + 1 {
            cur.push(b);
            rec(cur, k, max.max(b), out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k == 0 {
        return out;
    }
    let mut cur = vec![0u8];
    rec(&mut cur, k, 0, &mut out);
    out
}

/// The state space of a multiplicative coalescent on `k ≤ 6` weighted
/// elements, with its generator.
#[derive(Debug, Clone)]
pub struct PartitionLattice {
    weights: Vec<f64>,
    states: Vec<Partition>,
    index: HashMap<Partition, usize>,
    /// Block masses of each state.
    masses: Vec<Vec<f64>>,
}

impl PartitionLattice {
    /// Ground set of `k` unit masses.
    pub fn new(k: usize) -> Result<Self> {
        Self::with_weights(vec![1.0; k])
    }

    pub fn with_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.len() > MAX_GROUND_SET {
            return Err(Error::GroundSetTooLarge(weights.len()));
        }
        if weights.is_empty() || weights.iter().any(|w| !(*w > 0.0)) {
            return Err(invalid("ground set must be nonempty with positive weights"));
        }
        let states = all_partitions(weights.len());
        let index = states.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let masses = states
            .iter()
            .map(|s| {
                let nb = *s.iter().max().unwrap() as usize + 1;
                let mut m = vec![0.0; nb];
                for (i, &b) in s.iter().enumerate() {
                    m[b as usize] += weights[i];
                }
                m
            })
            .collect();
        Ok(Self { weights, states, index, masses })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn ground_size(&self) -> usize {
        self.weights.len()
    }

    pub fn states(&self) -> &[Partition] {
        &self.states
    }

    pub fn block_masses(&self, state: usize) -> &[f64] {
        &self.masses[state]
    }

    pub fn index_of(&self, p: &[u8]) -> Result<usize> {
        let c = canonical(&p.iter().map(|&b| b as u32).collect::<Vec<_>>());
        self.index.get(&c).copied().ok_or_else(|| invalid("partition does not match the ground set"))
    }

    pub fn singletons(&self) -> usize {
        self.index[&(0..self.ground_size() as u8).collect::<Partition>()]
    }

    /// Merge transitions `(from, to, rate)`, restricted to block pairs whose
    /// elements lie in the same group of `group(i)` (pass a constant to allow
    /// every pair).
    fn transitions(&self, group: &dyn Fn(usize) -> u64) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (si, s) in self.states.iter().enumerate() {
            let nb = self.masses[si].len();
            // a representative element of each block
            let mut rep = vec![usize::MAX; nb];
            for (i, &b) in s.iter().enumerate() {
                if rep[b as usize] == usize::MAX {
                    rep[b as usize] = i;
                }
            }
            for a in 0..nb {
                for b in a + 1..nb {
                    if group(rep[a]) != group(rep[b]) {
                        continue;
                    }
                    let merged: Vec<u32> =
                        s.iter().map(|&x| if x as usize == b { a as u32 } else { x as u32 }).collect();
                    let to = self.index[&canonical(&merged)];
                    out.push((si, to, self.masses[si][a] * self.masses[si][b]));
                }
            }
        }
        out
    }

    /// Dense generator `G` (rows sum to zero).
    pub fn generator(&self) -> Vec<Vec<f64>> {
        self.generator_grouped(&|_| 0)
    }

    fn generator_grouped(&self, group: &dyn Fn(usize) -> u64) -> Vec<Vec<f64>> {
        let k = self.len();
        let mut g = vec![vec![0.0; k]; k];
        for (from, to, rate) in self.transitions(group) {
            g[from][to] += rate;
            g[from][from] -= rate;
        }
        g
    }

    pub fn point_mass(&self, state: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.len()];
        v[state] = 1.0;
        v
    }

    /// `E Σ_blocks m^p` under `law`.
    pub fn expect<F: Fn(&[f64]) -> f64>(&self, law: &[f64], f: F) -> Result<f64> {
        check_normalized(law)?;
        Ok(law.iter().zip(&self.masses).map(|(&w, m)| if w == 0.0 { 0.0 } else { w * f(m) }).sum())
    }
}

fn check_normalized(law: &[f64]) -> Result<()> {
    let s: f64 = law.iter().sum();
    if (s - 1.0).abs() > 1e-9 || law.iter().any(|&p| p < -1e-12) {
        return Err(Error::Unnormalized(s));
    }
    Ok(())
}

/// `v · exp(tG)` by uniformization.
pub fn evolve(generator: &[Vec<f64>], v: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(invalid(format!("time must be finite and nonnegative, got {t}")));
    }
    let k = v.len();
    let lambda = generator.iter().enumerate().map(|(i, r)| -r[i]).fold(0.0, f64::max);
    if lambda == 0.0 || t == 0.0 {
        return Ok(v.to_vec());
    }
    let lt = lambda * t;
    let mut term = v.to_vec();
    let mut out = vec![0.0; k];
    let mut acc_weight = 0.0;
    let mut next = vec![0.0; k];
    for j in 0.. {
        let w = (-lt + j as f64 * lt.ln() - ln_gamma(j as f64 + 1.0)).exp();
        for i in 0..k {
            out[i] += w * term[i];
        }
        acc_weight += w;
        if (1.0 - acc_weight < UNIFORMIZATION_TOL && j as f64 > lt) || j as f64 > lt + 40.0 * (lt.sqrt() + 1.0) {
            break;
        }
        if j > 100_000 {
            return Err(Error::SelfCheck("uniformization did not converge".into()));
        }
        // term ← term · (I + G/λ)
        for x in next.iter_mut() {
            *x = 0.0;
        }
        for (i, row) in generator.iter().enumerate() {
            let ti = term[i];
            if ti == 0.0 {
                continue;
            }
            for (jj, &g) in row.iter().enumerate() {
                if g != 0.0 {
                    next[jj] += ti * g / lambda;
                }
            }
            next[i] += ti;
        }
        std::mem::swap(&mut term, &mut next);
    }
    Ok(out)
}

/// Law at time `t` of the coalescent started from `initial`.
pub fn exact_coalescent_law(lattice: &PartitionLattice, initial: &[u8], t: f64) -> Result<Vec<f64>> {
    let start = lattice.index_of(initial)?;
    let law = evolve(&lattice.generator(), &lattice.point_mass(start), t)?;
    check_normalized(&law)?;
    Ok(law)
}

/// Lattice and initial state for an integer mass list, expanded into unit
/// elements (so the total mass must be at most six).
pub fn unit_expansion(masses: &[u64]) -> Result<(PartitionLattice, Partition)> {
    let total: u64 = masses.iter().sum();
    if total as usize > MAX_GROUND_SET {
        return Err(Error::GroundSetTooLarge(total as usize));
    }
    if masses.contains(&0) {
        return Err(invalid("masses must be positive"));
    }
    let lattice = PartitionLattice::new(total as usize)?;
    let mut init = Vec::new();
    for (b, &m) in masses.iter().enumerate() {
        init.extend(std::iter::repeat_n(b as u8, m as usize));
    }
    Ok((lattice, init))
}

/// `Σ_P law(P) ‖P‖_p^p`.
pub fn exact_moments(lattice: &PartitionLattice, law: &[f64], p: u32) -> Result<f64> {
    lattice.expect(law, |m| m.iter().map(|x| x.powi(p as i32)).sum())
}

/// `E[‖P‖_a^a ‖P‖_b^b]`.
pub fn exact_cross_moment(lattice: &PartitionLattice, law: &[f64], a: u32, b: u32) -> Result<f64> {
    lattice.expect(law, |m| {
        let na: f64 = m.iter().map(|x| x.powi(a as i32)).sum();
        let nb: f64 = m.iter().map(|x| x.powi(b as i32)).sum();
        na * nb
    })
}

fn eta_lattice(params: &ModelParams, n: u32) -> Result<(PartitionLattice, u64)> {
    params.validate()?;
    let vol = params.volume(n)?;
    if vol > MAX_ETA_VERTICES {
        return Err(Error::GroundSetTooLarge(vol as usize));
    }
    Ok((PartitionLattice::new(vol as usize)?, vol))
}

/// Exact law of the partition of `X_{n,t}` (which at `t = t_n` is `η_n`) by
/// enumerating every subset of the vertex pairs; pair `{x, y}` is open with
/// probability `1 - exp(-β J_{n,t}(x, y))`.
pub fn exact_eta_law_at(params: &ModelParams, n: u32, t: f64) -> Result<(PartitionLattice, Vec<f64>)> {
    let (lattice, vol) = eta_lattice(params, n)?;
    let st = ScaleTime::new(params, n, t)?;
    let mut pairs = Vec::new();
    for x in 0..vol {
        for y in x + 1..vol {
            let h = hdist_unchecked(x, y, params.branching());
            let j = kernel_interpolated_h(h, st, params)?;
            pairs.push((x as u32, y as u32, -(-params.beta * j).exp_m1()));
        }
    }
    let mut law = vec![0.0; lattice.len()];
    let mut dsu = LocalDsu::default();
    for mask in 0u32..(1 << pairs.len()) {
        let mut prob = 1.0;
        dsu.reset(vol as usize);
        for (i, &(x, y, q)) in pairs.iter().enumerate() {
            if mask >> i & 1 == 1 {
                prob *= q;
                dsu.union(x, y);
            } else {
                prob *= 1.0 - q;
            }
        }
        let labels: Vec<u32> = (0..vol as u32).map(|v| dsu.find(v)).collect();
        law[lattice.index[&canonical(&labels)]] += prob;
    }
    check_normalized(&law)?;
    Ok((lattice, law))
}

pub fn exact_eta_law(params: &ModelParams, n: u32) -> Result<(PartitionLattice, Vec<f64>)> {
    exact_eta_law_at(params, n, params.t_n(n))
}

/// The same law built the recursive way: starting from singletons, run a
/// coalescent restricted to each `m`-block for time `t_m`, for `m = 1..n`,
/// with the last stage stopped at `t`.
pub fn exact_recursive_law_at(params: &ModelParams, n: u32, t: f64) -> Result<(PartitionLattice, Vec<f64>)> {
    let (lattice, _) = eta_lattice(params, n)?;
    let st = ScaleTime::new(params, n, t)?;
    let b = params.branching();
    let mut law = lattice.point_mass(lattice.singletons());
    for m in 1..=n {
        let size = b.pow(m);
        let g = lattice.generator_grouped(&|i| i as u64 / size);
        let dt = if m == n { st.t } else { params.t_n(m) };
        law = evolve(&g, &law, dt)?;
    }
    check_normalized(&law)?;
    Ok((lattice, law))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bell_numbers() {
        let bell = [1, 2, 5, 15, 52, 203];
        for k in 1..=6 {
            assert_eq!(PartitionLattice::new(k).unwrap().len(), bell[k - 1]);
        }
        assert!(matches!(PartitionLattice::new(7), Err(Error::GroundSetTooLarge(7))));
    }

    #[test]
    fn generator_rows_sum_to_zero() {
        let l = PartitionLattice::with_weights(vec![1.0, 2.0, 0.5, 3.0]).unwrap();
        for row in l.generator() {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
        // {a}{b}{c}{d} → {ab}{c}{d} at rate w_a w_b
        let g = l.generator();
        let from = l.singletons();
        let to = l.index_of(&[0, 0, 1, 2]).unwrap();
        assert_eq!(g[from][to], 2.0);
    }

    #[test]
    fn small_closed_forms() {
        let (l, init) = unit_expansion(&[1, 1]).unwrap();
        let law = exact_coalescent_law(&l, &init, 0.0).unwrap();
        assert_eq!(law[l.index_of(&init).unwrap()], 1.0);
        let t = 0.8;
        let law = exact_coalescent_law(&l, &init, t).unwrap();
        assert!((law[l.index_of(&[0, 0]).unwrap()] - (1.0 - (-t).exp())).abs() < 1e-13);

        // three singletons: Exp(3) then Exp(2)
        let (l, init) = unit_expansion(&[1, 1, 1]).unwrap();
        let law = exact_coalescent_law(&l, &init, 1.0).unwrap();
        let merged = law[l.index_of(&[0, 0, 0]).unwrap()];
        let closed = 1.0 - 3.0 * (-2.0f64).exp() + 2.0 * (-3.0f64).exp();
        assert!((merged - closed).abs() < 1e-12, "{merged} vs {closed}");
    }

    #[test]
    fn exact_moment_examples() {
        let l = PartitionLattice::new(4).unwrap();
        let singles = l.point_mass(l.singletons());
        let whole = l.point_mass(l.index_of(&[0, 0, 0, 0]).unwrap());
        for p in 1..5 {
            assert_eq!(exact_moments(&l, &singles, p).unwrap(), 4.0);
            assert_eq!(exact_moments(&l, &whole, p).unwrap(), 4f64.powi(p as i32));
            let mix: Vec<f64> = singles.iter().zip(&whole).map(|(a, b)| 0.3 * a + 0.7 * b).collect();
            let lin = 0.3 * 4.0 + 0.7 * 4f64.powi(p as i32);
            assert!((exact_moments(&l, &mix, p).unwrap() - lin).abs() < 1e-12);
        }
        assert!(matches!(exact_moments(&l, &vec![0.5; l.len()], 2), Err(Error::Unnormalized(_))));
    }

    #[test]
    fn eta_law_edge_cases() {
        let p0 = ModelParams::new(1, 2, 0.5, 0.0).unwrap();
        let (l, law) = exact_eta_law(&p0, 2).unwrap();
        assert_eq!(law[l.singletons()], 1.0);
        let p = ModelParams::new(1, 2, 0.5, 1.3).unwrap();
        let (l, law) = exact_eta_law(&p, 1).unwrap();
        let q = 1.0 - (-p.beta * p.layer_weight(1)).exp();
        assert!((law[l.index_of(&[0, 0]).unwrap()] - q).abs() < 1e-14);
        let p8 = ModelParams::new(1, 2, 0.5, 1.3).unwrap();
        assert!(exact_eta_law(&p8, 3).is_err());
    }

    #[test]
    fn percolation_equals_recursive_coalescent() {
        for (d, l, alpha, beta) in [(1, 2, 0.5, 1.0), (1, 2, 0.2, 3.0), (2, 2, 1.0, 2.0), (1, 4, 0.5, 5.0)] {
            let p = ModelParams::new(d, l, alpha, beta).unwrap();
            let n = if p.branching() == 4 { 1 } else { 2 };
            for frac in [0.0, 0.3, 1.0] {
                let t = frac * p.t_n(n);
                let (_, a) = exact_eta_law_at(&p, n, t).unwrap();
                let (_, b) = exact_recursive_law_at(&p, n, t).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() < 1e-8);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn chapman_kolmogorov(s in 0.0f64..2.0, t in 0.0f64..2.0, k in 2usize..=5) {
            let l = PartitionLattice::new(k).unwrap();
            let g = l.generator();
            let v = l.point_mass(l.singletons());
            let direct = evolve(&g, &v, s + t).unwrap();
            let composed = evolve(&g, &evolve(&g, &v, s).unwrap(), t).unwrap();
            for (a, b) in direct.iter().zip(&composed) {
                prop_assert!((a - b).abs() < 1e-8);
            }
            prop_assert!((direct.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
