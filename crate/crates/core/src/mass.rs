//! Cluster masses: integer sizes from the lattice and real masses for the
//! renormalization map share one coalescent engine through [`Mass`].

use std::collections::BTreeMap;
use std::fmt::Debug;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// A cluster mass: `u64` for vertex counts, `f64` for real masses.
pub trait Mass: Copy + PartialOrd + Default + Debug + Send + Sync + 'static {
    fn add(self, other: Self) -> Self;
    fn sub(self, other: Self) -> Self;
    fn to_f64(self) -> f64;
    fn is_positive(self) -> bool;
    /// A uniform point of `[0, total)`.
    fn uniform_below<R: Rng + ?Sized>(total: Self, rng: &mut R) -> Self;
}

impl Mass for u64 {
    #[inline]
    fn add(self, other: Self) -> Self {
        self + other
    }
    #[inline]
    fn sub(self, other: Self) -> Self {
        self - other
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn is_positive(self) -> bool {
        self > 0
    }
    #[inline]
    fn uniform_below<R: Rng + ?Sized>(total: Self, rng: &mut R) -> Self {
        rng.random_range(0..total)
    }
}

impl Mass for f64 {
    #[inline]
    fn add(self, other: Self) -> Self {
        self + other
    }
    #[inline]
    fn sub(self, other: Self) -> Self {
        self - other
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn is_positive(self) -> bool {
        self > 0.0
    }
    #[inline]
    fn uniform_below<R: Rng + ?Sized>(total: Self, rng: &mut R) -> Self {
        rng.random::<f64>() * total
    }
}

pub fn total<M: Mass>(masses: &[M]) -> M {
    masses.iter().fold(M::default(), |acc, &m| acc.add(m))
}

/// Exact `Σ s^p` over integer sizes, accumulated in 128 bits; falls back to
/// compensated floating-point summation if the exact sum would overflow.
pub fn power_sum(sizes: &[u64], p: u32) -> f64 {
    let mut acc: u128 = 0;
    let mut exact = true;
    for &s in sizes {
        match (s as u128).checked_pow(p).and_then(|v| acc.checked_add(v)) {
            Some(v) => acc = v,
            None => {
                exact = false;
                break;
            }
        }
    }
    if exact {
        return acc as f64;
    }
    kahan_sum(sizes.iter().map(|&s| (s as f64).powi(p as i32)))
}

/// `Σ s^p` for real `p` (no exactness guarantee).
pub fn power_sum_real<M: Mass>(masses: &[M], p: f64) -> f64 {
    kahan_sum(masses.iter().map(|m| m.to_f64().powf(p)))
}

pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Multiset of integer cluster sizes, stored as size → multiplicity.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeMultiset {
    counts: BTreeMap<u64, u64>,
    total: u64,
}

impl SizeMultiset {
    pub fn from_sizes(sizes: &[u64]) -> Self {
        let mut counts = BTreeMap::new();
        let mut total = 0;
        for &s in sizes {
            assert!(s > 0, "cluster sizes must be positive");
            *counts.entry(s).or_insert(0) += 1;
            total += s;
        }
        Self { counts, total }
    }

    pub fn total_mass(&self) -> u64 {
        self.total
    }

    /// Number of clusters.
    pub fn len(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn max(&self) -> u64 {
        self.counts.keys().next_back().copied().unwrap_or(0)
    }

    /// `(size, multiplicity)` pairs in increasing size order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.counts.iter().map(|(&s, &c)| (s, c))
    }

    /// Sizes in decreasing order, with repetition.
    pub fn to_sorted_vec(&self) -> Vec<u64> {
        let mut v = Vec::with_capacity(self.len() as usize);
        for (&s, &c) in self.counts.iter().rev() {
            v.extend(std::iter::repeat_n(s, c as usize));
        }
        v
    }

    /// `‖·‖_p^p` for integer `p`, exact where 128 bits suffice.
    pub fn power_sum(&self, p: u32) -> f64 {
        let mut acc: u128 = 0;
        for (&s, &c) in &self.counts {
            match (s as u128).checked_pow(p).and_then(|v| v.checked_mul(c as u128)).and_then(|v| acc.checked_add(v)) {
                Some(v) => acc = v,
                None => return kahan_sum(self.counts.iter().map(|(&s, &c)| c as f64 * (s as f64).powi(p as i32))),
            }
        }
        acc as f64
    }

    pub fn power_sum_real(&self, p: f64) -> f64 {
        kahan_sum(self.counts.iter().map(|(&s, &c)| c as f64 * (s as f64).powf(p)))
    }
}

/// Real masses in decreasing order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MassList {
    masses: Vec<f64>,
}

impl MassList {
    pub fn new(mut masses: Vec<f64>) -> Self {
        masses.retain(|&m| m > 0.0);
        masses.sort_by(|a, b| b.total_cmp(a));
        Self { masses }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.masses
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.masses
    }

    pub fn total(&self) -> f64 {
        kahan_sum(self.masses.iter().copied())
    }

    pub fn largest(&self) -> f64 {
        self.masses.first().copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn power_sum(&self, p: f64) -> f64 {
        power_sum_real(&self.masses, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiset_basics() {
        let m = SizeMultiset::from_sizes(&[3, 1, 1, 2, 3]);
        assert_eq!(m.total_mass(), 10);
        assert_eq!(m.len(), 5);
        assert_eq!(m.max(), 3);
        assert_eq!(m.to_sorted_vec(), vec![3, 3, 2, 1, 1]);
        assert_eq!(m.power_sum(2), 24.0);
        assert_eq!(power_sum(&[3, 1, 1, 2, 3], 2), 24.0);
    }

    #[test]
    fn power_sum_is_exact_for_large_sizes() {
        // 2^30 to the 4th is 2^120, still exact in 128 bits.
        let s = [1u64 << 30, 1];
        assert_eq!(power_sum(&s, 4), 2f64.powi(120) + 1.0);
        // Overflowing sums fall back to floating point.
        let big = [u64::MAX / 2, u64::MAX / 2];
        let v = power_sum(&big, 5);
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn mass_list_sorted() {
        let m = MassList::new(vec![0.5, 2.0, 0.0, 1.0]);
        assert_eq!(m.as_slice(), &[2.0, 1.0, 0.5]);
        assert_eq!(m.largest(), 2.0);
        assert!((m.total() - 3.5).abs() < 1e-15);
    }
}
