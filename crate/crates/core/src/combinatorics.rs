//! Compositions of an integer, their ranking, and exact multinomial count laws.
//!
//! A composition of `total` into `parts` is a vector of `parts` non-negative
//! integers summing to `total`. Empirical states, empirical actions, simplex
//! grids and action grids are all products of such compositions, so they
//! share the ranking defined here. The order is descending lexicographic:
//! `(total, 0, ..), .., (0, .., 0, total)`.

use crate::error::{check_budget, Result};

/// `n choose k` as a float, exact for the magnitudes used here.
pub fn binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}

/// Number of compositions of `total` into `parts` parts, `C(total + parts - 1, parts - 1)`.
pub fn composition_count(total: u64, parts: u64) -> u128 {
    if parts == 0 {
        return u128::from(total == 0);
    }
    let n = total + parts - 1;
    let k = (parts - 1).min(total);
    let mut acc: u128 = 1;
    for i in 0..k as u128 {
        acc = acc * (n as u128 - i) / (i + 1);
    }
    acc
}

/// Index space of the compositions of a fixed total into a fixed number of parts.
#[derive(Clone, Debug)]
pub struct CompositionSpace {
    total: u32,
    parts: usize,
    // counts[r][p]: compositions of r into p parts.
    counts: Vec<Vec<usize>>,
}

impl CompositionSpace {
    pub fn new(total: u32, parts: usize) -> Self {
        assert!(parts >= 1, "compositions need at least one part");
        let t = total as usize;
        let mut counts = vec![vec![0usize; parts + 1]; t + 1];
        for (r, row) in counts.iter_mut().enumerate() {
            row[0] = usize::from(r == 0);
        }
        for p in 1..=parts {
            for r in 0..=t {
                // c(r, p) = sum_{a=0..r} c(r - a, p - 1)
                counts[r][p] = (0..=r).map(|a| counts[r - a][p - 1]).sum();
            }
        }
        CompositionSpace {
            total,
            parts,
            counts,
        }
    }

    #[inline]
    pub fn total(&self) -> u32 {
        self.total
    }

    #[inline]
    pub fn parts(&self) -> usize {
        self.parts
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.counts[self.total as usize][self.parts]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Position of `v` in descending lexicographic order.
    pub fn rank(&self, v: &[u32]) -> usize {
        debug_assert_eq!(v.len(), self.parts);
        debug_assert_eq!(v.iter().sum::<u32>(), self.total);
        let mut rem = self.total as usize;
        let mut idx = 0;
        for (i, &vi) in v.iter().enumerate().take(self.parts - 1) {
            let rest = self.parts - i - 1;
            for a in (vi as usize + 1)..=rem {
                idx += self.counts[rem - a][rest];
            }
            rem -= vi as usize;
        }
        idx
    }

    pub fn unrank(&self, mut idx: usize, out: &mut [u32]) {
        debug_assert!(idx < self.len());
        let mut rem = self.total as usize;
        for i in 0..self.parts - 1 {
            let rest = self.parts - i - 1;
            let mut a = rem;
            loop {
                let block = self.counts[rem - a][rest];
                if idx < block {
                    break;
                }
                idx -= block;
                a -= 1;
            }
            out[i] = a as u32;
            rem -= a;
        }
        out[self.parts - 1] = rem as u32;
    }

    pub fn get(&self, idx: usize) -> Vec<u32> {
        let mut v = vec![0; self.parts];
        self.unrank(idx, &mut v);
        v
    }

    pub fn iter(&self) -> impl Iterator<Item = Vec<u32>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// Mixed-radix index over a product of finite factors, first factor most significant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedRadix {
    radices: Vec<usize>,
    strides: Vec<usize>,
    size: usize,
}

impl MixedRadix {
    pub fn new(radices: Vec<usize>, budget: u128, what: &'static str) -> Result<Self> {
        let needed = radices
            .iter()
            .try_fold(1u128, |acc, &r| acc.checked_mul(r as u128))
            .unwrap_or(u128::MAX);
        check_budget(what, needed, budget)?;
        let mut strides = vec![1usize; radices.len()];
        for i in (0..radices.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * radices[i + 1];
        }
        Ok(MixedRadix {
            size: needed as usize,
            radices,
            strides,
        })
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn radices(&self) -> &[usize] {
        &self.radices
    }

    #[inline]
    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    #[inline]
    pub fn encode(&self, digits: &[usize]) -> usize {
        digits.iter().zip(&self.strides).map(|(d, s)| d * s).sum()
    }

    #[inline]
    pub fn decode(&self, mut idx: usize, out: &mut [usize]) {
        for (o, &s) in out.iter_mut().zip(&self.strides) {
            *o = idx / s;
            idx %= s;
        }
    }

    pub fn digits(&self, idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.radices.len()];
        self.decode(idx, &mut out);
        out
    }
}

/// Exact law of the count vector of `draws` i.i.d. categorical samples, or of a
/// sum of independent such vectors, over a [`CompositionSpace`].
#[derive(Clone, Debug)]
pub struct CountLaw {
    space: CompositionSpace,
    probs: Vec<f64>,
}

impl CountLaw {
    /// Point mass at the zero vector with `parts` categories.
    pub fn zero(parts: usize) -> Self {
        CountLaw {
            space: CompositionSpace::new(0, parts),
            probs: vec![1.0],
        }
    }

    /// Multinomial(`draws`, `p`) law of category counts.
    pub fn multinomial(draws: u32, p: &[f64]) -> Self {
        let space = CompositionSpace::new(draws, p.len());
        let mut buf = vec![0u32; p.len()];
        let probs = (0..space.len())
            .map(|i| {
                space.unrank(i, &mut buf);
                multinomial_pmf(&buf, p)
            })
            .collect();
        CountLaw { space, probs }
    }

    pub fn space(&self) -> &CompositionSpace {
        &self.space
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Law of the sum of two independent count vectors.
    pub fn convolve(&self, other: &CountLaw) -> CountLaw {
        assert_eq!(self.space.parts(), other.space.parts());
        let parts = self.space.parts();
        let space = CompositionSpace::new(self.space.total() + other.space.total(), parts);
        let mut probs = vec![0.0; space.len()];
        let mut a = vec![0u32; parts];
        let mut b = vec![0u32; parts];
        let mut s = vec![0u32; parts];
        for (i, &pa) in self.probs.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            self.space.unrank(i, &mut a);
            for (k, &pb) in other.probs.iter().enumerate() {
                if pb == 0.0 {
                    continue;
                }
                other.space.unrank(k, &mut b);
                for ((si, ai), bi) in s.iter_mut().zip(&a).zip(&b) {
                    *si = ai + bi;
                }
                probs[space.rank(&s)] += pa * pb;
            }
        }
        CountLaw { space, probs }
    }
}

/// `m! / prod(c_i!) * prod(p_i^c_i)` with `m = sum(c)`.
pub fn multinomial_pmf(counts: &[u32], p: &[f64]) -> f64 {
    let mut coef = 1.0;
    let mut seen = 0u64;
    let mut prob = 1.0;
    for (&c, &pi) in counts.iter().zip(p) {
        seen += c as u64;
        coef *= binomial(seen, c as u64);
        if c > 0 {
            prob *= pi.powi(c as i32);
        }
    }
    coef * prob
}
