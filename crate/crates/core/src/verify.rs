//! Numerical checks of the probabilistic limit statements.
//!
//! Cluster-exchangeable laws are stored as full tables over joint
//! configurations, one symbol per agent, agents ordered cluster by cluster
//! and agent 0 most significant. Every such law is determined by the masses
//! of its classes, the per-cluster symbol histograms, which is what the fast
//! bound computations use.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::Serialize;

use crate::combinatorics::{CompositionSpace, MixedRadix};
use crate::error::{Error, Result};
use crate::exact::{self, JointStateSpace};
use crate::induction::{self, truncate_policy, DecentralizedPolicy};
use crate::meanfield::{self, Interpolation};
use crate::measure::tv_distance;
use crate::model::{Horizon, PopulationLayout, TeamSpec};
use crate::rng::{mean_and_stderr, substream};

/// Largest joint table a law may have.
pub const MAX_CONFIGURATIONS: u128 = 1 << 21;
/// Tolerance for probability sums and permutation invariance.
pub const LAW_TOL: f64 = 1e-12;

/// A law over finitely many agents split into clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteLaw {
    symbols: Vec<usize>,
    sizes: Vec<usize>,
    radix: MixedRadix,
    probs: Vec<f64>,
}

impl FiniteLaw {
    fn build(symbols: Vec<usize>, sizes: Vec<usize>, probs: Option<Vec<f64>>) -> Result<Self> {
        if symbols.len() != sizes.len() || symbols.is_empty() {
            return Err(Error::Shape("one symbol count per cluster expected".into()));
        }
        if symbols.contains(&0) {
            return Err(Error::invalid("symbols", "empty symbol space"));
        }
        let radices = sizes.iter().zip(&symbols).flat_map(|(&n, &s)| std::iter::repeat_n(s, n)).collect();
        let radix = MixedRadix::new(radices, MAX_CONFIGURATIONS, "joint configurations")?;
        let probs = match probs {
            Some(p) => {
                if p.len() != radix.size() {
                    return Err(Error::Shape(format!("{} probabilities for {} configurations", p.len(), radix.size())));
                }
                if p.iter().any(|&q| !(q >= 0.0)) {
                    return Err(Error::invalid("probabilities", "negative or NaN entry"));
                }
                let sum: f64 = p.iter().sum();
                if (sum - 1.0).abs() > LAW_TOL {
                    return Err(Error::invalid("probabilities", format!("sum is {sum}")));
                }
                p
            }
            None => vec![0.0; radix.size()],
        };
        Ok(FiniteLaw { symbols, sizes, radix, probs })
    }

    pub fn new(symbols: Vec<usize>, sizes: Vec<usize>, probs: Vec<f64>) -> Result<Self> {
        Self::build(symbols, sizes, Some(probs))
    }

    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }

    /// Agents per cluster.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn config(&self, idx: usize) -> Vec<usize> {
        self.radix.digits(idx)
    }

    pub fn index(&self, config: &[usize]) -> usize {
        self.radix.encode(config)
    }

    pub fn prob(&self, config: &[usize]) -> f64 {
        self.probs[self.radix.encode(config)]
    }

    /// Law of `(y_sigma(1), .., y_sigma(n))`.
    pub fn permuted(&self, perm: &[usize]) -> FiniteLaw {
        let mut out = self.clone();
        let mut y = vec![0; perm.len()];
        let mut z = vec![0; perm.len()];
        for (idx, &p) in self.probs.iter().enumerate() {
            self.radix.decode(idx, &mut y);
            for (zi, &s) in z.iter_mut().zip(perm) {
                *zi = y[s];
            }
            out.probs[self.radix.encode(&z)] = p;
        }
        out
    }

    pub fn tv(&self, other: &FiniteLaw) -> Result<f64> {
        if self.symbols != other.symbols || self.sizes != other.sizes {
            return Err(Error::Shape("laws live on different spaces".into()));
        }
        tv_distance(&self.probs, &other.probs)
    }
}

/// Per-cluster symbol histograms of joint configurations.
#[derive(Clone, Debug)]
struct Classes {
    spaces: Vec<CompositionSpace>,
    radix: MixedRadix,
}

impl Classes {
    fn new(symbols: &[usize], sizes: &[usize]) -> Self {
        let spaces: Vec<_> = sizes.iter().zip(symbols).map(|(&n, &s)| CompositionSpace::new(n as u32, s)).collect();
        let radix = MixedRadix::new(spaces.iter().map(|s| s.len()).collect(), u128::MAX, "classes").expect("small");
        Classes { spaces, radix }
    }

    fn len(&self) -> usize {
        self.radix.size()
    }

    fn of(&self, sizes: &[usize], symbols: &[usize], config: &[usize]) -> usize {
        let mut start = 0;
        let mut digits = Vec::with_capacity(sizes.len());
        for (j, &n) in sizes.iter().enumerate() {
            let mut c = vec![0u32; symbols[j]];
            for &y in &config[start..start + n] {
                c[y] += 1;
            }
            digits.push(self.spaces[j].rank(&c));
            start += n;
        }
        self.radix.encode(&digits)
    }

    fn counts(&self, idx: usize) -> Vec<Vec<u32>> {
        self.radix.digits(idx).iter().zip(&self.spaces).map(|(&d, s)| s.get(d)).collect()
    }
}

fn class_index(law: &FiniteLaw) -> (Classes, Vec<usize>) {
    let classes = Classes::new(&law.symbols, &law.sizes);
    let mut y = vec![0; law.radix.radices().len()];
    let idx = (0..law.len())
        .map(|i| {
            law.radix.decode(i, &mut y);
            classes.of(&law.sizes, &law.symbols, &y)
        })
        .collect();
    (classes, idx)
}

/// A law invariant under every permutation that maps each cluster onto itself.
#[derive(Clone, Debug, PartialEq)]
pub struct CExLaw(FiniteLaw);

impl CExLaw {
    /// Checks normalization and invariance within [`LAW_TOL`].
    pub fn new(law: FiniteLaw) -> Result<Self> {
        let (classes, idx) = class_index(&law);
        let mut lo = vec![f64::INFINITY; classes.len()];
        let mut hi = vec![f64::NEG_INFINITY; classes.len()];
        for (&c, &p) in idx.iter().zip(&law.probs) {
            lo[c] = lo[c].min(p);
            hi[c] = hi[c].max(p);
        }
        if lo.iter().zip(&hi).any(|(a, b)| b - a > LAW_TOL) {
            return Err(Error::invalid("probabilities", "law is not invariant under cluster permutations"));
        }
        Ok(CExLaw(law))
    }

    /// Averages an arbitrary law over all cluster permutations. The average
    /// spreads the mass of each class uniformly over its members.
    pub fn symmetrize(law: &FiniteLaw) -> CExLaw {
        let (classes, idx) = class_index(law);
        let mut mass = vec![0.0; classes.len()];
        let mut members = vec![0usize; classes.len()];
        for (&c, &p) in idx.iter().zip(&law.probs) {
            mass[c] += p;
            members[c] += 1;
        }
        let mut out = law.clone();
        for (p, &c) in out.probs.iter_mut().zip(&idx) {
            *p = mass[c] / members[c] as f64;
        }
        CExLaw(out)
    }

    /// Symmetrization of a Dirichlet(`alpha`) law on the joint table.
    pub fn random<R: Rng>(rng: &mut R, symbols: Vec<usize>, sizes: Vec<usize>, alpha: f64) -> Result<CExLaw> {
        let mut law = FiniteLaw::build(symbols, sizes, None)?;
        let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid("alpha", e.to_string()))?;
        for p in law.probs.iter_mut() {
            *p = gamma.sample(rng);
        }
        let sum: f64 = law.probs.iter().sum();
        if sum <= 0.0 {
            law.probs.iter_mut().for_each(|p| *p = 0.0);
            law.probs[0] = 1.0;
        } else {
            law.probs.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(CExLaw::symmetrize(&law))
    }

    /// I.i.d. symbols within each cluster with the given per-cluster laws.
    pub fn iid(symbols: Vec<usize>, sizes: Vec<usize>, marginals: &[Vec<f64>]) -> Result<CExLaw> {
        let mut law = FiniteLaw::build(symbols, sizes, None)?;
        let owner: Vec<usize> = law.sizes.iter().enumerate().flat_map(|(j, &n)| std::iter::repeat_n(j, n)).collect();
        let mut y = vec![0; owner.len()];
        for i in 0..law.len() {
            law.radix.decode(i, &mut y);
            law.probs[i] = y.iter().zip(&owner).map(|(&s, &j)| marginals[j][s]).product();
        }
        Ok(CExLaw(law))
    }

    pub fn law(&self) -> &FiniteLaw {
        &self.0
    }

    /// Total mass of each class, per-cluster histograms listed in class order.
    pub fn class_masses(&self) -> Vec<(Vec<Vec<u32>>, f64)> {
        let (classes, idx) = class_index(&self.0);
        let mut mass = vec![0.0; classes.len()];
        for (&c, &p) in idx.iter().zip(&self.0.probs) {
            mass[c] += p;
        }
        mass.into_iter().enumerate().map(|(c, m)| (classes.counts(c), m)).collect()
    }
}

fn check_k(law: &FiniteLaw, k: &[usize]) -> Result<()> {
    if k.len() != law.sizes.len() {
        return Err(Error::Shape(format!("{} sample counts for {} clusters", k.len(), law.sizes.len())));
    }
    for (j, (&kj, &nj)) in k.iter().zip(&law.sizes).enumerate() {
        if kj > nj {
            return Err(Error::invalid(format!("k[{j}]"), format!("{kj} exceeds cluster size {nj}")));
        }
    }
    Ok(())
}

/// Law of the first `k_j` agents of every cluster.
pub fn first_k_marginal(law: &CExLaw, k: &[usize]) -> Result<FiniteLaw> {
    let law = &law.0;
    check_k(law, k)?;
    let mut out = FiniteLaw::build(law.symbols.clone(), k.to_vec(), None)?;
    let mut y = vec![0; law.radix.radices().len()];
    let mut z = Vec::with_capacity(k.iter().sum());
    for (i, &p) in law.probs.iter().enumerate() {
        law.radix.decode(i, &mut y);
        z.clear();
        let mut start = 0;
        for (&n, &kj) in law.sizes.iter().zip(k) {
            z.extend_from_slice(&y[start..start + kj]);
            start += n;
        }
        out.probs[out.radix.encode(&z)] += p;
    }
    Ok(out)
}

/// Exact law of `k_j` agents drawn from each cluster by i.i.d. uniform indices.
/// Given the configuration, the draws are i.i.d. from the cluster histogram,
/// so the law only depends on the class masses.
pub fn with_replacement_law(law: &CExLaw, k: &[usize]) -> Result<FiniteLaw> {
    check_k(&law.0, k)?;
    let masses = law.class_masses();
    let mut out = FiniteLaw::build(law.0.symbols.clone(), k.to_vec(), None)?;
    let mut z = vec![0; out.radix.radices().len()];
    for idx in 0..out.len() {
        out.radix.decode(idx, &mut z);
        let mut p = 0.0;
        for (counts, m) in &masses {
            if *m == 0.0 {
                continue;
            }
            let mut start = 0;
            let mut f = *m;
            for (j, &kj) in k.iter().enumerate() {
                let n = law.0.sizes[j] as f64;
                for &s in &z[start..start + kj] {
                    f *= counts[j][s] as f64 / n;
                }
                start += kj;
            }
            p += f;
        }
        out.probs[idx] = p;
    }
    Ok(out)
}

/// `1 - prod_j (1 - k_j (k_j - 1) / (2 N_j))` over clusters with `k_j > 1`.
pub fn stated_bound(sizes: &[usize], k: &[usize]) -> f64 {
    1.0 - sizes
        .iter()
        .zip(k)
        .filter(|(_, &kj)| kj > 1)
        .map(|(&n, &kj)| 1.0 - (kj * (kj - 1)) as f64 / (2 * n) as f64)
        .product::<f64>()
}

/// One minus the probability that all sampled indices are distinct,
/// `1 - prod_j prod_{i<k_j} (1 - i / N_j)`.
pub fn collision_bound(sizes: &[usize], k: &[usize]) -> f64 {
    1.0 - sizes
        .iter()
        .zip(k)
        .map(|(&n, &kj)| (1..kj).map(|i| 1.0 - i as f64 / n as f64).product::<f64>())
        .product::<f64>()
}

#[derive(Clone, Debug, Serialize)]
pub struct ExtensionCheck {
    pub tv: f64,
    pub bound: f64,
    pub pass: bool,
    pub collision_bound: f64,
    pub collision_pass: bool,
}

impl ExtensionCheck {
    fn new(sizes: &[usize], k: &[usize], tv: f64) -> Self {
        let bound = stated_bound(sizes, k);
        let collision_bound = collision_bound(sizes, k);
        ExtensionCheck {
            tv,
            bound,
            pass: tv <= bound + LAW_TOL,
            collision_bound,
            collision_pass: tv <= collision_bound + LAW_TOL,
        }
    }
}

/// Distance between sampling `k_j` agents without and with replacement,
/// computed on full tables.
pub fn check_extension_bound(law: &CExLaw, k: &[usize]) -> Result<ExtensionCheck> {
    let tv = first_k_marginal(law, k)?.tv(&with_replacement_law(law, k)?)?;
    Ok(ExtensionCheck::new(&law.0.sizes, k, tv))
}

fn falling(n: u32, m: u32) -> f64 {
    (0..m).map(|i| (n - i) as f64).product()
}

fn multinomial_coef(counts: &[u32]) -> f64 {
    let mut seen = 0u64;
    counts
        .iter()
        .map(|&c| {
            seen += c as u64;
            crate::combinatorics::binomial(seen, c as u64)
        })
        .product()
}

/// Same distance as [`check_extension_bound`], computed class by class. Both
/// laws are exchangeable within clusters, so each sample histogram carries
/// one probability per member.
pub fn check_extension_bound_by_class(law: &CExLaw, k: &[usize]) -> Result<ExtensionCheck> {
    check_k(&law.0, k)?;
    Ok(class_check(&law.0, &law.class_masses(), k))
}

fn class_check(law: &FiniteLaw, masses: &[(Vec<Vec<u32>>, f64)], k: &[usize]) -> ExtensionCheck {
    let samples = Classes::new(&law.symbols, k);
    let sizes = &law.sizes;
    let mut tv = 0.0;
    for d in 0..samples.len() {
        let dc = samples.counts(d);
        let (mut p, mut q) = (0.0, 0.0);
        for (c, m) in masses {
            if *m == 0.0 {
                continue;
            }
            let mut fp = *m;
            let mut fq = *m;
            for j in 0..sizes.len() {
                let n = sizes[j] as u32;
                let mut num = 1.0;
                let mut pow = 1.0;
                for (&cs, &ds) in c[j].iter().zip(&dc[j]) {
                    if ds > cs {
                        num = 0.0;
                    } else {
                        num *= falling(cs, ds);
                    }
                    pow *= (cs as f64 / n as f64).powi(ds as i32);
                }
                fp *= num / falling(n, k[j] as u32);
                fq *= pow;
            }
            p += fp;
            q += fq;
        }
        let members: f64 = dc.iter().map(|c| multinomial_coef(c)).product();
        tv += members * (p - q).abs();
    }
    ExtensionCheck::new(sizes, k, 0.5 * tv)
}

/// Uniform law over binary configurations of `N = (4, 4)` with exactly two
/// ones per cluster. Sampling all four agents of each cluster with
/// replacement moves it by about 0.859 in total variation, above the stated
/// bound of 0.75.
pub fn balanced_pair_law() -> CExLaw {
    let raw = FiniteLaw::build(vec![2, 2], vec![4, 4], None).expect("small");
    let mut law = raw.clone();
    let mut y = vec![0; 8];
    let mut hits = 0.0;
    for i in 0..law.len() {
        law.radix.decode(i, &mut y);
        if y[..4].iter().sum::<usize>() == 2 && y[4..].iter().sum::<usize>() == 2 {
            law.probs[i] = 1.0;
            hits += 1.0;
        }
    }
    law.probs.iter_mut().for_each(|p| *p /= hits);
    CExLaw(law)
}

/// One law and sample size of the bound sweep.
#[derive(Clone, Debug, Serialize)]
pub struct BoundRecord {
    pub law: usize,
    pub symbols: usize,
    pub sizes: Vec<usize>,
    pub alpha: f64,
    pub k: Vec<usize>,
    #[serde(flatten)]
    pub check: ExtensionCheck,
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundSweep {
    pub laws: usize,
    pub records: Vec<BoundRecord>,
    pub failures: usize,
    pub collision_failures: usize,
    /// Largest distance over sample sizes with every `k_j = 1`.
    pub max_tv_single: f64,
}

/// Cluster sizes covered by the sweep: one cluster with `1..=6` agents and
/// every pair with `1..=6` agents each.
pub fn sweep_shapes() -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (1..=6).map(|n| vec![n]).collect();
    for a in 1..=6 {
        for b in 1..=6 {
            out.push(vec![a, b]);
        }
    }
    out
}

fn all_k(sizes: &[usize]) -> Vec<Vec<usize>> {
    let radix = MixedRadix::new(sizes.to_vec(), u128::MAX, "sample sizes").expect("small");
    (0..radix.size()).map(|i| radix.digits(i).into_iter().map(|d| d + 1).collect()).collect()
}

/// For every shape, symbol count in `{2, 3}` and concentration in `alphas`,
/// draws `per_cell` symmetrized random laws and checks every `k <= N`.
pub fn bound_sweep(seed: u64, per_cell: usize, alphas: &[f64]) -> Result<BoundSweep> {
    let mut cells = Vec::new();
    for sizes in sweep_shapes() {
        for symbols in [2usize, 3] {
            for &alpha in alphas {
                for _ in 0..per_cell {
                    cells.push((sizes.clone(), symbols, alpha));
                }
            }
        }
    }
    let per_law: Vec<Vec<BoundRecord>> = cells
        .par_iter()
        .enumerate()
        .map(|(id, (sizes, symbols, alpha))| {
            let mut rng = substream(seed, id as u64);
            let law = CExLaw::random(&mut rng, vec![*symbols; sizes.len()], sizes.clone(), *alpha)?;
            let masses = law.class_masses();
            Ok(all_k(sizes)
                .into_iter()
                .map(|k| BoundRecord {
                    law: id,
                    symbols: *symbols,
                    sizes: sizes.clone(),
                    alpha: *alpha,
                    check: class_check(&law.0, &masses, &k),
                    k,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let records: Vec<BoundRecord> = per_law.into_iter().flatten().collect();
    Ok(BoundSweep {
        laws: cells.len(),
        failures: records.iter().filter(|r| !r.check.pass).count(),
        collision_failures: records.iter().filter(|r| !r.check.collision_pass).count(),
        max_tv_single: records.iter().filter(|r| r.k.iter().all(|&k| k == 1)).map(|r| r.check.tv).fold(0.0, f64::max),
        records,
    })
}

/// One population size of the chaos experiment.
#[derive(Clone, Debug, Serialize)]
pub struct ChaosRow {
    pub n: usize,
    pub layout: Vec<usize>,
    /// Mean over rollouts and steps of the max-cluster distance to the flow.
    pub mean_tv: f64,
    pub std_err: f64,
    /// `sqrt(N) * mean_tv`, reported only.
    pub scaled_tv: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ChaosReport {
    pub steps: usize,
    pub rows: Vec<ChaosRow>,
    /// Each mean is at most the previous one plus their pooled standard error.
    pub non_increasing: bool,
    pub strictly_decreasing: bool,
    pub threshold: f64,
    pub last_below_threshold: bool,
}

/// Simulates the induced policy at each population size over steps
/// `0..=horizon` and measures how far the empirical measures stray from the flow.
pub fn chaos_experiment(spec: &TeamSpec, policy: &DecentralizedPolicy, sizes: &[usize], horizon: usize, n_rollouts: usize, seed: u64, threshold: f64) -> Result<ChaosReport> {
    if sizes.is_empty() {
        return Err(Error::invalid("N-sweep", "no population sizes given"));
    }
    let policy = policy.truncated_to(horizon + 1);
    let rows = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let layout = PopulationLayout::even(n, spec.clusters())?;
            let tp = truncate_policy(&policy, &layout)?;
            let rep = induction::simulate_truncated(spec, &tp, n_rollouts, seed.wrapping_add((i as u64) << 32))?;
            let (mean_tv, std_err) = mean_and_stderr(&rep.tv_per_rollout);
            Ok(ChaosRow {
                n,
                layout: layout.sizes().to_vec(),
                mean_tv,
                std_err,
                scaled_tv: (n as f64).sqrt() * mean_tv,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let non_increasing = rows.windows(2).all(|w| w[1].mean_tv <= w[0].mean_tv + (w[0].std_err.powi(2) + w[1].std_err.powi(2)).sqrt());
    let strictly_decreasing = rows.windows(2).all(|w| w[1].mean_tv < w[0].mean_tv);
    let last = rows.last().expect("non-empty").mean_tv;
    Ok(ChaosReport {
        steps: policy.steps(),
        non_increasing,
        strictly_decreasing,
        threshold,
        last_below_threshold: last < threshold,
        rows,
    })
}

/// Mean-field discretization used by [`value_convergence_experiment`].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MeanFieldGrid {
    pub grid: u32,
    pub action_grid: u32,
    pub interpolation: Interpolation,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValueRow {
    pub n: usize,
    pub layout: Vec<usize>,
    /// Optimal `nu0`-expected cost of the `N`-agent team.
    pub optimal: f64,
    /// Cost of the truncated induced policy.
    pub truncated: f64,
    /// Mean-field cost along the flow.
    pub mean_field: f64,
    /// `truncated - optimal`.
    pub gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValueReport {
    pub horizon: usize,
    pub rows: Vec<ValueRow>,
    /// `optimal <= truncated + 1e-9` at every size.
    pub lower_holds: bool,
    pub last_gap_not_above_first: bool,
}

/// Exact `N`-agent optimum against the induced policy at each population size.
pub fn value_convergence_experiment(spec: &TeamSpec, sizes: &[usize], horizon: usize, mf: MeanFieldGrid, budget: u128) -> Result<ValueReport> {
    if sizes.is_empty() {
        return Err(Error::invalid("N-sweep", "no population sizes given"));
    }
    let sol = meanfield::finite_horizon_dp(spec, mf.grid, mf.action_grid, horizon, mf.interpolation, meanfield::DEFAULT_BUDGET)?;
    let policy = induction::induce_policy(spec, &sol, spec.nu0(), Horizon::Finite(horizon))?;
    let rows = sizes
        .iter()
        .map(|&n| {
            let layout = PopulationLayout::even(n, spec.clusters())?;
            let model = exact::ExactModel::new(spec, &layout, budget)?;
            let opt = exact::solve_finite_with(&model, horizon);
            let cen = truncate_policy(&policy, &layout)?.to_centralized(spec, horizon, budget)?;
            let ev = exact::evaluate_policy_with(&model, &cen, Horizon::Finite(horizon), 0.0)?;
            let space: &JointStateSpace = model.space();
            let optimal = space.average_over_initial_law(spec.nu0(), opt.initial_values());
            let truncated = space.average_over_initial_law(spec.nu0(), ev.initial_values());
            Ok(ValueRow {
                n,
                layout: layout.sizes().to_vec(),
                optimal,
                truncated,
                mean_field: policy.mean_field_cost,
                gap: truncated - optimal,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ValueReport {
        horizon,
        lower_holds: rows.iter().all(|r| r.gap >= -1e-9),
        last_gap_not_above_first: rows.last().expect("non-empty").gap <= rows[0].gap,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{random_spec, with_constant_cost, with_identity_kernels, SpecShape};
    use crate::measure::{MeasureArray, SimplexVector};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cluster_perms(sizes: &[usize]) -> Vec<Vec<usize>> {
        let layout = PopulationLayout::new(sizes.to_vec()).unwrap();
        exact::cluster_permutations(&layout, 0).perms
    }

    /// Explicit average over all cluster permutations.
    fn orbit_average(law: &FiniteLaw) -> FiniteLaw {
        let perms = cluster_perms(law.sizes());
        let mut out = law.clone();
        out.probs.iter_mut().for_each(|p| *p = 0.0);
        for perm in &perms {
            for (a, b) in out.probs.iter_mut().zip(&law.permuted(perm).probs) {
                *a += b / perms.len() as f64;
            }
        }
        out
    }

    /// Sums over every assignment of sampled indices.
    fn with_replacement_enumerated(law: &CExLaw, k: &[usize]) -> FiniteLaw {
        let base = law.law();
        let mut out = FiniteLaw::build(base.symbols.clone(), k.to_vec(), None).unwrap();
        let radices: Vec<usize> = k.iter().zip(&base.sizes).flat_map(|(&kj, &nj)| std::iter::repeat_n(nj, kj)).collect();
        let idx = MixedRadix::new(radices, u128::MAX, "indices").unwrap();
        let offsets: Vec<usize> = base.sizes.iter().scan(0, |s, &n| { let o = *s; *s += n; Some(o) }).collect();
        let owner: Vec<usize> = k.iter().enumerate().flat_map(|(j, &kj)| std::iter::repeat_n(j, kj)).collect();
        let w = 1.0 / idx.size() as f64;
        for (yi, &p) in base.probs.iter().enumerate() {
            let y = base.config(yi);
            for a in 0..idx.size() {
                let ii = idx.digits(a);
                let z: Vec<usize> = ii.iter().zip(&owner).map(|(&i, &j)| y[offsets[j] + i]).collect();
                let at = out.index(&z);
                out.probs[at] += p * w;
            }
        }
        out
    }

    #[test]
    fn symmetrize_equals_permutation_average() {
        let mut r = rng(1);
        for sizes in [vec![3], vec![2, 2], vec![1, 3]] {
            let mut raw = FiniteLaw::build(vec![2; sizes.len()], sizes.clone(), None).unwrap();
            let draws = crate::generate::random_simplex(&mut r, raw.len());
            raw.probs = draws;
            let fast = CExLaw::symmetrize(&raw);
            let slow = orbit_average(&raw);
            for (a, b) in fast.law().probs().iter().zip(slow.probs()) {
                assert!((a - b).abs() < 1e-15);
            }
            assert!(CExLaw::new(slow).is_ok());
        }
    }

    #[test]
    fn rejects_asymmetric_law() {
        let law = FiniteLaw::new(vec![2], vec![2], vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!(CExLaw::new(law).is_err());
        assert!(FiniteLaw::new(vec![2], vec![2], vec![0.5, 0.6, 0.0, 0.0]).is_err());
    }

    #[test]
    fn tv_examples() {
        assert!((tv_distance(&[0.7, 0.3], &[0.5, 0.5]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn single_draws_are_the_marginals() {
        let law = CExLaw::random(&mut rng(2), vec![3, 2], vec![3, 2], 0.5).unwrap();
        let a = first_k_marginal(&law, &[1, 1]).unwrap();
        let b = with_replacement_law(&law, &[1, 1]).unwrap();
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-15);
        }
        let c = check_extension_bound_by_class(&law, &[1, 1]).unwrap();
        assert_eq!(c.tv, 0.0);
        assert_eq!(c.bound, 0.0);
    }

    #[test]
    fn iid_laws_resample_with_index_collisions() {
        // two draws hit the same index with probability 1/N, so the result is
        // a mixture of the diagonal and the product, not the product
        let p = [0.3, 0.7];
        let law = CExLaw::iid(vec![2], vec![3], &[p.to_vec()]).unwrap();
        let w = with_replacement_law(&law, &[2]).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let diag = if a == b { p[a] } else { 0.0 };
                let expect = diag / 3.0 + (2.0 / 3.0) * p[a] * p[b];
                assert!((w.prob(&[a, b]) - expect).abs() < 1e-15);
            }
        }
        let single = with_replacement_law(&law, &[1]).unwrap();
        assert!((single.probs()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn grouped_resampling_matches_index_enumeration() {
        let mut r = rng(3);
        for (sizes, k) in [(vec![2], vec![2]), (vec![3, 2], vec![2, 2]), (vec![2, 2], vec![1, 2])] {
            let law = CExLaw::random(&mut r, vec![2; sizes.len()], sizes, 0.3).unwrap();
            let a = with_replacement_law(&law, &k).unwrap();
            let b = with_replacement_enumerated(&law, &k);
            assert!(a.tv(&b).unwrap() < 1e-14);
        }
    }

    #[test]
    fn correlated_pair_by_hand() {
        // N = 2, binary, mass 1/2 on (0,1) and (1,0): resampling both agents
        // gives each of the four configurations mass 1/4
        let law = CExLaw::new(FiniteLaw::new(vec![2], vec![2], vec![0.0, 0.5, 0.5, 0.0]).unwrap()).unwrap();
        let w = with_replacement_law(&law, &[2]).unwrap();
        assert_eq!(w.probs(), &[0.25; 4]);
        let c = check_extension_bound(&law, &[2]).unwrap();
        assert_eq!(c.bound, 0.5);
        assert!((c.tv - 0.5).abs() < 1e-15 && c.pass);
    }

    #[test]
    fn class_computation_matches_full_tables() {
        let mut r = rng(4);
        for sizes in [vec![4], vec![3, 3], vec![2, 4]] {
            for symbols in [2, 3] {
                let law = CExLaw::random(&mut r, vec![symbols; sizes.len()], sizes.clone(), 0.2).unwrap();
                for k in all_k(&sizes) {
                    let a = check_extension_bound(&law, &k).unwrap();
                    let b = check_extension_bound_by_class(&law, &k).unwrap();
                    assert!((a.tv - b.tv).abs() < 1e-12, "{sizes:?} {k:?}");
                }
            }
        }
    }

    #[test]
    fn balanced_pairs_break_the_stated_bound() {
        let law = balanced_pair_law();
        let c = check_extension_bound(&law, &[4, 4]).unwrap();
        assert_eq!(c.bound, 0.75);
        assert!((c.tv - (1.0 - 36.0 / 256.0)).abs() < 1e-12);
        assert!(!c.pass);
        assert!(c.collision_pass);
        // with two clusters whose factors are both below -1 the stated bound is negative
        assert!(stated_bound(&[6, 6], &[6, 6]) < 0.0);
    }

    #[test]
    fn small_sweep_respects_the_collision_bound() {
        let s = bound_sweep(5, 1, &[0.1]).unwrap();
        assert_eq!(s.laws, 84);
        assert_eq!(s.collision_failures, 0);
        assert_eq!(s.max_tv_single, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn resampled_law_is_exchangeable(seed in any::<u64>(), n0 in 1usize..4, n1 in 1usize..4, k0 in 1usize..4, k1 in 1usize..4) {
            let law = CExLaw::random(&mut rng(seed), vec![2, 2], vec![n0, n1], 0.5).unwrap();
            let k = [k0.min(n0), k1.min(n1)];
            let w = with_replacement_law(&law, &k).unwrap();
            for perm in cluster_perms(&k) {
                prop_assert!(w.permuted(&perm).tv(&w).unwrap() < 1e-12);
            }
            let c = check_extension_bound_by_class(&law, &k).unwrap();
            prop_assert!(c.tv <= c.collision_bound + 1e-12);
        }
    }

    fn one_cluster() -> TeamSpec {
        random_spec(&mut rng(9), &SpecShape::binary(1))
    }

    #[test]
    fn chaos_gap_vanishes_without_randomness() {
        // identity kernels and a point mass start: every agent stays put
        let s = with_identity_kernels(&random_spec(&mut rng(6), &SpecShape::binary(2)));
        let nu0 = MeasureArray::new(vec![SimplexVector::point_mass(2, 0), SimplexVector::point_mass(2, 1)]).unwrap();
        let s = s.with_nu0(nu0).unwrap();
        let sol = meanfield::finite_horizon_dp(&s, 4, 2, 3, Interpolation::Kuhn, meanfield::DEFAULT_BUDGET).unwrap();
        let pol = induction::induce_policy(&s, &sol, s.nu0(), Horizon::Finite(3)).unwrap();
        // deterministic decision rules on a point mass keep the population on the flow
        let rep = chaos_experiment(&s, &pol, &[2, 8], 2, 20, 1, 0.05).unwrap();
        for row in &rep.rows {
            assert_eq!(row.mean_tv, 0.0);
        }
    }

    #[test]
    fn chaos_gap_shrinks() {
        let s = random_spec(&mut rng(7), &SpecShape::binary(2));
        let sol = meanfield::finite_horizon_dp(&s, 8, 4, 6, Interpolation::Kuhn, meanfield::DEFAULT_BUDGET).unwrap();
        let pol = induction::induce_policy(&s, &sol, s.nu0(), Horizon::Finite(6)).unwrap();
        let rep = chaos_experiment(&s, &pol, &[8, 64, 512], 5, 300, 2, 0.1).unwrap();
        assert!(rep.strictly_decreasing && rep.non_increasing, "{rep:?}");
        assert!(rep.last_below_threshold);
    }

    #[test]
    fn constant_cost_columns_agree() {
        let s = with_constant_cost(&one_cluster(), 0.7);
        let mf = MeanFieldGrid { grid: 4, action_grid: 2, interpolation: Interpolation::Kuhn };
        let rep = value_convergence_experiment(&s, &[1, 2, 3], 3, mf, exact::DEFAULT_BUDGET).unwrap();
        let geo = 0.7 * (1.0 + 0.9 + 0.81);
        for row in &rep.rows {
            for v in [row.optimal, row.truncated, row.mean_field] {
                assert!((v - geo).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoupled_singletons_match_single_agent_programs() {
        let mut doc = crate::generate::random_spec_doc(&mut rng(8), &SpecShape::binary(2));
        doc.kernels.mix = vec![0.0, 0.0];
        doc.costs.weights = vec![vec![0.0; 2]; 2];
        let s = TeamSpec::from_doc(doc).unwrap();
        let t = 3;
        let mf = MeanFieldGrid { grid: 4, action_grid: 2, interpolation: Interpolation::Kuhn };
        let rep = value_convergence_experiment(&s, &[2], t, mf, exact::DEFAULT_BUDGET).unwrap();
        // independent backward induction per cluster
        let mut total = 0.0;
        let mu = s.nu0().clone();
        for j in 0..2 {
            let mut v = vec![0.0; 2];
            for _ in 0..t {
                v = (0..2)
                    .map(|x| {
                        (0..2)
                            .map(|u| {
                                let row = s.eval_kernel(j, x, u, &mu).unwrap();
                                s.eval_cost(j, x, u, &mu).unwrap() + s.beta() * row.as_slice().iter().zip(&v).map(|(p, w)| p * w).sum::<f64>()
                            })
                            .fold(f64::INFINITY, f64::min)
                    })
                    .collect();
            }
            total += s.nu0().cluster(j).as_slice().iter().zip(&v).map(|(p, w)| p * w).sum::<f64>();
        }
        assert!((rep.rows[0].optimal - total).abs() < 1e-12, "{} vs {total}", rep.rows[0].optimal);
        assert!(rep.lower_holds);
    }
}
