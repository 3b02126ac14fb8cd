//! The team lifted to per-cluster empirical measures.
//!
//! States are per-cluster count vectors and actions are per-cluster
//! state-by-action count matrices, both enumerated exactly as integer
//! compositions. The lifted kernel of a cluster is the law of a sum of
//! independent multinomial count vectors, one per occupied (state, action)
//! group, and clusters are independent given the current measure.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combinatorics::{CompositionSpace, CountLaw, MixedRadix};
use crate::error::{check_budget, Error, Result};
use crate::exact::{self, ExactDPResult, JointStateSpace};
use crate::measure::{MeasureArray, SimplexVector};
use crate::model::{cluster_counts, Horizon, PopulationLayout, StageTables, TeamSpec};

/// Per-cluster state counts, `counts[j][x]`, summing to `N_j` in every cluster.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmpiricalState {
    pub counts: Vec<Vec<u32>>,
}

impl EmpiricalState {
    pub fn new(spec: &TeamSpec, layout: &PopulationLayout, counts: Vec<Vec<u32>>) -> Result<Self> {
        if counts.len() != spec.clusters() || layout.clusters() != spec.clusters() {
            return Err(Error::Shape(format!("{} cluster count vectors for {} clusters", counts.len(), spec.clusters())));
        }
        for (j, c) in counts.iter().enumerate() {
            if c.len() != spec.state_sizes()[j] {
                return Err(Error::Shape(format!("cluster {j} counts have {} entries, expected {}", c.len(), spec.state_sizes()[j])));
            }
            let total: u32 = c.iter().sum();
            if total as usize != layout.sizes()[j] {
                return Err(Error::invalid(format!("counts[{j}]"), format!("sum {total}, cluster size {}", layout.sizes()[j])));
            }
        }
        Ok(EmpiricalState { counts })
    }

    /// Histograms of a joint state.
    pub fn from_joint(spec: &TeamSpec, layout: &PopulationLayout, x_joint: &[usize]) -> Result<Self> {
        layout.check_joint(spec, x_joint, None)?;
        Ok(EmpiricalState { counts: cluster_counts(spec, layout, x_joint) })
    }

    pub fn measure(&self) -> MeasureArray {
        MeasureArray::new(self.counts.iter().map(|c| SimplexVector::from_counts(c)).collect()).expect("non-empty")
    }
}

fn write_tuple(f: &mut fmt::Formatter<'_>, v: &[u32]) -> fmt::Result {
    write!(f, "(")?;
    for (i, c) in v.iter().enumerate() {
        if i > 0 {
            write!(f, ",")?;
        }
        write!(f, "{c}")?;
    }
    write!(f, ")")
}

impl fmt::Display for EmpiricalState {
    /// `j:(c0,c1,...);...`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (j, c) in self.counts.iter().enumerate() {
            if j > 0 {
                write!(f, ";")?;
            }
            write!(f, "{j}:")?;
            write_tuple(f, c)?;
        }
        Ok(())
    }
}

/// Per-cluster state-action counts, `joint_counts[j][x][u]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmpiricalAction {
    pub joint_counts: Vec<Vec<Vec<u32>>>,
}

impl EmpiricalAction {
    /// State-action histograms of a joint state and joint action.
    pub fn from_joint(spec: &TeamSpec, layout: &PopulationLayout, x_joint: &[usize], u_joint: &[usize]) -> Result<Self> {
        layout.check_joint(spec, x_joint, Some(u_joint))?;
        let mut joint_counts: Vec<Vec<Vec<u32>>> = (0..spec.clusters())
            .map(|j| vec![vec![0; spec.action_sizes()[j]]; spec.state_sizes()[j]])
            .collect();
        for (i, (&x, &u)) in x_joint.iter().zip(u_joint).enumerate() {
            joint_counts[layout.cluster_of(i)][x][u] += 1;
        }
        Ok(EmpiricalAction { joint_counts })
    }

    /// Row sums over actions.
    pub fn state_marginal(&self) -> Vec<Vec<u32>> {
        self.joint_counts.iter().map(|m| m.iter().map(|row| row.iter().sum()).collect()).collect()
    }

    /// Errors unless the row sums reproduce `state`.
    pub fn check_compatible(&self, spec: &TeamSpec, state: &EmpiricalState) -> Result<()> {
        if self.joint_counts.len() != state.counts.len() {
            return Err(Error::Shape("action and state have different cluster counts".into()));
        }
        for (j, m) in self.joint_counts.iter().enumerate() {
            if m.len() != spec.state_sizes()[j] || m.iter().any(|r| r.len() != spec.action_sizes()[j]) {
                return Err(Error::Shape(format!("cluster {j} action matrix has the wrong shape")));
            }
        }
        if self.state_marginal() != state.counts {
            return Err(Error::invalid("theta", "state marginal of the action does not match the empirical state"));
        }
        Ok(())
    }
}

impl fmt::Display for EmpiricalAction {
    /// `j:((n00,n01),(n10,n11));...`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (j, m) in self.joint_counts.iter().enumerate() {
            if j > 0 {
                write!(f, ";")?;
            }
            write!(f, "{j}:(")?;
            for (x, row) in m.iter().enumerate() {
                if x > 0 {
                    write!(f, ",")?;
                }
                write_tuple(f, row)?;
            }
            write!(f, ")")?;
        }
        Ok(())
    }
}

/// Indexing of all empirical states: per-cluster compositions in descending
/// lexicographic order, cluster 0 most significant.
#[derive(Clone, Debug)]
pub struct EmpiricalSpace {
    layout: PopulationLayout,
    xs: Vec<usize>,
    us: Vec<usize>,
    clusters: Vec<CompositionSpace>,
    radix: MixedRadix,
}

impl EmpiricalSpace {
    pub fn new(spec: &TeamSpec, layout: &PopulationLayout, budget: u128) -> Result<Self> {
        layout.check_against(spec)?;
        let clusters: Vec<CompositionSpace> = layout
            .sizes()
            .iter()
            .zip(spec.state_sizes())
            .map(|(&n, &x)| CompositionSpace::new(n as u32, x))
            .collect();
        let radix = MixedRadix::new(clusters.iter().map(|c| c.len()).collect(), budget, "empirical states")?;
        Ok(EmpiricalSpace {
            layout: layout.clone(),
            xs: spec.state_sizes().to_vec(),
            us: spec.action_sizes().to_vec(),
            clusters,
            radix,
        })
    }

    pub fn len(&self) -> usize {
        self.radix.size()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn layout(&self) -> &PopulationLayout {
        &self.layout
    }

    pub fn cluster_space(&self, j: usize) -> &CompositionSpace {
        &self.clusters[j]
    }

    pub fn state(&self, idx: usize) -> EmpiricalState {
        let digits = self.radix.digits(idx);
        EmpiricalState {
            counts: digits.iter().zip(&self.clusters).map(|(&d, c)| c.get(d)).collect(),
        }
    }

    pub fn index_of_counts(&self, counts: &[Vec<u32>]) -> usize {
        let digits: Vec<usize> = counts.iter().zip(&self.clusters).map(|(c, s)| s.rank(c)).collect();
        self.radix.encode(&digits)
    }

    pub fn index(&self, state: &EmpiricalState) -> Result<usize> {
        if state.counts.len() != self.clusters.len() {
            return Err(Error::Shape("state has the wrong number of clusters".into()));
        }
        for (j, (c, s)) in state.counts.iter().zip(&self.clusters).enumerate() {
            if c.len() != s.parts() || c.iter().sum::<u32>() != s.total() {
                return Err(Error::invalid(format!("counts[{j}]"), "not a composition of the cluster size"));
            }
        }
        Ok(self.index_of_counts(&state.counts))
    }

    /// Index of `mu[x]` for a joint state.
    pub fn index_of_joint(&self, spec: &TeamSpec, x_joint: &[usize]) -> usize {
        self.index_of_counts(&cluster_counts(spec, &self.layout, x_joint))
    }

    pub fn iter(&self) -> impl Iterator<Item = EmpiricalState> + '_ {
        (0..self.len()).map(move |i| self.state(i))
    }

    // Action factors of cluster j at counts c: one composition space per state.
    fn cluster_action_factors(&self, j: usize, counts: &[u32]) -> Vec<CompositionSpace> {
        counts.iter().map(|&n| CompositionSpace::new(n, self.us[j])).collect()
    }

    fn cluster_action(&self, factors: &[CompositionSpace], radix: &MixedRadix, idx: usize) -> Vec<Vec<u32>> {
        radix.digits(idx).iter().zip(factors).map(|(&d, f)| f.get(d)).collect()
    }
}

/// All empirical states, in index order.
pub fn enumerate_states(spec: &TeamSpec, layout: &PopulationLayout, budget: u128) -> Result<Vec<EmpiricalState>> {
    Ok(EmpiricalSpace::new(spec, layout, budget)?.iter().collect())
}

/// All actions compatible with `state`, mixed radix over (cluster, state)
/// factors with the first factor most significant.
pub fn enumerate_actions(spec: &TeamSpec, state: &EmpiricalState, budget: u128) -> Result<Vec<EmpiricalAction>> {
    let mut factors = Vec::new();
    for (j, c) in state.counts.iter().enumerate() {
        if c.len() != spec.state_sizes()[j] {
            return Err(Error::Shape(format!("cluster {j} counts have the wrong length")));
        }
        for &n in c {
            factors.push(CompositionSpace::new(n, spec.action_sizes()[j]));
        }
    }
    let radix = MixedRadix::new(factors.iter().map(|f| f.len()).collect(), budget, "empirical actions")?;
    Ok((0..radix.size())
        .map(|a| {
            let digits = radix.digits(a);
            let mut k = 0;
            let joint_counts = state
                .counts
                .iter()
                .map(|c| {
                    c.iter()
                        .map(|_| {
                            let row = factors[k].get(digits[k]);
                            k += 1;
                            row
                        })
                        .collect()
                })
                .collect();
            EmpiricalAction { joint_counts }
        })
        .collect())
}

/// `sum_j sum_{x,u} c_j(x, u, mu) theta_j[x][u] / N_j`.
pub fn hat_cost(spec: &TeamSpec, state: &EmpiricalState, theta: &EmpiricalAction) -> Result<f64> {
    theta.check_compatible(spec, state)?;
    let mu = state.measure();
    Ok(hat_cost_at(spec, &spec.stage_at(&mu), state, theta))
}

fn hat_cost_at(spec: &TeamSpec, tables: &StageTables, state: &EmpiricalState, theta: &EmpiricalAction) -> f64 {
    (0..spec.clusters())
        .map(|j| cluster_cost(tables, j, &theta.joint_counts[j]) / state.counts[j].iter().sum::<u32>() as f64)
        .sum()
}

fn cluster_cost(tables: &StageTables, j: usize, m: &[Vec<u32>]) -> f64 {
    let mut c = 0.0;
    for (x, row) in m.iter().enumerate() {
        for (u, &n) in row.iter().enumerate() {
            if n > 0 {
                c += tables.cost(j, x, u) * n as f64;
            }
        }
    }
    c
}

/// Canonical joint state and action realizing `(state, theta)`: agents of a
/// cluster take states in ascending order, and inside each state block the
/// actions are assigned in ascending order.
pub fn representative(layout: &PopulationLayout, theta: &EmpiricalAction) -> (Vec<usize>, Vec<usize>) {
    let mut x = Vec::with_capacity(layout.total());
    let mut u = Vec::with_capacity(layout.total());
    for m in &theta.joint_counts {
        for (xi, row) in m.iter().enumerate() {
            for (ui, &n) in row.iter().enumerate() {
                for _ in 0..n {
                    x.push(xi);
                    u.push(ui);
                }
            }
        }
    }
    (x, u)
}

// Count law of cluster j's next state under action matrix m.
fn cluster_law(tables: &StageTables, j: usize, m: &[Vec<u32>], nx: usize) -> CountLaw {
    let mut law = CountLaw::zero(nx);
    for (x, row) in m.iter().enumerate() {
        for (u, &n) in row.iter().enumerate() {
            if n > 0 {
                law = law.convolve(&CountLaw::multinomial(n, tables.row(j, x, u)));
            }
        }
    }
    law
}

fn outer(laws: &[&[f64]]) -> Vec<f64> {
    let mut row = vec![1.0];
    for law in laws {
        row = row.iter().flat_map(|&p| law.iter().map(move |&q| p * q)).collect();
    }
    row
}

/// Law of the next empirical state, indexed as in [`EmpiricalSpace`],
/// by per-cluster convolution of multinomial count laws.
pub fn lifted_kernel_row(spec: &TeamSpec, space: &EmpiricalSpace, state: &EmpiricalState, theta: &EmpiricalAction) -> Result<Vec<f64>> {
    theta.check_compatible(spec, state)?;
    space.index(state)?;
    let tables = spec.stage_at(&state.measure());
    let laws: Vec<CountLaw> = (0..spec.clusters())
        .map(|j| cluster_law(&tables, j, &theta.joint_counts[j], spec.state_sizes()[j]))
        .collect();
    let refs: Vec<&[f64]> = laws.iter().map(|l| l.probs()).collect();
    Ok(outer(&refs))
}

/// The same law obtained by pushing the joint kernel of a representative
/// forward through the empirical measure. Exponential in `N`.
pub fn lifted_kernel_row_brute_force(spec: &TeamSpec, space: &EmpiricalSpace, x_joint: &[usize], u_joint: &[usize], budget: u128) -> Result<Vec<f64>> {
    let joint = JointStateSpace::new(spec, &space.layout, budget)?;
    let row = exact::joint_kernel_row(spec, &space.layout, x_joint, u_joint)?;
    let mut out = vec![0.0; space.len()];
    let mut digits = vec![0; space.layout.total()];
    for (s, &p) in row.iter().enumerate() {
        if p != 0.0 {
            joint.states().decode(s, &mut digits);
            out[space.index_of_joint(spec, &digits)] += p;
        }
    }
    Ok(out)
}

// Per-state precomputation: per cluster, every cluster-level action with its
// cost contribution and next-count law.
struct ClusterChoice {
    cost: f64,
    law: Vec<f64>,
}

struct Prepared {
    choices: Vec<Vec<ClusterChoice>>,
}

/// Precomputed lifted MDP.
pub struct EmpiricalModel {
    space: EmpiricalSpace,
    beta: f64,
    sizes: Vec<usize>,
    prepared: Vec<Prepared>,
}

impl EmpiricalModel {
    pub fn new(spec: &TeamSpec, layout: &PopulationLayout, budget: u128) -> Result<Self> {
        let space = EmpiricalSpace::new(spec, layout, budget)?;
        // count actions before building anything
        let mut pairs: u128 = 0;
        for s in 0..space.len() {
            let st = space.state(s);
            let mut a: u128 = 1;
            for (j, c) in st.counts.iter().enumerate() {
                for &n in c {
                    a = a.saturating_mul(CompositionSpace::new(n, space.us[j]).len() as u128);
                }
            }
            pairs = pairs.saturating_add(a);
        }
        check_budget("empirical state-action pairs", pairs, budget)?;
        let prepared = (0..space.len())
            .into_par_iter()
            .map(|s| {
                let st = space.state(s);
                let tables = spec.stage_at(&st.measure());
                let choices = (0..spec.clusters())
                    .map(|j| {
                        let factors = space.cluster_action_factors(j, &st.counts[j]);
                        let radix = MixedRadix::new(factors.iter().map(|f| f.len()).collect(), u128::MAX, "cluster actions").expect("unbounded");
                        let nj = layout.sizes()[j] as f64;
                        (0..radix.size())
                            .map(|k| {
                                let m = space.cluster_action(&factors, &radix, k);
                                ClusterChoice {
                                    cost: cluster_cost(&tables, j, &m) / nj,
                                    law: cluster_law(&tables, j, &m, space.xs[j]).probs().to_vec(),
                                }
                            })
                            .collect()
                    })
                    .collect();
                Prepared { choices }
            })
            .collect();
        Ok(EmpiricalModel {
            sizes: space.clusters.iter().map(|c| c.len()).collect(),
            space,
            beta: spec.beta(),
            prepared,
        })
    }

    pub fn space(&self) -> &EmpiricalSpace {
        &self.space
    }

    /// Number of actions available at state `s`.
    pub fn n_actions(&self, s: usize) -> usize {
        self.prepared[s].choices.iter().map(|c| c.len()).product()
    }

    /// Action with index `a` at state `s`, in [`enumerate_actions`] order.
    pub fn action(&self, s: usize, a: usize) -> EmpiricalAction {
        let st = self.space.state(s);
        let radices: Vec<usize> = self.prepared[s].choices.iter().map(|c| c.len()).collect();
        let digits = MixedRadix::new(radices, u128::MAX, "actions").expect("unbounded").digits(a);
        let joint_counts = (0..st.counts.len())
            .map(|j| {
                let factors = self.space.cluster_action_factors(j, &st.counts[j]);
                let radix = MixedRadix::new(factors.iter().map(|f| f.len()).collect(), u128::MAX, "cluster actions").expect("unbounded");
                self.space.cluster_action(&factors, &radix, digits[j])
            })
            .collect();
        EmpiricalAction { joint_counts }
    }

    /// Q-values of every action at state `s` against continuation `v`.
    pub fn q_values(&self, s: usize, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_actions(s)];
        let mut bufs = self.buffers();
        self.contract(s, self.sizes.len(), v, &mut bufs, 0, 1, 0.0, &mut out);
        out
    }

    fn buffers(&self) -> Vec<Vec<f64>> {
        let mut size = 1;
        self.sizes
            .iter()
            .map(|&n| {
                let b = vec![0.0; size];
                size *= n;
                b
            })
            .collect()
    }

    // Contract clusters from the last; action index accumulates with the last
    // cluster least significant.
    #[allow(clippy::too_many_arguments)]
    fn contract(&self, s: usize, k: usize, tensor: &[f64], bufs: &mut [Vec<f64>], a_acc: usize, a_stride: usize, cost_acc: f64, out: &mut [f64]) {
        if k == 0 {
            out[a_acc] = cost_acc + self.beta * tensor[0];
            return;
        }
        let j = k - 1;
        let n = self.sizes[j];
        let choices = &self.prepared[s].choices[j];
        let (lower, upper) = bufs.split_at_mut(j);
        let next = &mut upper[0];
        for (c, choice) in choices.iter().enumerate() {
            for (p, slot) in next.iter_mut().enumerate() {
                *slot = choice.law.iter().zip(&tensor[p * n..(p + 1) * n]).map(|(a, b)| a * b).sum();
            }
            let t: &[f64] = next;
            self.contract(s, j, t, lower, a_acc + c * a_stride, a_stride * choices.len(), cost_acc + choice.cost, out);
        }
    }

    fn bellman(&self, v: &[f64]) -> (Vec<f64>, Vec<usize>) {
        (0..self.space.len())
            .into_par_iter()
            .map_init(
                || self.buffers(),
                |bufs, s| {
                    let mut q = vec![0.0; self.n_actions(s)];
                    self.contract(s, self.sizes.len(), v, bufs, 0, 1, 0.0, &mut q);
                    let mut best = (f64::INFINITY, 0);
                    for (a, &x) in q.iter().enumerate() {
                        if x < best.0 {
                            best = (x, a);
                        }
                    }
                    best
                },
            )
            .unzip()
    }
}

/// Values over empirical states and optimal action selectors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmpiricalDPResult {
    pub horizon: Horizon,
    pub states: Vec<EmpiricalState>,
    /// `values[t][state index]`; one table for the infinite horizon.
    pub values: Vec<Vec<f64>>,
    pub policy: Vec<Vec<EmpiricalAction>>,
    pub iterations: usize,
    pub successive_diffs: Vec<f64>,
}

fn selectors(model: &EmpiricalModel, sel: &[usize]) -> Vec<EmpiricalAction> {
    sel.iter().enumerate().map(|(s, &a)| model.action(s, a)).collect()
}

/// Backward recursion for a finite horizon or value iteration to sup-norm
/// error `tol` for the infinite horizon.
pub fn solve_dp(spec: &TeamSpec, layout: &PopulationLayout, horizon: Horizon, tol: f64, budget: u128) -> Result<EmpiricalDPResult> {
    let model = EmpiricalModel::new(spec, layout, budget)?;
    solve_dp_with(&model, horizon, tol)
}

pub fn solve_dp_with(model: &EmpiricalModel, horizon: Horizon, tol: f64) -> Result<EmpiricalDPResult> {
    let states: Vec<EmpiricalState> = model.space.iter().collect();
    match horizon {
        Horizon::Finite(t_max) => {
            let mut values = vec![Vec::new(); t_max];
            let mut policy = vec![Vec::new(); t_max];
            let mut next = vec![0.0; model.space.len()];
            for t in (0..t_max).rev() {
                let (v, sel) = model.bellman(&next);
                policy[t] = selectors(model, &sel);
                values[t] = v.clone();
                next = v;
            }
            Ok(EmpiricalDPResult {
                horizon,
                states,
                values,
                policy,
                iterations: t_max,
                successive_diffs: Vec::new(),
            })
        }
        Horizon::Infinite => {
            if tol <= 0.0 {
                return Err(Error::invalid("tol", "tolerance must be positive"));
            }
            let threshold = exact::stopping_threshold(tol, model.beta);
            let mut v = vec![0.0; model.space.len()];
            let mut diffs = Vec::new();
            loop {
                let (next, sel) = model.bellman(&v);
                let d = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                diffs.push(d);
                v = next;
                if d <= threshold {
                    return Ok(EmpiricalDPResult {
                        horizon,
                        states,
                        values: vec![v],
                        policy: vec![selectors(model, &sel)],
                        iterations: diffs.len(),
                        successive_diffs: diffs,
                    });
                }
            }
        }
    }
}

/// Largest gap between the joint-state and empirical-state value functions.
#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceReport {
    pub max_discrepancy: f64,
    pub threshold: f64,
    pub passed: bool,
    pub joint_states: usize,
    pub empirical_states: usize,
}

/// Compares `J_t(x)` with `J_hat_t(mu[x])` over every joint state and step.
/// The threshold is `1e-9` for a finite horizon and `2 tol` for the infinite one.
pub fn check_representation_equivalence(spec: &TeamSpec, layout: &PopulationLayout, horizon: Horizon, tol: f64, budget: u128) -> Result<EquivalenceReport> {
    let (joint, threshold): (ExactDPResult, f64) = match horizon {
        Horizon::Finite(t) => (exact::solve_exact_finite(spec, layout, t, budget)?, 1e-9),
        Horizon::Infinite => (exact::solve_exact_infinite(spec, layout, tol, budget)?, 2.0 * tol),
    };
    let lifted = solve_dp(spec, layout, horizon, tol, budget)?;
    let space = EmpiricalSpace::new(spec, layout, budget)?;
    let jspace = JointStateSpace::new(spec, layout, budget)?;
    let map: Vec<usize> = (0..jspace.n_states())
        .map(|s| space.index_of_joint(spec, &jspace.states().digits(s)))
        .collect();
    let mut worst = 0.0f64;
    for (jt, lt) in joint.values.iter().zip(&lifted.values) {
        for (s, &e) in map.iter().enumerate() {
            worst = worst.max((jt[s] - lt[e]).abs());
        }
    }
    Ok(EquivalenceReport {
        max_discrepancy: worst,
        threshold,
        passed: worst <= threshold,
        joint_states: jspace.n_states(),
        empirical_states: space.len(),
    })
}
