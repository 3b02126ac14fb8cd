//! Brute-force oracle for the finite centralized team.
//!
//! Joint states and joint actions are enumerated in mixed radix, agent 0 most
//! significant, cluster blocks contiguous. Expectations under the product
//! kernel are taken one agent at a time, so a full row of Q-values for a
//! joint state costs roughly `|joint states| * N` operations instead of
//! `|joint states| * |joint actions|`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combinatorics::MixedRadix;
use crate::error::{check_budget, Error, Result};
use crate::measure::MeasureArray;
use crate::model::{cluster_counts, empirical_measure, Horizon, PopulationLayout, TeamSpec};
use crate::rng::{categorical, mean_and_stderr, substream};

/// Default cap on joint state-action pairs.
pub const DEFAULT_BUDGET: u128 = 10_000_000;
/// Above this many cluster permutations, [`cluster_permutations`] samples.
pub const EXHAUSTIVE_PERMUTATIONS: u128 = 100_000;
pub const SAMPLED_PERMUTATIONS: usize = 1_000;

/// Enumeration of joint states and joint actions of a population.
#[derive(Clone, Debug)]
pub struct JointStateSpace {
    layout: PopulationLayout,
    states: MixedRadix,
    actions: MixedRadix,
}

impl JointStateSpace {
    pub fn new(spec: &TeamSpec, layout: &PopulationLayout, budget: u128) -> Result<Self> {
        layout.check_against(spec)?;
        let xr: Vec<usize> = layout.membership().iter().map(|&j| spec.state_sizes()[j]).collect();
        let ur: Vec<usize> = layout.membership().iter().map(|&j| spec.action_sizes()[j]).collect();
        let states = MixedRadix::new(xr, budget, "joint states")?;
        let actions = MixedRadix::new(ur, budget, "joint actions")?;
        check_budget(
            "joint state-action pairs",
            states.size() as u128 * actions.size() as u128,
            budget,
        )?;
        Ok(JointStateSpace {
            layout: layout.clone(),
            states,
            actions,
        })
    }

    pub fn layout(&self) -> &PopulationLayout {
        &self.layout
    }

    pub fn states(&self) -> &MixedRadix {
        &self.states
    }

    pub fn actions(&self) -> &MixedRadix {
        &self.actions
    }

    pub fn n_states(&self) -> usize {
        self.states.size()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.size()
    }

    /// Law of the joint initial state, agents i.i.d. `nu0^{C(i)}`.
    pub fn initial_law(&self, nu0: &MeasureArray) -> Vec<f64> {
        let mut digits = vec![0; self.layout.total()];
        (0..self.n_states())
            .map(|s| {
                self.states.decode(s, &mut digits);
                digits
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| nu0.cluster(self.layout.cluster_of(i))[x])
                    .product()
            })
            .collect()
    }

    /// `sum_x nu0^N(x) values[x]`.
    pub fn average_over_initial_law(&self, nu0: &MeasureArray, values: &[f64]) -> f64 {
        self.initial_law(nu0).iter().zip(values).map(|(p, v)| p * v).sum()
    }

    /// Index of `x^sigma`, where `(x^sigma)_i = x_{sigma(i)}`.
    pub fn permute(radix: &MixedRadix, perm: &[usize], idx: usize, buf: &mut [usize], out: &mut [usize]) -> usize {
        radix.decode(idx, buf);
        for (o, &p) in out.iter_mut().zip(perm) {
            *o = buf[p];
        }
        radix.encode(out)
    }
}

// Per-joint-state data: measure, per-agent kernel rows and weighted costs.
struct StateContext {
    // agent i, action u: rows[row_offset[i] + u * nx_i ..]
    rows: Vec<f64>,
    // agent i, action u: cost_j(x_i, u, mu) / N_j
    costs: Vec<f64>,
}

/// Precomputed finite team, shared by the exact solvers.
pub struct ExactModel {
    space: JointStateSpace,
    beta: f64,
    nx: Vec<usize>,
    nu: Vec<usize>,
    row_offset: Vec<usize>,
    cost_offset: Vec<usize>,
    contexts: Vec<StateContext>,
}

struct Scratch {
    bufs: Vec<Vec<f64>>,
}

impl ExactModel {
    pub fn new(spec: &TeamSpec, layout: &PopulationLayout, budget: u128) -> Result<Self> {
        let space = JointStateSpace::new(spec, layout, budget)?;
        let n = layout.total();
        let nx: Vec<usize> = space.states.radices().to_vec();
        let nu: Vec<usize> = space.actions.radices().to_vec();
        let mut row_offset = Vec::with_capacity(n);
        let mut cost_offset = Vec::with_capacity(n);
        let (mut ro, mut co) = (0, 0);
        for i in 0..n {
            row_offset.push(ro);
            cost_offset.push(co);
            ro += nu[i] * nx[i];
            co += nu[i];
        }
        let contexts = (0..space.n_states())
            .into_par_iter()
            .map(|s| {
                let x = space.states.digits(s);
                let mu = empirical_measure(spec, layout, &x).expect("enumerated state is valid");
                let tables = spec.stage_at(&mu);
                let mut rows = Vec::with_capacity(ro);
                let mut costs = Vec::with_capacity(co);
                for (i, &xi) in x.iter().enumerate() {
                    let j = layout.cluster_of(i);
                    let nj = layout.sizes()[j] as f64;
                    for u in 0..nu[i] {
                        rows.extend_from_slice(tables.row(j, xi, u));
                        costs.push(tables.cost(j, xi, u) / nj);
                    }
                }
                StateContext { rows, costs }
            })
            .collect();
        Ok(ExactModel {
            space,
            beta: spec.beta(),
            nx,
            nu,
            row_offset,
            cost_offset,
            contexts,
        })
    }

    pub fn space(&self) -> &JointStateSpace {
        &self.space
    }

    fn scratch(&self) -> Scratch {
        let n = self.nx.len();
        let mut bufs = Vec::with_capacity(n);
        let mut size = 1;
        for i in 0..n {
            bufs.push(vec![0.0; size]);
            size *= self.nx[i];
        }
        Scratch { bufs }
    }

    /// Stage cost of every joint action at joint state `s`.
    pub fn stage_costs(&self, s: usize, out: &mut [f64]) {
        let ctx = &self.contexts[s];
        let mut digits = vec![0; self.nu.len()];
        for (a, o) in out.iter_mut().enumerate() {
            self.space.actions.decode(a, &mut digits);
            *o = digits
                .iter()
                .enumerate()
                .map(|(i, &u)| ctx.costs[self.cost_offset[i] + u])
                .sum();
        }
    }

    /// `Q(s, a) = c(s, a) + beta * E[v(x') | s, a]` for every joint action `a`.
    fn q_row(&self, s: usize, v: &[f64], scratch: &mut Scratch, out: &mut [f64]) {
        let n = self.nx.len();
        self.contract(s, n, v, &mut scratch.bufs, 0, 0.0, out);
    }

    #[allow(clippy::too_many_arguments)]
    fn contract(&self, s: usize, k: usize, tensor: &[f64], bufs: &mut [Vec<f64>], a_acc: usize, cost_acc: f64, out: &mut [f64]) {
        if k == 0 {
            out[a_acc] = cost_acc + self.beta * tensor[0];
            return;
        }
        let agent = k - 1;
        let ctx = &self.contexts[s];
        let nx = self.nx[agent];
        let stride = self.space.actions.strides()[agent];
        let (lower, upper) = bufs.split_at_mut(agent);
        let next = &mut upper[0];
        for u in 0..self.nu[agent] {
            let off = self.row_offset[agent] + u * nx;
            let row = &ctx.rows[off..off + nx];
            for (p, slot) in next.iter_mut().enumerate() {
                let block = &tensor[p * nx..(p + 1) * nx];
                *slot = row.iter().zip(block).map(|(r, t)| r * t).sum();
            }
            let c = ctx.costs[self.cost_offset[agent] + u];
            self.contract_owned(s, agent, next, lower, a_acc + u * stride, cost_acc + c, out);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn contract_owned(&self, s: usize, k: usize, tensor: &mut [f64], bufs: &mut [Vec<f64>], a_acc: usize, cost_acc: f64, out: &mut [f64]) {
        // `tensor` lives in the level above `bufs`; reborrow immutably for the recursion.
        let t: &[f64] = tensor;
        self.contract(s, k, t, bufs, a_acc, cost_acc, out);
    }

    /// One Bellman backup: new values and lowest-index minimizing joint actions.
    pub fn bellman(&self, v: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let na = self.space.n_actions();
        let pairs: Vec<(f64, usize)> = (0..self.space.n_states())
            .into_par_iter()
            .map_init(
                || (self.scratch(), vec![0.0; na]),
                |(scratch, q), s| {
                    self.q_row(s, v, scratch, q);
                    argmin(q)
                },
            )
            .collect();
        pairs.into_iter().unzip()
    }

    /// `sum_a pi(a|s) Q(s, a)` for every state.
    pub fn policy_backup(&self, v: &[f64], table: &[Vec<f64>]) -> Vec<f64> {
        let na = self.space.n_actions();
        (0..self.space.n_states())
            .into_par_iter()
            .map_init(
                || (self.scratch(), vec![0.0; na]),
                |(scratch, q), s| {
                    self.q_row(s, v, scratch, q);
                    table[s].iter().zip(q.iter()).map(|(p, qv)| p * qv).sum()
                },
            )
            .collect()
    }

    /// Q-values of every joint action at state `s` against continuation `v`.
    pub fn q_values(&self, s: usize, v: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; self.space.n_actions()];
        self.q_row(s, v, &mut self.scratch(), &mut q);
        q
    }

    /// Row `T^N(. | x, u)` over joint states.
    pub fn kernel_row(&self, s: usize, a: usize) -> Vec<f64> {
        let ctx = &self.contexts[s];
        let u = self.space.actions.digits(a);
        let mut row = vec![1.0];
        for (i, &ui) in u.iter().enumerate() {
            let nx = self.nx[i];
            let off = self.row_offset[i] + ui * nx;
            let r = &ctx.rows[off..off + nx];
            row = row.iter().flat_map(|&p| r.iter().map(move |&q| p * q)).collect();
        }
        row
    }
}

fn argmin(q: &[f64]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (a, &v) in q.iter().enumerate() {
        if v < best.0 {
            best = (v, a);
        }
    }
    best
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `T^N(. | x, u)` as a probability vector over joint-state indices.
pub fn joint_kernel_row(spec: &TeamSpec, layout: &PopulationLayout, x_joint: &[usize], u_joint: &[usize]) -> Result<Vec<f64>> {
    let mu = empirical_measure(spec, layout, x_joint)?;
    if u_joint.len() != x_joint.len() {
        return Err(Error::Shape(format!("joint action has {} agents, joint state {}", u_joint.len(), x_joint.len())));
    }
    let mut row = vec![1.0];
    for (i, (&x, &u)) in x_joint.iter().zip(u_joint).enumerate() {
        let r = spec.eval_kernel(layout.cluster_of(i), x, u, &mu)?;
        row = row.iter().flat_map(|&p| r.as_slice().iter().map(move |&q| p * q)).collect();
    }
    Ok(row)
}

/// Values and optimal deterministic selectors of the finite team.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExactDPResult {
    pub horizon: Horizon,
    /// `values[t][state]`; a single table for the infinite horizon.
    pub values: Vec<Vec<f64>>,
    /// `policy[t][state]` is the minimizing joint-action index.
    pub policy: Vec<Vec<usize>>,
    pub iterations: usize,
    /// Sup-norm distance between successive value-iteration iterates.
    pub successive_diffs: Vec<f64>,
}

impl ExactDPResult {
    pub fn initial_values(&self) -> &[f64] {
        &self.values[0]
    }
}

/// Backward recursion over `horizon` steps.
pub fn solve_exact_finite(spec: &TeamSpec, layout: &PopulationLayout, horizon: usize, budget: u128) -> Result<ExactDPResult> {
    let model = ExactModel::new(spec, layout, budget)?;
    Ok(solve_finite_with(&model, horizon))
}

pub fn solve_finite_with(model: &ExactModel, horizon: usize) -> ExactDPResult {
    let mut values = vec![Vec::new(); horizon];
    let mut policy = vec![Vec::new(); horizon];
    let mut next = vec![0.0; model.space.n_states()];
    for t in (0..horizon).rev() {
        let (v, p) = model.bellman(&next);
        values[t] = v.clone();
        policy[t] = p;
        next = v;
    }
    ExactDPResult {
        horizon: Horizon::Finite(horizon),
        values,
        policy,
        iterations: horizon,
        successive_diffs: Vec::new(),
    }
}

/// Stopping threshold on successive iterates that guarantees sup-norm error `tol`.
pub fn stopping_threshold(tol: f64, beta: f64) -> f64 {
    tol * (1.0 - beta) / (2.0 * beta)
}

/// Value iteration from zero until the sup-norm error is at most `tol`.
pub fn solve_exact_infinite(spec: &TeamSpec, layout: &PopulationLayout, tol: f64, budget: u128) -> Result<ExactDPResult> {
    if tol <= 0.0 {
        return Err(Error::invalid("tol", "tolerance must be positive"));
    }
    let model = ExactModel::new(spec, layout, budget)?;
    Ok(solve_infinite_with(&model, tol))
}

pub fn solve_infinite_with(model: &ExactModel, tol: f64) -> ExactDPResult {
    let threshold = stopping_threshold(tol, model.beta);
    let mut v = vec![0.0; model.space.n_states()];
    let mut diffs = Vec::new();
    loop {
        let (next, policy) = model.bellman(&v);
        let d = sup_diff(&next, &v);
        diffs.push(d);
        v = next;
        if d <= threshold {
            return ExactDPResult {
                horizon: Horizon::Infinite,
                values: vec![v],
                policy: vec![policy],
                iterations: diffs.len(),
                successive_diffs: diffs,
            };
        }
    }
}

/// `sup_x |v(x) - (B v)(x)|` for the optimality operator `B`.
pub fn bellman_residual(model: &ExactModel, v: &[f64]) -> f64 {
    sup_diff(&model.bellman(v).0, v)
}

/// Randomized Markov policy on joint actions, possibly time-varying.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentralizedMarkovPolicy {
    /// `tables[t][state][action]`; one table when stationary.
    pub tables: Vec<Vec<Vec<f64>>>,
    pub stationary: bool,
}

impl CentralizedMarkovPolicy {
    pub fn stationary(table: Vec<Vec<f64>>) -> Self {
        CentralizedMarkovPolicy {
            tables: vec![table],
            stationary: true,
        }
    }

    pub fn time_varying(tables: Vec<Vec<Vec<f64>>>) -> Self {
        CentralizedMarkovPolicy {
            tables,
            stationary: false,
        }
    }

    /// Deterministic policy playing the DP selectors.
    pub fn from_selector(result: &ExactDPResult, n_actions: usize) -> Self {
        let tables = result
            .policy
            .iter()
            .map(|sel| {
                sel.iter()
                    .map(|&a| {
                        let mut row = vec![0.0; n_actions];
                        row[a] = 1.0;
                        row
                    })
                    .collect()
            })
            .collect();
        CentralizedMarkovPolicy {
            tables,
            stationary: result.horizon.is_infinite(),
        }
    }

    pub fn uniform(space: &JointStateSpace) -> Self {
        let na = space.n_actions();
        CentralizedMarkovPolicy::stationary(vec![vec![1.0 / na as f64; na]; space.n_states()])
    }

    /// Table used at step `t`.
    pub fn at(&self, t: usize) -> &[Vec<f64>] {
        if self.stationary {
            &self.tables[0]
        } else {
            &self.tables[t]
        }
    }

    fn check(&self, space: &JointStateSpace, steps: Option<usize>) -> Result<()> {
        if self.tables.is_empty() {
            return Err(Error::Shape("policy has no tables".into()));
        }
        if let Some(t) = steps {
            if !self.stationary && self.tables.len() < t {
                return Err(Error::Shape(format!("policy covers {} steps, {t} needed", self.tables.len())));
            }
        } else if !self.stationary {
            return Err(Error::Shape("infinite-horizon evaluation needs a stationary policy".into()));
        }
        for table in &self.tables {
            if table.len() != space.n_states() {
                return Err(Error::Shape(format!("policy has {} rows, {} joint states", table.len(), space.n_states())));
            }
            for (s, row) in table.iter().enumerate() {
                if row.len() != space.n_actions() || !crate::model::approx_simplex(row) {
                    return Err(Error::invalid(format!("policy[{s}]"), "row is not a distribution over joint actions"));
                }
            }
        }
        Ok(())
    }
}

/// Per-step expected cost-to-go of a policy.
#[derive(Clone, Debug)]
pub struct PolicyValues {
    /// `values[t][state]`; one table for the infinite horizon.
    pub values: Vec<Vec<f64>>,
}

impl PolicyValues {
    pub fn initial_values(&self) -> &[f64] {
        &self.values[0]
    }
}

/// Exact evaluation: backward accumulation for a finite horizon, iterative
/// evaluation to sup-norm error `tol` for the discounted infinite horizon.
pub fn evaluate_policy(spec: &TeamSpec, layout: &PopulationLayout, policy: &CentralizedMarkovPolicy, horizon: Horizon, tol: f64, budget: u128) -> Result<PolicyValues> {
    let model = ExactModel::new(spec, layout, budget)?;
    evaluate_policy_with(&model, policy, horizon, tol)
}

pub fn evaluate_policy_with(model: &ExactModel, policy: &CentralizedMarkovPolicy, horizon: Horizon, tol: f64) -> Result<PolicyValues> {
    match horizon {
        Horizon::Finite(t_max) => {
            policy.check(&model.space, Some(t_max))?;
            let mut values = vec![Vec::new(); t_max];
            let mut next = vec![0.0; model.space.n_states()];
            for t in (0..t_max).rev() {
                let v = model.policy_backup(&next, policy.at(t));
                values[t] = v.clone();
                next = v;
            }
            Ok(PolicyValues { values })
        }
        Horizon::Infinite => {
            policy.check(&model.space, None)?;
            if tol <= 0.0 {
                return Err(Error::invalid("tol", "tolerance must be positive"));
            }
            let threshold = stopping_threshold(tol, model.beta);
            let mut v = vec![0.0; model.space.n_states()];
            loop {
                let next = model.policy_backup(&v, policy.at(0));
                let d = sup_diff(&next, &v);
                v = next;
                if d <= threshold {
                    return Ok(PolicyValues { values: vec![v] });
                }
            }
        }
    }
}

/// Permutations of agent indices that map every cluster onto itself.
#[derive(Clone, Debug)]
pub struct PermutationSet {
    /// `perms[k][i] = sigma(i)`; the identity comes first.
    pub perms: Vec<Vec<usize>>,
    pub exhaustive: bool,
}

fn all_permutations(items: &[usize]) -> Vec<Vec<usize>> {
    // lexicographic successor enumeration
    let mut cur = items.to_vec();
    cur.sort_unstable();
    let mut out = vec![cur.clone()];
    loop {
        let n = cur.len();
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            return out;
        };
        let k = (i + 1..n).rev().find(|&k| cur[k] > cur[i]).expect("successor exists");
        cur.swap(i, k);
        cur[i + 1..].reverse();
        out.push(cur.clone());
    }
}

fn factorial(n: usize) -> u128 {
    (1..=n as u128).product()
}

/// Every cluster permutation when there are at most [`EXHAUSTIVE_PERMUTATIONS`],
/// otherwise [`SAMPLED_PERMUTATIONS`] uniform draws (plus the identity) from `seed`.
pub fn cluster_permutations(layout: &PopulationLayout, seed: u64) -> PermutationSet {
    let count: u128 = layout.sizes().iter().map(|&n| factorial(n)).product();
    let n = layout.total();
    if count <= EXHAUSTIVE_PERMUTATIONS {
        let mut perms: Vec<Vec<usize>> = vec![Vec::with_capacity(n)];
        for j in 0..layout.clusters() {
            let block: Vec<usize> = layout.cluster_range(j).collect();
            let local = all_permutations(&block);
            perms = perms
                .iter()
                .flat_map(|prefix| {
                    local.iter().map(move |p| {
                        let mut v = prefix.clone();
                        v.extend_from_slice(p);
                        v
                    })
                })
                .collect();
        }
        PermutationSet { perms, exhaustive: true }
    } else {
        use rand::seq::SliceRandom;
        let mut rng = substream(seed, 0);
        let mut perms = vec![(0..n).collect::<Vec<_>>()];
        for _ in 0..SAMPLED_PERMUTATIONS {
            let mut p: Vec<usize> = (0..n).collect();
            for j in 0..layout.clusters() {
                p[layout.cluster_range(j)].shuffle(&mut rng);
            }
            perms.push(p);
        }
        PermutationSet { perms, exhaustive: false }
    }
}

fn index_maps(space: &JointStateSpace, perms: &PermutationSet) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let n = space.layout.total();
    let (mut buf, mut out) = (vec![0; n], vec![0; n]);
    let mut smaps = Vec::with_capacity(perms.perms.len());
    let mut amaps = Vec::with_capacity(perms.perms.len());
    for p in &perms.perms {
        smaps.push((0..space.n_states()).map(|s| JointStateSpace::permute(&space.states, p, s, &mut buf, &mut out)).collect());
        amaps.push((0..space.n_actions()).map(|a| JointStateSpace::permute(&space.actions, p, a, &mut buf, &mut out)).collect());
    }
    (smaps, amaps)
}

/// Average of `pi^sigma` over all cluster permutations `sigma`.
///
/// Each entry is summed in sorted order of its addends, so entries in one
/// orbit are bitwise equal and the result is exactly cluster-symmetric.
pub fn uniformize_policy(spec: &TeamSpec, layout: &PopulationLayout, policy: &CentralizedMarkovPolicy, budget: u128) -> Result<CentralizedMarkovPolicy> {
    let space = JointStateSpace::new(spec, layout, budget)?;
    let perms = cluster_permutations(layout, 0);
    if !perms.exhaustive {
        let needed: u128 = layout.sizes().iter().map(|&n| factorial(n)).product();
        return Err(Error::Budget {
            what: "cluster permutations",
            needed,
            budget: EXHAUSTIVE_PERMUTATIONS,
        });
    }
    policy.check(&space, Some(1))?;
    let (smaps, amaps) = index_maps(&space, &perms);
    let g = perms.perms.len() as f64;
    let tables = policy
        .tables
        .iter()
        .map(|table| {
            (0..space.n_states())
                .map(|s| {
                    let mut addends = Vec::with_capacity(perms.perms.len());
                    (0..space.n_actions())
                        .map(|a| {
                            addends.clear();
                            addends.extend(smaps.iter().zip(&amaps).map(|(sm, am)| table[sm[s]][am[a]]));
                            addends.sort_by(f64::total_cmp);
                            addends.iter().sum::<f64>() / g
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(CentralizedMarkovPolicy {
        tables,
        stationary: policy.stationary,
    })
}

/// Marginal laws of the joint state at steps `0..steps` under `policy` from `nu0`.
pub fn state_marginals(model: &ExactModel, nu0: &MeasureArray, policy: &CentralizedMarkovPolicy, steps: usize) -> Result<Vec<Vec<f64>>> {
    policy.check(&model.space, Some(steps))?;
    let n_states = model.space.n_states();
    let mut out = Vec::with_capacity(steps);
    let mut law = model.space.initial_law(nu0);
    for t in 0..steps {
        let table = policy.at(t);
        let next = (0..n_states)
            .into_par_iter()
            .fold(
                || vec![0.0; n_states],
                |mut acc, s| {
                    if law[s] == 0.0 {
                        return acc;
                    }
                    for (a, &p) in table[s].iter().enumerate() {
                        let w = law[s] * p;
                        if w != 0.0 {
                            for (o, k) in acc.iter_mut().zip(model.kernel_row(s, a)) {
                                *o += w * k;
                            }
                        }
                    }
                    acc
                },
            )
            .reduce(
                || vec![0.0; n_states],
                |mut a, b| {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    a
                },
            );
        out.push(std::mem::replace(&mut law, next));
    }
    Ok(out)
}

fn sorted_sum(addends: &mut [f64]) -> f64 {
    addends.sort_by(f64::total_cmp);
    addends.iter().sum()
}

/// Cluster-symmetric policy with the same `nu0`-expected cost as `policy` over `steps` stages.
///
/// At each step the joint state-action law of `policy` is averaged over all
/// cluster permutations and the symmetric policy is read off by conditioning:
/// `pi_t(u | x) = sum_sigma P_t(x^sigma) pi_t(u^sigma | x^sigma) / sum_sigma P_t(x^sigma)`,
/// with `P_t` the state marginal under `policy`. States of zero mass fall back
/// to the plain permutation average. The pointwise average of
/// [`uniformize_policy`] coincides with this only when every `P_t` is
/// itself cluster-exchangeable.
pub fn uniformize_along_occupation(spec: &TeamSpec, layout: &PopulationLayout, policy: &CentralizedMarkovPolicy, steps: usize, budget: u128) -> Result<CentralizedMarkovPolicy> {
    let model = ExactModel::new(spec, layout, budget)?;
    let perms = cluster_permutations(layout, 0);
    if !perms.exhaustive {
        let needed: u128 = layout.sizes().iter().map(|&n| factorial(n)).product();
        return Err(Error::Budget {
            what: "cluster permutations",
            needed,
            budget: EXHAUSTIVE_PERMUTATIONS,
        });
    }
    let marginals = state_marginals(&model, spec.nu0(), policy, steps)?;
    let space = &model.space;
    let (smaps, amaps) = index_maps(space, &perms);
    let g = perms.perms.len();
    let tables = (0..steps)
        .map(|t| {
            let table = policy.at(t);
            let law = &marginals[t];
            (0..space.n_states())
                .into_par_iter()
                .map_init(
                    || Vec::with_capacity(g),
                    |addends, s| {
                        addends.clear();
                        addends.extend(smaps.iter().map(|sm| law[sm[s]]));
                        let mass = sorted_sum(addends);
                        (0..space.n_actions())
                            .map(|a| {
                                addends.clear();
                                if mass > 0.0 {
                                    addends.extend(smaps.iter().zip(&amaps).map(|(sm, am)| law[sm[s]] * table[sm[s]][am[a]]));
                                    sorted_sum(addends) / mass
                                } else {
                                    addends.extend(smaps.iter().zip(&amaps).map(|(sm, am)| table[sm[s]][am[a]]));
                                    sorted_sum(addends) / g as f64
                                }
                            })
                            .collect()
                    },
                )
                .collect()
        })
        .collect();
    Ok(CentralizedMarkovPolicy::time_varying(tables))
}

/// Largest `|pi(u^sigma | x^sigma) - pi(u | x)|` over the given permutations.
pub fn symmetry_defect(spec: &TeamSpec, layout: &PopulationLayout, policy: &CentralizedMarkovPolicy, perms: &PermutationSet, budget: u128) -> Result<f64> {
    let space = JointStateSpace::new(spec, layout, budget)?;
    let (smaps, amaps) = index_maps(&space, perms);
    let mut worst = 0.0f64;
    for table in &policy.tables {
        for (sm, am) in smaps.iter().zip(&amaps) {
            for s in 0..space.n_states() {
                for a in 0..space.n_actions() {
                    worst = worst.max((table[sm[s]][am[a]] - table[s][a]).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Monte Carlo rollouts of a centralized policy.
#[derive(Clone, Debug, Serialize)]
pub struct SimulationReport {
    /// Discounted cost of each rollout.
    pub costs: Vec<f64>,
    pub mean: f64,
    pub std_err: f64,
    /// `trajectories[rollout][t][j]`: state counts of cluster `j` at step `t`, `t = 0..=steps`.
    pub trajectories: Vec<Vec<Vec<Vec<u32>>>>,
}

/// `n_rollouts` independent trajectories of `steps` stages from `nu0`.
pub fn simulate(spec: &TeamSpec, layout: &PopulationLayout, policy: &CentralizedMarkovPolicy, steps: usize, n_rollouts: usize, seed: u64, budget: u128) -> Result<SimulationReport> {
    let model = ExactModel::new(spec, layout, budget)?;
    policy.check(&model.space, Some(steps))?;
    let n = layout.total();
    let beta = spec.beta();
    let runs: Vec<(f64, Vec<Vec<Vec<u32>>>)> = (0..n_rollouts)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, r as u64);
            let mut x: Vec<usize> = (0..n)
                .map(|i| categorical(&mut rng, spec.nu0().cluster(layout.cluster_of(i)).as_slice()))
                .collect();
            let mut s = model.space.states.encode(&x);
            let mut cost = 0.0;
            let mut disc = 1.0;
            let mut traj = Vec::with_capacity(steps + 1);
            let mut u = vec![0; n];
            let mut costs = vec![0.0; model.space.n_actions()];
            for t in 0..steps {
                traj.push(cluster_counts(spec, layout, &x));
                let a = categorical(&mut rng, &policy.at(t)[s]);
                model.stage_costs(s, &mut costs);
                cost += disc * costs[a];
                disc *= beta;
                model.space.actions.decode(a, &mut u);
                let ctx = &model.contexts[s];
                for i in 0..n {
                    let nx = model.nx[i];
                    let off = model.row_offset[i] + u[i] * nx;
                    x[i] = categorical(&mut rng, &ctx.rows[off..off + nx]);
                }
                s = model.space.states.encode(&x);
            }
            traj.push(cluster_counts(spec, layout, &x));
            (cost, traj)
        })
        .collect();
    let (costs, trajectories): (Vec<f64>, Vec<_>) = runs.into_iter().unzip();
    let (mean, std_err) = mean_and_stderr(&costs);
    Ok(SimulationReport {
        costs,
        mean,
        std_err,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{random_spec, random_simplex, with_constant_cost, SpecShape};
    use crate::model::ensemble_cost;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec_and_layout(seed: u64, shape: SpecShape, sizes: Vec<usize>) -> (TeamSpec, PopulationLayout) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (random_spec(&mut rng, &shape), PopulationLayout::new(sizes).unwrap())
    }

    fn random_policy(space: &JointStateSpace, seed: u64, steps: usize) -> CentralizedMarkovPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CentralizedMarkovPolicy::time_varying(
            (0..steps)
                .map(|_| (0..space.n_states()).map(|_| random_simplex(&mut rng, space.n_actions())).collect())
                .collect(),
        )
    }

    #[test]
    fn single_agent_kernel_row_matches_eval_kernel() {
        let (spec, layout) = spec_and_layout(1, SpecShape::binary(1), vec![1]);
        let row = joint_kernel_row(&spec, &layout, &[1], &[0]).unwrap();
        let mu = empirical_measure(&spec, &layout, &[1]).unwrap();
        assert_eq!(row, spec.eval_kernel(0, 1, 0, &mu).unwrap().into_inner());
    }

    #[test]
    fn two_agent_kernel_row_is_product() {
        let (spec, layout) = spec_and_layout(2, SpecShape::binary(1), vec![2]);
        let (x, u) = ([0, 1], [1, 0]);
        let row = joint_kernel_row(&spec, &layout, &x, &u).unwrap();
        let mu = MeasureArray::from_rows(vec![vec![0.5, 0.5]]).unwrap();
        let r0 = spec.eval_kernel(0, 0, 1, &mu).unwrap();
        let r1 = spec.eval_kernel(0, 1, 0, &mu).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert!((row[a * 2 + b] - r0[a] * r1[b]).abs() < 1e-15);
            }
        }
        let model = ExactModel::new(&spec, &layout, DEFAULT_BUDGET).unwrap();
        let s = model.space().states().encode(&x);
        let a = model.space().actions().encode(&u);
        for (p, q) in model.kernel_row(s, a).iter().zip(&row) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_kernels_give_point_mass() {
        let (spec, layout) = spec_and_layout(3, SpecShape::binary(2), vec![1, 2]);
        let mut doc = spec.doc().clone();
        doc.kernels.mix = vec![0.0, 0.0];
        for per_x in doc.kernels.base.iter_mut() {
            for (x, per_u) in per_x.iter_mut().enumerate() {
                for (u, row) in per_u.iter_mut().enumerate() {
                    *row = vec![0.0; 2];
                    row[(x + u) % 2] = 1.0;
                }
            }
        }
        let spec = TeamSpec::from_doc(doc).unwrap();
        let row = joint_kernel_row(&spec, &layout, &[0, 1, 1], &[1, 1, 0]).unwrap();
        let space = JointStateSpace::new(&spec, &layout, DEFAULT_BUDGET).unwrap();
        let target = space.states().encode(&[1, 0, 1]);
        for (s, p) in row.iter().enumerate() {
            assert_eq!(*p, if s == target { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn one_step_value_is_min_ensemble_cost() {
        let (spec, layout) = spec_and_layout(4, SpecShape::binary(2), vec![2, 1]);
        let res = solve_exact_finite(&spec, &layout, 1, DEFAULT_BUDGET).unwrap();
        let space = JointStateSpace::new(&spec, &layout, DEFAULT_BUDGET).unwrap();
        for s in 0..space.n_states() {
            let x = space.states().digits(s);
            let best = (0..space.n_actions())
                .map(|a| ensemble_cost(&spec, &layout, &x, &space.actions().digits(a)).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert!((res.values[0][s] - best).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_cost_gives_geometric_sums() {
        let (spec, layout) = spec_and_layout(5, SpecShape::binary(1), vec![2]);
        let spec = with_constant_cost(&spec, 1.0);
        let res = solve_exact_finite(&spec, &layout, 4, DEFAULT_BUDGET).unwrap();
        let want: f64 = (0..4).map(|t| 0.9f64.powi(t)).sum();
        assert!(res.values[0].iter().all(|v| (v - want).abs() < 1e-12));
        let inf = solve_exact_infinite(&spec, &layout, 1e-8, DEFAULT_BUDGET).unwrap();
        assert!(inf.values[0].iter().all(|v| (v - 10.0).abs() <= 1e-8));
    }

    #[test]
    fn selector_reproduces_values() {
        let (spec, layout) = spec_and_layout(6, SpecShape::random(&mut ChaCha8Rng::seed_from_u64(60)), vec![2]);
        let layout = PopulationLayout::even(2 * spec.clusters(), spec.clusters()).unwrap_or(layout);
        let res = solve_exact_finite(&spec, &layout, 3, DEFAULT_BUDGET).unwrap();
        let space = JointStateSpace::new(&spec, &layout, DEFAULT_BUDGET).unwrap();
        let pol = CentralizedMarkovPolicy::from_selector(&res, space.n_actions());
        let ev = evaluate_policy(&spec, &layout, &pol, Horizon::Finite(3), 1e-9, DEFAULT_BUDGET).unwrap();
        for (a, b) in ev.values.iter().flatten().zip(res.values.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn value_iteration_contracts_and_has_small_residual() {
        let (spec, layout) = spec_and_layout(7, SpecShape::binary(2), vec![1, 2]);
        let model = ExactModel::new(&spec, &layout, DEFAULT_BUDGET).unwrap();
        let tol = 1e-7;
        let res = solve_infinite_with(&model, tol);
        for w in res.successive_diffs.windows(2) {
            // rounding of values near c_max / (1 - beta) is below 1e-13
            assert!(w[1] <= (spec.beta() + 1e-12) * w[0] + 1e-13, "{} {}", w[0], w[1]);
        }
        assert!(bellman_residual(&model, &res.values[0]) <= tol);
        let pol = CentralizedMarkovPolicy::from_selector(&res, model.space().n_actions());
        let ev = evaluate_policy_with(&model, &pol, Horizon::Infinite, 1e-9).unwrap();
        for (a, b) in ev.values[0].iter().zip(&res.values[0]) {
            assert!((a - b).abs() < 2.0 * tol);
        }
    }

    #[test]
    fn optimal_values_are_cluster_exchangeable() {
        let (spec, layout) = spec_and_layout(8, SpecShape::binary(2), vec![2, 3]);
        let res = solve_exact_finite(&spec, &layout, 2, DEFAULT_BUDGET).unwrap();
        let space = JointStateSpace::new(&spec, &layout, DEFAULT_BUDGET).unwrap();
        let perms = cluster_permutations(&layout, 0);
        let n = layout.total();
        let (mut b, mut o) = (vec![0; n], vec![0; n]);
        for p in &perms.perms {
            for table in &res.values {
                for s in 0..space.n_states() {
                    let ps = JointStateSpace::permute(space.states(), p, s, &mut b, &mut o);
                    assert!((table[ps] - table[s]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn permutation_counts() {
        let l = PopulationLayout::new(vec![1, 1, 1]).unwrap();
        assert_eq!(cluster_permutations(&l, 0).perms, vec![vec![0, 1, 2]]);
        let l = PopulationLayout::new(vec![3]).unwrap();
        assert_eq!(cluster_permutations(&l, 0).perms.len(), 6);
        let l = PopulationLayout::new(vec![2, 2]).unwrap();
        let ps = cluster_permutations(&l, 0);
        assert!(ps.exhaustive);
        assert_eq!(ps.perms.len(), 4);
        for p in &ps.perms {
            assert!(p[0] < 2 && p[1] < 2 && p[2] >= 2 && p[3] >= 2);
        }
        let l = PopulationLayout::new(vec![9]).unwrap();
        let ps = cluster_permutations(&l, 3);
        assert!(!ps.exhaustive);
        assert_eq!(ps.perms.len(), SAMPLED_PERMUTATIONS + 1);
    }

    #[test]
    fn uniformization_examples() {
        let (spec, layout) = spec_and_layout(9, SpecShape::binary(1), vec![2]);
        let space = JointStateSpace::new(&spec, &layout, DEFAULT_BUDGET).unwrap();
        let pol = random_policy(&space, 90, 1);
        let uni = uniformize_policy(&spec, &layout, &pol, DEFAULT_BUDGET).unwrap();
        let perms = cluster_permutations(&layout, 0);
        assert_eq!(symmetry_defect(&spec, &layout, &uni, &perms, DEFAULT_BUDGET).unwrap(), 0.0);
        assert!(symmetry_defect(&spec, &layout, &pol, &perms, DEFAULT_BUDGET).unwrap() > 0.0);
        // idempotent
        let again = uniformize_policy(&spec, &layout, &uni, DEFAULT_BUDGET).unwrap();
        for (a, b) in again.tables.iter().flatten().flatten().zip(uni.tables.iter().flatten().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        // nu0-averaged cost preserved
        let model = ExactModel::new(&spec, &layout, DEFAULT_BUDGET).unwrap();
        let before = evaluate_policy_with(&model, &pol, Horizon::Finite(1), 0.0).unwrap();
        let after = evaluate_policy_with(&model, &uni, Horizon::Finite(1), 0.0).unwrap();
        let jb = space.average_over_initial_law(spec.nu0(), before.initial_values());
        let ja = space.average_over_initial_law(spec.nu0(), after.initial_values());
        assert!((jb - ja).abs() < 1e-9, "{jb} vs {ja}");
    }

    #[test]
    fn pointwise_average_changes_cost_beyond_one_step() {
        let (spec, layout) = spec_and_layout(9, SpecShape::binary(1), vec![2]);
        let space = JointStateSpace::new(&spec, &layout, DEFAULT_BUDGET).unwrap();
        let pol = random_policy(&space, 90, 3);
        let uni = uniformize_policy(&spec, &layout, &pol, DEFAULT_BUDGET).unwrap();
        let model = ExactModel::new(&spec, &layout, DEFAULT_BUDGET).unwrap();
        let cost = |p: &CentralizedMarkovPolicy| {
            let v = evaluate_policy_with(&model, p, Horizon::Finite(3), 0.0).unwrap();
            space.average_over_initial_law(spec.nu0(), v.initial_values())
        };
        assert!((cost(&pol) - cost(&uni)).abs() > 1e-6);
        let occ = uniformize_along_occupation(&spec, &layout, &pol, 3, DEFAULT_BUDGET).unwrap();
        assert!((cost(&pol) - cost(&occ)).abs() < 1e-12);
        let perms = cluster_permutations(&layout, 0);
        assert_eq!(symmetry_defect(&spec, &layout, &occ, &perms, DEFAULT_BUDGET).unwrap(), 0.0);
    }

    #[test]
    fn occupation_uniformization_on_two_clusters() {
        let (spec, layout) = spec_and_layout(14, SpecShape { state_sizes: vec![2, 3], action_sizes: vec![3, 2] }, vec![2, 2]);
        let space = JointStateSpace::new(&spec, &layout, DEFAULT_BUDGET).unwrap();
        let pol = random_policy(&space, 140, 3);
        let model = ExactModel::new(&spec, &layout, DEFAULT_BUDGET).unwrap();
        let occ = uniformize_along_occupation(&spec, &layout, &pol, 3, DEFAULT_BUDGET).unwrap();
        let marg = state_marginals(&model, spec.nu0(), &pol, 3).unwrap();
        for m in &marg {
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let cost = |p: &CentralizedMarkovPolicy| {
            let v = evaluate_policy_with(&model, p, Horizon::Finite(3), 0.0).unwrap();
            space.average_over_initial_law(spec.nu0(), v.initial_values())
        };
        assert!((cost(&pol) - cost(&occ)).abs() < 1e-12);
        let perms = cluster_permutations(&layout, 0);
        assert_eq!(symmetry_defect(&spec, &layout, &occ, &perms, DEFAULT_BUDGET).unwrap(), 0.0);
    }

    #[test]
    fn uniformization_is_identity_for_singleton_clusters() {
        let (spec, layout) = spec_and_layout(10, SpecShape::binary(2), vec![1, 1]);
        let space = JointStateSpace::new(&spec, &layout, DEFAULT_BUDGET).unwrap();
        let pol = random_policy(&space, 100, 2);
        let uni = uniformize_policy(&spec, &layout, &pol, DEFAULT_BUDGET).unwrap();
        assert_eq!(uni, pol);
    }

    #[test]
    fn simulation_is_deterministic_and_matches_exact_evaluation() {
        let (spec, layout) = spec_and_layout(11, SpecShape::binary(1), vec![2]);
        let space = JointStateSpace::new(&spec, &layout, DEFAULT_BUDGET).unwrap();
        let pol = random_policy(&space, 110, 3);
        let a = simulate(&spec, &layout, &pol, 3, 4000, 5, DEFAULT_BUDGET).unwrap();
        let b = simulate(&spec, &layout, &pol, 3, 4000, 5, DEFAULT_BUDGET).unwrap();
        assert_eq!(a.costs, b.costs);
        assert_eq!(a.trajectories, b.trajectories);
        let exact = evaluate_policy(&spec, &layout, &pol, Horizon::Finite(3), 0.0, DEFAULT_BUDGET).unwrap();
        let j = space.average_over_initial_law(spec.nu0(), exact.initial_values());
        assert!((a.mean - j).abs() <= 3.0 * a.std_err, "{} vs {j} (se {})", a.mean, a.std_err);
    }

    #[test]
    fn uniform_policy_on_constant_cost() {
        let (spec, layout) = spec_and_layout(12, SpecShape::binary(2), vec![1, 2]);
        let spec = with_constant_cost(&spec, 0.5);
        let space = JointStateSpace::new(&spec, &layout, DEFAULT_BUDGET).unwrap();
        let pol = CentralizedMarkovPolicy::uniform(&space);
        let ev = evaluate_policy(&spec, &layout, &pol, Horizon::Finite(4), 0.0, DEFAULT_BUDGET).unwrap();
        // two clusters, each contributing 0.5 per stage
        let want: f64 = (0..4).map(|t| 0.9f64.powi(t)).sum();
        assert!(ev.values[0].iter().all(|v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn budget_is_enforced() {
        let (spec, layout) = spec_and_layout(13, SpecShape::binary(1), vec![8]);
        assert!(matches!(solve_exact_finite(&spec, &layout, 1, 1000), Err(Error::Budget { .. })));
    }
}
