//! Decentralized agent policies induced by a mean-field solution.
//!
//! The deterministic flow is rolled out once from `nu0`; at step `t` every
//! agent of cluster `j` draws its action from the kernel `pi_j,t(. | x)` read
//! off the mean-field policy at the flow state. A finite population applies
//! the same kernels, still indexed by the flow rather than by its own
//! empirical measure.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{CentralizedMarkovPolicy, JointStateSpace};
use crate::meanfield::{self, GridPolicy, KernelAction, MeanFieldSolution};
use crate::measure::{tv_distance, MeasureArray, SimplexVector};
use crate::model::{Horizon, PopulationLayout, TeamSpec};
use crate::rng::{categorical, mean_and_stderr, multinomial_counts, substream};

/// Per-step cluster kernels paired with the flow they were read from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecentralizedPolicy {
    pub horizon: Horizon,
    /// Kernels come from a stationary mean-field policy.
    pub stationary: bool,
    /// `kernels[t]` is applied at step `t`; rows of states the flow does not
    /// charge are uniform.
    pub kernels: Vec<KernelAction>,
    /// `flow[t]` is the mean-field state at step `t`.
    pub flow: Vec<MeasureArray>,
    /// Discounted cost of the mean-field policy along the flow.
    pub mean_field_cost: f64,
    #[serde(skip)]
    source: Option<MeanFieldSolution>,
}

impl DecentralizedPolicy {
    pub fn steps(&self) -> usize {
        self.kernels.len()
    }

    /// Action law of an agent of cluster `j` in state `x` at step `t`.
    pub fn row(&self, t: usize, j: usize, x: usize) -> &[f64] {
        &self.kernels[t].cluster(j)[x]
    }

    /// Attaches the mean-field solution the policy was induced from, which
    /// empirical feedback needs after a round trip through JSON.
    pub fn with_source(mut self, solution: MeanFieldSolution) -> Self {
        self.source = Some(solution);
        self
    }

    /// The first `steps` kernels.
    pub fn truncated_to(&self, steps: usize) -> DecentralizedPolicy {
        let steps = steps.min(self.steps());
        let mut out = self.clone();
        out.kernels.truncate(steps);
        out.flow.truncate(steps);
        out
    }
}

fn uniform_null_rows(spec: &TeamSpec, mu: &MeasureArray, action: &KernelAction) -> KernelAction {
    let rows = action
        .rows()
        .iter()
        .enumerate()
        .map(|(j, m)| {
            m.iter()
                .enumerate()
                .map(|(x, row)| {
                    if mu.cluster(j)[x] > 0.0 {
                        row.clone()
                    } else {
                        SimplexVector::uniform(spec.action_sizes()[j]).into_inner()
                    }
                })
                .collect()
        })
        .collect();
    KernelAction::new(spec, rows).expect("valid rows")
}

/// Rolls the flow from `nu0` under the greedy mean-field policy and records
/// the kernel used at every step. An infinite horizon is truncated at
/// [`meanfield::effective_horizon`].
pub fn induce_policy(spec: &TeamSpec, solution: &MeanFieldSolution, nu0: &MeasureArray, horizon: Horizon) -> Result<DecentralizedPolicy> {
    if let (Horizon::Finite(have), requested) = (solution.horizon, horizon) {
        match requested {
            Horizon::Finite(t) if t <= have => {}
            _ => {
                return Err(Error::invalid(
                    "horizon",
                    format!("solution covers {have} steps, {requested} requested"),
                ))
            }
        }
    }
    let rollout = meanfield::rollout_flow(spec, solution, nu0, horizon)?;
    let mut kernels = Vec::with_capacity(rollout.steps.len());
    let mut flow = Vec::with_capacity(rollout.steps.len());
    for step in rollout.steps {
        kernels.push(uniform_null_rows(spec, &step.mu, &step.action));
        flow.push(step.mu);
    }
    Ok(DecentralizedPolicy {
        horizon,
        stationary: solution.horizon.is_infinite(),
        kernels,
        flow,
        mean_field_cost: rollout.discounted_cost,
        source: Some(solution.clone()),
    })
}

/// One representative agent per cluster driven by the flow.
#[derive(Clone, Debug)]
pub struct RepresentativeSystem {
    pub policy: DecentralizedPolicy,
    pub nu0: MeasureArray,
}

impl RepresentativeSystem {
    pub fn new(policy: DecentralizedPolicy, nu0: MeasureArray) -> Self {
        RepresentativeSystem { policy, nu0 }
    }

    /// Exact law of each representative at every step, propagated through
    /// `T_j(. | x, u, flow_t)` independently of the stored flow.
    pub fn marginals(&self, spec: &TeamSpec) -> Vec<MeasureArray> {
        let steps = self.policy.steps();
        let mut out = Vec::with_capacity(steps + 1);
        let mut law = self.nu0.clone();
        for t in 0..steps {
            let tables = spec.stage_at(&self.policy.flow[t]);
            let next = (0..spec.clusters())
                .map(|j| {
                    let mut row = vec![0.0; spec.state_sizes()[j]];
                    for (x, &p) in law.cluster(j).as_slice().iter().enumerate() {
                        for (u, &q) in self.policy.row(t, j, x).iter().enumerate() {
                            let w = p * q;
                            if w != 0.0 {
                                for (r, &k) in row.iter_mut().zip(tables.row(j, x, u)) {
                                    *r += w * k;
                                }
                            }
                        }
                    }
                    SimplexVector::from_raw(row)
                })
                .collect();
            out.push(std::mem::replace(&mut law, MeasureArray::new(next).expect("non-empty")));
        }
        out.push(law);
        out
    }

    /// Largest entrywise gap between the representative laws and the flow.
    pub fn consistency_defect(&self, spec: &TeamSpec) -> f64 {
        let marg = self.marginals(spec);
        let mut worst = 0.0f64;
        for (m, f) in marg.iter().zip(&self.policy.flow) {
            for (a, b) in m.iter().zip(f.iter()) {
                for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        worst
    }

    /// `sum_t beta^t sum_j E[c_j(x_t, u_t, flow_t)]` from the exact marginals.
    pub fn exact_cost(&self, spec: &TeamSpec) -> f64 {
        let marg = self.marginals(spec);
        let mut total = 0.0;
        let mut disc = 1.0;
        for t in 0..self.policy.steps() {
            let tables = spec.stage_at(&self.policy.flow[t]);
            for j in 0..spec.clusters() {
                for (x, &p) in marg[t].cluster(j).as_slice().iter().enumerate() {
                    for (u, &q) in self.policy.row(t, j, x).iter().enumerate() {
                        total += disc * p * q * tables.cost(j, x, u);
                    }
                }
            }
            disc *= spec.beta();
        }
        total
    }
}

/// Monte Carlo and exact cost of the representative system.
#[derive(Clone, Debug, Serialize)]
pub struct MkvReport {
    pub costs: Vec<f64>,
    pub mean: f64,
    pub std_err: f64,
    pub exact: f64,
    pub consistency_defect: f64,
}

/// Simulates the representative agents and compares with the exact cost.
pub fn simulate_mkv(spec: &TeamSpec, system: &RepresentativeSystem, n_rollouts: usize, seed: u64) -> MkvReport {
    let policy = &system.policy;
    let tables: Vec<_> = policy.flow.iter().map(|mu| spec.stage_at(mu)).collect();
    let costs: Vec<f64> = (0..n_rollouts)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, r as u64);
            let mut x: Vec<usize> = (0..spec.clusters()).map(|j| categorical(&mut rng, system.nu0.cluster(j).as_slice())).collect();
            let mut total = 0.0;
            let mut disc = 1.0;
            for (t, tab) in tables.iter().enumerate() {
                for (j, xj) in x.iter_mut().enumerate() {
                    let u = categorical(&mut rng, policy.row(t, j, *xj));
                    total += disc * tab.cost(j, *xj, u);
                    *xj = categorical(&mut rng, tab.row(j, *xj, u));
                }
                disc *= spec.beta();
            }
            total
        })
        .collect();
    let (mean, std_err) = mean_and_stderr(&costs);
    MkvReport {
        costs,
        mean,
        std_err,
        exact: system.exact_cost(spec),
        consistency_defect: system.consistency_defect(spec),
    }
}

/// Which measure the agents of a truncated policy feed to the kernel lookup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Feedback {
    /// The precomputed mean-field flow.
    #[default]
    Flow,
    /// The realized empirical measure, looked up on the mean-field grid.
    Empirical,
}

/// The induced policy restricted to a finite population.
#[derive(Clone, Debug)]
pub struct TruncatedPolicy {
    pub policy: DecentralizedPolicy,
    pub layout: PopulationLayout,
    pub feedback: Feedback,
}

/// Restriction of the induced policy to the first `N` agents; agents keep
/// reading the flow.
pub fn truncate_policy(policy: &DecentralizedPolicy, layout: &PopulationLayout) -> Result<TruncatedPolicy> {
    if layout.clusters() != policy.kernels.first().map_or(0, |k| k.rows().len()) {
        return Err(Error::Shape("layout and policy have different cluster counts".into()));
    }
    Ok(TruncatedPolicy {
        policy: policy.clone(),
        layout: layout.clone(),
        feedback: Feedback::Flow,
    })
}

impl TruncatedPolicy {
    pub fn with_feedback(mut self, feedback: Feedback) -> Result<Self> {
        if feedback == Feedback::Empirical && self.policy.source.is_none() {
            return Err(Error::invalid("feedback", "empirical feedback needs the mean-field solution"));
        }
        self.feedback = feedback;
        Ok(self)
    }

    fn lookup<'a>(&'a self, spec: &TeamSpec) -> Result<Option<GridPolicy<'a>>> {
        match (self.feedback, &self.policy.source) {
            (Feedback::Empirical, Some(sol)) => Ok(Some(GridPolicy::new(spec, sol)?)),
            _ => Ok(None),
        }
    }

    /// Joint-action policy over the first `steps` steps, for exact evaluation.
    pub fn to_centralized(&self, spec: &TeamSpec, steps: usize, budget: u128) -> Result<CentralizedMarkovPolicy> {
        if steps > self.policy.steps() {
            return Err(Error::invalid("horizon", format!("policy covers {} steps, {steps} requested", self.policy.steps())));
        }
        let space = JointStateSpace::new(spec, &self.layout, budget)?;
        let lookup = self.lookup(spec)?;
        let n = self.layout.total();
        let tables = (0..steps)
            .map(|t| {
                (0..space.n_states())
                    .map(|s| {
                        let x = space.states().digits(s);
                        let kernel = match &lookup {
                            Some(gp) => {
                                let mu = crate::model::empirical_measure(spec, &self.layout, &x).expect("valid state");
                                gp.action(t, &mu)
                            }
                            None => self.policy.kernels[t].clone(),
                        };
                        let mut u = vec![0; n];
                        (0..space.n_actions())
                            .map(|a| {
                                space.actions().decode(a, &mut u);
                                (0..n)
                                    .map(|i| kernel.cluster(self.layout.cluster_of(i))[x[i]][u[i]])
                                    .product()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(CentralizedMarkovPolicy::time_varying(tables))
    }
}

/// Cost statistics of a finite population under a truncated policy.
#[derive(Clone, Debug, Serialize)]
pub struct TruncatedReport {
    pub layout: Vec<usize>,
    pub costs: Vec<f64>,
    pub mean: f64,
    pub std_err: f64,
    /// Mean over rollouts of `max_j TV(empirical_j, flow_j)` at each step.
    pub tv_by_step: Vec<f64>,
    /// Average of `tv_by_step`.
    pub mean_tv: f64,
    /// Time average of the max-cluster distance, one entry per rollout.
    pub tv_per_rollout: Vec<f64>,
}

/// Counts-based simulation, exact in law: per (state, action) group the
/// action and next-state counts are multinomial.
pub fn simulate_truncated(spec: &TeamSpec, truncated: &TruncatedPolicy, n_rollouts: usize, seed: u64) -> Result<TruncatedReport> {
    let layout = &truncated.layout;
    layout.check_against(spec)?;
    let policy = &truncated.policy;
    let steps = policy.steps();
    let lookup = truncated.lookup(spec)?;
    let m = spec.clusters();
    let beta = spec.beta();
    let runs: Vec<(f64, Vec<f64>)> = (0..n_rollouts)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, r as u64);
            let mut counts: Vec<Vec<u32>> = (0..m)
                .map(|j| {
                    let mut c = vec![0; spec.state_sizes()[j]];
                    multinomial_counts(&mut rng, layout.sizes()[j] as u32, spec.nu0().cluster(j).as_slice(), &mut c);
                    c
                })
                .collect();
            let mut total = 0.0;
            let mut disc = 1.0;
            let mut tvs = Vec::with_capacity(steps);
            for t in 0..steps {
                let mu = MeasureArray::new(counts.iter().map(|c| SimplexVector::from_counts(c)).collect()).expect("non-empty");
                tvs.push(
                    (0..m)
                        .map(|j| tv_distance(mu.cluster(j).as_slice(), policy.flow[t].cluster(j).as_slice()).expect("same support"))
                        .fold(0.0, f64::max),
                );
                let kernel = match &lookup {
                    Some(gp) => gp.action(t, &mu),
                    None => policy.kernels[t].clone(),
                };
                let tables = spec.stage_at(&mu);
                let mut stage = 0.0;
                let mut next: Vec<Vec<u32>> = counts.iter().map(|c| vec![0; c.len()]).collect();
                for j in 0..m {
                    let nu = spec.action_sizes()[j];
                    let nx = spec.state_sizes()[j];
                    let mut by_action = vec![0; nu];
                    let mut moved = vec![0; nx];
                    let mut cj = 0.0;
                    for (x, &n) in counts[j].iter().enumerate() {
                        if n == 0 {
                            continue;
                        }
                        multinomial_counts(&mut rng, n, &kernel.cluster(j)[x], &mut by_action);
                        for (u, &k) in by_action.iter().enumerate() {
                            if k == 0 {
                                continue;
                            }
                            cj += k as f64 * tables.cost(j, x, u);
                            multinomial_counts(&mut rng, k, tables.row(j, x, u), &mut moved);
                            for (a, &b) in next[j].iter_mut().zip(&moved) {
                                *a += b;
                            }
                        }
                    }
                    stage += cj / layout.sizes()[j] as f64;
                }
                total += disc * stage;
                disc *= beta;
                counts = next;
            }
            (total, tvs)
        })
        .collect();
    let costs: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let (mean, std_err) = mean_and_stderr(&costs);
    let mut tv_by_step = vec![0.0; steps];
    for (_, tvs) in &runs {
        for (a, b) in tv_by_step.iter_mut().zip(tvs) {
            *a += b / n_rollouts as f64;
        }
    }
    let mean_tv = if steps == 0 { 0.0 } else { tv_by_step.iter().sum::<f64>() / steps as f64 };
    let tv_per_rollout = runs
        .iter()
        .map(|(_, tvs)| if tvs.is_empty() { 0.0 } else { tvs.iter().sum::<f64>() / tvs.len() as f64 })
        .collect();
    Ok(TruncatedReport {
        layout: layout.sizes().to_vec(),
        costs,
        mean,
        std_err,
        tv_by_step,
        mean_tv,
        tv_per_rollout,
    })
}

/// One population size of a cost-preservation sweep.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub layout: Vec<usize>,
    pub mean: f64,
    pub std_err: f64,
    pub gap: f64,
    pub mean_tv: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostPreservationReport {
    /// Mean-field cost along the flow.
    pub target: f64,
    pub rows: Vec<SweepRow>,
    /// Every gap is at most the previous one plus their pooled standard error.
    pub non_increasing: bool,
    pub last_not_above_first: bool,
    pub threshold: f64,
    pub last_below_threshold: bool,
}

/// Simulates the truncated policy at every population size in `sizes`,
/// split evenly across clusters, and compares with the mean-field cost.
pub fn check_cost_preservation(spec: &TeamSpec, policy: &DecentralizedPolicy, sizes: &[usize], n_rollouts: usize, seed: u64, threshold: f64) -> Result<CostPreservationReport> {
    if sizes.is_empty() {
        return Err(Error::invalid("N-sweep", "no population sizes given"));
    }
    let rows = sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let layout = PopulationLayout::even(n, spec.clusters())?;
            let tp = truncate_policy(policy, &layout)?;
            // distinct stream family per population size
            let rep = simulate_truncated(spec, &tp, n_rollouts, seed.wrapping_add((k as u64) << 32))?;
            Ok(SweepRow {
                n,
                layout: layout.sizes().to_vec(),
                gap: (rep.mean - policy.mean_field_cost).abs(),
                mean: rep.mean,
                std_err: rep.std_err,
                mean_tv: rep.mean_tv,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CostPreservationReport::from_rows(policy.mean_field_cost, rows, threshold)
}

impl CostPreservationReport {
    /// Summarizes sweep rows against the mean-field cost `target`.
    pub fn from_rows(target: f64, rows: Vec<SweepRow>, threshold: f64) -> Result<Self> {
        let (first, last) = match (rows.first(), rows.last()) {
            (Some(a), Some(b)) => (a.gap, b.gap),
            _ => return Err(Error::invalid("N-sweep", "no population sizes given")),
        };
        let non_increasing = rows.windows(2).all(|w| w[1].gap <= w[0].gap + (w[0].std_err.powi(2) + w[1].std_err.powi(2)).sqrt());
        Ok(CostPreservationReport {
            target,
            non_increasing,
            last_not_above_first: last <= first,
            threshold,
            last_below_threshold: last < threshold,
            rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{self, DEFAULT_BUDGET};
    use crate::generate::{random_spec, with_constant_cost, with_identity_kernels, SpecShape};
    use crate::meanfield::{finite_horizon_dp, value_iteration, Interpolation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(seed: u64, m: usize) -> TeamSpec {
        random_spec(&mut ChaCha8Rng::seed_from_u64(seed), &SpecShape::binary(m))
    }

    fn induced(s: &TeamSpec, horizon: Horizon) -> DecentralizedPolicy {
        let sol = match horizon {
            Horizon::Finite(t) => finite_horizon_dp(s, 6, 3, t, Interpolation::Kuhn, meanfield::DEFAULT_BUDGET).unwrap(),
            Horizon::Infinite => value_iteration(s, 6, 3, 1e-6, Interpolation::Kuhn, meanfield::DEFAULT_BUDGET).unwrap(),
        };
        induce_policy(s, &sol, s.nu0(), horizon).unwrap()
    }

    #[test]
    fn kernels_follow_the_mean_field_rollout() {
        let s = spec(1, 2);
        let sol = finite_horizon_dp(&s, 6, 3, 4, Interpolation::Kuhn, meanfield::DEFAULT_BUDGET).unwrap();
        let pol = induce_policy(&s, &sol, s.nu0(), Horizon::Finite(4)).unwrap();
        let roll = meanfield::rollout_flow(&s, &sol, s.nu0(), Horizon::Finite(4)).unwrap();
        assert_eq!(pol.steps(), 4);
        for (t, step) in roll.steps.iter().enumerate() {
            assert_eq!(pol.flow[t], step.mu);
            for j in 0..2 {
                for x in 0..2 {
                    if step.mu.cluster(j)[x] > 0.0 {
                        assert_eq!(pol.row(t, j, x), step.action.cluster(j)[x].as_slice());
                    }
                }
            }
        }
        assert!(induce_policy(&s, &sol, s.nu0(), Horizon::Finite(5)).is_err());
        assert!(induce_policy(&s, &sol, s.nu0(), Horizon::Infinite).is_err());
    }

    #[test]
    fn identity_kernels_give_time_invariant_kernels() {
        let s = with_identity_kernels(&spec(2, 2));
        let pol = induced(&s, Horizon::Infinite);
        assert!(pol.stationary);
        for k in &pol.kernels {
            assert_eq!(k, &pol.kernels[0]);
        }
    }

    #[test]
    fn representative_laws_are_the_flow() {
        for seed in 0..4 {
            let s = spec(10 + seed, 2);
            let pol = induced(&s, Horizon::Finite(5));
            let sys = RepresentativeSystem::new(pol.clone(), s.nu0().clone());
            assert!(sys.consistency_defect(&s) < 1e-12);
            assert!((sys.exact_cost(&s) - pol.mean_field_cost).abs() < 1e-9);
        }
    }

    #[test]
    fn mkv_simulation_matches_exact_cost() {
        let s = spec(3, 2);
        let pol = induced(&s, Horizon::Finite(6));
        let sys = RepresentativeSystem::new(pol, s.nu0().clone());
        let a = simulate_mkv(&s, &sys, 20_000, 7);
        let b = simulate_mkv(&s, &sys, 20_000, 7);
        assert_eq!(a.costs, b.costs);
        assert!((a.mean - a.exact).abs() <= 3.0 * a.std_err, "{} vs {} ({})", a.mean, a.exact, a.std_err);
    }

    #[test]
    fn one_agent_per_cluster_matches_representative() {
        let s = spec(4, 2);
        let pol = induced(&s, Horizon::Finite(4));
        let layout = PopulationLayout::new(vec![1, 1]).unwrap();
        let tp = truncate_policy(&pol, &layout).unwrap();
        let cen = tp.to_centralized(&s, 4, DEFAULT_BUDGET).unwrap();
        let ev = exact::evaluate_policy(&s, &layout, &cen, Horizon::Finite(4), 0.0, DEFAULT_BUDGET).unwrap();
        let space = JointStateSpace::new(&s, &layout, DEFAULT_BUDGET).unwrap();
        let j_exact = space.average_over_initial_law(s.nu0(), ev.initial_values());
        // with one agent per cluster the empirical measure is a point mass, so
        // the team cost differs from the representative cost only through the
        // measure argument of costs and kernels
        let sys = RepresentativeSystem::new(pol.clone(), s.nu0().clone());
        let sim = simulate_truncated(&s, &tp, 20_000, 3).unwrap();
        assert!((sim.mean - j_exact).abs() <= 3.0 * sim.std_err, "{} vs {j_exact}", sim.mean);
        assert!(sys.exact_cost(&s).is_finite());
    }

    #[test]
    fn truncation_is_never_better_than_the_optimum() {
        for seed in 0..3 {
            let s = spec(20 + seed, 1);
            let pol = induced(&s, Horizon::Finite(3));
            for n in 1..=3 {
                let layout = PopulationLayout::new(vec![n]).unwrap();
                let tp = truncate_policy(&pol, &layout).unwrap();
                let cen = tp.to_centralized(&s, 3, DEFAULT_BUDGET).unwrap();
                let ev = exact::evaluate_policy(&s, &layout, &cen, Horizon::Finite(3), 0.0, DEFAULT_BUDGET).unwrap();
                let opt = exact::solve_exact_finite(&s, &layout, 3, DEFAULT_BUDGET).unwrap();
                let space = JointStateSpace::new(&s, &layout, DEFAULT_BUDGET).unwrap();
                let a = space.average_over_initial_law(s.nu0(), ev.initial_values());
                let b = space.average_over_initial_law(s.nu0(), opt.initial_values());
                assert!(a - b >= -1e-9, "{a} < {b}");
            }
        }
    }

    #[test]
    fn counts_simulation_matches_exact_evaluation() {
        let s = spec(5, 2);
        let pol = induced(&s, Horizon::Finite(3));
        let layout = PopulationLayout::new(vec![2, 3]).unwrap();
        let tp = truncate_policy(&pol, &layout).unwrap();
        let cen = tp.to_centralized(&s, 3, DEFAULT_BUDGET).unwrap();
        let ev = exact::evaluate_policy(&s, &layout, &cen, Horizon::Finite(3), 0.0, DEFAULT_BUDGET).unwrap();
        let space = JointStateSpace::new(&s, &layout, DEFAULT_BUDGET).unwrap();
        let j = space.average_over_initial_law(s.nu0(), ev.initial_values());
        let sim = simulate_truncated(&s, &tp, 40_000, 11).unwrap();
        assert!((sim.mean - j).abs() <= 3.0 * sim.std_err, "{} vs {j} ({})", sim.mean, sim.std_err);
        // agent-level simulation of the same joint policy agrees as well
        let agents = exact::simulate(&s, &layout, &cen, 3, 40_000, 12, DEFAULT_BUDGET).unwrap();
        assert!((agents.mean - j).abs() <= 3.0 * agents.std_err);
    }

    #[test]
    fn empirical_feedback_runs() {
        let s = spec(6, 2);
        let pol = induced(&s, Horizon::Finite(3));
        let layout = PopulationLayout::new(vec![2, 2]).unwrap();
        let tp = truncate_policy(&pol, &layout).unwrap().with_feedback(Feedback::Empirical).unwrap();
        let cen = tp.to_centralized(&s, 3, DEFAULT_BUDGET).unwrap();
        assert_eq!(cen.tables.len(), 3);
        let sim = simulate_truncated(&s, &tp, 100, 1).unwrap();
        assert!(sim.mean.is_finite());
    }

    #[test]
    fn constant_cost_identity_kernels_have_zero_gap() {
        let s = with_constant_cost(&with_identity_kernels(&spec(7, 2)), 0.5);
        let pol = induced(&s, Horizon::Finite(5));
        let rep = check_cost_preservation(&s, &pol, &[2, 4, 8], 50, 3, 1e-9).unwrap();
        for row in &rep.rows {
            assert!(row.gap < 1e-12);
            assert!(row.std_err < 1e-12);
        }
        assert!(rep.non_increasing && rep.last_below_threshold);
    }

    #[test]
    fn simulation_is_reproducible() {
        let s = spec(8, 2);
        let pol = induced(&s, Horizon::Finite(4));
        let layout = PopulationLayout::new(vec![5, 7]).unwrap();
        let tp = truncate_policy(&pol, &layout).unwrap();
        let a = simulate_truncated(&s, &tp, 200, 9).unwrap();
        let b = simulate_truncated(&s, &tp, 200, 9).unwrap();
        assert_eq!(a.costs, b.costs);
        assert_eq!(a.tv_by_step, b.tv_by_step);
    }
}
