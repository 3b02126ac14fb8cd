//! Mean-field control problem over arrays of cluster measures.
//!
//! Actions are per-cluster decision kernels `pi_j[x][u]`; the state moves
//! deterministically by the flow. Value iteration runs on a product of
//! simplex grids of resolution `K`, with rows of candidate kernels drawn
//! from simplex grids of resolution `L`. Successors off the grid are
//! evaluated by piecewise-linear interpolation on the Kuhn triangulation of
//! each cluster simplex, combined as a tensor product across clusters.
//!
//! At a fixed grid point the flow of cluster `j` depends only on `pi_j`, the
//! stage cost splits over clusters and interpolation weights factor across
//! clusters, so the minimization over candidate products is carried out by
//! contracting the value tensor one cluster at a time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combinatorics::{CompositionSpace, MixedRadix};
use crate::error::{check_budget, Error, Result};
use crate::measure::{MeasureArray, SimplexVector};
use crate::model::{Horizon, StageTables, TeamSpec};

/// Default cap on precomputed (grid point, cluster candidate) pairs.
pub const DEFAULT_BUDGET: u128 = 100_000_000;
/// Tail mass below which infinite-horizon rollouts stop.
pub const TRUNCATION: f64 = 1e-12;

/// Per-cluster row-stochastic decision kernels `pi_j[x][u]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KernelAction(Vec<Vec<Vec<f64>>>);

impl KernelAction {
    pub fn new(spec: &TeamSpec, rows: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if rows.len() != spec.clusters() {
            return Err(Error::Shape(format!("{} kernels for {} clusters", rows.len(), spec.clusters())));
        }
        let mut out = Vec::with_capacity(rows.len());
        for (j, m) in rows.into_iter().enumerate() {
            if m.len() != spec.state_sizes()[j] {
                return Err(Error::Shape(format!("cluster {j} kernel has {} rows, expected {}", m.len(), spec.state_sizes()[j])));
            }
            let mut checked = Vec::with_capacity(m.len());
            for (x, row) in m.into_iter().enumerate() {
                if row.len() != spec.action_sizes()[j] {
                    return Err(Error::Shape(format!("cluster {j} kernel row {x} has {} entries", row.len())));
                }
                let v = SimplexVector::new(row).map_err(|e| e.at(&format!("[{j}][{x}]")))?;
                checked.push(v.into_inner());
            }
            out.push(checked);
        }
        Ok(KernelAction(out))
    }

    /// Every cluster plays action `u[j]` in every state.
    pub fn constant(spec: &TeamSpec, u: &[usize]) -> Result<Self> {
        let rows = (0..spec.clusters())
            .map(|j| {
                let row = SimplexVector::point_mass(spec.action_sizes()[j], u[j]).into_inner();
                vec![row; spec.state_sizes()[j]]
            })
            .collect();
        KernelAction::new(spec, rows)
    }

    pub fn cluster(&self, j: usize) -> &[Vec<f64>] {
        &self.0[j]
    }

    pub fn rows(&self) -> &[Vec<Vec<f64>>] {
        &self.0
    }

    fn check(&self, spec: &TeamSpec, mu: &MeasureArray) -> Result<()> {
        mu.check_shape(spec.state_sizes())?;
        if self.0.len() != spec.clusters() {
            return Err(Error::Shape("kernel action has the wrong number of clusters".into()));
        }
        for (j, m) in self.0.iter().enumerate() {
            if m.len() != spec.state_sizes()[j] || m.iter().any(|r| r.len() != spec.action_sizes()[j]) {
                return Err(Error::Shape(format!("cluster {j} kernel has the wrong shape")));
            }
        }
        Ok(())
    }
}

fn cluster_flow(tables: &StageTables, j: usize, mu_j: &[f64], pi: &[Vec<f64>], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (x, (&m, row)) in mu_j.iter().zip(pi).enumerate() {
        if m == 0.0 {
            continue;
        }
        for (u, &p) in row.iter().enumerate() {
            let w = m * p;
            if w != 0.0 {
                for (o, &k) in out.iter_mut().zip(tables.row(j, x, u)) {
                    *o += w * k;
                }
            }
        }
    }
}

fn cluster_stage_cost(tables: &StageTables, j: usize, mu_j: &[f64], pi: &[Vec<f64>]) -> f64 {
    let mut c = 0.0;
    for (x, (&m, row)) in mu_j.iter().zip(pi).enumerate() {
        if m == 0.0 {
            continue;
        }
        for (u, &p) in row.iter().enumerate() {
            if p != 0.0 {
                c += tables.cost(j, x, u) * p * m;
            }
        }
    }
    c
}

/// `F_j(mu, pi)(x') = sum_{x,u} T_j(x' | x, u, mu) pi_j(u | x) mu_j(x)`.
pub fn flow(spec: &TeamSpec, mu: &MeasureArray, action: &KernelAction) -> Result<MeasureArray> {
    action.check(spec, mu)?;
    let tables = spec.stage_at(mu);
    Ok(flow_at(spec, &tables, mu, action))
}

fn flow_at(spec: &TeamSpec, tables: &StageTables, mu: &MeasureArray, action: &KernelAction) -> MeasureArray {
    let rows = (0..spec.clusters())
        .map(|j| {
            let mut out = vec![0.0; spec.state_sizes()[j]];
            cluster_flow(tables, j, mu.cluster(j).as_slice(), action.cluster(j), &mut out);
            // a mass deficit of d shrinks the next kernel rows by eps * d, so
            // unnormalized roundoff grows geometrically along long rollouts
            let total: f64 = out.iter().sum();
            SimplexVector::from_raw(out.into_iter().map(|p| p / total).collect())
        })
        .collect();
    MeasureArray::new(rows).expect("non-empty")
}

/// `sum_j sum_{x,u} c_j(x, u, mu) pi_j(u | x) mu_j(x)`.
pub fn mf_stage_cost(spec: &TeamSpec, mu: &MeasureArray, action: &KernelAction) -> Result<f64> {
    action.check(spec, mu)?;
    let tables = spec.stage_at(mu);
    Ok((0..spec.clusters())
        .map(|j| cluster_stage_cost(&tables, j, mu.cluster(j).as_slice(), action.cluster(j)))
        .sum())
}

/// Product over clusters of the resolution-`K` grids `{v / K : sum v = K}`.
#[derive(Clone, Debug)]
pub struct SimplexGrid {
    resolution: u32,
    clusters: Vec<CompositionSpace>,
    radix: MixedRadix,
}

impl SimplexGrid {
    pub fn new(state_sizes: &[usize], resolution: u32, budget: u128) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::invalid("grid", "resolution must be positive"));
        }
        let clusters: Vec<CompositionSpace> = state_sizes.iter().map(|&n| CompositionSpace::new(resolution, n)).collect();
        let radix = MixedRadix::new(clusters.iter().map(|c| c.len()).collect(), budget, "simplex grid points")?;
        Ok(SimplexGrid {
            resolution,
            clusters,
            radix,
        })
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.radix.size()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cluster_len(&self, j: usize) -> usize {
        self.clusters[j].len()
    }

    pub fn radix(&self) -> &MixedRadix {
        &self.radix
    }

    pub fn counts(&self, idx: usize) -> Vec<Vec<u32>> {
        self.radix.digits(idx).iter().zip(&self.clusters).map(|(&d, c)| c.get(d)).collect()
    }

    pub fn point(&self, idx: usize) -> MeasureArray {
        let k = self.resolution as f64;
        MeasureArray::new(
            self.counts(idx)
                .iter()
                .map(|c| SimplexVector::from_raw(c.iter().map(|&v| v as f64 / k).collect()))
                .collect(),
        )
        .expect("non-empty")
    }

    pub fn index_of_counts(&self, counts: &[Vec<u32>]) -> usize {
        let digits: Vec<usize> = counts.iter().zip(&self.clusters).map(|(c, s)| s.rank(c)).collect();
        self.radix.encode(&digits)
    }

    /// Largest-remainder rounding of `K p` within cluster `j`; ties go to the lower state.
    pub fn nearest_cluster(&self, j: usize, p: &[f64]) -> usize {
        let k = self.resolution;
        let scaled: Vec<f64> = p.iter().map(|&q| q.max(0.0) * k as f64).collect();
        let mut v: Vec<u32> = scaled.iter().map(|s| (s + 1e-9).floor() as u32).collect();
        let mut used: u32 = v.iter().sum();
        while used > k {
            let i = (0..v.len()).filter(|&i| v[i] > 0).max_by(|&a, &b| v[a].cmp(&v[b]).then(b.cmp(&a))).expect("positive entry");
            v[i] -= 1;
            used -= 1;
        }
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = scaled[a] - v[a] as f64;
            let fb = scaled[b] - v[b] as f64;
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().cycle().take((k - used) as usize) {
            v[i] += 1;
        }
        self.clusters[j].rank(&v)
    }

    /// Index of the grid point nearest to `mu`, cluster by cluster.
    pub fn nearest(&self, mu: &MeasureArray) -> usize {
        let digits: Vec<usize> = (0..self.clusters.len()).map(|j| self.nearest_cluster(j, mu.cluster(j).as_slice())).collect();
        self.radix.encode(&digits)
    }

    /// Barycentric weights of `p` on the Kuhn simplex of cluster `j` containing it.
    /// Vertices with zero weight are omitted.
    pub fn kuhn_stencil(&self, j: usize, p: &[f64]) -> Vec<(usize, f64)> {
        let n = p.len();
        let k = self.resolution as f64;
        let d = n - 1;
        if d == 0 {
            return vec![(0, 1.0)];
        }
        // cumulative coordinates s_i = K (p_0 + .. + p_{i-1}), i = 1..n-1
        let mut s = Vec::with_capacity(d);
        let mut acc = 0.0;
        for &q in &p[..d] {
            acc += q;
            let mut v = (acc * k).clamp(0.0, k);
            let r = v.round();
            if (v - r).abs() < 1e-9 {
                v = r;
            }
            s.push(v);
        }
        let base: Vec<i64> = s.iter().map(|v| v.floor() as i64).collect();
        let frac: Vec<f64> = s.iter().zip(&base).map(|(v, b)| v - *b as f64).collect();
        let mut order: Vec<usize> = (0..d).collect();
        // descending fractional part, ties to the higher coordinate
        order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(b.cmp(&a)));
        let mut out = Vec::with_capacity(n);
        let mut vertex = base.clone();
        let mut prev = 1.0;
        for step in 0..=d {
            let next = if step < d { frac[order[step]] } else { 0.0 };
            let w = prev - next;
            if w > 0.0 {
                out.push((self.rank_cumulative(j, &vertex), w));
            }
            if step < d {
                vertex[order[step]] += 1;
            }
            prev = next;
        }
        out
    }

    fn rank_cumulative(&self, j: usize, s: &[i64]) -> usize {
        let k = self.resolution as i64;
        let mut v = Vec::with_capacity(s.len() + 1);
        let mut last = 0;
        for &c in s {
            v.push((c - last) as u32);
            last = c;
        }
        v.push((k - last) as u32);
        self.clusters[j].rank(&v)
    }

    /// Per-cluster interpolation stencil in the given mode.
    pub fn stencil(&self, j: usize, p: &[f64], mode: Interpolation) -> Vec<(usize, f64)> {
        match mode {
            Interpolation::Kuhn => self.kuhn_stencil(j, p),
            Interpolation::Nearest => vec![(self.nearest_cluster(j, p), 1.0)],
        }
    }
}

/// Off-grid evaluation rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// Piecewise-linear on the Kuhn triangulation, tensor product across clusters.
    #[default]
    Kuhn,
    /// Value at the nearest grid point.
    Nearest,
}

/// Value of a grid table at an arbitrary measure array.
pub fn interpolate(grid: &SimplexGrid, values: &[f64], mu: &MeasureArray, mode: Interpolation) -> f64 {
    let mut terms = vec![(0usize, 1.0f64)];
    for j in 0..grid.clusters.len() {
        let stride = grid.radix.strides()[j];
        let st = grid.stencil(j, mu.cluster(j).as_slice(), mode);
        terms = terms
            .iter()
            .flat_map(|&(i, w)| st.iter().map(move |&(g, v)| (i + g * stride, w * v)))
            .collect();
    }
    terms.iter().map(|&(i, w)| w * values[i]).sum()
}

/// Candidate decision kernels: every row on the resolution-`L` grid over actions.
#[derive(Clone, Debug)]
pub struct ActionGrid {
    resolution: u32,
    xs: Vec<usize>,
    rows: Vec<CompositionSpace>,
    // per cluster: one factor per state
    cluster_radix: Vec<MixedRadix>,
    radix: MixedRadix,
}

impl ActionGrid {
    pub fn new(spec: &TeamSpec, resolution: u32) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::invalid("action-grid", "resolution must be positive"));
        }
        let rows: Vec<CompositionSpace> = spec.action_sizes().iter().map(|&n| CompositionSpace::new(resolution, n)).collect();
        let cluster_radix = spec
            .state_sizes()
            .iter()
            .zip(&rows)
            .map(|(&nx, r)| MixedRadix::new(vec![r.len(); nx], u128::from(u64::MAX), "cluster action candidates"))
            .collect::<Result<Vec<_>>>()?;
        let radix = MixedRadix::new(cluster_radix.iter().map(|r| r.size()).collect(), u128::from(u64::MAX), "action candidates")?;
        Ok(ActionGrid {
            resolution,
            xs: spec.state_sizes().to_vec(),
            rows,
            cluster_radix,
            radix,
        })
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    /// Number of joint candidates.
    pub fn len(&self) -> usize {
        self.radix.size()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cluster_len(&self, j: usize) -> usize {
        self.cluster_radix[j].size()
    }

    pub fn radix(&self) -> &MixedRadix {
        &self.radix
    }

    fn row(&self, j: usize, digit: usize) -> Vec<f64> {
        let l = self.resolution as f64;
        self.rows[j].get(digit).iter().map(|&c| c as f64 / l).collect()
    }

    /// Kernel of cluster `j` with cluster-candidate index `c`.
    pub fn cluster_kernel(&self, j: usize, c: usize) -> Vec<Vec<f64>> {
        self.cluster_radix[j].digits(c).iter().map(|&d| self.row(j, d)).collect()
    }

    pub fn candidate(&self, idx: usize) -> KernelAction {
        KernelAction(
            self.radix
                .digits(idx)
                .iter()
                .enumerate()
                .map(|(j, &c)| self.cluster_kernel(j, c))
                .collect(),
        )
    }
}

/// Solved mean-field problem on a grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeanFieldSolution {
    pub grid_resolution: u32,
    pub action_resolution: u32,
    pub horizon: Horizon,
    pub tol: Option<f64>,
    pub interpolation: Interpolation,
    pub iterations: usize,
    pub successive_diffs: Vec<f64>,
    /// `values[t][grid index]`; one table for the infinite horizon.
    pub values: Vec<Vec<f64>>,
    /// `policy[t][grid index]` is an index into the [`ActionGrid`].
    pub policy: Vec<Vec<usize>>,
}

// Per grid point and cluster: every candidate kernel with its cost share and
// interpolation stencil of the resulting cluster measure.
struct ClusterCandidates {
    full_index: Vec<usize>,
    cost: Vec<f64>,
    // width entries per candidate; padded with weight 0
    stencil_idx: Vec<u32>,
    stencil_w: Vec<f64>,
    width: usize,
}

/// Grids plus per-point candidate data, reusable across sweeps.
pub struct MeanFieldModel {
    grid: SimplexGrid,
    actions: ActionGrid,
    beta: f64,
    mode: Interpolation,
    prepared: Vec<Vec<ClusterCandidates>>,
}

impl MeanFieldModel {
    pub fn new(spec: &TeamSpec, k: u32, l: u32, mode: Interpolation, budget: u128) -> Result<Self> {
        let grid = SimplexGrid::new(spec.state_sizes(), k, budget)?;
        let actions = ActionGrid::new(spec, l)?;
        let per_point: u128 = (0..spec.clusters()).map(|j| actions.cluster_len(j) as u128).sum();
        check_budget("grid point candidate pairs", grid.len() as u128 * per_point, budget)?;
        let prepared = (0..grid.len())
            .into_par_iter()
            .map(|g| prepare_point(spec, &grid, &actions, mode, g))
            .collect();
        Ok(MeanFieldModel {
            grid,
            actions,
            beta: spec.beta(),
            mode,
            prepared,
        })
    }

    pub fn grid(&self) -> &SimplexGrid {
        &self.grid
    }

    pub fn actions(&self) -> &ActionGrid {
        &self.actions
    }

    pub fn interpolation(&self) -> Interpolation {
        self.mode
    }

    fn buffers(&self) -> Vec<Vec<f64>> {
        // bufs[j] holds the tensor over clusters j.. for j >= 1
        let m = self.grid.clusters.len();
        (0..m)
            .map(|j| vec![0.0; if j == 0 { 0 } else { (j..m).map(|i| self.grid.cluster_len(i)).product() }])
            .collect()
    }

    // Minimum over candidates of clusters j.. of cost + beta * contraction.
    // Returns the value and the lowest minimizing index restricted to those clusters.
    // `bufs[0]` receives the tensor over clusters j+1.., and so on.
    fn min_rec(&self, g: usize, j: usize, tensor: &[f64], bufs: &mut [Vec<f64>]) -> (f64, usize) {
        let m = self.grid.clusters.len();
        let cands = &self.prepared[g][j];
        let stride = self.actions.radix.strides()[j];
        let w = cands.width;
        let mut best = (f64::INFINITY, 0);
        if j + 1 == m {
            for c in 0..cands.cost.len() {
                let mut e = 0.0;
                for k in c * w..(c + 1) * w {
                    e += cands.stencil_w[k] * tensor[cands.stencil_idx[k] as usize];
                }
                let v = cands.cost[c] + self.beta * e;
                if v < best.0 {
                    best = (v, cands.full_index[c] * stride);
                }
            }
            return best;
        }
        let rest = tensor.len() / self.grid.cluster_len(j);
        let (next, tail) = bufs.split_first_mut().expect("buffer per remaining cluster");
        for c in 0..cands.cost.len() {
            next.iter_mut().for_each(|x| *x = 0.0);
            for k in c * w..(c + 1) * w {
                let wk = cands.stencil_w[k];
                if wk == 0.0 {
                    continue;
                }
                let off = cands.stencil_idx[k] as usize * rest;
                for (o, &t) in next.iter_mut().zip(&tensor[off..off + rest]) {
                    *o += wk * t;
                }
            }
            let t: &[f64] = next;
            let (sub, sub_idx) = self.min_rec(g, j + 1, t, tail);
            let v = cands.cost[c] + sub;
            if v < best.0 {
                best = (v, cands.full_index[c] * stride + sub_idx);
            }
        }
        best
    }

    /// One application of the grid Bellman operator: new table and argmin candidates.
    pub fn bellman_apply(&self, v: &[f64]) -> (Vec<f64>, Vec<usize>) {
        (0..self.grid.len())
            .into_par_iter()
            .map_init(|| self.buffers(), |bufs, g| self.min_rec(g, 0, v, &mut bufs[1..]))
            .unzip()
    }
}

fn prepare_point(spec: &TeamSpec, grid: &SimplexGrid, actions: &ActionGrid, mode: Interpolation, g: usize) -> Vec<ClusterCandidates> {
    let mu = grid.point(g);
    let tables = spec.stage_at(&mu);
    (0..spec.clusters())
        .map(|j| {
            let mu_j = mu.cluster(j).as_slice();
            let nx = actions.xs[j];
            let row_space = &actions.rows[j];
            // rows of zero-mass states are pinned to the first candidate row
            let free: Vec<usize> = (0..nx).map(|x| if mu_j[x] > 0.0 { row_space.len() } else { 1 }).collect();
            let local = MixedRadix::new(free, u128::MAX, "candidates").expect("unbounded");
            let width = if mode == Interpolation::Nearest { 1 } else { nx };
            let mut out = ClusterCandidates {
                full_index: Vec::with_capacity(local.size()),
                cost: Vec::with_capacity(local.size()),
                stencil_idx: Vec::with_capacity(local.size() * width),
                stencil_w: Vec::with_capacity(local.size() * width),
                width,
            };
            let mut next = vec![0.0; nx];
            for c in 0..local.size() {
                let digits = local.digits(c);
                let full = actions.cluster_radix[j].encode(&digits);
                let pi: Vec<Vec<f64>> = digits.iter().map(|&d| actions.row(j, d)).collect();
                cluster_flow(&tables, j, mu_j, &pi, &mut next);
                let st = grid.stencil(j, &next, mode);
                out.full_index.push(full);
                out.cost.push(cluster_stage_cost(&tables, j, mu_j, &pi));
                for k in 0..width {
                    let (i, w) = st.get(k).copied().unwrap_or((0, 0.0));
                    out.stencil_idx.push(i as u32);
                    out.stencil_w.push(w);
                }
            }
            out
        })
        .collect()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `ceil(log(M c_max / ((1 - beta) eta)) / log(1 / beta)) + 1` with `eta` the stopping threshold.
pub fn iteration_bound(spec: &TeamSpec, tol: f64) -> usize {
    let beta = spec.beta();
    let eta = crate::exact::stopping_threshold(tol, beta);
    let scale = spec.clusters() as f64 * spec.max_cluster_cost() / ((1.0 - beta) * eta);
    if scale <= 1.0 {
        return 1;
    }
    (scale.ln() / (1.0 / beta).ln()).ceil() as usize + 1
}

/// Value iteration from zero to sup-norm error `tol` on the `(K, L)` grids.
pub fn value_iteration(spec: &TeamSpec, k: u32, l: u32, tol: f64, mode: Interpolation, budget: u128) -> Result<MeanFieldSolution> {
    let model = MeanFieldModel::new(spec, k, l, mode, budget)?;
    value_iteration_with(&model, tol)
}

pub fn value_iteration_with(model: &MeanFieldModel, tol: f64) -> Result<MeanFieldSolution> {
    if tol <= 0.0 {
        return Err(Error::invalid("tol", "tolerance must be positive"));
    }
    let threshold = crate::exact::stopping_threshold(tol, model.beta);
    let mut v = vec![0.0; model.grid.len()];
    let mut diffs = Vec::new();
    loop {
        let (next, policy) = model.bellman_apply(&v);
        let d = sup_diff(&next, &v);
        diffs.push(d);
        v = next;
        if d <= threshold {
            return Ok(MeanFieldSolution {
                grid_resolution: model.grid.resolution,
                action_resolution: model.actions.resolution,
                horizon: Horizon::Infinite,
                tol: Some(tol),
                interpolation: model.mode,
                iterations: diffs.len(),
                successive_diffs: diffs,
                values: vec![v],
                policy: vec![policy],
            });
        }
    }
}

/// `T` backward sweeps on the `(K, L)` grids.
pub fn finite_horizon_dp(spec: &TeamSpec, k: u32, l: u32, horizon: usize, mode: Interpolation, budget: u128) -> Result<MeanFieldSolution> {
    let model = MeanFieldModel::new(spec, k, l, mode, budget)?;
    Ok(finite_horizon_dp_with(&model, horizon))
}

pub fn finite_horizon_dp_with(model: &MeanFieldModel, horizon: usize) -> MeanFieldSolution {
    let mut values = vec![Vec::new(); horizon];
    let mut policy = vec![Vec::new(); horizon];
    let mut next = vec![0.0; model.grid.len()];
    for t in (0..horizon).rev() {
        let (v, p) = model.bellman_apply(&next);
        values[t] = v.clone();
        policy[t] = p;
        next = v;
    }
    MeanFieldSolution {
        grid_resolution: model.grid.resolution,
        action_resolution: model.actions.resolution,
        horizon: Horizon::Finite(horizon),
        tol: None,
        interpolation: model.mode,
        iterations: horizon,
        successive_diffs: Vec::new(),
        values,
        policy,
    }
}

impl MeanFieldSolution {
    pub fn grids(&self, spec: &TeamSpec) -> Result<(SimplexGrid, ActionGrid)> {
        Ok((
            SimplexGrid::new(spec.state_sizes(), self.grid_resolution, u128::MAX)?,
            ActionGrid::new(spec, self.action_resolution)?,
        ))
    }

    /// Interpolated value of the first table at `mu`.
    pub fn value_at(&self, spec: &TeamSpec, mu: &MeasureArray) -> Result<f64> {
        mu.check_shape(spec.state_sizes())?;
        let (grid, _) = self.grids(spec)?;
        Ok(interpolate(&grid, &self.values[0], mu, self.interpolation))
    }

    fn table(&self, t: usize) -> &[usize] {
        match self.horizon {
            Horizon::Infinite => &self.policy[0],
            Horizon::Finite(_) => &self.policy[t.min(self.policy.len() - 1)],
        }
    }
}

/// Greedy mean-field policy: the stored kernel at the grid point nearest to the current measure.
pub struct GridPolicy<'a> {
    solution: &'a MeanFieldSolution,
    grid: SimplexGrid,
    actions: ActionGrid,
}

impl<'a> GridPolicy<'a> {
    pub fn new(spec: &TeamSpec, solution: &'a MeanFieldSolution) -> Result<Self> {
        let (grid, actions) = solution.grids(spec)?;
        Ok(GridPolicy { solution, grid, actions })
    }

    pub fn action(&self, t: usize, mu: &MeasureArray) -> KernelAction {
        let g = self.grid.nearest(mu);
        self.actions.candidate(self.solution.table(t)[g])
    }

    pub fn grid(&self) -> &SimplexGrid {
        &self.grid
    }

    pub fn actions(&self) -> &ActionGrid {
        &self.actions
    }
}

/// One step of a mean-field trajectory.
#[derive(Clone, Debug, Serialize)]
pub struct FlowStep {
    pub t: usize,
    pub mu: MeasureArray,
    pub action: KernelAction,
    pub stage_cost: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlowRollout {
    pub steps: Vec<FlowStep>,
    /// `sum_t beta^t` stage cost along the trajectory.
    pub discounted_cost: f64,
}

impl FlowRollout {
    pub fn measures(&self) -> Vec<MeasureArray> {
        self.steps.iter().map(|s| s.mu.clone()).collect()
    }
}

/// Number of steps after which the discounted tail is below [`TRUNCATION`].
pub fn effective_horizon(spec: &TeamSpec) -> usize {
    let beta = spec.beta();
    let scale = spec.clusters() as f64 * spec.max_cluster_cost() / (1.0 - beta);
    if scale <= TRUNCATION || beta == 0.0 {
        return 1;
    }
    ((TRUNCATION / scale).ln() / beta.ln()).ceil().max(1.0) as usize
}

/// Deterministic trajectory of the greedy policy from `nu0`, with its exact cost.
/// An infinite horizon is truncated at [`effective_horizon`].
pub fn rollout_flow(spec: &TeamSpec, solution: &MeanFieldSolution, nu0: &MeasureArray, horizon: Horizon) -> Result<FlowRollout> {
    nu0.check_shape(spec.state_sizes())?;
    let policy = GridPolicy::new(spec, solution)?;
    let steps = match horizon {
        Horizon::Finite(t) => t,
        Horizon::Infinite => effective_horizon(spec),
    };
    Ok(rollout_with(spec, nu0, steps, |t, mu| policy.action(t, mu)))
}

/// Trajectory of an arbitrary measure-feedback kernel rule.
pub fn rollout_with(spec: &TeamSpec, nu0: &MeasureArray, steps: usize, mut rule: impl FnMut(usize, &MeasureArray) -> KernelAction) -> FlowRollout {
    let mut mu = nu0.clone();
    let mut out = Vec::with_capacity(steps);
    let mut total = 0.0;
    let mut disc = 1.0;
    for t in 0..steps {
        let action = rule(t, &mu);
        let tables = spec.stage_at(&mu);
        let cost: f64 = (0..spec.clusters())
            .map(|j| cluster_stage_cost(&tables, j, mu.cluster(j).as_slice(), action.cluster(j)))
            .sum();
        total += disc * cost;
        disc *= spec.beta();
        let next = flow_at(spec, &tables, &mu, &action);
        out.push(FlowStep {
            t,
            mu: std::mem::replace(&mut mu, next),
            action,
            stage_cost: cost,
        });
    }
    FlowRollout {
        steps: out,
        discounted_cost: total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combinatorics::composition_count;
    use crate::empirical::{hat_cost, EmpiricalAction, EmpiricalState};
    use crate::generate::{random_measure, random_simplex, random_spec, with_constant_cost, with_identity_kernels, SpecShape};
    use crate::model::PopulationLayout;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(seed: u64, shape: SpecShape) -> TeamSpec {
        random_spec(&mut ChaCha8Rng::seed_from_u64(seed), &shape)
    }

    fn random_action<R: Rng>(rng: &mut R, spec: &TeamSpec) -> KernelAction {
        let rows = (0..spec.clusters())
            .map(|j| (0..spec.state_sizes()[j]).map(|_| random_simplex(rng, spec.action_sizes()[j])).collect())
            .collect();
        KernelAction::new(spec, rows).unwrap()
    }

    #[test]
    fn identity_kernels_fix_the_measure() {
        let s = with_identity_kernels(&spec(1, SpecShape::binary(2)));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mu = random_measure(&mut rng, s.state_sizes());
        let a = random_action(&mut rng, &s);
        let out = flow(&s, &mu, &a).unwrap();
        for (p, q) in out.iter().zip(mu.iter()) {
            for (x, y) in p.as_slice().iter().zip(q.as_slice()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn point_mass_flow_is_kernel_row() {
        let s = spec(2, SpecShape { state_sizes: vec![3, 2], action_sizes: vec![2, 2] });
        let mu = MeasureArray::new(vec![SimplexVector::point_mass(3, 2), SimplexVector::uniform(2)]).unwrap();
        let a = KernelAction::constant(&s, &[1, 0]).unwrap();
        let out = flow(&s, &mu, &a).unwrap();
        let row = s.eval_kernel(0, 2, 1, &mu).unwrap();
        for (x, y) in out.cluster(0).as_slice().iter().zip(row.as_slice()) {
            assert!((x - y).abs() < 1e-15);
        }
        let c = mf_stage_cost(&s, &mu, &a).unwrap();
        let want = s.eval_cost(0, 2, 1, &mu).unwrap() + 0.5 * (s.eval_cost(1, 0, 0, &mu).unwrap() + s.eval_cost(1, 1, 0, &mu).unwrap());
        assert!((c - want).abs() < 1e-14);
    }

    #[test]
    fn flow_matches_triple_sum() {
        let s = spec(3, SpecShape::binary(2));
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..50 {
            let mu = random_measure(&mut rng, s.state_sizes());
            let a = random_action(&mut rng, &s);
            let out = flow(&s, &mu, &a).unwrap();
            for j in 0..2 {
                for xp in 0..2 {
                    let mut want = 0.0;
                    for x in 0..2 {
                        for u in 0..2 {
                            want += s.eval_kernel(j, x, u, &mu).unwrap()[xp] * a.cluster(j)[x][u] * mu.cluster(j)[x];
                        }
                    }
                    assert!((out.cluster(j)[xp] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_cost_stage() {
        let s = with_constant_cost(&spec(4, SpecShape::binary(2)), 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mu = random_measure(&mut rng, s.state_sizes());
        let a = random_action(&mut rng, &s);
        assert!((mf_stage_cost(&s, &mu, &a).unwrap() - 1.4).abs() < 1e-14);
    }

    #[test]
    fn stage_cost_matches_hat_cost_on_count_points() {
        let s = spec(5, SpecShape { state_sizes: vec![2, 3], action_sizes: vec![3, 2] });
        let layout = PopulationLayout::new(vec![4, 2]).unwrap();
        let st = EmpiricalState::new(&s, &layout, vec![vec![2, 2], vec![0, 1, 1]]).unwrap();
        // pi rows are multiples of 1/2, so theta = pi * counts is integral
        let a = KernelAction::new(
            &s,
            vec![
                vec![vec![0.5, 0.5, 0.0], vec![0.0, 0.0, 1.0]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]],
            ],
        )
        .unwrap();
        let theta = EmpiricalAction {
            joint_counts: vec![vec![vec![1, 1, 0], vec![0, 0, 2]], vec![vec![0, 0], vec![0, 1], vec![1, 0]]],
        };
        let c = mf_stage_cost(&s, &st.measure(), &a).unwrap();
        assert!((c - hat_cost(&s, &st, &theta).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn grid_sizes_and_points() {
        for k in 1..7u32 {
            let g = SimplexGrid::new(&[2, 3], k, u128::MAX).unwrap();
            assert_eq!(g.cluster_len(0) as u128, composition_count(k as u64, 2));
            assert_eq!(g.cluster_len(1) as u128, composition_count(k as u64, 3));
            for i in 0..g.len() {
                let p = g.point(i);
                assert_eq!(g.nearest(&p), i);
            }
        }
    }

    #[test]
    fn interpolation_is_exact_on_grid_and_constants() {
        let g = SimplexGrid::new(&[3, 2], 5, u128::MAX).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table: Vec<f64> = (0..g.len()).map(|_| rng.random()).collect();
        for i in 0..g.len() {
            assert_eq!(interpolate(&g, &table, &g.point(i), Interpolation::Kuhn), table[i]);
        }
        let flat = vec![2.5; g.len()];
        for _ in 0..100 {
            let mu = random_measure(&mut rng, &[3, 2]);
            assert!((interpolate(&g, &flat, &mu, Interpolation::Kuhn) - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_reproduces_affine_functions() {
        let sizes = [3, 4];
        let g = SimplexGrid::new(&sizes, 6, u128::MAX).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let coef: Vec<Vec<f64>> = sizes.iter().map(|&n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        // separately affine in each cluster: sum_j <a_j, mu_j> plus a product term
        let f = |mu: &MeasureArray| {
            let parts: Vec<f64> = (0..2).map(|j| coef[j].iter().zip(mu.cluster(j).as_slice()).map(|(a, b)| a * b).sum()).collect();
            parts[0] + parts[1] + parts[0] * parts[1]
        };
        let table: Vec<f64> = (0..g.len()).map(|i| f(&g.point(i))).collect();
        for _ in 0..100 {
            let mu = random_measure(&mut rng, &sizes);
            assert!((interpolate(&g, &table, &mu, Interpolation::Kuhn) - f(&mu)).abs() < 1e-12);
        }
    }

    #[test]
    fn kuhn_weights_are_barycentric() {
        let g = SimplexGrid::new(&[4], 7, u128::MAX).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let p = random_simplex(&mut rng, 4);
            let st = g.kuhn_stencil(0, &p);
            assert!(st.len() <= 4);
            assert!((st.iter().map(|s| s.1).sum::<f64>() - 1.0).abs() < 1e-12);
            let mut recon = [0.0; 4];
            for &(i, w) in &st {
                for (r, v) in recon.iter_mut().zip(g.point(i).cluster(0).as_slice()) {
                    *r += w * v;
                }
            }
            for (a, b) in recon.iter().zip(&p) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // boundary points stay on the boundary face
        let st = g.kuhn_stencil(0, &[0.0, 0.5, 0.5, 0.0]);
        for (i, _) in st {
            let c = g.counts(i);
            assert_eq!(c[0][0], 0);
            assert_eq!(c[0][3], 0);
        }
    }

    #[test]
    fn action_grid_candidates_are_valid() {
        let s = spec(9, SpecShape { state_sizes: vec![2, 3], action_sizes: vec![3, 2] });
        let a = ActionGrid::new(&s, 2).unwrap();
        assert_eq!(a.cluster_len(0), 6 * 6);
        assert_eq!(a.cluster_len(1), 3 * 3 * 3);
        for idx in (0..a.len()).step_by(37) {
            let k = a.candidate(idx);
            assert!(KernelAction::new(&s, k.rows().to_vec()).is_ok());
        }
    }

    #[test]
    fn constant_cost_values() {
        let s = with_constant_cost(&spec(10, SpecShape::binary(2)), 0.5);
        let sol = value_iteration(&s, 4, 2, 1e-10, Interpolation::Kuhn, DEFAULT_BUDGET).unwrap();
        for v in &sol.values[0] {
            assert!((v - 1.0 / (1.0 - 0.9)).abs() <= 1e-9);
        }
        assert!(sol.iterations <= iteration_bound(&s, 1e-10));
    }

    #[test]
    fn myopic_limit() {
        let s = spec(11, SpecShape::binary(2)).with_beta(1e-6).unwrap();
        let sol = value_iteration(&s, 4, 4, 1e-8, Interpolation::Kuhn, DEFAULT_BUDGET).unwrap();
        let (grid, actions) = sol.grids(&s).unwrap();
        for g in 0..grid.len() {
            let mu = grid.point(g);
            let best = (0..actions.len())
                .map(|a| mf_stage_cost(&s, &mu, &actions.candidate(a)).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert!((sol.values[0][g] - best).abs() < 1e-5);
        }
    }

    #[test]
    fn nested_minimum_matches_flat_enumeration() {
        for mode in [Interpolation::Kuhn, Interpolation::Nearest] {
            let s = spec(12, SpecShape { state_sizes: vec![2, 3], action_sizes: vec![2, 2] });
            let model = MeanFieldModel::new(&s, 3, 2, mode, DEFAULT_BUDGET).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(120);
            let v: Vec<f64> = (0..model.grid().len()).map(|_| rng.random::<f64>() * 5.0).collect();
            let (nv, pol) = model.bellman_apply(&v);
            for g in 0..model.grid().len() {
                let mu = model.grid().point(g);
                let mut best = (f64::INFINITY, 0);
                for a in 0..model.actions().len() {
                    let act = model.actions().candidate(a);
                    let q = mf_stage_cost(&s, &mu, &act).unwrap() + s.beta() * interpolate(model.grid(), &v, &flow(&s, &mu, &act).unwrap(), mode);
                    if q < best.0 - 1e-12 {
                        best = (q, a);
                    }
                }
                assert!((nv[g] - best.0).abs() < 1e-12);
                let act = model.actions().candidate(pol[g]);
                let q = mf_stage_cost(&s, &mu, &act).unwrap() + s.beta() * interpolate(model.grid(), &v, &flow(&s, &mu, &act).unwrap(), mode);
                assert!((q - best.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bellman_operator_is_monotone_and_contracting() {
        let s = spec(13, SpecShape::binary(2));
        let model = MeanFieldModel::new(&s, 6, 3, Interpolation::Kuhn, DEFAULT_BUDGET).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(130);
        for _ in 0..5 {
            let v: Vec<f64> = (0..model.grid().len()).map(|_| rng.random::<f64>() * 3.0).collect();
            let w: Vec<f64> = v.iter().map(|x| x + rng.random::<f64>()).collect();
            let (tv, _) = model.bellman_apply(&v);
            let (tw, _) = model.bellman_apply(&w);
            assert!(tv.iter().zip(&tw).all(|(a, b)| *a <= *b + 1e-12));
            assert!(sup_diff(&tv, &tw) <= s.beta() * sup_diff(&v, &w) + 1e-12);
        }
        let sol = value_iteration_with(&model, 1e-7).unwrap();
        for w in sol.successive_diffs.windows(2) {
            assert!(w[1] <= (s.beta() + 1e-9) * w[0] + 1e-13);
        }
        assert!(sol.iterations <= iteration_bound(&s, 1e-7));
    }

    #[test]
    fn finite_horizon_examples() {
        let s = spec(14, SpecShape::binary(2));
        let one = finite_horizon_dp(&s, 4, 2, 1, Interpolation::Kuhn, DEFAULT_BUDGET).unwrap();
        let (grid, actions) = one.grids(&s).unwrap();
        for g in 0..grid.len() {
            let mu = grid.point(g);
            let best = (0..actions.len())
                .map(|a| mf_stage_cost(&s, &mu, &actions.candidate(a)).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert!((one.values[0][g] - best).abs() < 1e-12);
        }
        let three = finite_horizon_dp(&s, 4, 2, 3, Interpolation::Kuhn, DEFAULT_BUDGET).unwrap();
        for t in 1..3 {
            for g in 0..grid.len() {
                assert!(three.values[t][g] <= three.values[t - 1][g] + 1e-12);
            }
        }
    }

    #[test]
    fn rollout_examples() {
        let s = with_identity_kernels(&spec(15, SpecShape::binary(2)));
        let sol = value_iteration(&s, 4, 2, 1e-6, Interpolation::Kuhn, DEFAULT_BUDGET).unwrap();
        let r = rollout_flow(&s, &sol, s.nu0(), Horizon::Finite(6)).unwrap();
        for step in &r.steps {
            for (p, q) in step.mu.iter().zip(s.nu0().iter()) {
                for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
        let c = with_constant_cost(&s, 1.0);
        let sol = value_iteration(&c, 4, 2, 1e-6, Interpolation::Kuhn, DEFAULT_BUDGET).unwrap();
        let r = rollout_flow(&c, &sol, c.nu0(), Horizon::Infinite).unwrap();
        assert!((r.discounted_cost - 20.0).abs() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn flow_output_is_a_measure(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = SpecShape::random(&mut rng);
            let s = random_spec(&mut rng, &shape);
            let mu = random_measure(&mut rng, s.state_sizes());
            let a = random_action(&mut rng, &s);
            let out = flow(&s, &mu, &a).unwrap();
            for p in out.iter() {
                prop_assert!(p.as_slice().iter().all(|&x| x >= 0.0));
                prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
