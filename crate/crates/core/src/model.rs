//! Team instances: clusters, measure-coupled kernels and costs, populations.
//!
//! Kernels and costs are affine in the array of cluster measures:
//!
//! ```text
//! T_j(x' | x, u, mu) = (1 - eps_j) A_j[x][u][x'] + eps_j sum_l w_j[l] sum_y mu_l(y) B_jl[x][u][y][x']
//! c_j(x, u, mu)      = base_j[x][u] + sum_l kappa_jl sum_y mu_l(y) g_jl[x][y]
//! ```

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::measure::{MeasureArray, SimplexVector, PROB_TOL};

pub const FORMAT_VERSION: &str = "1";

/// Planning horizon of a team problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Horizon {
    Finite(usize),
    Infinite,
}

impl Horizon {
    pub fn is_infinite(self) -> bool {
        matches!(self, Horizon::Infinite)
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Horizon::Finite(t) => write!(f, "{t}"),
            Horizon::Infinite => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for Horizon {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "inf" | "infinite" => Ok(Horizon::Infinite),
            _ => match s.parse::<usize>() {
                Ok(t) if t >= 1 => Ok(Horizon::Finite(t)),
                _ => Err(format!("horizon must be a positive integer or 'inf', got '{s}'")),
            },
        }
    }
}

impl Serialize for Horizon {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Horizon::Finite(t) => s.serialize_u64(*t as u64),
            Horizon::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Horizon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Steps(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Steps(0) => Err(serde::de::Error::custom("horizon must be at least 1")),
            Raw::Steps(t) => Ok(Horizon::Finite(t as usize)),
            Raw::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Measure-coupled transition kernels, as nested arrays.
///
/// `base[j][x][u][x']`, `interaction[j][l][x][u][y][x']`, `mix[j]`, `neighbor_weights[j][l]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelFamily {
    pub base: Vec<Vec<Vec<Vec<f64>>>>,
    pub interaction: Vec<Vec<Vec<Vec<Vec<Vec<f64>>>>>>,
    pub mix: Vec<f64>,
    pub neighbor_weights: Vec<Vec<f64>>,
}

/// Measure-coupled stage costs: `base[j][x][u]`, `interaction[j][l][x][y]`, `weights[j][l]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostFamily {
    pub base: Vec<Vec<Vec<f64>>>,
    pub interaction: Vec<Vec<Vec<Vec<f64>>>>,
    pub weights: Vec<Vec<f64>>,
}

/// JSON document form of a [`TeamSpec`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeamSpecDoc {
    #[serde(default)]
    pub format_version: Option<String>,
    #[serde(rename = "M")]
    pub clusters: usize,
    pub state_sizes: Vec<usize>,
    pub action_sizes: Vec<usize>,
    pub kernels: KernelFamily,
    pub costs: CostFamily,
    pub beta: f64,
    pub nu0: Vec<Vec<f64>>,
    pub horizon: Horizon,
}

/// A validated team problem.
#[derive(Clone, Debug)]
pub struct TeamSpec {
    doc: TeamSpecDoc,
    xs: Vec<usize>,
    us: Vec<usize>,
    nu0: MeasureArray,
    // flat [x][u][x']
    kernel_base: Vec<Vec<f64>>,
    // flat [x][u][y][x'] per (j, l)
    kernel_inter: Vec<Vec<Vec<f64>>>,
    mix: Vec<f64>,
    neighbor: Vec<SimplexVector>,
    // flat [x][u]
    cost_base: Vec<Vec<f64>>,
    // flat [x][y] per (j, l)
    cost_inter: Vec<Vec<Vec<f64>>>,
    kappa: Vec<Vec<f64>>,
    cluster_cost_bound: Vec<f64>,
}

fn expect_len(path: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        Err(Error::invalid(path, format!("expected {want} entries, found {got}")))
    } else {
        Ok(())
    }
}

fn check_row(path: &str, row: &[f64], want: usize) -> Result<Vec<f64>> {
    expect_len(path, row.len(), want)?;
    Ok(SimplexVector::new(row.to_vec()).map_err(|e| e.at(path))?.into_inner())
}

fn check_nonneg(path: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        Err(Error::invalid(path, format!("expected a finite non-negative number, found {v}")))
    } else {
        Ok(())
    }
}

impl TeamSpec {
    pub fn from_doc(doc: TeamSpecDoc) -> Result<Self> {
        if let Some(v) = &doc.format_version {
            if v != FORMAT_VERSION {
                return Err(Error::invalid(
                    "format_version",
                    format!("unsupported version '{v}', expected '{FORMAT_VERSION}'"),
                ));
            }
        }
        let m = doc.clusters;
        if m == 0 {
            return Err(Error::invalid("M", "at least one cluster is required"));
        }
        expect_len("state_sizes", doc.state_sizes.len(), m)?;
        expect_len("action_sizes", doc.action_sizes.len(), m)?;
        for (j, &n) in doc.state_sizes.iter().enumerate() {
            if n == 0 {
                return Err(Error::invalid(format!("state_sizes[{j}]"), "must be at least 1"));
            }
        }
        for (j, &n) in doc.action_sizes.iter().enumerate() {
            if n == 0 {
                return Err(Error::invalid(format!("action_sizes[{j}]"), "must be at least 1"));
            }
        }
        if !(doc.beta > 0.0 && doc.beta < 1.0) {
            return Err(Error::invalid("beta", format!("discount must lie in (0, 1), found {}", doc.beta)));
        }
        let xs = doc.state_sizes.clone();
        let us = doc.action_sizes.clone();

        let k = &doc.kernels;
        expect_len("kernels.base", k.base.len(), m)?;
        expect_len("kernels.interaction", k.interaction.len(), m)?;
        expect_len("kernels.mix", k.mix.len(), m)?;
        expect_len("kernels.neighbor_weights", k.neighbor_weights.len(), m)?;
        let mut kernel_base = Vec::with_capacity(m);
        let mut kernel_inter = Vec::with_capacity(m);
        let mut neighbor = Vec::with_capacity(m);
        for j in 0..m {
            let p = format!("kernels.base[{j}]");
            expect_len(&p, k.base[j].len(), xs[j])?;
            let mut flat = Vec::with_capacity(xs[j] * us[j] * xs[j]);
            for (x, per_u) in k.base[j].iter().enumerate() {
                expect_len(&format!("{p}[{x}]"), per_u.len(), us[j])?;
                for (u, row) in per_u.iter().enumerate() {
                    flat.extend(check_row(&format!("{p}[{x}][{u}]"), row, xs[j])?);
                }
            }
            kernel_base.push(flat);

            let p = format!("kernels.interaction[{j}]");
            expect_len(&p, k.interaction[j].len(), m)?;
            let mut per_l = Vec::with_capacity(m);
            for (l, tensor) in k.interaction[j].iter().enumerate() {
                let p = format!("{p}[{l}]");
                expect_len(&p, tensor.len(), xs[j])?;
                let mut flat = Vec::with_capacity(xs[j] * us[j] * xs[l] * xs[j]);
                for (x, per_u) in tensor.iter().enumerate() {
                    expect_len(&format!("{p}[{x}]"), per_u.len(), us[j])?;
                    for (u, per_y) in per_u.iter().enumerate() {
                        expect_len(&format!("{p}[{x}][{u}]"), per_y.len(), xs[l])?;
                        for (y, row) in per_y.iter().enumerate() {
                            flat.extend(check_row(&format!("{p}[{x}][{u}][{y}]"), row, xs[j])?);
                        }
                    }
                }
                per_l.push(flat);
            }
            kernel_inter.push(per_l);

            let e = k.mix[j];
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::invalid(format!("kernels.mix[{j}]"), format!("coupling weight must lie in [0, 1], found {e}")));
            }
            let p = format!("kernels.neighbor_weights[{j}]");
            expect_len(&p, k.neighbor_weights[j].len(), m)?;
            neighbor.push(SimplexVector::new(k.neighbor_weights[j].clone()).map_err(|e| e.at(&p))?);
        }

        let c = &doc.costs;
        expect_len("costs.base", c.base.len(), m)?;
        expect_len("costs.interaction", c.interaction.len(), m)?;
        expect_len("costs.weights", c.weights.len(), m)?;
        let mut cost_base = Vec::with_capacity(m);
        let mut cost_inter = Vec::with_capacity(m);
        let mut kappa = Vec::with_capacity(m);
        let mut cluster_cost_bound = Vec::with_capacity(m);
        for j in 0..m {
            let p = format!("costs.base[{j}]");
            expect_len(&p, c.base[j].len(), xs[j])?;
            let mut flat = Vec::with_capacity(xs[j] * us[j]);
            for (x, row) in c.base[j].iter().enumerate() {
                expect_len(&format!("{p}[{x}]"), row.len(), us[j])?;
                for (u, &v) in row.iter().enumerate() {
                    check_nonneg(&format!("{p}[{x}][{u}]"), v)?;
                    flat.push(v);
                }
            }
            let mut bound = flat.iter().cloned().fold(0.0, f64::max);
            cost_base.push(flat);

            let p = format!("costs.interaction[{j}]");
            expect_len(&p, c.interaction[j].len(), m)?;
            let pw = format!("costs.weights[{j}]");
            expect_len(&pw, c.weights[j].len(), m)?;
            let mut per_l = Vec::with_capacity(m);
            for (l, mat) in c.interaction[j].iter().enumerate() {
                let p = format!("{p}[{l}]");
                expect_len(&p, mat.len(), xs[j])?;
                let mut flat = Vec::with_capacity(xs[j] * xs[l]);
                for (x, row) in mat.iter().enumerate() {
                    expect_len(&format!("{p}[{x}]"), row.len(), xs[l])?;
                    for (y, &v) in row.iter().enumerate() {
                        check_nonneg(&format!("{p}[{x}][{y}]"), v)?;
                        flat.push(v);
                    }
                }
                let w = c.weights[j][l];
                check_nonneg(&format!("{pw}[{l}]"), w)?;
                bound += w * flat.iter().cloned().fold(0.0, f64::max);
                per_l.push(flat);
            }
            cost_inter.push(per_l);
            kappa.push(c.weights[j].clone());
            cluster_cost_bound.push(bound);
        }

        expect_len("nu0", doc.nu0.len(), m)?;
        for (j, row) in doc.nu0.iter().enumerate() {
            expect_len(&format!("nu0[{j}]"), row.len(), xs[j])?;
        }
        let nu0 = MeasureArray::from_rows(doc.nu0.clone()).map_err(|e| e.at("nu0"))?;

        Ok(TeamSpec {
            mix: k.mix.clone(),
            doc,
            xs,
            us,
            nu0,
            kernel_base,
            kernel_inter,
            neighbor,
            cost_base,
            cost_inter,
            kappa,
            cluster_cost_bound,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let doc: TeamSpecDoc = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::invalid(if path == "." { String::new() } else { path }, e.into_inner().to_string())
        })?;
        TeamSpec::from_doc(doc)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        TeamSpec::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.doc).expect("instance serializes")
    }

    pub fn doc(&self) -> &TeamSpecDoc {
        &self.doc
    }

    #[inline]
    pub fn clusters(&self) -> usize {
        self.xs.len()
    }

    #[inline]
    pub fn state_sizes(&self) -> &[usize] {
        &self.xs
    }

    #[inline]
    pub fn action_sizes(&self) -> &[usize] {
        &self.us
    }

    #[inline]
    pub fn beta(&self) -> f64 {
        self.doc.beta
    }

    pub fn nu0(&self) -> &MeasureArray {
        &self.nu0
    }

    pub fn horizon(&self) -> Horizon {
        self.doc.horizon
    }

    pub fn kernels(&self) -> &KernelFamily {
        &self.doc.kernels
    }

    pub fn costs(&self) -> &CostFamily {
        &self.doc.costs
    }

    /// Copy of this instance with a different discount, initial law or horizon.
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        let mut doc = self.doc.clone();
        doc.beta = beta;
        TeamSpec::from_doc(doc)
    }

    pub fn with_horizon(&self, horizon: Horizon) -> Self {
        let mut out = self.clone();
        out.doc.horizon = horizon;
        out
    }

    pub fn with_nu0(&self, nu0: MeasureArray) -> Result<Self> {
        let mut doc = self.doc.clone();
        doc.nu0 = nu0.to_rows();
        TeamSpec::from_doc(doc)
    }

    /// Upper bound on `c_j` over all states, actions and measures.
    pub fn cluster_cost_bound(&self, j: usize) -> f64 {
        self.cluster_cost_bound[j]
    }

    /// Largest per-cluster cost bound.
    pub fn max_cluster_cost(&self) -> f64 {
        self.cluster_cost_bound.iter().cloned().fold(0.0, f64::max)
    }

    /// Upper bound on the stagewise team cost, `sum_j max c_j`.
    pub fn stage_cost_bound(&self) -> f64 {
        self.cluster_cost_bound.iter().sum()
    }

    fn check_indices(&self, j: usize, x: usize, u: usize) -> Result<()> {
        if j >= self.clusters() {
            return Err(Error::Index(format!("cluster {j} of {}", self.clusters())));
        }
        if x >= self.xs[j] {
            return Err(Error::Index(format!("state {x} of {} in cluster {j}", self.xs[j])));
        }
        if u >= self.us[j] {
            return Err(Error::Index(format!("action {u} of {} in cluster {j}", self.us[j])));
        }
        Ok(())
    }

    /// Next-state law `T_j(. | x, u, mu)`.
    pub fn eval_kernel(&self, j: usize, x: usize, u: usize, mu: &MeasureArray) -> Result<SimplexVector> {
        self.check_indices(j, x, u)?;
        mu.check_shape(&self.xs)?;
        let mut out = vec![0.0; self.xs[j]];
        self.kernel_row_into(j, x, u, mu, &mut out);
        Ok(SimplexVector::from_raw(out))
    }

    /// Unchecked form of [`eval_kernel`](Self::eval_kernel) writing into `out`.
    pub fn kernel_row_into(&self, j: usize, x: usize, u: usize, mu: &MeasureArray, out: &mut [f64]) {
        let nx = self.xs[j];
        let nu = self.us[j];
        let eps = self.mix[j];
        let base = &self.kernel_base[j][(x * nu + u) * nx..(x * nu + u + 1) * nx];
        for (o, &a) in out.iter_mut().zip(base) {
            *o = (1.0 - eps) * a;
        }
        if eps == 0.0 {
            return;
        }
        for (l, &wl) in self.neighbor[j].as_slice().iter().enumerate() {
            if wl == 0.0 {
                continue;
            }
            let ny = self.xs[l];
            let tensor = &self.kernel_inter[j][l];
            for (y, &my) in mu.cluster(l).as_slice().iter().enumerate() {
                if my == 0.0 {
                    continue;
                }
                let scale = eps * wl * my;
                let off = ((x * nu + u) * ny + y) * nx;
                for (o, &b) in out.iter_mut().zip(&tensor[off..off + nx]) {
                    *o += scale * b;
                }
            }
        }
    }

    /// Stage cost `c_j(x, u, mu)`.
    pub fn eval_cost(&self, j: usize, x: usize, u: usize, mu: &MeasureArray) -> Result<f64> {
        self.check_indices(j, x, u)?;
        mu.check_shape(&self.xs)?;
        Ok(self.cost_unchecked(j, x, u, mu))
    }

    pub fn cost_unchecked(&self, j: usize, x: usize, u: usize, mu: &MeasureArray) -> f64 {
        let mut c = self.cost_base[j][x * self.us[j] + u];
        for (l, &k) in self.kappa[j].iter().enumerate() {
            if k == 0.0 {
                continue;
            }
            let ny = self.xs[l];
            let g = &self.cost_inter[j][l][x * ny..(x + 1) * ny];
            c += k * g.iter().zip(mu.cluster(l).as_slice()).map(|(a, b)| a * b).sum::<f64>();
        }
        c
    }

    /// All kernel rows and costs evaluated at one measure array.
    pub fn stage_at(&self, mu: &MeasureArray) -> StageTables {
        let m = self.clusters();
        let mut kernel = Vec::with_capacity(m);
        let mut cost = Vec::with_capacity(m);
        for j in 0..m {
            let (nx, nu) = (self.xs[j], self.us[j]);
            let mut k = vec![0.0; nx * nu * nx];
            let mut c = vec![0.0; nx * nu];
            for x in 0..nx {
                for u in 0..nu {
                    let off = (x * nu + u) * nx;
                    self.kernel_row_into(j, x, u, mu, &mut k[off..off + nx]);
                    c[x * nu + u] = self.cost_unchecked(j, x, u, mu);
                }
            }
            kernel.push(k);
            cost.push(c);
        }
        StageTables {
            xs: self.xs.clone(),
            us: self.us.clone(),
            kernel,
            cost,
        }
    }
}

/// Kernel rows and costs of every cluster frozen at a fixed measure array.
#[derive(Clone, Debug)]
pub struct StageTables {
    xs: Vec<usize>,
    us: Vec<usize>,
    kernel: Vec<Vec<f64>>,
    cost: Vec<Vec<f64>>,
}

impl StageTables {
    #[inline]
    pub fn row(&self, j: usize, x: usize, u: usize) -> &[f64] {
        let (nx, nu) = (self.xs[j], self.us[j]);
        let off = (x * nu + u) * nx;
        &self.kernel[j][off..off + nx]
    }

    #[inline]
    pub fn cost(&self, j: usize, x: usize, u: usize) -> f64 {
        self.cost[j][x * self.us[j] + u]
    }
}

/// Assignment of `N` agents to clusters. Agents of cluster `j` occupy a
/// contiguous block of indices, clusters in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopulationLayout {
    sizes: Vec<usize>,
    membership: Vec<usize>,
}

impl PopulationLayout {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::invalid("layout", "at least one cluster is required"));
        }
        for (j, &n) in sizes.iter().enumerate() {
            if n == 0 {
                return Err(Error::invalid(format!("layout[{j}]"), "clusters must be non-empty"));
            }
        }
        let membership = sizes
            .iter()
            .enumerate()
            .flat_map(|(j, &n)| std::iter::repeat_n(j, n))
            .collect();
        Ok(PopulationLayout { sizes, membership })
    }

    /// Splits `total` agents as evenly as possible over `clusters`, earlier clusters
    /// taking the remainder.
    pub fn even(total: usize, clusters: usize) -> Result<Self> {
        if total < clusters {
            return Err(Error::invalid("layout", format!("{total} agents cannot fill {clusters} clusters")));
        }
        let sizes = (0..clusters)
            .map(|j| total / clusters + usize::from(j < total % clusters))
            .collect();
        PopulationLayout::new(sizes)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let sizes = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid("layout", format!("'{t}' is not a cluster size")))
            })
            .collect::<Result<Vec<_>>>()?;
        PopulationLayout::new(sizes)
    }

    #[inline]
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    #[inline]
    pub fn total(&self) -> usize {
        self.membership.len()
    }

    #[inline]
    pub fn clusters(&self) -> usize {
        self.sizes.len()
    }

    #[inline]
    pub fn membership(&self) -> &[usize] {
        &self.membership
    }

    #[inline]
    pub fn cluster_of(&self, i: usize) -> usize {
        self.membership[i]
    }

    pub fn cluster_range(&self, j: usize) -> std::ops::Range<usize> {
        let start: usize = self.sizes[..j].iter().sum();
        start..start + self.sizes[j]
    }

    pub(crate) fn check_against(&self, spec: &TeamSpec) -> Result<()> {
        if self.clusters() != spec.clusters() {
            return Err(Error::Shape(format!(
                "layout has {} clusters, instance has {}",
                self.clusters(),
                spec.clusters()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_joint(&self, spec: &TeamSpec, x: &[usize], u: Option<&[usize]>) -> Result<()> {
        self.check_against(spec)?;
        if x.len() != self.total() {
            return Err(Error::Shape(format!("joint state has {} agents, layout has {}", x.len(), self.total())));
        }
        for (i, &xi) in x.iter().enumerate() {
            let j = self.membership[i];
            if xi >= spec.state_sizes()[j] {
                return Err(Error::Index(format!("agent {i} state {xi} outside cluster {j} space")));
            }
        }
        if let Some(u) = u {
            if u.len() != self.total() {
                return Err(Error::Shape(format!("joint action has {} agents, layout has {}", u.len(), self.total())));
            }
            for (i, &ui) in u.iter().enumerate() {
                let j = self.membership[i];
                if ui >= spec.action_sizes()[j] {
                    return Err(Error::Index(format!("agent {i} action {ui} outside cluster {j} space")));
                }
            }
        }
        Ok(())
    }
}

/// Per-cluster state histograms of a joint state.
pub fn cluster_counts(spec: &TeamSpec, layout: &PopulationLayout, x_joint: &[usize]) -> Vec<Vec<u32>> {
    let mut counts: Vec<Vec<u32>> = spec.state_sizes().iter().map(|&n| vec![0; n]).collect();
    for (i, &xi) in x_joint.iter().enumerate() {
        counts[layout.cluster_of(i)][xi] += 1;
    }
    counts
}

/// Array of cluster empirical measures of a joint state.
pub fn empirical_measure(spec: &TeamSpec, layout: &PopulationLayout, x_joint: &[usize]) -> Result<MeasureArray> {
    layout.check_joint(spec, x_joint, None)?;
    let counts = cluster_counts(spec, layout, x_joint);
    MeasureArray::new(counts.iter().map(|c| SimplexVector::from_counts(c)).collect())
}

/// Stagewise team cost `sum_j (1/N_j) sum_{i in C_j} c_j(x^i, u^i, mu[x])`.
pub fn ensemble_cost(spec: &TeamSpec, layout: &PopulationLayout, x_joint: &[usize], u_joint: &[usize]) -> Result<f64> {
    layout.check_joint(spec, x_joint, Some(u_joint))?;
    let mu = empirical_measure(spec, layout, x_joint)?;
    let mut per_cluster = vec![0.0; spec.clusters()];
    for (i, (&x, &u)) in x_joint.iter().zip(u_joint).enumerate() {
        let j = layout.cluster_of(i);
        per_cluster[j] += spec.cost_unchecked(j, x, u, &mu);
    }
    Ok(per_cluster
        .iter()
        .zip(layout.sizes())
        .map(|(c, &n)| c / n as f64)
        .sum())
}

pub(crate) fn approx_simplex(row: &[f64]) -> bool {
    row.iter().all(|&p| p >= -PROB_TOL) && (row.iter().sum::<f64>() - 1.0).abs() <= PROB_TOL
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::generate::{random_spec, SpecShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coupling_off_returns_base_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut spec = random_spec(&mut rng, &SpecShape::binary(2)).doc().clone();
        spec.kernels.mix = vec![0.0, 0.0];
        let spec = TeamSpec::from_doc(spec).unwrap();
        let mu = MeasureArray::from_rows(vec![vec![0.3, 0.7], vec![0.9, 0.1]]).unwrap();
        for j in 0..2 {
            for x in 0..2 {
                for u in 0..2 {
                    let row = spec.eval_kernel(j, x, u, &mu).unwrap();
                    for (a, b) in row.as_slice().iter().zip(&spec.kernels().base[j][x][u]) {
                        assert!((a - b).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_interaction_gives_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut doc = random_spec(&mut rng, &SpecShape::binary(1)).doc().clone();
        doc.kernels.mix = vec![1.0];
        for x in 0..2 {
            for u in 0..2 {
                for y in 0..2 {
                    doc.kernels.interaction[0][0][x][u][y] = SimplexVector::point_mass(2, x).into_inner();
                }
            }
        }
        let spec = TeamSpec::from_doc(doc).unwrap();
        let mu = MeasureArray::from_rows(vec![vec![0.25, 0.75]]).unwrap();
        for x in 0..2 {
            let row = spec.eval_kernel(0, x, 1, &mu).unwrap();
            assert_eq!(row.as_slice(), SimplexVector::point_mass(2, x).as_slice());
        }
    }

    #[test]
    fn binary_mixture_matches_scalar_recomputation() {
        // eps = 0.5, A row (.7, .3), B rows (.2, .8) for both y, mu = (.5, .5)
        let doc = TeamSpecDoc {
            format_version: None,
            clusters: 1,
            state_sizes: vec![2],
            action_sizes: vec![1],
            kernels: KernelFamily {
                base: vec![vec![vec![vec![0.7, 0.3]], vec![vec![0.7, 0.3]]]],
                interaction: vec![vec![vec![
                    vec![vec![vec![0.2, 0.8], vec![0.6, 0.4]]],
                    vec![vec![vec![0.2, 0.8], vec![0.6, 0.4]]],
                ]]],
                mix: vec![0.5],
                neighbor_weights: vec![vec![1.0]],
            },
            costs: CostFamily {
                base: vec![vec![vec![0.0], vec![1.0]]],
                interaction: vec![vec![vec![vec![0.0, 0.0], vec![0.0, 0.0]]]],
                weights: vec![vec![0.0]],
            },
            beta: 0.9,
            nu0: vec![vec![0.5, 0.5]],
            horizon: Horizon::Finite(1),
        };
        let spec = TeamSpec::from_doc(doc).unwrap();
        let mu = MeasureArray::from_rows(vec![vec![0.5, 0.5]]).unwrap();
        let row = spec.eval_kernel(0, 0, 0, &mu).unwrap();
        let b_avg0 = 0.5 * 0.2 + 0.5 * 0.6;
        let expected0 = 0.5 * 0.7 + 0.5 * b_avg0;
        assert!((row[0] - expected0).abs() < 1e-15);
        assert!((row[0] - 0.55).abs() < 1e-15);
        assert!((row[1] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn cost_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut doc = random_spec(&mut rng, &SpecShape::binary(2)).doc().clone();
        let mu = MeasureArray::from_rows(vec![vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap();
        // kappa = 0 gives base cost
        doc.costs.weights = vec![vec![0.0; 2]; 2];
        let spec = TeamSpec::from_doc(doc.clone()).unwrap();
        assert_eq!(spec.eval_cost(1, 1, 0, &mu).unwrap(), doc.costs.base[1][1][0]);
        // base 0, g 1, one kappa 1 gives 1
        doc.costs.base = vec![vec![vec![0.0; 2]; 2]; 2];
        doc.costs.interaction = vec![vec![vec![vec![1.0; 2]; 2]; 2]; 2];
        doc.costs.weights = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
        let spec = TeamSpec::from_doc(doc).unwrap();
        assert!((spec.eval_cost(0, 1, 1, &mu).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cost_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let shape = SpecShape::random(&mut rng);
            let spec = random_spec(&mut rng, &shape);
            let mu = crate::generate::random_measure(&mut rng, spec.state_sizes());
            let d = spec.doc();
            for j in 0..spec.clusters() {
                for x in 0..spec.state_sizes()[j] {
                    for u in 0..spec.action_sizes()[j] {
                        let mut want = d.costs.base[j][x][u];
                        for l in 0..spec.clusters() {
                            for y in 0..spec.state_sizes()[l] {
                                want += d.costs.weights[j][l] * mu.cluster(l)[y] * d.costs.interaction[j][l][x][y];
                            }
                        }
                        assert!((spec.eval_cost(j, x, u, &mu).unwrap() - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_rows_stochastic_over_random_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 10_000 {
            let shape = SpecShape::random(&mut rng);
            let spec = random_spec(&mut rng, &shape);
            for _ in 0..50 {
                let mu = crate::generate::random_measure(&mut rng, spec.state_sizes());
                let j = rng.random_range(0..spec.clusters());
                let x = rng.random_range(0..spec.state_sizes()[j]);
                let u = rng.random_range(0..spec.action_sizes()[j]);
                let row = spec.eval_kernel(j, x, u, &mu).unwrap();
                assert!(row.as_slice().iter().all(|&p| p >= 0.0));
                assert!((row.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                checked += 1;
            }
        }
    }

    #[test]
    fn kernel_and_cost_are_affine_in_measure() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let shape = SpecShape::random(&mut rng);
            let spec = random_spec(&mut rng, &shape);
            let a = crate::generate::random_measure(&mut rng, spec.state_sizes());
            let b = crate::generate::random_measure(&mut rng, spec.state_sizes());
            for lambda in [0.0, 0.25, 0.5, 1.0] {
                let mixed = MeasureArray::mix(&a, &b, lambda);
                for j in 0..spec.clusters() {
                    let (x, u) = (0, spec.action_sizes()[j] - 1);
                    let ka = spec.eval_kernel(j, x, u, &a).unwrap();
                    let kb = spec.eval_kernel(j, x, u, &b).unwrap();
                    let km = spec.eval_kernel(j, x, u, &mixed).unwrap();
                    for s in 0..km.len() {
                        assert!((km[s] - (lambda * ka[s] + (1.0 - lambda) * kb[s])).abs() < 1e-9);
                    }
                    let ca = spec.eval_cost(j, x, u, &a).unwrap();
                    let cb = spec.eval_cost(j, x, u, &b).unwrap();
                    let cm = spec.eval_cost(j, x, u, &mixed).unwrap();
                    assert!((cm - (lambda * ca + (1.0 - lambda) * cb)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn index_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = random_spec(&mut rng, &SpecShape::binary(1));
        let mu = spec.nu0().clone();
        assert!(matches!(spec.eval_kernel(1, 0, 0, &mu), Err(Error::Index(_))));
        assert!(matches!(spec.eval_kernel(0, 2, 0, &mu), Err(Error::Index(_))));
        assert!(matches!(spec.eval_cost(0, 0, 5, &mu), Err(Error::Index(_))));
        let bad = MeasureArray::from_rows(vec![vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(spec.eval_kernel(0, 0, 0, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn empirical_measure_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = random_spec(&mut rng, &SpecShape::binary(1));
        let layout = PopulationLayout::new(vec![4]).unwrap();
        let mu = empirical_measure(&spec, &layout, &[0, 0, 1, 1]).unwrap();
        assert_eq!(mu.cluster(0).as_slice(), &[0.5, 0.5]);
        let mu = empirical_measure(&spec, &layout, &[0, 0, 0, 0]).unwrap();
        assert_eq!(mu.cluster(0).as_slice(), &[1.0, 0.0]);
        assert!(empirical_measure(&spec, &layout, &[0, 0, 1]).is_err());
    }

    #[test]
    fn one_agent_per_cluster_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = random_spec(&mut rng, &SpecShape::binary(2));
        let layout = PopulationLayout::new(vec![1, 1]).unwrap();
        let (x, u) = ([1, 0], [0, 1]);
        let mu = MeasureArray::new(vec![SimplexVector::point_mass(2, 1), SimplexVector::point_mass(2, 0)]).unwrap();
        let want = spec.eval_cost(0, 1, 0, &mu).unwrap() + spec.eval_cost(1, 0, 1, &mu).unwrap();
        assert!((ensemble_cost(&spec, &layout, &x, &u).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_documents_with_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = random_spec(&mut rng, &SpecShape::binary(2));
        let mut doc = spec.doc().clone();
        doc.kernels.base[1][0][1] = vec![0.5, 0.6];
        match TeamSpec::from_doc(doc).unwrap_err() {
            Error::Invalid { path, .. } => assert_eq!(path, "kernels.base[1][0][1]"),
            e => panic!("{e:?}"),
        }
        let mut doc = spec.doc().clone();
        doc.beta = 1.0;
        assert!(matches!(TeamSpec::from_doc(doc), Err(Error::Invalid { .. })));
        let mut doc = spec.doc().clone();
        doc.costs.base[0][1][0] = -1.0;
        match TeamSpec::from_doc(doc).unwrap_err() {
            Error::Invalid { path, .. } => assert_eq!(path, "costs.base[0][1][0]"),
            e => panic!("{e:?}"),
        }
        let json = spec.to_json().replacen("\"beta\"", "\"bogus\": 1, \"beta\"", 1);
        assert!(matches!(TeamSpec::from_json_str(&json), Err(Error::Invalid { message, .. }) if message.contains("bogus")));
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = random_spec(&mut rng, &SpecShape::binary(2));
        let again = TeamSpec::from_json_str(&spec.to_json()).unwrap();
        assert_eq!(again.doc().kernels, spec.doc().kernels);
        assert_eq!(again.horizon(), spec.horizon());
    }

    #[test]
    fn layout_checks() {
        assert!(PopulationLayout::new(vec![2, 0]).is_err());
        let l = PopulationLayout::parse("2,3").unwrap();
        assert_eq!(l.membership(), &[0, 0, 1, 1, 1]);
        assert_eq!(l.cluster_range(1), 2..5);
        assert_eq!(PopulationLayout::even(7, 2).unwrap().sizes(), &[4, 3]);
    }
}
