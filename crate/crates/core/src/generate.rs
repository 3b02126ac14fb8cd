//! Random instance generators for experiments and tests.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::measure::{MeasureArray, SimplexVector};
use crate::model::{CostFamily, Horizon, KernelFamily, TeamSpec, TeamSpecDoc};

/// Sizes of a random instance.
#[derive(Clone, Debug)]
pub struct SpecShape {
    pub state_sizes: Vec<usize>,
    pub action_sizes: Vec<usize>,
}

impl SpecShape {
    pub fn binary(clusters: usize) -> Self {
        SpecShape {
            state_sizes: vec![2; clusters],
            action_sizes: vec![2; clusters],
        }
    }

    /// One or two clusters with two or three states and actions each.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let m = rng.random_range(1..=2);
        SpecShape {
            state_sizes: (0..m).map(|_| rng.random_range(2..=3)).collect(),
            action_sizes: (0..m).map(|_| rng.random_range(2..=3)).collect(),
        }
    }
}

/// Flat Dirichlet(1) draw of dimension `n`.
pub fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / sum).collect()
}

pub fn random_measure<R: Rng>(rng: &mut R, sizes: &[usize]) -> MeasureArray {
    MeasureArray::new(
        sizes
            .iter()
            .map(|&n| SimplexVector::new(random_simplex(rng, n)).expect("dirichlet draw"))
            .collect(),
    )
    .expect("non-empty")
}

/// Random instance with Dirichlet kernel rows, uniform costs in `[0, 1)`,
/// coupling weights in `[0, 1]`, discount 0.9 and horizon 3.
pub fn random_spec<R: Rng>(rng: &mut R, shape: &SpecShape) -> TeamSpec {
    random_spec_doc(rng, shape).and_then_build()
}

pub fn random_spec_doc<R: Rng>(rng: &mut R, shape: &SpecShape) -> TeamSpecDoc {
    let xs = &shape.state_sizes;
    let us = &shape.action_sizes;
    let m = xs.len();
    let base = (0..m)
        .map(|j| (0..xs[j]).map(|_| (0..us[j]).map(|_| random_simplex(rng, xs[j])).collect()).collect())
        .collect();
    let interaction = (0..m)
        .map(|j| {
            (0..m)
                .map(|l| {
                    (0..xs[j])
                        .map(|_| (0..us[j]).map(|_| (0..xs[l]).map(|_| random_simplex(rng, xs[j])).collect()).collect())
                        .collect()
                })
                .collect()
        })
        .collect();
    let kernels = KernelFamily {
        base,
        interaction,
        mix: (0..m).map(|_| rng.random::<f64>()).collect(),
        neighbor_weights: (0..m).map(|_| random_simplex(rng, m)).collect(),
    };
    let costs = CostFamily {
        base: (0..m)
            .map(|j| (0..xs[j]).map(|_| (0..us[j]).map(|_| rng.random::<f64>()).collect()).collect())
            .collect(),
        interaction: (0..m)
            .map(|j| (0..m).map(|l| (0..xs[j]).map(|_| (0..xs[l]).map(|_| rng.random::<f64>()).collect()).collect()).collect())
            .collect(),
        weights: (0..m).map(|_| (0..m).map(|_| rng.random::<f64>()).collect()).collect(),
    };
    TeamSpecDoc {
        format_version: Some(crate::model::FORMAT_VERSION.to_string()),
        clusters: m,
        state_sizes: xs.clone(),
        action_sizes: us.clone(),
        kernels,
        costs,
        beta: 0.9,
        nu0: xs.iter().map(|&n| random_simplex(rng, n)).collect(),
        horizon: Horizon::Finite(3),
    }
}

/// Replaces every cost by the constant `c0`.
pub fn with_constant_cost(spec: &TeamSpec, c0: f64) -> TeamSpec {
    let mut doc = spec.doc().clone();
    for (j, per_x) in doc.costs.base.iter_mut().enumerate() {
        for row in per_x.iter_mut() {
            row.iter_mut().for_each(|c| *c = c0);
        }
        doc.costs.weights[j].iter_mut().for_each(|w| *w = 0.0);
    }
    doc.and_then_build()
}

/// Replaces every kernel by the identity `T_j(x' | x, u, mu) = 1{x' = x}`.
pub fn with_identity_kernels(spec: &TeamSpec) -> TeamSpec {
    let mut doc = spec.doc().clone();
    for per_x in doc.kernels.base.iter_mut() {
        let n = per_x.len();
        for (x, per_u) in per_x.iter_mut().enumerate() {
            for row in per_u.iter_mut() {
                *row = SimplexVector::point_mass(n, x).into_inner();
            }
        }
    }
    doc.kernels.mix.iter_mut().for_each(|e| *e = 0.0);
    doc.and_then_build()
}

trait Build {
    fn and_then_build(self) -> TeamSpec;
}

impl Build for TeamSpecDoc {
    fn and_then_build(self) -> TeamSpec {
        TeamSpec::from_doc(self).expect("generated instance is valid")
    }
}
