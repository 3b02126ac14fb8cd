//! Probability vectors on finite supports and per-cluster arrays of them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating probability vectors.
///
/// Inputs whose entries sum to one within this tolerance are renormalized,
/// anything further away is rejected.
pub const PROB_TOL: f64 = 1e-9;

/// A probability vector over `0..len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("", "probability vector must be non-empty"));
        }
        let mut sum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::invalid(format!("[{i}]"), "entry is not finite"));
            }
            if w < -PROB_TOL {
                return Err(Error::invalid(format!("[{i}]"), format!("negative probability {w}")));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(Error::invalid("", format!("entries sum to {sum}, expected 1")));
        }
        let weights = weights.into_iter().map(|w| w.max(0.0) / sum).collect();
        Ok(SimplexVector(weights))
    }

    pub fn point_mass(len: usize, at: usize) -> Self {
        assert!(at < len, "point mass index {at} outside support of size {len}");
        let mut w = vec![0.0; len];
        w[at] = 1.0;
        SimplexVector(w)
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len > 0);
        SimplexVector(vec![1.0 / len as f64; len])
    }

    /// Normalized histogram `counts / sum(counts)`.
    pub fn from_counts(counts: &[u32]) -> Self {
        let total: u32 = counts.iter().sum();
        assert!(total > 0, "histogram of an empty sample");
        SimplexVector(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    /// Wraps weights that the caller already knows are a probability vector.
    pub(crate) fn from_raw(weights: Vec<f64>) -> Self {
        debug_assert!(!weights.is_empty());
        debug_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        SimplexVector(weights)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for SimplexVector {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        SimplexVector::new(value)
    }
}

impl From<SimplexVector> for Vec<f64> {
    fn from(value: SimplexVector) -> Self {
        value.0
    }
}

impl std::ops::Index<usize> for SimplexVector {
    type Output = f64;

    #[inline]
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// One probability vector per cluster; the product measure they induce
/// on the joint state space factorizes across clusters by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeasureArray(Vec<SimplexVector>);

impl MeasureArray {
    pub fn new(per_cluster: Vec<SimplexVector>) -> Result<Self> {
        if per_cluster.is_empty() {
            return Err(Error::invalid("", "measure array needs at least one cluster"));
        }
        Ok(MeasureArray(per_cluster))
    }

    /// Builds from raw rows, validating each one.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let per_cluster = rows
            .into_iter()
            .enumerate()
            .map(|(j, r)| SimplexVector::new(r).map_err(|e| e.at(&format!("[{j}]"))))
            .collect::<Result<Vec<_>>>()?;
        MeasureArray::new(per_cluster)
    }

    #[inline]
    pub fn clusters(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn cluster(&self, j: usize) -> &SimplexVector {
        &self.0[j]
    }

    pub fn iter(&self) -> impl Iterator<Item = &SimplexVector> {
        self.0.iter()
    }

    /// Checks the array against per-cluster support sizes.
    pub fn check_shape(&self, sizes: &[usize]) -> Result<()> {
        if self.0.len() != sizes.len() {
            return Err(Error::Shape(format!(
                "measure array has {} clusters, expected {}",
                self.0.len(),
                sizes.len()
            )));
        }
        for (j, (m, &n)) in self.0.iter().zip(sizes).enumerate() {
            if m.len() != n {
                return Err(Error::Shape(format!(
                    "cluster {j} measure has support {}, expected {n}",
                    m.len()
                )));
            }
        }
        Ok(())
    }

    /// `lambda * a + (1 - lambda) * b`, cluster by cluster.
    pub fn mix(a: &MeasureArray, b: &MeasureArray, lambda: f64) -> MeasureArray {
        assert!((0.0..=1.0).contains(&lambda));
        MeasureArray(
            a.0.iter()
                .zip(&b.0)
                .map(|(p, q)| {
                    SimplexVector::from_raw(
                        p.0.iter()
                            .zip(&q.0)
                            .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
                            .collect(),
                    )
                })
                .collect(),
        )
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.iter().map(|p| p.0.clone()).collect()
    }
}

/// Total variation distance `(1/2) * sum |p - q|` between two vectors on a common support.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "supports differ: {} vs {} atoms",
            p.len(),
            q.len()
        )));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}
