//! Intrinsic dimensionality of point clouds from nearest-neighbor distances.
//!
//! Two estimators share one exact neighbor table: TwoNN, which fits the
//! Pareto law of the ratio between second and first neighbor distances, and
//! the Levina-Bickel likelihood estimator averaged over several `k`.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AnatomyError, Result};
use crate::ltxt::EmbeddingMatrix;
use crate::par::{self, Exec};

pub const DEFAULT_DISCARD: f64 = 0.10;
pub const DEFAULT_KS: [usize; 4] = [5, 10, 20, 50];
pub const TWONN_MIN_POINTS: usize = 10;

/// Deduplicated points in `d` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    n: usize,
    d: usize,
    points: Vec<f32>,
    duplicates_removed: usize,
}

impl PointCloud {
    /// Validates and removes exact duplicate points, keeping first occurrences.
    pub fn new(n: usize, d: usize, points: Vec<f32>) -> Result<Self> {
        if d == 0 || points.len() != n * d {
            return Err(AnatomyError::validation(format!(
                "expected {n}x{d} coordinates, got {}",
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(AnatomyError::validation("point cloud contains non-finite values"));
        }
        let mut seen = HashSet::with_capacity(n);
        let mut kept = Vec::with_capacity(points.len());
        for row in points.chunks_exact(d) {
            // +0.0 and -0.0 are the same point
            let key: Vec<u32> = row.iter().map(|&v| (v + 0.0).to_bits()).collect();
            if seen.insert(key) {
                kept.extend_from_slice(row);
            }
        }
        let unique = kept.len() / d;
        if unique < 3 {
            return Err(AnatomyError::validation(format!(
                "need at least 3 distinct points, got {unique}"
            )));
        }
        Ok(PointCloud {
            n: unique,
            d,
            points: kept,
            duplicates_removed: n - unique,
        })
    }

    pub fn from_matrix(m: &EmbeddingMatrix) -> Result<Self> {
        Self::new(m.rows(), m.cols(), m.values().to_vec())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn duplicates_removed(&self) -> usize {
        self.duplicates_removed
    }

    pub fn point(&self, i: usize) -> &[f32] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    /// `size` points drawn without replacement, in their original order.
    /// Returns the cloud unchanged when it is not larger than `size`.
    pub fn subsample(&self, size: usize, seed: u64) -> Result<Self> {
        if self.n <= size {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, self.n, size).into_vec();
        picked.sort_unstable();
        let mut points = Vec::with_capacity(size * self.d);
        for i in picked {
            points.extend_from_slice(self.point(i));
        }
        let mut out = Self::new(size, self.d, points)?;
        out.duplicates_removed = self.duplicates_removed;
        Ok(out)
    }
}

/// Ascending distances from every point to its `k` nearest other points.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    pub k: usize,
    pub distances: Vec<Vec<f64>>,
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let t = f64::from(x) - f64::from(y);
            t * t
        })
        .sum()
}

pub fn knn_distances_with(cloud: &PointCloud, k: usize, exec: Exec) -> Result<Neighbors> {
    if k == 0 || k >= cloud.n {
        return Err(AnatomyError::invalid(format!(
            "k must satisfy 1 <= k < n = {}, got {k}",
            cloud.n
        )));
    }
    let rows = par::map_range(exec, cloud.n, |i| {
        let p = cloud.point(i);
        let mut d2: Vec<f64> = (0..cloud.n)
            .filter(|&j| j != i)
            .map(|j| squared_distance(p, cloud.point(j)))
            .collect();
        d2.select_nth_unstable_by(k - 1, f64::total_cmp);
        d2.truncate(k);
        d2.sort_unstable_by(f64::total_cmp);
        d2.into_iter().map(f64::sqrt).collect::<Vec<f64>>()
    });
    if let Some(i) = rows.iter().position(|r| r[0] == 0.0) {
        return Err(AnatomyError::Numeric {
            op: "knn_distances",
            message: format!("point {i} has a zero-distance neighbor after deduplication"),
        });
    }
    Ok(Neighbors { k, distances: rows })
}

pub fn knn_distances(cloud: &PointCloud, k: usize) -> Result<Neighbors> {
    knn_distances_with(cloud, k, Exec::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdMethod {
    Twonn,
    Mle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoNnFit {
    /// Least squares through the origin on the linearized empirical CDF.
    #[default]
    Regression,
    /// Maximum likelihood of the Pareto law, `n / Σ ln μ`.
    ClosedForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdEstimate {
    pub method: IdMethod,
    pub value: f64,
    /// Per-neighborhood estimates (likelihood method only).
    pub per_k: BTreeMap<usize, f64>,
    /// Fraction of largest ratios dropped (TwoNN only).
    pub discard_fraction: Option<f64>,
    pub fit: Option<TwoNnFit>,
    pub n_used: usize,
    pub duplicates_removed: usize,
}

/// TwoNN from a precomputed neighbor table (needs `k >= 2`).
pub fn twonn_from(neighbors: &Neighbors, discard_fraction: f64, fit: TwoNnFit) -> Result<IdEstimate> {
    if !(0.0..0.5).contains(&discard_fraction) {
        return Err(AnatomyError::invalid(format!(
            "discard fraction must lie in [0, 0.5), got {discard_fraction}"
        )));
    }
    let n = neighbors.distances.len();
    if n < TWONN_MIN_POINTS {
        return Err(AnatomyError::validation(format!(
            "TwoNN needs n >= {TWONN_MIN_POINTS} points, got {n}"
        )));
    }
    if neighbors.k < 2 {
        return Err(AnatomyError::invalid("TwoNN needs two neighbors per point"));
    }
    let mut mu = Vec::with_capacity(n);
    for (i, row) in neighbors.distances.iter().enumerate() {
        if row[0] == 0.0 {
            return Err(AnatomyError::Numeric {
                op: "twonn",
                message: format!("point {i} has a zero first-neighbor distance"),
            });
        }
        mu.push(row[1] / row[0]);
    }
    mu.sort_unstable_by(f64::total_cmp);
    let n_used = ((n as f64) * (1.0 - discard_fraction)).floor() as usize;
    let kept = &mu[..n_used];
    let value = match fit {
        TwoNnFit::Regression => {
            // empirical CDF uses the full sample size so the discarded tail
            // keeps its probability mass
            let (mut sxy, mut sxx) = (0.0, 0.0);
            for (rank, &m) in kept.iter().enumerate() {
                let x = m.ln();
                let f = (rank + 1) as f64 / (n + 1) as f64;
                let y = -(1.0 - f).ln();
                sxy += x * y;
                sxx += x * x;
            }
            sxy / sxx
        }
        TwoNnFit::ClosedForm => n_used as f64 / kept.iter().map(|m| m.ln()).sum::<f64>(),
    };
    if !(value.is_finite() && value > 0.0) {
        return Err(AnatomyError::Numeric {
            op: "twonn",
            message: format!("degenerate estimate {value}"),
        });
    }
    Ok(IdEstimate {
        method: IdMethod::Twonn,
        value,
        per_k: BTreeMap::new(),
        discard_fraction: Some(discard_fraction),
        fit: Some(fit),
        n_used,
        duplicates_removed: 0,
    })
}

pub fn twonn(cloud: &PointCloud, discard_fraction: f64, fit: TwoNnFit) -> Result<IdEstimate> {
    if cloud.n < TWONN_MIN_POINTS {
        return Err(AnatomyError::validation(format!(
            "TwoNN needs n >= {TWONN_MIN_POINTS} points, got {}",
            cloud.n
        )));
    }
    let mut est = twonn_from(&knn_distances(cloud, 2)?, discard_fraction, fit)?;
    est.duplicates_removed = cloud.duplicates_removed;
    Ok(est)
}

fn check_ks(ks: &[usize]) -> Result<usize> {
    if ks.is_empty() {
        return Err(AnatomyError::invalid("no neighborhood sizes given"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k <= 1) {
        return Err(AnatomyError::invalid(format!("every k must exceed 1, got {k}")));
    }
    Ok(*ks.iter().max().unwrap())
}

/// Likelihood estimator from a neighbor table with `k >= max(ks)`.
///
/// For each k the local inverse estimates `(1/(k-1)) Σ_j ln(T_k/T_j)` are
/// averaged over points and inverted; the result is the mean over `ks`.
pub fn mle_from(neighbors: &Neighbors, ks: &[usize]) -> Result<IdEstimate> {
    let kmax = check_ks(ks)?;
    if kmax > neighbors.k {
        return Err(AnatomyError::invalid(format!(
            "neighbor table holds {} neighbors, need {kmax}",
            neighbors.k
        )));
    }
    let n = neighbors.distances.len();
    let mut per_k = BTreeMap::new();
    for &k in ks {
        let mut inverse_sum = 0.0;
        for (i, row) in neighbors.distances.iter().enumerate() {
            if row[0] == 0.0 {
                return Err(AnatomyError::Numeric {
                    op: "mle_id",
                    message: format!("point {i} has a zero neighbor distance"),
                });
            }
            let tk = row[k - 1];
            let s: f64 = row[..k - 1].iter().map(|&tj| (tk / tj).ln()).sum();
            inverse_sum += s / (k - 1) as f64;
        }
        per_k.insert(k, n as f64 / inverse_sum);
    }
    let value = per_k.values().sum::<f64>() / per_k.len() as f64;
    if !(value.is_finite() && value > 0.0) {
        return Err(AnatomyError::Numeric {
            op: "mle_id",
            message: format!("degenerate estimate {value}"),
        });
    }
    Ok(IdEstimate {
        method: IdMethod::Mle,
        value,
        per_k,
        discard_fraction: None,
        fit: None,
        n_used: n,
        duplicates_removed: 0,
    })
}

pub fn mle_id(cloud: &PointCloud, ks: &[usize]) -> Result<IdEstimate> {
    let kmax = check_ks(ks)?;
    let mut est = mle_from(&knn_distances(cloud, kmax)?, ks)?;
    est.duplicates_removed = cloud.duplicates_removed;
    Ok(est)
}

/// Both estimators from a single neighbor search.
pub fn estimate_both_with(
    cloud: &PointCloud,
    discard_fraction: f64,
    ks: &[usize],
    exec: Exec,
) -> Result<(IdEstimate, IdEstimate)> {
    if cloud.n < TWONN_MIN_POINTS {
        return Err(AnatomyError::validation(format!(
            "TwoNN needs n >= {TWONN_MIN_POINTS} points, got {}",
            cloud.n
        )));
    }
    let kmax = check_ks(ks)?.max(2);
    let neighbors = knn_distances_with(cloud, kmax, exec)?;
    let mut tw = twonn_from(&neighbors, discard_fraction, TwoNnFit::Regression)?;
    let mut ml = mle_from(&neighbors, ks)?;
    tw.duplicates_removed = cloud.duplicates_removed;
    ml.duplicates_removed = cloud.duplicates_removed;
    Ok((tw, ml))
}

pub fn estimate_both(cloud: &PointCloud, discard_fraction: f64, ks: &[usize]) -> Result<(IdEstimate, IdEstimate)> {
    estimate_both_with(cloud, discard_fraction, ks, Exec::default())
}
