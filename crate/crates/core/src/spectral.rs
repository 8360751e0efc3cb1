//! Embedding-matrix redundancy measurements: spectra, effective rank,
//! variance-threshold dimensions and positional cosine-similarity groups.

use serde::{Deserialize, Serialize};

use crate::error::{AnatomyError, Result};
use crate::ltxt::EmbeddingMatrix;
use crate::par::Exec;
use crate::svd;

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_CUTOFF: f64 = 1e-10;

/// Variance thresholds reported by default.
pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.90, 0.95];

/// Which distribution the entropy effective rank is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBasis {
    /// p_i = σ_i / Σσ
    Singular,
    /// p_i = σ_i² / Σσ²
    Energy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceDims {
    pub threshold: f64,
    pub dims: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub rows: usize,
    pub cols: usize,
    pub centered: bool,
    /// Descending; entries below the cutoff are exactly zero.
    pub singular_values: Vec<f64>,
    pub numeric_rank: usize,
    /// Entropy effective rank over the singular-value distribution.
    pub effective_rank: f64,
    /// Entropy effective rank over the squared singular values.
    pub effective_rank_energy: f64,
    pub dims_at: Vec<VarianceDims>,
}

impl SpectrumReport {
    pub fn dims_for(&self, threshold: f64) -> Option<usize> {
        self.dims_at
            .iter()
            .find(|d| d.threshold == threshold)
            .map(|d| d.dims)
    }
}

/// Subtracts the column-wise mean row.
pub fn center_rows(values: &mut [f64], rows: usize, cols: usize) {
    let mut mean = vec![0.0; cols];
    for row in values.chunks_exact(cols) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    for row in values.chunks_exact_mut(cols) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
}

pub fn singular_values_with(matrix: &EmbeddingMatrix, center: bool, exec: Exec) -> Result<SpectrumReport> {
    let (rows, cols) = (matrix.rows(), matrix.cols());
    if center && rows < 2 {
        return Err(AnatomyError::validation("centering needs at least two rows"));
    }
    let mut values = matrix.to_f64();
    if center {
        center_rows(&mut values, rows, cols);
    }
    let mut sigma = svd::svd_with(&values, rows, cols, false, exec)?.singular_values;
    let top = sigma.first().copied().unwrap_or(0.0);
    for s in sigma.iter_mut() {
        if *s < RANK_CUTOFF * top {
            *s = 0.0;
        }
    }
    let numeric_rank = sigma.iter().filter(|&&s| s > 0.0).count();
    let (effective_rank, effective_rank_energy, dims_at) = if numeric_rank == 0 {
        (0.0, 0.0, Vec::new())
    } else {
        let dims_at = DEFAULT_THRESHOLDS
            .iter()
            .map(|&threshold| {
                Ok(VarianceDims {
                    threshold,
                    dims: variance_dims_of(&sigma, threshold)?,
                })
            })
            .collect::<Result<_>>()?;
        (
            effective_rank_of(&sigma, RankBasis::Singular)?,
            effective_rank_of(&sigma, RankBasis::Energy)?,
            dims_at,
        )
    };
    Ok(SpectrumReport {
        rows,
        cols,
        centered: center,
        singular_values: sigma,
        numeric_rank,
        effective_rank,
        effective_rank_energy,
        dims_at,
    })
}

/// Centered (optionally) spectrum of `matrix` with rank summaries.
pub fn singular_values(matrix: &EmbeddingMatrix, center: bool) -> Result<SpectrumReport> {
    singular_values_with(matrix, center, Exec::default())
}

/// `exp(-Σ p ln p)` over the nonzero entries of the chosen distribution.
pub fn effective_rank_of(sigma: &[f64], basis: RankBasis) -> Result<f64> {
    let weights: Vec<f64> = sigma
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| match basis {
            RankBasis::Singular => s,
            RankBasis::Energy => s * s,
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || total == 0.0 {
        return Err(AnatomyError::validation("spectrum is all zero"));
    }
    // uniform over k atoms: exp(ln k) = k
    if weights.iter().all(|&w| w == weights[0]) {
        return Ok(weights.len() as f64);
    }
    let entropy: f64 = weights
        .iter()
        .map(|w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

pub fn effective_rank(report: &SpectrumReport) -> Result<f64> {
    effective_rank_of(&report.singular_values, RankBasis::Singular)
}

/// Smallest `k` whose leading `k` squared singular values reach `threshold`
/// of the total.
pub fn variance_dims_of(sigma: &[f64], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(AnatomyError::invalid(format!(
            "variance threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(AnatomyError::validation("spectrum is all zero"));
    }
    // shares within a few ulps of the threshold count as reaching it
    let slack = 4.0 * f64::EPSILON;
    let mut cumulative = 0.0;
    for (k, s) in sigma.iter().enumerate() {
        cumulative += s * s;
        if cumulative / total >= threshold - slack {
            return Ok(k + 1);
        }
    }
    Ok(sigma.len())
}

pub fn variance_dims(report: &SpectrumReport, threshold: f64) -> Result<usize> {
    variance_dims_of(&report.singular_values, threshold)
}

/// Pairwise cosine similarities of positional rows with early/late group means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub rows: usize,
    pub split: usize,
    pub matrix: Vec<Vec<f64>>,
    /// Mean off-diagonal similarity among rows `[0, split)`.
    pub within_early: f64,
    /// Mean off-diagonal similarity among rows `[split, rows)`.
    pub within_late: f64,
    /// `within_late / within_early`; NaN (null in JSON) when undefined.
    pub ratio: f64,
    pub ratio_defined: bool,
}

/// Mean of `matrix[i][j]` over ordered pairs `i != j` in `range`.
fn group_mean(matrix: &[Vec<f64>], range: std::ops::Range<usize>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in range.clone() {
        for j in range.clone() {
            if i != j {
                sum += matrix[i][j];
                count += 1;
            }
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

pub fn positional_similarity(p: &EmbeddingMatrix, split: usize) -> Result<SimilarityReport> {
    let rows = p.rows();
    if split == 0 || split >= rows {
        return Err(AnatomyError::invalid(format!(
            "split must satisfy 1 <= split < {rows}, got {split}"
        )));
    }
    let vectors: Vec<Vec<f64>> = (0..rows)
        .map(|i| p.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect();
    let norms: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(AnatomyError::validation(format!("row {i} has zero norm")));
    }
    let mut matrix = vec![vec![0.0; rows]; rows];
    for i in 0..rows {
        matrix[i][i] = 1.0;
        for j in i + 1..rows {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
            let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            matrix[i][j] = c;
            matrix[j][i] = c;
        }
    }
    let within_early = group_mean(&matrix, 0..split);
    let within_late = group_mean(&matrix, split..rows);
    let ratio = within_late / within_early;
    Ok(SimilarityReport {
        rows,
        split,
        matrix,
        within_early,
        within_late,
        ratio,
        ratio_defined: ratio.is_finite(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: Vec<f32>) -> EmbeddingMatrix {
        EmbeddingMatrix::new(rows, cols, v).unwrap()
    }

    #[test]
    fn diagonal_spectrum() {
        let m = mat(3, 3, vec![3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0]);
        let r = singular_values(&m, false).unwrap();
        assert_eq!(r.numeric_rank, 3);
        for (a, b) in r.singular_values.iter().zip([3.0, 2.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0f32, 2.0, -2.0];
        let v = [3.0f32, 0.0, 4.0, 0.0];
        let vals: Vec<f32> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let r = singular_values(&mat(3, 4, vals), false).unwrap();
        assert_eq!(r.numeric_rank, 1);
        assert!((r.singular_values[0] - 15.0).abs() < 1e-12);
        assert!(r.singular_values[1..].iter().all(|&s| s == 0.0));
        assert_eq!(r.effective_rank, 1.0);
    }

    #[test]
    fn centering_needs_two_rows() {
        let m = mat(1, 3, vec![1.0, 2.0, 3.0]);
        assert!(singular_values(&m, true).is_err());
        assert!(singular_values(&m, false).is_ok());
    }

    #[test]
    fn centering_removes_constant_rows() {
        let m = mat(4, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let r = singular_values(&m, true).unwrap();
        assert_eq!(r.numeric_rank, 0);
        assert!(r.dims_at.is_empty());
    }

    #[test]
    fn effective_rank_cases() {
        assert_eq!(effective_rank_of(&[1.0; 4], RankBasis::Singular).unwrap(), 4.0);
        assert_eq!(effective_rank_of(&[0.3; 7], RankBasis::Energy).unwrap(), 7.0);
        assert_eq!(effective_rank_of(&[5.0, 0.0, 0.0], RankBasis::Singular).unwrap(), 1.0);
        let p: [f64; 2] = [2.0 / 3.0, 1.0 / 3.0];
        let oracle = (-(p[0] * p[0].ln()) - p[1] * p[1].ln()).exp();
        assert!((effective_rank_of(&[2.0, 1.0], RankBasis::Singular).unwrap() - oracle).abs() < 1e-12);
        assert!((oracle - 1.8899).abs() < 1e-4);
        assert!(effective_rank_of(&[0.0, 0.0], RankBasis::Singular).is_err());
    }

    #[test]
    fn variance_dims_cases() {
        let s = [0.9f64.sqrt(), 0.1f64.sqrt()];
        assert_eq!(variance_dims_of(&s, 0.9).unwrap(), 1);
        for n in [1usize, 7, 20, 33, 100] {
            let want = (0.95 * n as f64).ceil() as usize;
            assert_eq!(variance_dims_of(&vec![1.0; n], 0.95).unwrap(), want, "n={n}");
        }
        assert!(variance_dims_of(&s, 0.0).is_err());
        assert!(variance_dims_of(&s, 1.5).is_err());
        assert_eq!(variance_dims_of(&s, 1.0).unwrap(), 2);
    }

    #[test]
    fn planted_geometric_spectrum() {
        let s: Vec<f64> = (0..20).map(|i| 0.5f64.powi(i)).collect();
        // cumulative-sum oracle
        let total: f64 = s.iter().map(|x| x * x).sum();
        let mut acc = 0.0;
        let mut want = 0;
        for (k, x) in s.iter().enumerate() {
            acc += x * x;
            if acc / total >= 0.9 {
                want = k + 1;
                break;
            }
        }
        assert_eq!(variance_dims_of(&s, 0.9).unwrap(), want);
        assert_eq!(want, 2);
    }

    #[test]
    fn identical_rows_similarity() {
        let p = mat(4, 3, [1.0, 2.0, 3.0].repeat(4));
        let r = positional_similarity(&p, 2).unwrap();
        assert!((r.within_early - 1.0).abs() < 1e-15);
        assert!((r.within_late - 1.0).abs() < 1e-15);
        assert!((r.ratio - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_rows_ratio_undefined() {
        let mut v = vec![0.0f32; 16];
        for i in 0..4 {
            v[i * 4 + i] = 1.0;
        }
        let r = positional_similarity(&mat(4, 4, v), 2).unwrap();
        assert_eq!(r.within_early, 0.0);
        assert_eq!(r.within_late, 0.0);
        assert!(r.ratio.is_nan());
        assert!(!r.ratio_defined);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["ratio"].is_null());
    }

    #[test]
    fn zero_row_named() {
        let p = mat(3, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let err = positional_similarity(&p, 1).unwrap_err();
        assert!(err.to_string().contains("row 1"));
        assert!(positional_similarity(&p, 0).is_err());
        assert!(positional_similarity(&p, 3).is_err());
    }
}
