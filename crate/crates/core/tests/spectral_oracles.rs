use anatomy_core::ltxt::EmbeddingMatrix;
use anatomy_core::spectral::{self, RankBasis};
use anatomy_core::svd;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    EmbeddingMatrix::new(rows, cols, v).unwrap()
}

/// Singular values from the eigenvalues of the smaller Gram matrix, using an
/// independent dense symmetric eigensolver.
fn gram_oracle(m: &EmbeddingMatrix) -> Vec<f64> {
    let a = DMatrix::from_row_slice(m.rows(), m.cols(), &m.to_f64());
    let gram = if m.rows() >= m.cols() { a.transpose() * &a } else { &a * a.transpose() };
    let mut ev: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

#[test]
fn random_matrix_matches_gram_oracle() {
    let m = gaussian(200, 64, 1);
    let report = spectral::singular_values(&m, false).unwrap();
    let oracle = gram_oracle(&m);
    for (s, o) in report.singular_values.iter().zip(&oracle) {
        assert!((s - o).abs() <= 1e-6 * o, "{s} vs {o}");
    }
}

#[test]
fn reconstruction_up_to_512_by_1024() {
    for &(r, c, seed) in &[(512usize, 1024usize, 2u64), (300, 40, 3), (33, 257, 4)] {
        let m = gaussian(r, c, seed);
        let vals = m.to_f64();
        let s = svd::svd(&vals, r, c, true).unwrap();
        let (u, v) = (s.u.as_ref().unwrap(), s.v.as_ref().unwrap());
        let k = s.singular_values.len();
        let mut err = 0.0;
        let mut norm = 0.0;
        for i in 0..r {
            for j in 0..c {
                let mut approx = 0.0;
                for t in 0..k {
                    approx += u.get(i, t) * s.singular_values[t] * v.get(j, t);
                }
                err += (vals[i * c + j] - approx).powi(2);
                norm += vals[i * c + j].powi(2);
            }
        }
        assert!((err / norm).sqrt() <= 1e-6, "{r}x{c}");
    }
}

#[test]
fn centering_uses_mean_row() {
    let m = gaussian(50, 8, 5);
    let mut vals = m.to_f64();
    spectral::center_rows(&mut vals, 50, 8);
    for j in 0..8 {
        let col_mean: f64 = (0..50).map(|i| vals[i * 8 + j]).sum::<f64>() / 50.0;
        assert!(col_mean.abs() < 1e-12);
    }
    let centered = EmbeddingMatrix::new(50, 8, vals.iter().map(|&v| v as f32).collect()).unwrap();
    let a = spectral::singular_values(&m, true).unwrap();
    let b = spectral::singular_values(&centered, false).unwrap();
    for (x, y) in a.singular_values.iter().zip(&b.singular_values) {
        assert!((x - y).abs() < 1e-5 * x.max(1.0));
    }
}

#[test]
fn planted_positional_groups_match_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (rows, cols, split) = (32usize, 64usize, 8usize);
    let base: Vec<f32> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
    let mut data = Vec::new();
    for i in 0..rows {
        for &b in &base {
            let noise: f32 = rng.sample(StandardNormal);
            data.push(if i < split { b + 1.2 * noise } else { b + 0.5 * noise });
        }
    }
    let p = EmbeddingMatrix::new(rows, cols, data).unwrap();
    let report = spectral::positional_similarity(&p, split).unwrap();

    // naive O(n^2) recomputation
    let cos = |i: usize, j: usize| -> f64 {
        let a: Vec<f64> = p.row(i).iter().map(|&x| f64::from(x)).collect();
        let b: Vec<f64> = p.row(j).iter().map(|&x| f64::from(x)).collect();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        (dot / (na * nb)).clamp(-1.0, 1.0)
    };
    let mean = |lo: usize, hi: usize| -> f64 {
        let mut s = 0.0;
        let mut n = 0;
        for i in lo..hi {
            for j in lo..hi {
                if i != j {
                    s += cos(i.min(j), i.max(j));
                    n += 1;
                }
            }
        }
        s / n as f64
    };
    assert_eq!(report.within_early, mean(0, split));
    assert_eq!(report.within_late, mean(split, rows));
    assert!(report.ratio > 1.0);
    for i in 0..rows {
        assert_eq!(report.matrix[i][i], 1.0);
        for j in 0..rows {
            assert_eq!(report.matrix[i][j], report.matrix[j][i]);
            assert!((-1.0..=1.0).contains(&report.matrix[i][j]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scale_covariance(seed in any::<u64>(), c in 0.1f32..20.0) {
        let m = gaussian(24, 10, seed);
        let scaled = EmbeddingMatrix::new(24, 10, m.values().iter().map(|v| v * c).collect()).unwrap();
        let a = spectral::singular_values(&m, false).unwrap();
        let b = spectral::singular_values(&scaled, false).unwrap();
        for (x, y) in a.singular_values.iter().zip(&b.singular_values) {
            prop_assert!((y - f64::from(c) * x).abs() <= 1e-5 * y);
        }
        prop_assert!((a.effective_rank - b.effective_rank).abs() <= 1e-6 * a.effective_rank);
    }

    #[test]
    fn permutation_invariance(seed in any::<u64>()) {
        let (r, c) = (15usize, 9usize);
        let m = gaussian(r, c, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let mut rp: Vec<usize> = (0..r).collect();
        let mut cp: Vec<usize> = (0..c).collect();
        for i in (1..r).rev() { rp.swap(i, rng.random_range(0..=i)); }
        for i in (1..c).rev() { cp.swap(i, rng.random_range(0..=i)); }
        let vals: Vec<f32> = rp.iter().flat_map(|&i| cp.iter().map(move |&j| (i, j))).map(|(i, j)| m.row(i)[j]).collect();
        let pm = EmbeddingMatrix::new(r, c, vals).unwrap();
        let a = spectral::singular_values(&m, false).unwrap();
        let b = spectral::singular_values(&pm, false).unwrap();
        prop_assert!((a.effective_rank - b.effective_rank).abs() <= 1e-9 * a.effective_rank);
        prop_assert!((a.effective_rank_energy - b.effective_rank_energy).abs() <= 1e-9 * a.effective_rank_energy);
        prop_assert_eq!(&a.dims_at, &b.dims_at);
    }

    #[test]
    fn rank_summaries_are_bounded(seed in any::<u64>(), r in 2usize..30, c in 2usize..30) {
        let m = gaussian(r, c, seed);
        let rep = spectral::singular_values(&m, false).unwrap();
        prop_assert!(rep.effective_rank >= 1.0 - 1e-12);
        prop_assert!(rep.effective_rank <= r.min(c) as f64 + 1e-9);
        prop_assert!(rep.dims_at[0].dims <= rep.dims_at[1].dims);
        prop_assert!(rep.singular_values.windows(2).all(|w| w[0] >= w[1]));
        let e = spectral::effective_rank_of(&rep.singular_values, RankBasis::Energy).unwrap();
        prop_assert_eq!(e, rep.effective_rank_energy);
    }
}
