//! Seeded point-cloud generators with known intrinsic dimension.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::intrinsic::PointCloud;

/// `m` orthonormal vectors in `ambient` dimensions (rows of the result).
pub fn orthonormal_frame(m: usize, ambient: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    assert!(m <= ambient, "cannot embed {m} dimensions in {ambient}");
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(m);
    while frame.len() < m {
        let mut v: Vec<f64> = (0..ambient).map(|_| rng.sample(StandardNormal)).collect();
        for b in &frame {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            frame.push(v);
        }
    }
    frame
}

/// Maps latent coordinates isometrically into `ambient` dimensions.
fn embed(latent: &[Vec<f64>], ambient: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let m = latent[0].len();
    let frame = orthonormal_frame(m, ambient, rng);
    let mut pts = Vec::with_capacity(latent.len() * ambient);
    for z in latent {
        for a in 0..ambient {
            let x: f64 = z.iter().zip(&frame).map(|(zi, b)| zi * b[a]).sum();
            pts.push(x as f32);
        }
    }
    PointCloud::new(latent.len(), ambient, pts).expect("generated cloud is valid")
}

/// Standard Gaussian in `m` dimensions, randomly rotated into `ambient`.
pub fn gaussian(n: usize, m: usize, ambient: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..m).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    embed(&latent, ambient, &mut rng)
}

/// Uniform samples of the unit cube `[0,1]^m`, randomly rotated into `ambient`.
pub fn hypercube(n: usize, m: usize, ambient: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..m).map(|_| rng.random::<f64>()).collect())
        .collect();
    embed(&latent, ambient, &mut rng)
}

/// Uniform samples of a segment of length `length` in `ambient` dimensions.
pub fn segment(n: usize, length: f64, ambient: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>() * length]).collect();
    embed(&latent, ambient, &mut rng)
}
