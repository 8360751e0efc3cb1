use anatomy_core::intrinsic::{self, PointCloud, TwoNnFit, DEFAULT_DISCARD, DEFAULT_KS};
use anatomy_core::synthetic;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent full scan: every pairwise distance, then a full sort per point.
fn brute_force_knn(c: &PointCloud, k: usize) -> Vec<Vec<f64>> {
    (0..c.n())
        .map(|i| {
            let mut all = Vec::new();
            for j in 0..c.n() {
                if j == i {
                    continue;
                }
                let mut s = 0.0f64;
                for t in 0..c.d() {
                    let diff = f64::from(c.point(i)[t]) - f64::from(c.point(j)[t]);
                    s += diff * diff;
                }
                all.push(s.sqrt());
            }
            all.sort_by(f64::total_cmp);
            all.truncate(k);
            all
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn knn_matches_full_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts: Vec<f32> = (0..1000 * 8).map(|_| rng.random::<f32>()).collect();
    let c = PointCloud::new(1000, 8, pts).unwrap();
    let nb = intrinsic::knn_distances(&c, 50).unwrap();
    assert_eq!(nb.distances, brute_force_knn(&c, 50));
}

#[test]
fn twonn_recovers_plane_in_256_dims() {
    let estimates: Vec<f64> = (0..5)
        .map(|seed| {
            let c = synthetic::hypercube(5000, 2, 256, 100 + seed);
            intrinsic::twonn(&c, DEFAULT_DISCARD, TwoNnFit::Regression).unwrap().value
        })
        .collect();
    for e in &estimates {
        assert!((1.8..=2.2).contains(e), "{estimates:?}");
    }
}

#[test]
fn line_segment_is_one_dimensional() {
    let c = synthetic::segment(5000, 10.0, 10, 7);
    let (tw, ml) = intrinsic::estimate_both(&c, DEFAULT_DISCARD, &DEFAULT_KS).unwrap();
    assert!((0.9..=1.1).contains(&tw.value), "twonn {}", tw.value);
    assert!((0.9..=1.1).contains(&ml.value), "mle {}", ml.value);
}

#[test]
fn mle_recovers_gaussian_in_64_dims() {
    let estimates: Vec<f64> = (0..5)
        .map(|seed| {
            let c = synthetic::gaussian(5000, 5, 64, 200 + seed);
            intrinsic::mle_id(&c, &DEFAULT_KS).unwrap().value
        })
        .collect();
    for e in &estimates {
        assert!((4.25..=5.75).contains(e), "{estimates:?}");
    }
}

#[test]
fn estimators_agree_on_hypercubes() {
    for m in [2usize, 5, 9] {
        let c = synthetic::hypercube(5000, m, m + 3, 300 + m as u64);
        let (tw, ml) = intrinsic::estimate_both(&c, DEFAULT_DISCARD, &DEFAULT_KS).unwrap();
        let gap = (tw.value - ml.value).abs() / tw.value.min(ml.value);
        assert!(gap <= 0.20, "m={m}: twonn {} mle {}", tw.value, ml.value);
    }
}

fn transform(c: &PointCloud, f: impl Fn(&[f32]) -> Vec<f32>) -> PointCloud {
    let mut pts = Vec::new();
    let mut d = 0;
    for i in 0..c.n() {
        let p = f(c.point(i));
        d = p.len();
        pts.extend(p);
    }
    PointCloud::new(c.n(), d, pts).unwrap()
}

#[test]
fn invariances() {
    let c = synthetic::gaussian(1500, 3, 6, 9);
    let (tw, ml) = intrinsic::estimate_both(&c, DEFAULT_DISCARD, &DEFAULT_KS).unwrap();
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs();

    // appending zero coordinates changes no distance
    let padded = transform(&c, |p| p.iter().copied().chain([0.0; 5]).collect());
    let (tp, mp) = intrinsic::estimate_both(&padded, DEFAULT_DISCARD, &DEFAULT_KS).unwrap();
    assert_eq!(tw.value, tp.value);
    assert_eq!(ml.value, mp.value);

    // power-of-two scaling is exact in floating point
    let scaled = transform(&c, |p| p.iter().map(|x| x * 4.0).collect());
    let (ts, ms) = intrinsic::estimate_both(&scaled, DEFAULT_DISCARD, &DEFAULT_KS).unwrap();
    assert!(rel(tw.value, ts.value) <= 1e-6);
    assert!(rel(ml.value, ms.value) <= 1e-6);

    let scaled = transform(&c, |p| p.iter().map(|x| x * 3.7).collect());
    let (ts, ms) = intrinsic::estimate_both(&scaled, DEFAULT_DISCARD, &DEFAULT_KS).unwrap();
    assert!(rel(tw.value, ts.value) <= 1e-6, "{} {}", tw.value, ts.value);
    assert!(rel(ml.value, ms.value) <= 1e-6);

    // rotation plus translation
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let frame = synthetic::orthonormal_frame(6, 6, &mut rng);
    let moved = transform(&c, |p| {
        (0..6)
            .map(|a| {
                let x: f64 = p.iter().zip(&frame).map(|(&pi, b)| f64::from(pi) * b[a]).sum();
                (x + 1.0) as f32
            })
            .collect()
    });
    let (tr, mr) = intrinsic::estimate_both(&moved, DEFAULT_DISCARD, &DEFAULT_KS).unwrap();
    assert!(rel(tw.value, tr.value) <= 1e-6, "{} {}", tw.value, tr.value);
    assert!(rel(ml.value, mr.value) <= 1e-6, "{} {}", ml.value, mr.value);
}

#[test]
fn closed_form_tracks_regression() {
    let c = synthetic::gaussian(4000, 4, 8, 11);
    let r = intrinsic::twonn(&c, 0.0, TwoNnFit::Regression).unwrap();
    let f = intrinsic::twonn(&c, 0.0, TwoNnFit::ClosedForm).unwrap();
    assert!((r.value - f.value).abs() / f.value < 0.1, "{} {}", r.value, f.value);
    assert!(median(vec![r.value, f.value, 4.0]) > 3.0);
}
