//! Error propagation through scaled dot-product cross-attention.
//!
//! A teacher query is perturbed with isotropic Gaussian noise and pushed
//! through `softmax(s * q K^T / sqrt(d)) V`; the probe reports how large the
//! perturbation is at the input, at the logits and at the attention output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AnatomyError, Result};
use crate::par::{self, Exec};
use crate::synthetic::orthonormal_frame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub d: usize,
    pub n_keys: usize,
    pub eps: f64,
    pub sharpness: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_keys == 0 {
            return Err(AnatomyError::invalid("d and n_keys must be at least 1"));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(AnatomyError::invalid(format!("eps must be >= 0, got {}", self.eps)));
        }
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return Err(AnatomyError::invalid(format!(
                "sharpness must be > 0, got {}",
                self.sharpness
            )));
        }
        Ok(())
    }
}

/// Keys and values of one attention head, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyValues {
    n_keys: usize,
    d: usize,
    d_v: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl KeyValues {
    pub fn new(n_keys: usize, d: usize, d_v: usize, keys: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if n_keys == 0 || d == 0 || d_v == 0 {
            return Err(AnatomyError::validation("attention dimensions must be at least 1"));
        }
        if keys.len() != n_keys * d {
            return Err(AnatomyError::validation(format!(
                "keys: expected {n_keys}x{d} entries, got {}",
                keys.len()
            )));
        }
        if values.len() != n_keys * d_v {
            return Err(AnatomyError::validation(format!(
                "values: expected {n_keys}x{d_v} entries, got {}",
                values.len()
            )));
        }
        if keys.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(AnatomyError::validation("keys or values contain non-finite entries"));
        }
        Ok(KeyValues { n_keys, d, d_v, keys, values })
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.d..(i + 1) * self.d]
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.d_v..(i + 1) * self.d_v]
    }

    /// `sharpness * q K^T / sqrt(d)`.
    pub fn logits(&self, q: &[f64], sharpness: f64) -> Result<Vec<f64>> {
        if q.len() != self.d {
            return Err(AnatomyError::validation(format!(
                "query has {} entries, keys have {}",
                q.len(),
                self.d
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(AnatomyError::validation("query contains non-finite entries"));
        }
        let scale = sharpness / (self.d as f64).sqrt();
        Ok((0..self.n_keys)
            .map(|i| scale * dot(q, self.key(i)))
            .collect())
    }

    /// Weighted sum of value rows.
    pub fn mix(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_v];
        for (i, &w) in weights.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.value(i)) {
                *o += w * v;
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    l2(a.iter().zip(b).map(|(x, y)| x - y))
}

/// Softmax with the maximum subtracted first.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Largest minus second-largest entry; infinite for a single entry.
pub fn top_gap(v: &[f64]) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &x in v {
        if x > a {
            b = a;
            a = x;
        } else if x > b {
            b = x;
        }
    }
    a - b
}

/// Logits, attention weights and output for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Attended {
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub output: Vec<f64>,
}

pub fn attend_logits(logits: Vec<f64>, kv: &KeyValues) -> Result<Attended> {
    if logits.len() != kv.n_keys {
        return Err(AnatomyError::validation(format!(
            "{} logits for {} keys",
            logits.len(),
            kv.n_keys
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(AnatomyError::validation("logits contain non-finite entries"));
    }
    let weights = softmax(&logits);
    let output = kv.mix(&weights);
    Ok(Attended { logits, weights, output })
}

pub fn attend(q: &[f64], kv: &KeyValues, sharpness: f64) -> Result<Attended> {
    attend_logits(kv.logits(q, sharpness)?, kv)
}

/// `softmax(q K^T / sqrt(d)) V`.
pub fn cross_attention(q: &[f64], kv: &KeyValues) -> Result<Vec<f64>> {
    Ok(attend(q, kv, 1.0)?.output)
}

/// Difference vectors behind the reported norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDeltas {
    pub query: Vec<f64>,
    pub logits: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub sharpness: f64,
    pub seed: u64,
    pub eps: f64,
    pub input_err: f64,
    pub logit_err: f64,
    pub logit_err_inf: f64,
    pub output_err: f64,
    /// `input_err / output_err`; absent when the output did not move.
    pub reduction_factor: Option<f64>,
    pub argmax_flipped: bool,
    pub teacher_gap: f64,
    pub teacher_max_weight: f64,
    pub query_cosine: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub deltas: Option<ProbeDeltas>,
}

/// `eps` times seeded standard normal noise in `d` dimensions.
pub fn noise(d: usize, eps: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d)
        .map(|_| eps * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn compare(
    config: &ProbeConfig,
    q_teacher: &[f64],
    q_student: &[f64],
    kv: &KeyValues,
    keep_deltas: bool,
) -> Result<ProbeReport> {
    let t = attend(q_teacher, kv, config.sharpness)?;
    let s = attend(q_student, kv, config.sharpness)?;
    let output_err = diff_norm(&s.output, &t.output);
    let input_err = diff_norm(q_student, q_teacher);
    let logit_err_inf = s
        .logits
        .iter()
        .zip(&t.logits)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let nt = l2(q_teacher.iter().copied());
    let ns = l2(q_student.iter().copied());
    let query_cosine = if nt > 0.0 && ns > 0.0 {
        dot(q_teacher, q_student) / (nt * ns)
    } else {
        f64::NAN
    };
    let deltas = keep_deltas.then(|| ProbeDeltas {
        query: q_student.iter().zip(q_teacher).map(|(a, b)| a - b).collect(),
        logits: s.logits.iter().zip(&t.logits).map(|(a, b)| a - b).collect(),
        output: s.output.iter().zip(&t.output).map(|(a, b)| a - b).collect(),
    });
    Ok(ProbeReport {
        sharpness: config.sharpness,
        seed: config.seed,
        eps: config.eps,
        input_err,
        logit_err: diff_norm(&s.logits, &t.logits),
        logit_err_inf,
        output_err,
        reduction_factor: (output_err > 0.0).then(|| input_err / output_err),
        argmax_flipped: argmax(&s.weights) != argmax(&t.weights),
        teacher_gap: top_gap(&t.logits),
        teacher_max_weight: t.weights[argmax(&t.weights)],
        query_cosine,
        deltas,
    })
}

fn check_shapes(config: &ProbeConfig, q: &[f64], kv: &KeyValues) -> Result<()> {
    config.validate()?;
    if kv.d != config.d || kv.n_keys != config.n_keys || q.len() != config.d {
        return Err(AnatomyError::validation(format!(
            "config expects d={} and {} keys, got query of {} entries and {}x{} keys",
            config.d,
            config.n_keys,
            q.len(),
            kv.n_keys,
            kv.d
        )));
    }
    Ok(())
}

fn probe_impl(config: &ProbeConfig, q: &[f64], kv: &KeyValues, keep: bool) -> Result<ProbeReport> {
    check_shapes(config, q, kv)?;
    let n = noise(config.d, config.eps, config.seed);
    let student: Vec<f64> = q.iter().zip(&n).map(|(a, b)| a + b).collect();
    compare(config, q, &student, kv, keep)
}

/// Perturbs `q_teacher` by `eps` times seeded noise and measures the errors.
pub fn probe(config: &ProbeConfig, q_teacher: &[f64], kv: &KeyValues) -> Result<ProbeReport> {
    probe_impl(config, q_teacher, kv, false)
}

/// [`probe`] that also returns the raw difference vectors.
pub fn probe_with_deltas(config: &ProbeConfig, q_teacher: &[f64], kv: &KeyValues) -> Result<ProbeReport> {
    probe_impl(config, q_teacher, kv, true)
}

/// Compares an explicit student query against the teacher.
pub fn probe_student(
    config: &ProbeConfig,
    q_teacher: &[f64],
    q_student: &[f64],
    kv: &KeyValues,
) -> Result<ProbeReport> {
    check_shapes(config, q_teacher, kv)?;
    if q_student.len() != q_teacher.len() {
        return Err(AnatomyError::validation("student and teacher queries differ in length"));
    }
    compare(config, q_teacher, q_student, kv, false)
}

/// One probe per sharpness scale, all with the same noise draw.
pub fn sharpness_sweep(
    config: &ProbeConfig,
    q_teacher: &[f64],
    kv: &KeyValues,
    scales: &[f64],
) -> Result<Vec<ProbeReport>> {
    if scales.is_empty() {
        return Err(AnatomyError::invalid("no sharpness scales given"));
    }
    if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(AnatomyError::invalid("sharpness scales must be positive"));
    }
    if scales.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AnatomyError::invalid("sharpness scales must be strictly ascending"));
    }
    scales
        .iter()
        .map(|&s| probe(&ProbeConfig { sharpness: s, ..*config }, q_teacher, kv))
        .collect()
}

/// A teacher query with its key/value bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeInstance {
    pub query: Vec<f64>,
    pub kv: KeyValues,
}

impl ProbeInstance {
    /// Query, keys and values all standard normal, values of width `d`.
    pub fn random(d: usize, n_keys: usize, seed: u64) -> Result<Self> {
        if d == 0 || n_keys == 0 {
            return Err(AnatomyError::invalid("d and n_keys must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.sample(StandardNormal)).collect()
        };
        let query = draw(d);
        let keys = draw(n_keys * d);
        let values = draw(n_keys * d);
        Ok(ProbeInstance { query, kv: KeyValues::new(n_keys, d, d, keys, values)? })
    }

    /// Keys on an orthogonal frame of norm `sqrt(d)` and a query whose unit
    /// sharpness logits are `gap` on key 0 and 0 elsewhere. Needs
    /// `n_keys <= d`.
    pub fn peaked(d: usize, n_keys: usize, gap: f64, seed: u64) -> Result<Self> {
        if d == 0 || n_keys == 0 || n_keys > d {
            return Err(AnatomyError::invalid(format!(
                "peaked instance needs 1 <= n_keys <= d, got n_keys={n_keys}, d={d}"
            )));
        }
        if !gap.is_finite() {
            return Err(AnatomyError::invalid("gap must be finite"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // one spare direction carries a logit-free query component
        let frame = orthonormal_frame((n_keys + 1).min(d), d, &mut rng);
        let root_d = (d as f64).sqrt();
        let keys: Vec<f64> = frame[..n_keys].iter().flatten().map(|x| x * root_d).collect();
        let mut query: Vec<f64> = frame[0].iter().map(|x| x * gap).collect();
        if frame.len() > n_keys {
            let off: f64 = rng.sample(StandardNormal);
            query.iter_mut().zip(&frame[n_keys]).for_each(|(q, e)| *q += off * e);
        }
        let values: Vec<f64> = (0..n_keys * d).map(|_| rng.sample(StandardNormal)).collect();
        Ok(ProbeInstance { query, kv: KeyValues::new(n_keys, d, d, keys, values)? })
    }
}

/// Runs `sharpness_sweep` on one instance per seed; `eps_of` maps the
/// teacher query to its noise level.
pub fn sweep_seeds<I, E>(
    config: &ProbeConfig,
    scales: &[f64],
    seeds: &[u64],
    instance: I,
    eps_of: E,
    exec: Exec,
) -> Result<Vec<Vec<ProbeReport>>>
where
    I: Fn(u64) -> Result<ProbeInstance> + Sync + Send,
    E: Fn(&[f64]) -> f64 + Sync + Send,
{
    par::map_slice(exec, seeds, |&seed| {
        let inst = instance(seed)?;
        let cfg = ProbeConfig { seed, eps: eps_of(&inst.query), ..*config };
        sharpness_sweep(&cfg, &inst.query, &inst.kv, scales)
    })
    .into_iter()
    .collect()
}

/// `0.1 * ||q|| / sqrt(d)` style relative noise level.
pub fn relative_eps(rel: f64, q: &[f64]) -> f64 {
    rel * l2(q.iter().copied()) / (q.len() as f64).sqrt()
}

/// Aggregate over seeds at one sharpness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub sharpness: f64,
    pub n_seeds: usize,
    pub median_input_err: f64,
    pub median_logit_err: f64,
    pub median_output_err: f64,
    /// Median over seeds with a defined factor.
    pub median_reduction_factor: Option<f64>,
    pub undefined_factors: usize,
    pub flip_rate: f64,
    pub median_teacher_max_weight: f64,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Per-sharpness summaries of per-seed sweeps, in scale order.
pub fn summarize(per_seed: &[Vec<ProbeReport>]) -> Vec<ProbeSummary> {
    let Some(first) = per_seed.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|j| {
            let col: Vec<&ProbeReport> = per_seed.iter().map(|r| &r[j]).collect();
            let pick = |f: fn(&ProbeReport) -> f64| -> f64 {
                median(&col.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap_or(f64::NAN)
            };
            let factors: Vec<f64> = col.iter().filter_map(|r| r.reduction_factor).collect();
            ProbeSummary {
                sharpness: col[0].sharpness,
                n_seeds: col.len(),
                median_input_err: pick(|r| r.input_err),
                median_logit_err: pick(|r| r.logit_err),
                median_output_err: pick(|r| r.output_err),
                median_reduction_factor: median(&factors),
                undefined_factors: col.len() - factors.len(),
                flip_rate: col.iter().filter(|r| r.argmax_flipped).count() as f64 / col.len() as f64,
                median_teacher_max_weight: pick(|r| r.teacher_max_weight),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(n: usize, d: usize, keys: &[f64], values: &[f64], d_v: usize) -> KeyValues {
        KeyValues::new(n, d, d_v, keys.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let kv = kv(1, 2, &[3.0, -1.0], &[0.5, 7.0, 2.0], 3);
        for q in [[0.0, 0.0], [100.0, -50.0]] {
            assert_eq!(cross_attention(&q, &kv).unwrap(), vec![0.5, 7.0, 2.0]);
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let kv = kv(2, 2, &[1.0, 0.0, 1.0, 0.0], &[2.0, 4.0, 6.0, 8.0], 2);
        assert_eq!(cross_attention(&[1.5, 9.0], &kv).unwrap(), vec![4.0, 6.0]);
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let kv = kv(1, 2, &[1.0, 0.0], &[1.0, 1.0], 2);
        assert!(matches!(
            cross_attention(&[f64::NAN, 0.0], &kv),
            Err(AnatomyError::Validation(_))
        ));
        assert!(KeyValues::new(1, 2, 2, vec![1.0, f64::INFINITY], vec![0.0; 2]).is_err());
        assert!(cross_attention(&[1.0], &kv).is_err());
    }

    #[test]
    fn zero_eps_gives_zero_errors() {
        let inst = ProbeInstance::random(16, 8, 1).unwrap();
        let cfg = ProbeConfig { d: 16, n_keys: 8, eps: 0.0, sharpness: 1.0, seed: 3 };
        let r = probe(&cfg, &inst.query, &inst.kv).unwrap();
        assert_eq!((r.input_err, r.logit_err, r.output_err), (0.0, 0.0, 0.0));
        assert_eq!(r.reduction_factor, None);
        assert!(!r.argmax_flipped);
    }

    #[test]
    fn config_validation() {
        let ok = ProbeConfig { d: 4, n_keys: 2, eps: 0.1, sharpness: 1.0, seed: 0 };
        assert!(ok.validate().is_ok());
        for bad in [
            ProbeConfig { d: 0, ..ok },
            ProbeConfig { n_keys: 0, ..ok },
            ProbeConfig { eps: -0.1, ..ok },
            ProbeConfig { sharpness: 0.0, ..ok },
        ] {
            assert!(matches!(bad.validate(), Err(AnatomyError::InvalidArgument(_))));
        }
    }

    #[test]
    fn peaked_instance_has_requested_logits() {
        let inst = ProbeInstance::peaked(32, 8, 10.0, 5).unwrap();
        let z = inst.kv.logits(&inst.query, 1.0).unwrap();
        assert!((z[0] - 10.0).abs() < 1e-9);
        assert!(z[1..].iter().all(|v| v.abs() < 1e-9));
        assert!(ProbeInstance::peaked(4, 8, 1.0, 0).is_err());
    }

    #[test]
    fn sweep_rejects_unsorted_scales() {
        let inst = ProbeInstance::random(8, 4, 0).unwrap();
        let cfg = ProbeConfig { d: 8, n_keys: 4, eps: 0.1, sharpness: 1.0, seed: 0 };
        assert!(sharpness_sweep(&cfg, &inst.query, &inst.kv, &[1.0, 0.5]).is_err());
        assert!(sharpness_sweep(&cfg, &inst.query, &inst.kv, &[-1.0]).is_err());
        assert_eq!(sharpness_sweep(&cfg, &inst.query, &inst.kv, &[0.1, 1.0, 10.0]).unwrap().len(), 3);
    }

    #[test]
    fn top_gap_and_argmax() {
        assert_eq!(top_gap(&[1.0, 4.0, 2.5]), 1.5);
        assert_eq!(top_gap(&[2.0, 2.0]), 0.0);
        assert_eq!(argmax(&[2.0, 2.0, 1.0]), 0);
        assert_eq!(top_gap(&[1.0]), f64::INFINITY);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn sweep_seeds_policies_agree() {
        let cfg = ProbeConfig { d: 16, n_keys: 8, eps: 0.1, sharpness: 1.0, seed: 0 };
        let seeds: Vec<u64> = (0..6).collect();
        let run = |exec| {
            sweep_seeds(&cfg, &[1.0, 10.0], &seeds, |s| ProbeInstance::random(16, 8, s), |_| 0.1, exec)
                .unwrap()
        };
        assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
    }
}
