//! The three-term objective: coordinate alignment, direction alignment and
//! permutation consistency.

use anatomy_core::{AnatomyError, Result, TokenSequence};
use serde::{Deserialize, Serialize};

use crate::model::{forward, EncoderConfig, Params};
use crate::tape::{Tape, Var};
use crate::tensor::{dot, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of `1 - cos`.
    pub cos: f64,
    /// Weight of the permutation-consistency term.
    pub consist: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cos: 2.0, consist: 0.1 }
    }
}

impl LossWeights {
    pub fn new(cos: f64, consist: f64) -> Result<Self> {
        let w = LossWeights { cos, consist };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cos >= 0.0 && self.cos.is_finite() && self.consist >= 0.0 && self.consist.is_finite()) {
            return Err(AnatomyError::InvalidArgument(format!(
                "loss weights must be finite and >= 0, got cos={} consist={}",
                self.cos, self.consist
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub cos: f64,
    pub consist: f64,
    pub total: f64,
}

fn same_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(AnatomyError::Validation(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Squared Euclidean distance.
pub fn loss_mse<T: Real>(v_s: &[T], v_t: &[T]) -> Result<T> {
    same_len(v_s, v_t)?;
    let mut s = T::zero();
    for (&a, &b) in v_s.iter().zip(v_t) {
        s += (a - b) * (a - b);
    }
    Ok(s)
}

/// One minus cosine similarity, computed as half the squared distance of
/// the unit vectors so that it is exactly zero for identical inputs.
pub fn loss_cos<T: Real>(v_s: &[T], v_t: &[T]) -> Result<T> {
    same_len(v_s, v_t)?;
    let ns = dot(v_s, v_s).sqrt();
    let nt = dot(v_t, v_t).sqrt();
    if ns == T::zero() || nt == T::zero() {
        return Err(AnatomyError::Validation("cosine of a zero vector is undefined".into()));
    }
    let mut s = T::zero();
    for (&a, &b) in v_s.iter().zip(v_t) {
        let d = a / ns - b / nt;
        s += d * d;
    }
    Ok((T::of(0.5) * s).min(T::of(2.0)))
}

pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    Ok(T::one() - loss_cos(a, b)?)
}

/// Squared distance between the embeddings of a prompt and its permutation.
pub fn loss_consistency<T: Real>(
    config: &EncoderConfig,
    params: &Params<T>,
    seq: &TokenSequence,
    permuted: &TokenSequence,
) -> Result<T> {
    let a = forward(config, params, seq)?;
    let b = forward(config, params, permuted)?;
    loss_mse(&a, &b)
}

/// `mse + λ1 cos + λ2 consist`.
pub fn total_loss(mse: f64, cos: f64, consist: f64, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    Ok(LossBreakdown { mse, cos, consist, total: mse + weights.cos * cos + weights.consist * consist })
}

/// Tape nodes of a batch objective; every component is a batch mean.
pub struct LossVars {
    pub mse: Var,
    pub cos: Var,
    pub consist: Option<Var>,
    pub total: Var,
}

/// Builds the objective from student rows `s`, teacher rows `t` and, when
/// the consistency weight is used, student rows of the permuted prompts.
pub fn batch_loss<T: Real>(
    tape: &mut Tape<T>,
    s: Var,
    t: Var,
    permuted: Option<Var>,
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    let diff = tape.sub(s, t)?;
    let sq = tape.row_sum_sq(diff)?;
    let mse = tape.mean(sq)?;

    let ns = tape.row_norm(s)?;
    let nt = tape.row_norm(t)?;
    let us = tape.div_rows(s, ns)?;
    let ut = tape.div_rows(t, nt)?;
    let du = tape.sub(us, ut)?;
    let half = tape.row_sum_sq(du)?;
    let half = tape.scale(half, T::of(0.5))?;
    let cos = tape.mean(half)?;

    let wc = tape.scale(cos, T::of(weights.cos))?;
    let mut total = tape.add(mse, wc)?;
    let consist = match permuted {
        Some(p) => {
            let diff = tape.sub(s, p)?;
            let sq = tape.row_sum_sq(diff)?;
            let m = tape.mean(sq)?;
            let wm = tape.scale(m, T::of(weights.consist))?;
            total = tape.add(total, wm)?;
            Some(m)
        }
        None => None,
    };
    Ok(LossVars { mse, cos, consist, total })
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |x: Var| tape.value(x).scalar().as_f64();
        LossBreakdown {
            mse: v(self.mse),
            cos: v(self.cos),
            consist: self.consist.map_or(0.0, v),
            total: v(self.total),
        }
    }
}
