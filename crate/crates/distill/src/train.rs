//! The distillation loop.

use anatomy_core::{AnatomyError, Exec, Result, TokenSequence};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PromptSet;
use crate::loss::{batch_loss, cosine, LossBreakdown, LossWeights};
use crate::model::{embed_contents, encode, EncoderConfig, Params};
use crate::optim::{learning_rate, AdamW, LrSchedule};
use crate::permute::step_seed;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

/// Seed salt for the held-out permutations used by [`evaluate`].
pub const EVAL_PERMUTATION_SEED: u64 = 0x5EED_E7A1;
const BATCH_SALT: u64 = 0xBA7C_4000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup: usize,
    pub schedule: LrSchedule,
    /// Held-out evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Stop once the held-out mean cosine reaches this value.
    pub stop_at_cosine: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-3,
            steps: 5000,
            seed: 0,
            weight_decay: 0.05,
            batch_size: 32,
            warmup: 100,
            schedule: LrSchedule::Cosine,
            eval_every: 250,
            stop_at_cosine: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AnatomyError::InvalidArgument(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(AnatomyError::InvalidArgument("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(AnatomyError::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mse: f64,
    pub cos: f64,
    pub consist: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub step: usize,
    /// Mean cosine similarity between student and teacher embeddings.
    pub mean_cosine: f64,
    pub mse: f64,
    /// Mean `||v_s(T) - v_s(T')||` over prompts and one fixed shuffle each.
    pub permutation_gap: f64,
}

/// Prompts, targets and the train/held-out split.
pub struct DistillTask<'a, T> {
    pub config: EncoderConfig,
    pub prompts: &'a PromptSet,
    /// Teacher embedding of every prompt, index-aligned with `prompts`.
    pub targets: &'a [Vec<T>],
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

impl<T: Real> DistillTask<'_, T> {
    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.train.is_empty() {
            return Err(AnatomyError::Validation("training split is empty".into()));
        }
        if self.targets.len() != self.prompts.len() {
            return Err(AnatomyError::Validation(format!(
                "{} targets for {} prompts",
                self.targets.len(),
                self.prompts.len()
            )));
        }
        if let Some(t) = self.targets.iter().find(|t| t.len() != self.config.out_dim) {
            return Err(AnatomyError::Validation(format!(
                "teacher emits {} dimensions, student {}",
                t.len(),
                self.config.out_dim
            )));
        }
        if self.prompts.vocab.len() > self.config.vocab {
            return Err(AnatomyError::Validation(format!(
                "prompt vocabulary of {} exceeds model vocabulary {}",
                self.prompts.vocab.len(),
                self.config.vocab
            )));
        }
        if self.prompts.context != self.config.context {
            return Err(AnatomyError::Validation("prompt context differs from model context".into()));
        }
        if let Some(&i) = self.train.iter().chain(&self.heldout).find(|&&i| i >= self.prompts.len()) {
            return Err(AnatomyError::Validation(format!("prompt index {i} out of range")));
        }
        Ok(())
    }
}

/// Teacher embeddings of every prompt.
pub fn teacher_targets<T: Real>(
    config: &EncoderConfig,
    params: &Params<T>,
    prompts: &PromptSet,
    exec: Exec,
) -> Result<Vec<Vec<T>>> {
    params.validate(config)?;
    let seqs: Vec<TokenSequence> = prompts.prompts.iter().map(|p| p.sequence(config.context)).collect();
    let contents: Vec<&[u32]> = seqs.iter().map(|s| &s.ids[..s.content_len]).collect();
    embed_contents(config, params, &contents, exec)
}

/// Held-out fidelity and permutation sensitivity of `params`.
pub fn evaluate<T: Real>(
    config: &EncoderConfig,
    params: &Params<T>,
    prompts: &PromptSet,
    targets: &[Vec<T>],
    indices: &[usize],
    exec: Exec,
) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(AnatomyError::Validation("no prompts to evaluate".into()));
    }
    let l = config.context;
    let base: Vec<TokenSequence> = indices.iter().map(|&i| prompts.prompts[i].sequence(l)).collect();
    let perm: Vec<TokenSequence> = indices
        .iter()
        .map(|&i| prompts.prompts[i].permuted(step_seed(EVAL_PERMUTATION_SEED, 0, i as u64), l))
        .collect();
    let contents: Vec<&[u32]> = base.iter().chain(&perm).map(|s| &s.ids[..s.content_len]).collect();
    let rows = embed_contents(config, params, &contents, exec)?;
    let n = indices.len();
    let (mut cos, mut mse, mut gap) = (0.0, 0.0, 0.0);
    for (r, &i) in indices.iter().enumerate() {
        let (s, p, t) = (&rows[r], &rows[n + r], &targets[i]);
        cos += cosine(s, t)?.as_f64();
        mse += crate::loss::loss_mse(s, t)?.as_f64();
        gap += crate::loss::loss_mse(s, p)?.as_f64().sqrt();
    }
    let n = n as f64;
    Ok(Evaluation { step: 0, mean_cosine: cos / n, mse: mse / n, permutation_gap: gap / n })
}

#[derive(Debug, Clone)]
pub struct TrainRun<T> {
    pub params: Params<T>,
    pub curve: Vec<CurvePoint>,
    pub evals: Vec<Evaluation>,
    pub steps_run: usize,
    pub stopped_early: bool,
}

impl<T> TrainRun<T> {
    pub fn final_eval(&self) -> Option<&Evaluation> {
        self.evals.last()
    }
}

fn diverged(step: usize, cause: &str) -> AnatomyError {
    let last = match step {
        0 => "none".to_string(),
        s => (s - 1).to_string(),
    };
    AnatomyError::Numeric {
        op: "train",
        message: format!("training diverged at step {step} ({cause}); last finite step: {last}"),
    }
}

/// One optimisation step: loss breakdown and gradients for every tensor.
pub fn loss_and_grads<T: Real>(
    config: &EncoderConfig,
    params: &Params<T>,
    batch: &[&[u32]],
    permuted: Option<&[&[u32]]>,
    targets: &[&[T]],
    weights: &LossWeights,
    exec: Exec,
) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
    let b = batch.len();
    let mut tape = Tape::new(exec);
    let vars = params.bind(&mut tape, true)?;
    let mut all: Vec<&[u32]> = batch.to_vec();
    if let Some(p) = permuted {
        all.extend_from_slice(p);
    }
    let emb = encode(&mut tape, config, &vars, &all)?;
    let (s, p) = match permuted {
        Some(_) => (
            tape.select_rows(emb, (0..b).collect())?,
            Some(tape.select_rows(emb, (b..2 * b).collect())?),
        ),
        None => (emb, None),
    };
    let mut t = Tensor::zeros(b, config.out_dim);
    for (i, row) in targets.iter().enumerate() {
        t.row_mut(i).copy_from_slice(row);
    }
    let t = tape.constant(t)?;
    let loss = batch_loss(&mut tape, s, t, p, weights)?;
    let mut grads = tape.backward(loss.total)?;
    let g = vars
        .tensors()
        .into_iter()
        .zip(params.tensors())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.rows, p.cols)))
        .collect();
    Ok((loss.breakdown(&tape), g))
}

/// Trains `init` toward the task targets.
pub fn train<T: Real>(
    task: &DistillTask<'_, T>,
    init: Params<T>,
    weights: &LossWeights,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainRun<T>> {
    task.validate()?;
    cfg.validate()?;
    weights.validate()?;
    init.validate(&task.config)?;
    let l = task.config.context;
    let base: Vec<TokenSequence> = task.prompts.prompts.iter().map(|p| p.sequence(l)).collect();
    let use_perm = weights.consist > 0.0;
    let mut params = init;
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut stopped_early = false;
    let batch = cfg.batch_size.min(task.train.len());

    let eval_at = |params: &Params<T>, step: usize| -> Result<Option<Evaluation>> {
        if task.heldout.is_empty() {
            return Ok(None);
        }
        let mut e = evaluate(&task.config, params, task.prompts, task.targets, &task.heldout, exec)?;
        e.step = step;
        Ok(Some(e))
    };

    let mut steps_run = 0;
    for step in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed ^ BATCH_SALT, step as u64, 0));
        let mut picked: Vec<usize> = index::sample(&mut rng, task.train.len(), batch)
            .into_iter()
            .map(|j| task.train[j])
            .collect();
        picked.sort_unstable();
        let contents: Vec<&[u32]> = picked.iter().map(|&i| &base[i].ids[..base[i].content_len]).collect();
        let perm_seqs: Vec<TokenSequence> = if use_perm {
            picked
                .iter()
                .map(|&i| task.prompts.prompts[i].permuted(step_seed(cfg.seed, step as u64, i as u64), l))
                .collect()
        } else {
            Vec::new()
        };
        let perm: Vec<&[u32]> = perm_seqs.iter().map(|s| &s.ids[..s.content_len]).collect();
        let targets: Vec<&[T]> = picked.iter().map(|&i| task.targets[i].as_slice()).collect();
        let (loss, grads) = loss_and_grads(
            &task.config,
            &params,
            &contents,
            use_perm.then_some(perm.as_slice()),
            &targets,
            weights,
            exec,
        )
        .map_err(|e| match e {
            AnatomyError::Numeric { op, .. } => diverged(step, &format!("non-finite {op}")),
            other => other,
        })?;
        if !loss.total.is_finite() {
            return Err(diverged(step, "non-finite loss"));
        }
        curve.push(CurvePoint { step, mse: loss.mse, cos: loss.cos, consist: loss.consist, total: loss.total });
        opt.step(&mut params, &grads, learning_rate(cfg.lr, step, cfg.steps, cfg.warmup, cfg.schedule));
        if params.tensors().iter().any(|t| !t.is_finite()) {
            return Err(diverged(step + 1, "non-finite parameters"));
        }
        steps_run = step + 1;
        if cfg.eval_every > 0 && steps_run % cfg.eval_every == 0 && steps_run < cfg.steps {
            if let Some(e) = eval_at(&params, steps_run)? {
                evals.push(e);
                if cfg.stop_at_cosine.is_some_and(|target| e.mean_cosine >= target) {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    if !stopped_early {
        if let Some(e) = eval_at(&params, steps_run)? {
            evals.push(e);
        }
    }
    Ok(TrainRun { params, curve, evals, steps_run, stopped_early })
}
