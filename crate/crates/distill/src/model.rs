//! A pre-norm transformer text encoder pooled at the end marker.

use anatomy_core::{AnatomyError, Exec, Result, TokenSequence};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::{Segment, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub width: usize,
    pub n_heads: usize,
    pub context: usize,
    pub vocab: usize,
    pub out_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AnatomyError::InvalidArgument(m));
        if !(1..=4).contains(&self.n_layers) {
            return bad(format!("n_layers must be 1..=4, got {}", self.n_layers));
        }
        if self.width == 0 || self.n_heads == 0 || self.width % self.n_heads != 0 {
            return bad(format!("width {} must be a positive multiple of n_heads {}", self.width, self.n_heads));
        }
        if self.context < 3 {
            return bad(format!("context must be >= 3, got {}", self.context));
        }
        if self.vocab == 0 || self.out_dim == 0 {
            return bad("vocab and out_dim must be at least 1".into());
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        FFN_MULT * self.width
    }
}

/// Per-layer weights. Matrices are stored `in x out` and applied as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<P> {
    pub ln1_gain: P,
    pub ln1_bias: P,
    pub w_q: P,
    pub b_q: P,
    pub w_k: P,
    pub b_k: P,
    pub w_v: P,
    pub b_v: P,
    pub w_o: P,
    pub b_o: P,
    pub ln2_gain: P,
    pub ln2_bias: P,
    pub w_up: P,
    pub b_up: P,
    pub w_down: P,
    pub b_down: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<P> {
    pub token_embedding: P,
    pub positional: P,
    pub layers: Vec<LayerParams<P>>,
    pub final_gain: P,
    pub final_bias: P,
    pub projection: P,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Weight,
    Bias,
    Gain,
}

const LAYER_FIELDS: [(&str, Role); 16] = [
    ("ln1_gain", Role::Gain),
    ("ln1_bias", Role::Bias),
    ("w_q", Role::Weight),
    ("b_q", Role::Bias),
    ("w_k", Role::Weight),
    ("b_k", Role::Bias),
    ("w_v", Role::Weight),
    ("b_v", Role::Bias),
    ("w_o", Role::Weight),
    ("b_o", Role::Bias),
    ("ln2_gain", Role::Gain),
    ("ln2_bias", Role::Bias),
    ("w_up", Role::Weight),
    ("b_up", Role::Bias),
    ("w_down", Role::Weight),
    ("b_down", Role::Bias),
];

impl<P> LayerParams<P> {
    fn fields(&self) -> [&P; 16] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v, &self.b_v,
            &self.w_o, &self.b_o, &self.ln2_gain, &self.ln2_bias, &self.w_up, &self.b_up, &self.w_down,
            &self.b_down,
        ]
    }

    fn fields_mut(&mut self) -> [&mut P; 16] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.w_q, &mut self.b_q, &mut self.w_k, &mut self.b_k,
            &mut self.w_v, &mut self.b_v, &mut self.w_o, &mut self.b_o, &mut self.ln2_gain, &mut self.ln2_bias,
            &mut self.w_up, &mut self.b_up, &mut self.w_down, &mut self.b_down,
        ]
    }

    fn from_fields(mut it: impl Iterator<Item = P>) -> Self {
        let mut next = || it.next().expect("layer field count");
        LayerParams {
            ln1_gain: next(),
            ln1_bias: next(),
            w_q: next(),
            b_q: next(),
            w_k: next(),
            b_k: next(),
            w_v: next(),
            b_v: next(),
            w_o: next(),
            b_o: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            w_up: next(),
            b_up: next(),
            w_down: next(),
            b_down: next(),
        }
    }
}

impl<P> EncoderParams<P> {
    /// Every tensor with a stable name and its role, in a fixed order.
    pub fn named(&self) -> Vec<(String, Role, &P)> {
        let mut out = vec![
            ("token_embedding".to_string(), Role::Weight, &self.token_embedding),
            ("positional".to_string(), Role::Weight, &self.positional),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for ((name, role), p) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layer{l}.{name}"), *role, p));
            }
        }
        out.push(("final_gain".into(), Role::Gain, &self.final_gain));
        out.push(("final_bias".into(), Role::Bias, &self.final_bias));
        out.push(("projection".into(), Role::Weight, &self.projection));
        out
    }

    pub fn tensors(&self) -> Vec<&P> {
        self.named().into_iter().map(|(_, _, p)| p).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.token_embedding, &mut self.positional];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out.push(&mut self.projection);
        out
    }

    /// Rebuilds a parameter set from tensors in [`EncoderParams::named`] order.
    pub fn from_ordered(n_layers: usize, items: Vec<P>) -> Result<Self> {
        let expected = 5 + 16 * n_layers;
        if items.len() != expected {
            return Err(AnatomyError::Validation(format!(
                "expected {expected} parameter tensors, got {}",
                items.len()
            )));
        }
        let mut it = items.into_iter();
        let token_embedding = it.next().unwrap();
        let positional = it.next().unwrap();
        let layers = (0..n_layers).map(|_| LayerParams::from_fields(it.by_ref())).collect();
        Ok(EncoderParams {
            token_embedding,
            positional,
            layers,
            final_gain: it.next().unwrap(),
            final_bias: it.next().unwrap(),
            projection: it.next().unwrap(),
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> EncoderParams<Q> {
        let items = self.tensors().into_iter().map(&mut f).collect();
        EncoderParams::from_ordered(self.layers.len(), items).expect("same layout")
    }

    pub fn try_map<Q>(&self, mut f: impl FnMut(&P) -> Result<Q>) -> Result<EncoderParams<Q>> {
        let items = self.tensors().into_iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        EncoderParams::from_ordered(self.layers.len(), items)
    }
}

/// Expected shape of every tensor, in [`EncoderParams::named`] order.
pub fn shapes(config: &EncoderConfig) -> EncoderParams<(usize, usize)> {
    let (w, h) = (config.width, config.hidden());
    let layer = || LayerParams {
        ln1_gain: (1, w),
        ln1_bias: (1, w),
        w_q: (w, w),
        b_q: (1, w),
        w_k: (w, w),
        b_k: (1, w),
        w_v: (w, w),
        b_v: (1, w),
        w_o: (w, w),
        b_o: (1, w),
        ln2_gain: (1, w),
        ln2_bias: (1, w),
        w_up: (w, h),
        b_up: (1, h),
        w_down: (h, w),
        b_down: (1, w),
    };
    EncoderParams {
        token_embedding: (config.vocab, w),
        positional: (config.context, w),
        layers: (0..config.n_layers).map(|_| layer()).collect(),
        final_gain: (1, w),
        final_bias: (1, w),
        projection: (w, config.out_dim),
    }
}

pub type Params<T> = EncoderParams<Tensor<T>>;

impl<T: Real> EncoderParams<Tensor<T>> {
    /// Normal(0, 0.02) weights, zero biases, unit gains.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        Self::sample(config, seed, INIT_STD, false)
    }

    /// A frozen random teacher: [`EncoderParams::init`] with the output
    /// projection drawn at std `1/sqrt(width)`, so embedding coordinates are
    /// of unit scale rather than shrunk by the small init.
    pub fn teacher(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut p = Self::init(config, seed)?;
        let std = 1.0 / (config.width as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EAC_4E55);
        for v in p.projection.data.iter_mut() {
            *v = T::of(normal.sample(&mut rng));
        }
        Ok(p)
    }

    /// Every entry random, gains around 1: a generic point for checks.
    pub fn random(config: &EncoderConfig, seed: u64, std: f64) -> Result<Self> {
        Self::sample(config, seed, std, true)
    }

    fn sample(config: &EncoderConfig, seed: u64, std: f64, all: bool) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, std)
            .map_err(|e| AnatomyError::InvalidArgument(format!("init std {std}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = shapes(config);
        let named = shape.named();
        let items = named
            .iter()
            .map(|(_, role, &(r, c))| {
                let data = (0..r * c)
                    .map(|_| match (role, all) {
                        (Role::Weight, _) => T::of(normal.sample(&mut rng)),
                        (Role::Bias, true) => T::of(normal.sample(&mut rng)),
                        (Role::Gain, true) => T::of(1.0 + normal.sample(&mut rng)),
                        (Role::Bias, false) => T::zero(),
                        (Role::Gain, false) => T::one(),
                    })
                    .collect();
                Tensor::from_vec(r, c, data)
            })
            .collect();
        EncoderParams::from_ordered(config.n_layers, items)
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        config.validate()?;
        if self.layers.len() != config.n_layers {
            return Err(AnatomyError::Validation(format!(
                "parameters have {} layers, config has {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        for ((name, _, t), want) in self.named().into_iter().zip(shapes(config).tensors()) {
            if t.shape() != *want {
                return Err(AnatomyError::Validation(format!(
                    "{name}: expected {}x{}, got {}x{}",
                    want.0, want.1, t.rows, t.cols
                )));
            }
            if !t.is_finite() {
                return Err(AnatomyError::Validation(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        self.map(|t| t.cast())
    }

    /// The same parameters with the positional table cut to `context` rows.
    pub fn with_context(&self, context: usize) -> Result<Self> {
        if context > self.positional.rows {
            return Err(AnatomyError::InvalidArgument(format!(
                "cannot extend {} positional rows to {context}",
                self.positional.rows
            )));
        }
        let mut out = self.clone();
        let w = out.positional.cols;
        out.positional = Tensor::from_vec(context, w, self.positional.data[..context * w].to_vec());
        Ok(out)
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Puts every tensor on `tape`, trainable or not.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<EncoderParams<Var>> {
        self.try_map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
    }
}

/// Content ids of `seq`, checked against `config`.
pub fn content_of<'a>(config: &EncoderConfig, seq: &'a TokenSequence) -> Result<&'a [u32]> {
    if seq.ids.len() != config.context {
        return Err(AnatomyError::Validation(format!(
            "sequence length {} does not match context {}",
            seq.ids.len(),
            config.context
        )));
    }
    if seq.content_len == 0 || seq.content_len > seq.ids.len() {
        return Err(AnatomyError::Validation(format!("invalid content length {}", seq.content_len)));
    }
    if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= config.vocab) {
        return Err(AnatomyError::Validation(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab
        )));
    }
    Ok(&seq.ids[..seq.content_len])
}

/// Embeds a batch of content-id runs (start marker through end marker).
/// Only content positions enter the computation, so padding cannot leak in.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    config: &EncoderConfig,
    p: &EncoderParams<Var>,
    batch: &[&[u32]],
) -> Result<Var> {
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(batch.len());
    let mut ends = Vec::with_capacity(batch.len());
    for content in batch {
        if content.is_empty() || content.len() > config.context {
            return Err(AnatomyError::Validation(format!(
                "content of {} tokens does not fit context {}",
                content.len(),
                config.context
            )));
        }
        segments.push(Segment { start: ids.len(), len: content.len() });
        ids.extend(content.iter().map(|&t| t as usize));
        positions.extend(0..content.len());
        ends.push(ids.len() - 1);
    }
    let tok = tape.gather(p.token_embedding, ids)?;
    let pos = tape.gather(p.positional, positions)?;
    let mut x = tape.add(tok, pos)?;
    for layer in &p.layers {
        let h = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
        let q = linear(tape, h, layer.w_q, layer.b_q)?;
        let k = linear(tape, h, layer.w_k, layer.b_k)?;
        let v = linear(tape, h, layer.w_v, layer.b_v)?;
        let a = tape.attention(q, k, v, segments.clone(), config.n_heads)?;
        let a = linear(tape, a, layer.w_o, layer.b_o)?;
        x = tape.add(x, a)?;
        let h = tape.layer_norm(x, layer.ln2_gain, layer.ln2_bias)?;
        let up = linear(tape, h, layer.w_up, layer.b_up)?;
        let up = tape.gelu(up)?;
        let down = linear(tape, up, layer.w_down, layer.b_down)?;
        x = tape.add(x, down)?;
    }
    let x = tape.layer_norm(x, p.final_gain, p.final_bias)?;
    let pooled = tape.select_rows(x, ends)?;
    tape.matmul(pooled, p.projection)
}

fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Embeddings of several sequences, one row each.
pub fn forward_batch<T: Real>(
    config: &EncoderConfig,
    params: &Params<T>,
    seqs: &[TokenSequence],
    exec: Exec,
) -> Result<Vec<Vec<T>>> {
    let contents = seqs.iter().map(|s| content_of(config, s)).collect::<Result<Vec<_>>>()?;
    embed_contents(config, params, &contents, exec)
}

pub(crate) fn embed_contents<T: Real>(
    config: &EncoderConfig,
    params: &Params<T>,
    contents: &[&[u32]],
    exec: Exec,
) -> Result<Vec<Vec<T>>> {
    if contents.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new(exec);
    let vars = params.bind(&mut tape, false)?;
    let out = encode(&mut tape, config, &vars, contents)?;
    let t = tape.value(out);
    Ok((0..t.rows).map(|i| t.row(i).to_vec()).collect())
}

/// The `out_dim` embedding of one sequence.
pub fn forward<T: Real>(config: &EncoderConfig, params: &Params<T>, seq: &TokenSequence) -> Result<Vec<T>> {
    params.validate(config)?;
    let mut rows = forward_batch(config, params, std::slice::from_ref(seq), Exec::Sequential)?;
    Ok(rows.pop().expect("one row"))
}
