// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small byte-level decoder-only transformer.
//!
//! Blocks are pre-LayerNorm (LN, attention, residual; LN, MLP, residual) with
//! a GELU MLP and learned absolute position embeddings; the output head is
//! tied to the token embedding. Linear layers carry no bias, so the MLP
//! down-projection at the edited layer is exactly the `W` of the key/value
//! view: `value = W · key`.
//!
//! The edited layer exposes two taps:
//!
//! - the *key*: up-projection output after the GELU,
//! - the *value*: down-projection output before the residual add.
//!
//! The value tap is also the injection point used by value-vector search.

mod backward;
mod train;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, Matrix, Vector};
use crate::{Error, Result};

pub use backward::{injection_gradient, Target};
pub use train::{head_tail_means, train, TrainConfig, TrainOutcome};

pub type TokenId = u32;

/// Number of byte tokens.
pub const BYTE_VOCAB: usize = 256;
/// Token id of the optional beginning-of-sequence marker.
pub const BOS_TOKEN: TokenId = 256;

/// Byte-level tokenization: one token per UTF-8 byte.
pub fn tokenize(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Inverse of [`tokenize`]; non-byte tokens (BOS) are dropped.
pub fn detokenize(tokens: &[TokenId]) -> Vec<u8> {
    tokens.iter().filter_map(|&t| u8::try_from(t).ok()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BosMode {
    None,
    Prepend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosSwap {
    Off,
    /// Position row 1 is copied into row 0.
    SecondToFirst,
    /// Position row 0 is copied into row 1.
    FirstToSecond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub edited_layer: usize,
    pub bos_mode: BosMode,
    pub pos_swap: PosSwap,
    pub ln_epsilon: f64,
}

impl ModelConfig {
    /// A byte-level configuration with `d_mlp = 4 * d_model`.
    pub fn byte_level(n_layers: usize, d_model: usize, n_heads: usize, max_seq: usize, edited_layer: usize) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_mlp: 4 * d_model,
            vocab_size: BYTE_VOCAB,
            max_seq,
            edited_layer,
            bos_mode: BosMode::None,
            pos_swap: PosSwap::Off,
            ln_epsilon: 1e-5,
        }
    }

    /// Switches BOS prepending on, growing the vocabulary to hold the marker.
    pub fn with_bos(mut self) -> Self {
        self.bos_mode = BosMode::Prepend;
        self.vocab_size = self.vocab_size.max(BOS_TOKEN as usize + 1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_mlp == 0 || self.n_heads == 0 {
            return Err(Error::InvalidConfig("layer, width, and head counts must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig("d_model must be divisible by n_heads"));
        }
        if self.edited_layer >= self.n_layers {
            return Err(Error::InvalidConfig("edited_layer must be < n_layers"));
        }
        if self.max_seq < 2 {
            return Err(Error::InvalidConfig("max_seq must be at least 2"));
        }
        if self.vocab_size == 0 {
            return Err(Error::InvalidConfig("vocab_size must be positive"));
        }
        if self.bos_mode == BosMode::Prepend && self.vocab_size <= BOS_TOKEN as usize {
            return Err(Error::InvalidConfig("vocab_size too small for the BOS token"));
        }
        if !(self.ln_epsilon > 0.0) {
            return Err(Error::InvalidConfig("ln_epsilon must be positive"));
        }
        Ok(())
    }

    /// Internal positions occupied before the first input token.
    pub fn bos_offset(&self) -> usize {
        match self.bos_mode {
            BosMode::None => 0,
            BosMode::Prepend => 1,
        }
    }

    /// Longest input (excluding any internal BOS) accepted by `forward`.
    pub fn max_input_len(&self) -> usize {
        self.max_seq - self.bos_offset()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    /// `d_model x d_model`, applied as `y = W x`.
    pub attn_q: Matrix,
    pub attn_k: Matrix,
    pub attn_v: Matrix,
    pub attn_out: Matrix,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    /// `d_mlp x d_model`; its GELU output is the key.
    pub mlp_up: Matrix,
    /// `d_model x d_mlp`; the matrix a rank-one edit rewrites.
    pub mlp_down: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyLm {
    config: ModelConfig,
    /// `vocab_size x d_model`, also the output head.
    pub token_embedding: Matrix,
    /// `max_seq x d_model`.
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Vec<f64>,
    pub final_ln_bias: Vec<f64>,
}

/// Per-position outputs of one forward pass, indexed by input position.
///
/// When the model prepends BOS, internal positions are shifted by one;
/// `positions[i]` records the internal position of input token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub logits: Vec<Vector>,
    /// Up-projection output after GELU at the edited layer.
    pub tapped_keys: Vec<Vector>,
    /// Down-projection output at the edited layer (after any injection).
    pub tapped_values: Vec<Vector>,
    pub positions: Vec<usize>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

/// Replaces the down-projection output at `(layer, internal pos)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Injection<'a> {
    pub layer: usize,
    pub pos: usize,
    pub value: &'a [f64],
}

#[derive(Debug, Clone, Default)]
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LayerCache {
    pub ln1: NormCache,
    pub h1: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// `n_heads x T x T`, zero above the diagonal.
    pub probs: Vec<f64>,
    pub ctx: Vec<f64>,
    pub ln2: NormCache,
    pub h2: Vec<f64>,
    pub pre: Vec<f64>,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    /// Internal token sequence (with BOS if prepended).
    pub tokens: Vec<TokenId>,
    pub layers: Vec<LayerCache>,
    pub final_ln: NormCache,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub injected: Option<(usize, usize)>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }
}

impl TinyLm {
    /// Random initialization: weights ~ N(0, 0.02), residual output
    /// projections scaled down by `sqrt(2 * n_layers)`, norms at identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let residual_scale = 1.0 / libm::sqrt(2.0 * config.n_layers as f64);
        let mut sample = |rows: usize, cols: usize, scale: f64| {
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng) * scale).collect();
            Matrix::new(rows, cols, data).expect("finite init")
        };
        let (d, m) = (config.d_model, config.d_mlp);
        let token_embedding = sample(config.vocab_size, d, 1.0);
        let position_embedding = sample(config.max_seq, d, 0.5);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                attn_q: sample(d, d, 1.0),
                attn_k: sample(d, d, 1.0),
                attn_v: sample(d, d, 1.0),
                attn_out: sample(d, d, residual_scale),
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                mlp_up: sample(m, d, 1.0),
                mlp_down: sample(d, m, residual_scale),
            })
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_ln_gain: vec![1.0; d],
            final_ln_bias: vec![0.0; d],
        })
    }

    /// A model with every parameter zero except unit norm gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, m) = (config.d_model, config.d_mlp);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                attn_q: Matrix::zeros(d, d),
                attn_k: Matrix::zeros(d, d),
                attn_v: Matrix::zeros(d, d),
                attn_out: Matrix::zeros(d, d),
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                mlp_up: Matrix::zeros(m, d),
                mlp_down: Matrix::zeros(d, m),
            })
            .collect();
        Ok(Self {
            token_embedding: Matrix::zeros(config.vocab_size, d),
            position_embedding: Matrix::zeros(config.max_seq, d),
            layers,
            final_ln_gain: vec![1.0; d],
            final_ln_bias: vec![0.0; d],
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same weights under a different BOS convention (the vocabulary is kept).
    pub fn with_bos_mode(&self, mode: BosMode) -> Result<Self> {
        let mut out = self.clone();
        out.config.bos_mode = mode;
        out.config.validate()?;
        Ok(out)
    }

    /// The down-projection at the edited layer.
    pub fn edited_weight(&self) -> &Matrix {
        &self.layers[self.config.edited_layer].mlp_down
    }

    /// Copy with the edited-layer down-projection replaced.
    pub fn with_edited_weight(&self, w: Matrix) -> Result<Self> {
        let cur = self.edited_weight();
        if w.rows() != cur.rows() || w.cols() != cur.cols() {
            return Err(Error::DimensionMismatch("edited weight shape"));
        }
        let mut out = self.clone();
        out.layers[self.config.edited_layer].mlp_down = w;
        Ok(out)
    }

    /// Named parameter tensors with their shapes, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        let mat = |m: &Matrix| vec![m.rows(), m.cols()];
        out.push(("token_embedding".into(), mat(&self.token_embedding), self.token_embedding.as_slice()));
        out.push(("position_embedding".into(), mat(&self.position_embedding), self.position_embedding.as_slice()));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln1.gain"), vec![l.ln1_gain.len()], &l.ln1_gain));
            out.push((format!("layers.{i}.ln1.bias"), vec![l.ln1_bias.len()], &l.ln1_bias));
            out.push((format!("layers.{i}.attn.q"), mat(&l.attn_q), l.attn_q.as_slice()));
            out.push((format!("layers.{i}.attn.k"), mat(&l.attn_k), l.attn_k.as_slice()));
            out.push((format!("layers.{i}.attn.v"), mat(&l.attn_v), l.attn_v.as_slice()));
            out.push((format!("layers.{i}.attn.out"), mat(&l.attn_out), l.attn_out.as_slice()));
            out.push((format!("layers.{i}.ln2.gain"), vec![l.ln2_gain.len()], &l.ln2_gain));
            out.push((format!("layers.{i}.ln2.bias"), vec![l.ln2_bias.len()], &l.ln2_bias));
            out.push((format!("layers.{i}.mlp.up"), mat(&l.mlp_up), l.mlp_up.as_slice()));
            out.push((format!("layers.{i}.mlp.down"), mat(&l.mlp_down), l.mlp_down.as_slice()));
        }
        out.push(("final_ln.gain".into(), vec![self.final_ln_gain.len()], &self.final_ln_gain));
        out.push(("final_ln.bias".into(), vec![self.final_ln_bias.len()], &self.final_ln_bias));
        out
    }

    /// Mutable views of the parameters, in the order of [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.token_embedding.as_mut_slice());
        out.push(self.position_embedding.as_mut_slice());
        for l in &mut self.layers {
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            out.push(l.attn_q.as_mut_slice());
            out.push(l.attn_k.as_mut_slice());
            out.push(l.attn_v.as_mut_slice());
            out.push(l.attn_out.as_mut_slice());
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
            out.push(l.mlp_up.as_mut_slice());
            out.push(l.mlp_down.as_mut_slice());
        }
        out.push(&mut self.final_ln_gain);
        out.push(&mut self.final_ln_bias);
        out
    }

    /// Rebuilds a model from named tensors (see [`Self::named_tensors`]).
    pub fn from_tensors<'a>(
        config: ModelConfig,
        mut lookup: impl FnMut(&str, &[usize]) -> Option<&'a [f64]>,
    ) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let names: Vec<(String, Vec<usize>)> = model.named_tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        for ((name, shape), dst) in names.iter().zip(model.tensors_mut()) {
            let src = lookup(name, shape).ok_or(Error::InvalidConfig("missing or misshapen tensor"))?;
            if src.len() != dst.len() {
                return Err(Error::DimensionMismatch("tensor length"));
            }
            if !src.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite("tensor"));
            }
            dst.copy_from_slice(src);
        }
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Builds the internal token sequence and checks it against the config.
    pub(crate) fn internal_tokens(&self, tokens: &[TokenId]) -> Result<Vec<TokenId>> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::SequenceTooShort { len: 0, min: 1 });
        }
        let len = tokens.len() + cfg.bos_offset();
        if len > cfg.max_seq {
            return Err(Error::SequenceTooLong { len, max: cfg.max_seq });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange { token: bad, vocab: cfg.vocab_size });
        }
        let mut out = Vec::with_capacity(len);
        if cfg.bos_mode == BosMode::Prepend {
            out.push(BOS_TOKEN);
        }
        out.extend_from_slice(tokens);
        Ok(out)
    }

    pub fn forward(&self, tokens: &[TokenId]) -> Result<ForwardTrace> {
        let cache = self.run(tokens, None)?;
        Ok(self.trace_from(&cache))
    }

    /// Forward pass with the edited-layer down-projection output at input
    /// position `pos` replaced by `v`.
    pub fn forward_with_injection(&self, tokens: &[TokenId], pos: usize, v: &Vector) -> Result<ForwardTrace> {
        let cache = self.run_injected(tokens, pos, v)?;
        Ok(self.trace_from(&cache))
    }

    pub(crate) fn run_injected(&self, tokens: &[TokenId], pos: usize, v: &Vector) -> Result<ForwardCache> {
        if pos >= tokens.len() {
            return Err(Error::PositionOutOfRange { pos, len: tokens.len() });
        }
        if v.dim() != self.config.d_model {
            return Err(Error::DimensionMismatch("injected vector must have d_model entries"));
        }
        let inj =
            Injection { layer: self.config.edited_layer, pos: pos + self.config.bos_offset(), value: v.as_slice() };
        self.run(tokens, Some(inj))
    }

    /// Post-GELU MLP keys for every layer: `result[layer][input position]`.
    pub fn layer_keys(&self, tokens: &[TokenId]) -> Result<Vec<Vec<Vector>>> {
        let cache = self.run(tokens, None)?;
        let off = self.config.bos_offset();
        let m = self.config.d_mlp;
        Ok(cache
            .layers
            .iter()
            .map(|l| {
                (off..cache.len()).map(|t| Vector::from_vec_unchecked(l.key[t * m..(t + 1) * m].to_vec())).collect()
            })
            .collect())
    }

    /// Logits at the last input position only.
    pub fn last_logits(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let cache = self.run(tokens, None)?;
        let v = self.config.vocab_size;
        let t = cache.len() - 1;
        Ok(cache.logits[t * v..(t + 1) * v].to_vec())
    }

    fn trace_from(&self, cache: &ForwardCache) -> ForwardTrace {
        let cfg = &self.config;
        let off = cfg.bos_offset();
        let (d, m, v) = (cfg.d_model, cfg.d_mlp, cfg.vocab_size);
        let tapped = &cache.layers[cfg.edited_layer];
        let slice = |buf: &[f64], w: usize, t: usize| Vector::from_vec_unchecked(buf[t * w..(t + 1) * w].to_vec());
        let positions: Vec<usize> = (off..cache.len()).collect();
        ForwardTrace {
            logits: positions.iter().map(|&t| slice(&cache.logits, v, t)).collect(),
            tapped_keys: positions.iter().map(|&t| slice(&tapped.key, m, t)).collect(),
            tapped_values: positions.iter().map(|&t| slice(&tapped.value, d, t)).collect(),
            positions,
        }
    }

    pub(crate) fn run(&self, tokens: &[TokenId], injection: Option<Injection<'_>>) -> Result<ForwardCache> {
        let tokens = self.internal_tokens(tokens)?;
        let cfg = &self.config;
        let t_len = tokens.len();
        let (d, m) = (cfg.d_model, cfg.d_mlp);
        let mut x = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &mut x[t * d..(t + 1) * d];
            for ((r, e), p) in
                row.iter_mut().zip(self.token_embedding.row(tok as usize)).zip(self.position_embedding.row(t))
            {
                *r = e + p;
            }
        }
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (li, w) in self.layers.iter().enumerate() {
            let mut c = LayerCache::default();
            let (ln1, h1) = layer_norm(&x, d, &w.ln1_gain, &w.ln1_bias, cfg.ln_epsilon);
            c.ln1 = ln1;
            c.q = linear(&h1, d, &w.attn_q);
            c.k = linear(&h1, d, &w.attn_k);
            c.v = linear(&h1, d, &w.attn_v);
            c.h1 = h1;
            let (probs, ctx) = attention(&c.q, &c.k, &c.v, t_len, cfg.n_heads, cfg.head_dim());
            c.probs = probs;
            let attn_out = linear(&ctx, d, &w.attn_out);
            c.ctx = ctx;
            for (xi, a) in x.iter_mut().zip(&attn_out) {
                *xi += a;
            }
            let (ln2, h2) = layer_norm(&x, d, &w.ln2_gain, &w.ln2_bias, cfg.ln_epsilon);
            c.ln2 = ln2;
            c.pre = linear(&h2, d, &w.mlp_up);
            c.h2 = h2;
            c.key = c.pre.iter().map(|&a| gelu(a)).collect();
            c.value = linear(&c.key, m, &w.mlp_down);
            if let Some(inj) = injection.filter(|inj| inj.layer == li) {
                c.value[inj.pos * d..(inj.pos + 1) * d].copy_from_slice(inj.value);
            }
            for (xi, a) in x.iter_mut().zip(&c.value) {
                *xi += a;
            }
            layers.push(c);
        }
        let (final_ln, hidden) = layer_norm(&x, d, &self.final_ln_gain, &self.final_ln_bias, cfg.ln_epsilon);
        let logits = linear(&hidden, d, &self.token_embedding);
        Ok(ForwardCache { tokens, layers, final_ln, hidden, logits, injected: injection.map(|i| (i.layer, i.pos)) })
    }
}

/// Copy of the model with one position-embedding row overwritten by another.
pub fn apply_pos_swap(model: &TinyLm, mode: PosSwap) -> TinyLm {
    let mut out = model.clone();
    let (src, dst) = match mode {
        PosSwap::Off => return out,
        PosSwap::SecondToFirst => (1, 0),
        PosSwap::FirstToSecond => (0, 1),
    };
    let row = model.position_embedding.row(src).to_vec();
    out.position_embedding.row_mut(dst).copy_from_slice(&row);
    out.config.pos_swap = mode;
    out
}

/// `y[t] = W x[t]` for each row of `x` (`T x in`), `W` is `out x in`.
pub(crate) fn linear(x: &[f64], in_dim: usize, w: &Matrix) -> Vec<f64> {
    debug_assert_eq!(w.cols(), in_dim);
    let out_dim = w.rows();
    let t_len = x.len() / in_dim;
    let mut y = vec![0.0; t_len * out_dim];
    for t in 0..t_len {
        let xt = &x[t * in_dim..(t + 1) * in_dim];
        for (o, yo) in y[t * out_dim..(t + 1) * out_dim].iter_mut().enumerate() {
            *yo = dot(xt, w.row(o));
        }
    }
    y
}

pub(crate) fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64], eps: f64) -> (NormCache, Vec<f64>) {
    let t_len = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; t_len];
    let mut y = vec![0.0; x.len()];
    for t in 0..t_len {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / libm::sqrt(var + eps);
        rstd[t] = r;
        for i in 0..d {
            let h = (row[i] - mean) * r;
            xhat[t * d + i] = h;
            y[t * d + i] = h * gain[i] + bias[i];
        }
    }
    (NormCache { xhat, rstd }, y)
}

/// Causal multi-head attention. Returns (probabilities, context).
fn attention(q: &[f64], k: &[f64], v: &[f64], t_len: usize, n_heads: usize, hd: usize) -> (Vec<f64>, Vec<f64>) {
    let d = n_heads * hd;
    let scale = 1.0 / libm::sqrt(hd as f64);
    let mut probs = vec![0.0; n_heads * t_len * t_len];
    let mut ctx = vec![0.0; t_len * d];
    for h in 0..n_heads {
        for t in 0..t_len {
            let qt = &q[t * d + h * hd..t * d + (h + 1) * hd];
            let prow = &mut probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
            let mut max = f64::NEG_INFINITY;
            for s in 0..=t {
                let score = dot(qt, &k[s * d + h * hd..s * d + (h + 1) * hd]) * scale;
                prow[s] = score;
                max = max.max(score);
            }
            let mut sum = 0.0;
            for p in prow[..=t].iter_mut() {
                *p = libm::exp(*p - max);
                sum += *p;
            }
            for p in prow[..=t].iter_mut() {
                *p /= sum;
            }
            let out = &mut ctx[t * d + h * hd..t * d + (h + 1) * hd];
            for s in 0..=t {
                crate::linalg::axpy(prow[s], &v[s * d + h * hd..s * d + (h + 1) * hd], out);
            }
        }
    }
    (probs, ctx)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let th = libm::tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable log-softmax of one row.
pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(row.iter().map(|x| libm::exp(x - max)).sum::<f64>());
    row.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TinyLm {
        TinyLm::new(ModelConfig::byte_level(2, 8, 2, 16, 1), 3).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::byte_level(2, 8, 3, 16, 1);
        assert!(c.validate().is_err());
        c.n_heads = 2;
        c.edited_layer = 2;
        assert!(c.validate().is_err());
        c.edited_layer = 1;
        c.max_seq = 1;
        assert!(c.validate().is_err());
        let mut b = ModelConfig::byte_level(1, 8, 2, 16, 0);
        b.bos_mode = BosMode::Prepend;
        assert!(b.validate().is_err());
        assert!(ModelConfig::byte_level(1, 8, 2, 16, 0).with_bos().validate().is_ok());
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = small();
        assert!(matches!(m.forward(&[0; 17]), Err(Error::SequenceTooLong { len: 17, max: 16 })));
        assert!(matches!(m.forward(&[300]), Err(Error::TokenOutOfRange { token: 300, .. })));
        assert!(m.forward(&[]).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let mut m = small();
        m.token_embedding = Matrix::zeros(256, 8);
        let tr = m.forward(&[1, 2, 3]).unwrap();
        for row in &tr.logits {
            assert!(row.as_slice().iter().all(|&x| x == row.as_slice()[0]));
        }
    }

    #[test]
    fn forward_is_causal() {
        let m = small();
        let a = m.forward(&[10, 20, 30, 40]).unwrap();
        let b = m.forward(&[10, 20, 99, 41]).unwrap();
        assert_eq!(a.logits[..2], b.logits[..2]);
        assert_ne!(a.logits[2], b.logits[2]);
    }

    #[test]
    fn self_injection_is_identity() {
        let m = small();
        let toks = [5, 6, 7, 8];
        let tr = m.forward(&toks).unwrap();
        let inj = m.forward_with_injection(&toks, 2, &tr.tapped_values[2]).unwrap();
        assert_eq!(tr, inj);
    }

    #[test]
    fn injection_leaves_earlier_positions() {
        let m = small();
        let toks = [5, 6, 7, 8];
        let tr = m.forward(&toks).unwrap();
        let inj = m.forward_with_injection(&toks, 2, &Vector::zeros(8)).unwrap();
        assert_eq!(tr.logits[..2], inj.logits[..2]);
        // edited layer is the last one, so only the injected position moves
        assert_ne!(tr.logits[2], inj.logits[2]);
        assert_eq!(tr.logits[3], inj.logits[3]);
        assert!(m.forward_with_injection(&toks, 4, &Vector::zeros(8)).is_err());
    }

    #[test]
    fn bos_shifts_positions() {
        let base = TinyLm::new(ModelConfig::byte_level(2, 8, 2, 16, 1).with_bos(), 9).unwrap();
        let tr = base.forward(&[65, 66]).unwrap();
        assert_eq!(tr.positions, [1, 2]);
        let bare = base.with_bos_mode(BosMode::None).unwrap();
        let ext = bare.forward(&[BOS_TOKEN, 65, 66]).unwrap();
        assert_eq!(tr.tapped_keys[0], ext.tapped_keys[1]);
        assert_eq!(tr.logits[1], ext.logits[2]);
        assert_eq!(bare.forward(&[65]).unwrap().positions, [0]);
        assert!(base.forward(&[1; 16]).is_err());
    }

    #[test]
    fn pos_swap_copies_rows() {
        let m = small();
        let s = apply_pos_swap(&m, PosSwap::SecondToFirst);
        assert_eq!(s.position_embedding.row(0), m.position_embedding.row(1));
        assert_eq!(s.position_embedding.as_slice()[8..], m.position_embedding.as_slice()[8..]);
        assert_eq!(apply_pos_swap(&s, PosSwap::SecondToFirst), s);
        let f = apply_pos_swap(&m, PosSwap::FirstToSecond);
        assert_eq!(f.position_embedding.row(1), m.position_embedding.row(0));
        assert_eq!(apply_pos_swap(&m, PosSwap::Off), m);
    }

    #[test]
    fn tensors_round_trip() {
        let m = small();
        let named = m.named_tensors();
        let rebuilt = TinyLm::from_tensors(m.config().clone(), |name, shape| {
            named.iter().find(|(n, s, _)| n == name && s == shape).map(|(_, _, d)| *d)
        })
        .unwrap();
        assert_eq!(rebuilt, m);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
