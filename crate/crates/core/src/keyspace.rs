// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subject keys and the key second-moment matrix.
//!
//! The *prefixed* key `k̄` averages the edited-layer key of the subject's
//! last token over `N` contexts `x_i ⊕ s`. The *unprefixed* key `k^u` reads
//! the same tap with no prefix at all. `C` is the mean outer product of keys
//! gathered from a corpus, plus a ridge so it is always positive definite.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::RangeInclusive;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{axpy, Cholesky, Matrix, Vector};
use crate::model::{log_softmax, TinyLm, TokenId, BYTE_VOCAB};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixSource {
    ModelGenerated,
    RandomBytes,
    UserSupplied,
}

/// The contexts `x_1 .. x_N` prepended to a subject. A prefix may be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixSet {
    pub prefixes: Vec<Vec<TokenId>>,
    pub seed: u64,
    pub source: PrefixSource,
}

impl PrefixSet {
    pub fn user_supplied(prefixes: Vec<Vec<TokenId>>) -> Result<Self> {
        if prefixes.is_empty() {
            return Err(Error::EmptyInput("prefix set needs at least one prefix"));
        }
        Ok(Self { prefixes, seed: 0, source: PrefixSource::UserSupplied })
    }

    /// A single empty prefix: `k̄` then coincides with the bare-subject key.
    pub fn empty() -> Self {
        Self { prefixes: vec![Vec::new()], seed: 0, source: PrefixSource::UserSupplied }
    }

    pub fn len(&self) -> usize {
        self.prefixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefixes.is_empty()
    }
}

/// Lengths used when sampling prefixes without an explicit length.
pub const DEFAULT_PREFIX_LENGTHS: RangeInclusive<usize> = 2..=10;
/// Default number of prefixes.
pub const DEFAULT_PREFIX_COUNT: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyBundle {
    /// Prefixed key: mean of `per_prefix_keys`.
    pub k_bar: Vector,
    /// Unprefixed key.
    pub k_u: Vector,
    pub per_prefix_keys: Vec<Vector>,
    pub subject_tokens: Vec<TokenId>,
    /// Input position `k_u` was read at.
    pub subject_last_index: usize,
}

impl KeyBundle {
    /// Largest deviation between `k_bar` and a fresh mean of the per-prefix keys.
    pub fn mean_residual(&self) -> f64 {
        match Vector::mean(&self.per_prefix_keys) {
            Ok(m) => m.sub(&self.k_bar).as_slice().iter().fold(0.0f64, |a, x| a.max(x.abs())),
            Err(_) => f64::INFINITY,
        }
    }
}

/// Edited-layer key at input position `pos`.
pub fn key_at(model: &TinyLm, tokens: &[TokenId], pos: usize) -> Result<Vector> {
    if pos >= tokens.len() {
        return Err(Error::PositionOutOfRange { pos, len: tokens.len() });
    }
    let trace = model.forward(&tokens[..=pos])?;
    Ok(trace.tapped_keys[pos].clone())
}

/// Key of the bare subject at its last token.
pub fn unprefixed_key(model: &TinyLm, subject: &[TokenId]) -> Result<Vector> {
    if subject.is_empty() {
        return Err(Error::EmptyInput("subject"));
    }
    key_at(model, subject, subject.len() - 1)
}

fn per_prefix_keys(model: &TinyLm, subject: &[TokenId], prefixes: &PrefixSet) -> Result<Vec<Vector>> {
    if subject.is_empty() {
        return Err(Error::EmptyInput("subject"));
    }
    if prefixes.is_empty() {
        return Err(Error::EmptyInput("prefix set"));
    }
    prefixes
        .prefixes
        .iter()
        .map(|x| {
            let mut seq = Vec::with_capacity(x.len() + subject.len());
            seq.extend_from_slice(x);
            seq.extend_from_slice(subject);
            key_at(model, &seq, seq.len() - 1)
        })
        .collect()
}

/// `k̄ = mean_i K(x_i ⊕ s)`, with `k_u` from the bare subject.
pub fn prefixed_key(model: &TinyLm, subject: &[TokenId], prefixes: &PrefixSet) -> Result<KeyBundle> {
    let keys = per_prefix_keys(model, subject, prefixes)?;
    Ok(KeyBundle {
        k_bar: Vector::mean(&keys)?,
        k_u: unprefixed_key(model, subject)?,
        per_prefix_keys: keys,
        subject_tokens: subject.to_vec(),
        subject_last_index: subject.len() - 1,
    })
}

/// Like [`prefixed_key`], but `k_u` is read where the subject sits inside an
/// unprefixed prompt. For a subject that opens the prompt this is the same
/// vector as the bare-subject key.
pub fn prefixed_key_in_prompt(
    model: &TinyLm,
    prompt: &[TokenId],
    subject_start: usize,
    subject_len: usize,
    prefixes: &PrefixSet,
) -> Result<KeyBundle> {
    let end = subject_start + subject_len;
    if subject_len == 0 || end > prompt.len() {
        return Err(Error::InvalidRequest("subject span outside the prompt"));
    }
    let subject = &prompt[subject_start..end];
    let keys = per_prefix_keys(model, subject, prefixes)?;
    Ok(KeyBundle {
        k_bar: Vector::mean(&keys)?,
        k_u: key_at(model, prompt, end - 1)?,
        per_prefix_keys: keys,
        subject_tokens: subject.to_vec(),
        subject_last_index: end - 1,
    })
}

/// Draws `n` prefixes with lengths from `lengths`.
///
/// `RandomBytes` draws every token as the top byte of a `next_u32` from a
/// ChaCha8 stream seeded with `seed`; lengths are drawn from the same stream
/// only when the range is not a single value. `ModelGenerated` starts from a
/// random printable ASCII byte and samples the model at temperature 1 over
/// byte tokens.
pub fn sample_prefixes(
    model: &TinyLm,
    n: usize,
    lengths: RangeInclusive<usize>,
    seed: u64,
    source: PrefixSource,
) -> Result<PrefixSet> {
    if n == 0 {
        return Err(Error::EmptyInput("prefix count"));
    }
    let (lo, hi) = (*lengths.start(), *lengths.end());
    if lo == 0 || hi < lo {
        return Err(Error::InvalidConfig("prefix lengths must be a non-empty range of positive values"));
    }
    if hi >= model.config().max_input_len() {
        return Err(Error::SequenceTooLong { len: hi + 1, max: model.config().max_input_len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prefixes = Vec::with_capacity(n);
    for _ in 0..n {
        let len = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let prefix = match source {
            PrefixSource::RandomBytes => (0..len).map(|_| rng.next_u32() >> 24).collect(),
            PrefixSource::ModelGenerated => generate(model, len, &mut rng)?,
            PrefixSource::UserSupplied => {
                return Err(Error::InvalidConfig("user-supplied prefixes are not sampled"));
            }
        };
        prefixes.push(prefix);
    }
    Ok(PrefixSet { prefixes, seed, source })
}

fn generate(model: &TinyLm, len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TokenId>> {
    let mut seq: Vec<TokenId> = vec![rng.random_range(0x20..0x7f)];
    while seq.len() < len {
        let logits = model.last_logits(&seq)?;
        let bytes = &logits[..BYTE_VOCAB.min(logits.len())];
        let logp = log_softmax(bytes);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = bytes.len() - 1;
        for (i, lp) in logp.iter().enumerate() {
            acc += libm::exp(*lp);
            if u < acc {
                next = i;
                break;
            }
        }
        seq.push(next as TokenId);
    }
    Ok(seq)
}

/// Ridge added to the diagonal of `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ridge {
    Absolute(f64),
    /// A multiple of the mean diagonal of the un-ridged estimate.
    RelativeToMeanDiagonal(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::RelativeToMeanDiagonal(1e-4)
    }
}

/// `C = (1/M) Σ k kᵀ + εI` at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondMoment {
    matrix: Matrix,
    pub sample_count: usize,
    pub ridge: f64,
    pub layer: usize,
    #[serde(skip)]
    factor: Option<CholeskyCache>,
}

#[derive(Debug, Clone)]
struct CholeskyCache(Cholesky);

impl PartialEq for CholeskyCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl SecondMoment {
    /// Wraps an existing matrix; it must be symmetric positive definite.
    pub fn new(matrix: Matrix, sample_count: usize, ridge: f64, layer: usize) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::DimensionMismatch("second moment must be square"));
        }
        if matrix.asymmetry() > 1e-12 {
            return Err(Error::NotSymmetric);
        }
        let factor = Cholesky::factor(&matrix)?;
        Ok(Self { matrix, sample_count, ridge, layer, factor: Some(CholeskyCache(factor)) })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// `C⁻¹ k`.
    pub fn solve(&self, k: &Vector) -> Result<Vector> {
        match &self.factor {
            Some(f) => f.0.solve(k),
            None => Cholesky::factor(&self.matrix)?.solve(k),
        }
    }

    /// `c · C` for `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::InvalidConfig("scale must be positive"));
        }
        Self::new(self.matrix.scale(c)?, self.sample_count, self.ridge * c, self.layer)
    }
}

/// Builds `C` from an explicit list of keys.
pub fn second_moment_from_keys(keys: &[Vector], ridge: Ridge, layer: usize) -> Result<SecondMoment> {
    let first = keys.first().ok_or(Error::EmptyInput("keys"))?;
    let n = first.dim();
    let mut acc = Accumulator::new(n);
    for k in keys {
        if k.dim() != n {
            return Err(Error::DimensionMismatch("keys of unequal length"));
        }
        acc.add(k.as_slice());
    }
    acc.finish(ridge, layer)
}

/// Estimates `C` at `layer` from the keys of every position of consecutive
/// non-overlapping windows of `corpus`, stopping after `max_samples` keys.
///
/// Windows span the model's full input length; a corpus shorter than one
/// window is used as a single window.
pub fn estimate_second_moment(
    model: &TinyLm,
    corpus: &[TokenId],
    layer: usize,
    ridge: Ridge,
    max_samples: usize,
) -> Result<SecondMoment> {
    if corpus.is_empty() {
        return Err(Error::CorpusTooSmall { len: 0, min: 1 });
    }
    if layer >= model.config().n_layers {
        return Err(Error::InvalidConfig("layer out of range"));
    }
    if max_samples == 0 {
        return Err(Error::InvalidConfig("max_samples must be positive"));
    }
    let window = model.config().max_input_len().min(corpus.len());
    let mut acc = Accumulator::new(model.config().d_mlp);
    'windows: for chunk in corpus.chunks_exact(window) {
        let keys = model.layer_keys(chunk)?;
        for k in &keys[layer] {
            acc.add(k.as_slice());
            if acc.count == max_samples {
                break 'windows;
            }
        }
    }
    acc.finish(ridge, layer)
}

struct Accumulator {
    n: usize,
    count: usize,
    upper: Vec<f64>,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Self { n, count: 0, upper: vec![0.0; n * n] }
    }

    fn add(&mut self, k: &[f64]) {
        let n = self.n;
        for i in 0..n {
            if k[i] != 0.0 {
                axpy(k[i], &k[i..], &mut self.upper[i * n + i..(i + 1) * n]);
            }
        }
        self.count += 1;
    }

    fn finish(self, ridge: Ridge, layer: usize) -> Result<SecondMoment> {
        let n = self.n;
        let m = self.count as f64;
        let mut c = self.upper;
        for i in 0..n {
            for j in i..n {
                c[i * n + j] /= m;
                c[j * n + i] = c[i * n + j];
            }
        }
        let mean_diag = (0..n).map(|i| c[i * n + i]).sum::<f64>() / n as f64;
        let eps = match ridge {
            Ridge::Absolute(e) => e,
            Ridge::RelativeToMeanDiagonal(f) => f * mean_diag,
        };
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig("ridge must be positive"));
        }
        for i in 0..n {
            c[i * n + i] += eps;
        }
        SecondMoment::new(Matrix::new(n, n, c)?, self.count, eps, layer)
    }
}
