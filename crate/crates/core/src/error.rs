// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("all points are identical; nothing to project")]
    DegenerateSpread,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("sequence of {len} tokens exceeds the context window of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence of {len} tokens is too short (need at least {min})")]
    SequenceTooShort { len: usize, min: usize },
    #[error("token {token} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("position {pos} is outside a sequence of length {len}")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("corpus of {len} tokens is too small (need at least {min})")]
    CorpusTooSmall { len: usize, min: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("invalid edit request: {0}")]
    InvalidRequest(&'static str),
    #[error("value-vector loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("rank-one denominator {denominator:e} is below the floor {floor:e}")]
    DenominatorBelowFloor { denominator: f64, floor: f64 },
}
