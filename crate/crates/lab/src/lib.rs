// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats, reports, plots and the command-line driver around
//! `romelab-core`.
//!
//! - [`config`]: the TOML [`config::RunConfig`]
//! - [`container`]: binary tensor files for weights and second moments
//! - [`suite`]: line-delimited JSON edit suites
//! - [`world`]: a synthetic fact world that generates a corpus and a suite
//! - [`commands`]: one function per CLI subcommand
//! - [`report`], [`svg`]: output helpers

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};

pub mod commands;
pub mod config;
pub mod container;
pub mod report;
pub mod suite;
pub mod svg;
pub mod world;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("edit suite: {0}")]
    Suite(String),
    #[error("unknown case id {0:?}")]
    UnknownCase(String),
    #[error(transparent)]
    Core(#[from] romelab_core::Error),
}

impl LabError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::Config(_) => "config_invalid",
            LabError::Io { .. } => "io_error",
            LabError::Format(_) => "format_error",
            LabError::Suite(_) => "suite_error",
            LabError::UnknownCase(_) => "unknown_case",
            LabError::Core(_) => "module_error",
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
