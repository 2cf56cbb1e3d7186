// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use romelab::commands;
use romelab::config::{Formats, RunConfig};
use romelab::world::DEFAULT_CORPUS_BYTES;
use romelab::{LabError, Result};
use romelab_core::editor::EditMode;
use romelab_core::eval::PrefixMode;

#[derive(Parser)]
#[command(name = "romelab", version, about = "Rank-one editing lab for a tiny byte-level transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, edit suite and starter config.
    GenWorld {
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corpus size in bytes.
        #[arg(long, default_value_t = DEFAULT_CORPUS_BYTES)]
        bytes: usize,
    },
    /// Train the model on the corpus.
    Train(Common),
    /// Estimate the key second moment at the edited layer.
    EstimateCov(Common),
    /// Apply one edit and evaluate it.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        case: String,
    },
    /// Denominators, key divergence and concentration profiles.
    Diagnose(Common),
    /// Edit and evaluate every case independently.
    Eval(Common),
    /// Collapse benchmark over both modes and every ablation variant.
    Sweep(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Rome,
    CRome,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    mode: Option<ModeArg>,
    #[arg(long)]
    prefix_test: Option<Toggle>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<Formats>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(m) = self.mode {
            cfg.edit.mode = match m {
                ModeArg::Rome => EditMode::RomeInconsistent,
                ModeArg::CRome => EditMode::CRome,
            };
        }
        if let Some(t) = self.prefix_test {
            cfg.edit.prefix_test = match t {
                Toggle::On => PrefixMode::RandomPrefix,
                Toggle::Off => PrefixMode::None,
            };
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(out) = &self.out {
            let cwd = std::env::current_dir().map_err(|e| LabError::io(out, e))?;
            let old = cfg.out_dir.clone();
            cfg.out_dir = cwd.join(out);
            for path in [&mut cfg.model.weights, &mut cfg.covariance.path].into_iter().flatten() {
                if let Ok(rest) = path.strip_prefix(&old) {
                    *path = cfg.out_dir.join(rest);
                }
            }
        }
        if let Some(f) = self.format {
            cfg.formats = f;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    match cli.command {
        Command::GenWorld { out, seed, bytes } => commands::cmd_gen_world(&out, seed, bytes),
        Command::Train(c) => commands::cmd_train(&c.load()?),
        Command::EstimateCov(c) => commands::cmd_estimate_cov(&c.load()?),
        Command::Edit { common, case } => commands::cmd_edit(&common.load()?, &case),
        Command::Diagnose(c) => commands::cmd_diagnose(&c.load()?),
        Command::Eval(c) => commands::cmd_eval(&c.load()?),
        Command::Sweep(c) => commands::cmd_sweep(&c.load()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
