// SPDX-License-Identifier: MIT OR Apache-2.0

//! One function per CLI subcommand. Each returns the paths it wrote.

use std::io::BufReader;
use std::path::{Path, PathBuf};

use romelab_core::diagnostics::{
    collapse_risk, denominator_stats, key_divergence, layer_profile, ConcentrationProfile, DenominatorReport,
    DivergenceRecord, GroupLabel, RiskLevel,
};
use romelab_core::editor::{edit, EditMode, EditOutcome, EditSummary};
use romelab_core::eval::{
    ablation_suite, evaluate_case, evaluate_suite, windowed_perplexity, AblationReport, CaseFailure, EvalCase,
    EvalReport, EvalRow,
};
use romelab_core::keyspace::{estimate_second_moment, sample_prefixes, KeyBundle, SecondMoment};
use romelab_core::model::{head_tail_means, train, TinyLm, TokenId};
use serde::Serialize;

use crate::config::RunConfig;
use crate::container::{decode_model, decode_second_moment, encode_model, encode_second_moment};
use crate::report::{hash_file, write_atomic, write_csv, write_json, Envelope, FileHash};
use crate::suite::{read_suite, write_suite};
use crate::svg::{scatter, Series};
use crate::world::FactWorld;
use crate::{LabError, Result};

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| LabError::io(path, e))
}

/// Corpus bytes split into (held-out probe, training part).
fn corpus(cfg: &RunConfig) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let bytes = read(&cfg.corpus.path)?;
    let held = cfg.corpus.held_out_bytes;
    if bytes.len() < held + 2 {
        return Err(LabError::Config(format!(
            "corpus has {} bytes; need more than held_out_bytes = {held}",
            bytes.len()
        )));
    }
    let tokens: Vec<TokenId> = bytes.iter().map(|&b| TokenId::from(b)).collect();
    let (a, b) = tokens.split_at(held);
    Ok((a.to_vec(), b.to_vec()))
}

fn load_model(cfg: &RunConfig) -> Result<TinyLm> {
    let model = decode_model(&read(cfg.weights_path())?)?;
    if model.config() != &cfg.model_config() {
        return Err(LabError::Config(format!(
            "{} was trained with a different model configuration",
            cfg.weights_path().display()
        )));
    }
    Ok(model)
}

fn write_report<T: Serialize>(
    cfg: &RunConfig,
    name: &str,
    command: &str,
    inputs: &[FileHash],
    result: &T,
    written: &mut Vec<PathBuf>,
) -> Result<()> {
    if cfg.formats.json() {
        let path = cfg.out_dir.join(name);
        write_json(&path, &Envelope { command, config: cfg, inputs: inputs.to_vec(), result })?;
        written.push(path);
    }
    Ok(())
}

fn write_table<T: Serialize>(cfg: &RunConfig, name: &str, rows: &[T], written: &mut Vec<PathBuf>) -> Result<()> {
    if cfg.formats.csv() {
        let path = cfg.out_dir.join(name);
        write_csv(&path, rows)?;
        written.push(path);
    }
    Ok(())
}

/// Writes a generated corpus, edit suite and starter configuration.
pub fn cmd_gen_world(out_dir: &Path, seed: u64, corpus_bytes: usize) -> Result<Vec<PathBuf>> {
    let world = FactWorld::new(seed);
    let corpus = out_dir.join("corpus.txt");
    write_atomic(&corpus, world.corpus(corpus_bytes, seed.wrapping_add(1)).as_bytes())?;
    let suite = out_dir.join("suite.jsonl");
    let mut buf = Vec::new();
    write_suite(&mut buf, &world.suite(seed, 5))?;
    write_atomic(&suite, &buf)?;
    let config = out_dir.join("romelab.toml");
    let mut cfg = RunConfig::example("corpus.txt", "suite.jsonl", "out");
    cfg.seed = seed;
    write_atomic(&config, cfg.to_toml()?.as_bytes())?;
    Ok(vec![corpus, suite, config])
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    steps: usize,
    parameter_count: usize,
    first_loss: Option<f64>,
    final_loss: Option<f64>,
    /// Mean loss over the first and last 10% of steps.
    head_tail_means: Option<(f64, f64)>,
    held_out_perplexity: f64,
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let (held, train_tokens) = corpus(cfg)?;
    let init = TinyLm::new(cfg.model_config(), cfg.seed)?;
    let out = train(&init, &train_tokens, cfg.train.steps, &cfg.train.train_config(cfg.seed))?;
    let mut written = Vec::new();
    write_atomic(cfg.weights_path(), &encode_model(&out.model)?)?;
    written.push(cfg.weights_path().to_path_buf());
    let rows: Vec<LossRow> = out.losses.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect();
    let path = cfg.out_dir.join("train_loss.csv");
    write_csv(&path, &rows)?;
    written.push(path);
    let summary = TrainSummary {
        steps: cfg.train.steps,
        parameter_count: out.model.parameter_count(),
        first_loss: out.losses.first().copied(),
        final_loss: out.losses.last().copied(),
        head_tail_means: head_tail_means(&out.losses, 0.1),
        held_out_perplexity: windowed_perplexity(&out.model, &held)?,
    };
    let inputs = vec![hash_file(&cfg.corpus.path)?, hash_file(cfg.weights_path())?];
    write_report(cfg, "train.json", "train", &inputs, &summary, &mut written)?;
    Ok(written)
}

#[derive(Debug, Serialize)]
struct CovSummary {
    layer: usize,
    dim: usize,
    sample_count: usize,
    ridge: f64,
    trace: f64,
}

pub fn cmd_estimate_cov(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let model = load_model(cfg)?;
    let (_, train_tokens) = corpus(cfg)?;
    let layer = model.config().edited_layer;
    let c = estimate_second_moment(&model, &train_tokens, layer, cfg.covariance.ridge, cfg.covariance.max_samples)?;
    let mut written = Vec::new();
    write_atomic(cfg.covariance_path(), &encode_second_moment(&c)?)?;
    written.push(cfg.covariance_path().to_path_buf());
    let summary =
        CovSummary { layer, dim: c.dim(), sample_count: c.sample_count, ridge: c.ridge, trace: c.matrix().trace() };
    let inputs = vec![hash_file(cfg.weights_path())?, hash_file(&cfg.corpus.path)?, hash_file(cfg.covariance_path())?];
    write_report(cfg, "second_moment.json", "estimate-cov", &inputs, &summary, &mut written)?;
    Ok(written)
}

/// Everything the editing commands share.
struct EditContext {
    model: TinyLm,
    c: SecondMoment,
    cases: Vec<EvalCase>,
    ppl_text: Vec<TokenId>,
    inputs: Vec<FileHash>,
}

fn edit_context(cfg: &RunConfig) -> Result<EditContext> {
    let model = load_model(cfg)?;
    let c = decode_second_moment(&read(cfg.covariance_path())?)?;
    let (ppl_text, _) = corpus(cfg)?;
    let file = std::fs::File::open(&cfg.edit.suite).map_err(|e| LabError::io(&cfg.edit.suite, e))?;
    let suite = read_suite(BufReader::new(file))?;
    let p = &cfg.prefixes;
    let prefixes = sample_prefixes(&model, p.count, p.min_len..=p.max_len, cfg.seed, p.source)?;
    let cases = suite.iter().map(|s| s.to_eval_case(&prefixes, cfg.edit.mode)).collect::<Result<Vec<_>>>()?;
    let inputs = vec![
        hash_file(cfg.weights_path())?,
        hash_file(cfg.covariance_path())?,
        hash_file(&cfg.corpus.path)?,
        hash_file(&cfg.edit.suite)?,
    ];
    Ok(EditContext { model, c, cases, ppl_text, inputs })
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[derive(Debug, Serialize)]
struct EditResult<'a> {
    case_id: &'a str,
    group: GroupLabel,
    summary: EditSummary,
    evaluation: EvalRow,
    outcome: &'a EditOutcome,
}

pub fn cmd_edit(cfg: &RunConfig, case_id: &str) -> Result<Vec<PathBuf>> {
    let ctx = edit_context(cfg)?;
    let case = ctx.cases.iter().find(|c| c.id == case_id).ok_or_else(|| LabError::UnknownCase(case_id.into()))?;
    let (edited, outcome) = edit(&ctx.model, &case.edit, &ctx.c, &cfg.edit_config())?;
    let evaluation = evaluate_case(&ctx.model, &edited, case, cfg.edit.prefix_test, &ctx.ppl_text, cfg.seed)?;
    let stem = file_stem(case_id);
    let mut written = Vec::new();
    let weights = cfg.out_dir.join(format!("edited-{stem}.rlw"));
    write_atomic(&weights, &encode_model(&edited)?)?;
    written.push(weights.clone());
    let result = EditResult { case_id, group: case.group(), summary: outcome.summary(), evaluation, outcome: &outcome };
    let mut inputs = ctx.inputs.clone();
    inputs.push(hash_file(&weights)?);
    write_report(cfg, &format!("edit-{stem}.json"), "edit", &inputs, &result, &mut written)?;
    Ok(written)
}

#[derive(Debug, Serialize)]
struct RiskRow {
    case_id: String,
    group: GroupLabel,
    level: RiskLevel,
    ratio: f64,
}

#[derive(Debug, Serialize)]
struct GroupDivergence {
    group: GroupLabel,
    record: DivergenceRecord,
}

#[derive(Debug, Serialize)]
struct Diagnosis {
    mode: EditMode,
    denominators: Option<DenominatorReport>,
    /// Risk relative to the mean |denominator| of the normal group.
    risks: Vec<RiskRow>,
    divergence: Vec<GroupDivergence>,
    /// First-token vs later-token key concentration on held-out text windows.
    concentration: ConcentrationProfile,
    failures: Vec<CaseFailure>,
}

#[derive(Serialize)]
struct ConcentrationRow {
    layer: usize,
    d_first: f64,
    d_subsequent: f64,
}

/// Held-out windows used for the concentration profile.
fn probe_prompts(text: &[TokenId], max_len: usize) -> Vec<Vec<TokenId>> {
    let len = max_len.min(16);
    text.chunks_exact(len).take(64).map(<[TokenId]>::to_vec).collect()
}

pub fn cmd_diagnose(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ctx = edit_context(cfg)?;
    let edit_cfg = cfg.edit_config().without_floor();
    let mut outcomes: Vec<(String, EditOutcome, GroupLabel)> = Vec::new();
    let mut failures = Vec::new();
    for case in &ctx.cases {
        match edit(&ctx.model, &case.edit, &ctx.c, &edit_cfg) {
            Ok((_, o)) => outcomes.push((case.id.clone(), o, case.group())),
            Err(e) => failures.push(CaseFailure { case_id: case.id.clone(), error: e.to_string() }),
        }
    }
    let input: Vec<(&str, &EditOutcome, GroupLabel)> = outcomes.iter().map(|(i, o, g)| (i.as_str(), o, *g)).collect();
    let denominators = if input.is_empty() { None } else { Some(denominator_stats(&input)?) };
    let baseline = denominators.as_ref().and_then(|d| d.aggregate(GroupLabel::Normal)).map(|a| a.mean_abs_denominator);
    let mut risks = Vec::new();
    if let Some(b) = baseline.filter(|b| *b > 0.0) {
        for (id, o, g) in &outcomes {
            let r = collapse_risk(o, b)?;
            risks.push(RiskRow { case_id: id.clone(), group: *g, level: r.level, ratio: r.ratio });
        }
    }
    let mut divergence = Vec::new();
    for group in [GroupLabel::Collapse, GroupLabel::Normal] {
        let bundles: Vec<KeyBundle> =
            outcomes.iter().filter(|(_, _, g)| *g == group).map(|(_, o, _)| o.key_bundle.clone()).collect();
        if bundles.len() >= 2 {
            divergence.push(GroupDivergence { group, record: key_divergence(&bundles, &ctx.c)? });
        }
    }
    let prompts = probe_prompts(&ctx.ppl_text, ctx.model.config().max_input_len());
    let concentration = layer_profile(&ctx.model, &prompts)?;
    let diagnosis = Diagnosis { mode: cfg.edit.mode, denominators, risks, divergence, concentration, failures };

    let mut written = Vec::new();
    write_report(cfg, "diagnose.json", "diagnose", &ctx.inputs, &diagnosis, &mut written)?;
    if let Some(d) = &diagnosis.denominators {
        write_table(cfg, "denominators.csv", &d.rows, &mut written)?;
    }
    let rows: Vec<ConcentrationRow> = diagnosis
        .concentration
        .layers
        .iter()
        .map(|l| ConcentrationRow { layer: l.layer, d_first: l.d_first, d_subsequent: l.d_subsequent })
        .collect();
    write_table(cfg, "concentration.csv", &rows, &mut written)?;

    for gd in &diagnosis.divergence {
        let name = gd.group.as_str();
        let plots =
            [("prefixed", "k̄", &gd.record.prefixed_projection), ("whitened", "C⁻¹k̄", &gd.record.whitened_projection)];
        for (tag, label, proj) in plots {
            let svg = scatter(
                &format!("{name} cases: {label} vs kᵘ"),
                "PC1",
                "PC2",
                &[Series { label, points: &proj.first }, Series { label: "kᵘ", points: &proj.second }],
            );
            let path = cfg.out_dir.join(format!("divergence-{name}-{tag}.svg"));
            write_atomic(&path, svg.as_bytes())?;
            written.push(path);
        }
    }
    let first: Vec<[f64; 2]> = rows.iter().map(|r| [r.layer as f64, r.d_first]).collect();
    let rest: Vec<[f64; 2]> = rows.iter().map(|r| [r.layer as f64, r.d_subsequent]).collect();
    let svg = scatter(
        "Key concentration by layer",
        "layer",
        "D",
        &[Series { label: "first token", points: &first }, Series { label: "later tokens", points: &rest }],
    );
    let path = cfg.out_dir.join("concentration.svg");
    write_atomic(&path, svg.as_bytes())?;
    written.push(path);
    Ok(written)
}

#[derive(Serialize)]
struct EvalCsvRow<'a> {
    case_id: &'a str,
    group: &'static str,
    efficacy: bool,
    generalization: Option<f64>,
    locality: Option<f64>,
    ppl_before: f64,
    ppl_after: f64,
    test_prefix: Option<String>,
}

fn eval_rows(report: &EvalReport) -> Vec<EvalCsvRow<'_>> {
    report
        .rows
        .iter()
        .map(|r| EvalCsvRow {
            case_id: &r.case_id,
            group: r.group.as_str(),
            efficacy: r.efficacy,
            generalization: r.generalization,
            locality: r.locality,
            ppl_before: r.ppl_before,
            ppl_after: r.ppl_after,
            test_prefix: r.test_prefix.as_ref().map(|p| hex::encode(p.iter().map(|&t| t as u8).collect::<Vec<_>>())),
        })
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ctx = edit_context(cfg)?;
    let report = evaluate_suite(
        &ctx.model,
        &ctx.cases,
        &ctx.c,
        &cfg.edit_config(),
        cfg.edit.prefix_test,
        &ctx.ppl_text,
        cfg.seed,
    )?;
    let mut written = Vec::new();
    write_report(cfg, "eval.json", "eval", &ctx.inputs, &report, &mut written)?;
    write_table(cfg, "eval.csv", &eval_rows(&report), &mut written)?;
    Ok(written)
}

#[derive(Serialize)]
struct SweepRow<'a> {
    mode: EditMode,
    variant: &'static str,
    case_id: &'a str,
    group: &'static str,
    denominator: f64,
    numerator_norm: f64,
    delta_norm: f64,
    ppl_after: f64,
    ppl_ratio: f64,
}

/// Collapse benchmarks over every edit mode and ablation variant.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ctx = edit_context(cfg)?;
    let mut reports: Vec<AblationReport> = Vec::new();
    for mode in [EditMode::RomeInconsistent, EditMode::CRome] {
        reports.push(ablation_suite(&ctx.model, &ctx.cases, mode, &ctx.c, &cfg.edit_config(), &ctx.ppl_text)?);
    }
    let mut rows = Vec::new();
    for r in &reports {
        for v in &r.variants {
            for row in v.table.iter().flat_map(|t| &t.rows) {
                rows.push(SweepRow {
                    mode: r.mode,
                    variant: v.variant.as_str(),
                    case_id: &row.case_id,
                    group: row.group.as_str(),
                    denominator: row.denominator,
                    numerator_norm: row.numerator_norm,
                    delta_norm: row.delta_norm,
                    ppl_after: row.ppl_after,
                    ppl_ratio: row.ppl_ratio,
                });
            }
        }
    }
    let mut written = Vec::new();
    write_report(cfg, "sweep.json", "sweep", &ctx.inputs, &reports, &mut written)?;
    write_table(cfg, "sweep.csv", &rows, &mut written)?;
    Ok(written)
}
