// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edit evaluation: perplexity, efficacy, generalization and locality, plus
//! batch collapse benchmarks over model variants.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{aggregate_rows, DenominatorReport, DenominatorRow, GroupLabel};
use crate::editor::{edit, EditConfig, EditMode, EditRequest};
use crate::keyspace::SecondMoment;
use crate::model::{apply_pos_swap, log_softmax, BosMode, PosSwap, TinyLm, TokenId};
use crate::{Error, Result};

/// Sum of next-token NLLs in bits over positions `1..` and how many were scored.
fn nll_bits(model: &TinyLm, text: &[TokenId]) -> Result<(f64, usize)> {
    if text.len() < 2 {
        return Err(Error::SequenceTooShort { len: text.len(), min: 2 });
    }
    let trace = model.forward(&text[..text.len() - 1])?;
    let total: f64 = trace
        .logits
        .iter()
        .zip(&text[1..])
        .map(|(row, &next)| -log_softmax(row.as_slice())[next as usize] / core::f64::consts::LN_2)
        .sum();
    Ok((total, text.len() - 1))
}

/// `exp` of the mean next-token NLL over positions `1..end` of `text`.
pub fn perplexity(model: &TinyLm, text: &[TokenId]) -> Result<f64> {
    // Summed in bits so a uniform model gives its vocabulary size exactly.
    let (bits, n) = nll_bits(model, text)?;
    Ok(libm::exp2(bits / n as f64))
}

/// Perplexity of a text longer than the context, scored in consecutive
/// non-overlapping windows of the maximum input length. Each window's first
/// token is context only; a trailing window shorter than 2 tokens is dropped.
pub fn windowed_perplexity(model: &TinyLm, text: &[TokenId]) -> Result<f64> {
    if text.len() < 2 {
        return Err(Error::SequenceTooShort { len: text.len(), min: 2 });
    }
    let window = model.config().max_input_len();
    let (mut bits, mut n) = (0.0, 0);
    for chunk in text.chunks(window).filter(|c| c.len() >= 2) {
        let (b, k) = nll_bits(model, chunk)?;
        bits += b;
        n += k;
    }
    Ok(libm::exp2(bits / n as f64))
}

/// `P(o*) > P(o)` at the target position, with `prefix` prepended. Ties fail.
pub fn efficacy(model: &TinyLm, request: &EditRequest, prefix: Option<&[TokenId]>) -> Result<bool> {
    let mut tokens: Vec<TokenId> = prefix.map(<[TokenId]>::to_vec).unwrap_or_default();
    tokens.extend_from_slice(&request.prompt);
    prefers_new(model, &tokens, request)
}

fn prefers_new(model: &TinyLm, tokens: &[TokenId], request: &EditRequest) -> Result<bool> {
    let logits = model.last_logits(tokens)?;
    Ok(logits[request.new_object as usize] > logits[request.old_object as usize])
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityProbe {
    pub prompt: Vec<TokenId>,
    /// Reference continuation; informational, locality compares argmaxes.
    pub expected: TokenId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub id: String,
    pub edit: EditRequest,
    /// Same subject, rephrased relation.
    pub paraphrase_prompts: Vec<Vec<TokenId>>,
    pub locality_prompts: Vec<LocalityProbe>,
}

impl EvalCase {
    pub fn group(&self) -> GroupLabel {
        group_of(&self.edit)
    }

    pub fn validate(&self) -> Result<()> {
        self.edit.validate()?;
        let s = &self.edit.subject;
        let contains = |p: &[TokenId]| p.windows(s.len()).any(|w| w == &s[..]);
        if !self.paraphrase_prompts.iter().all(|p| contains(p)) {
            return Err(Error::InvalidRequest("paraphrase prompt without the subject"));
        }
        if self.locality_prompts.iter().any(|p| contains(&p.prompt)) {
            return Err(Error::InvalidRequest("locality prompt mentions the subject"));
        }
        Ok(())
    }
}

/// Collapse pattern: the subject is a single token opening the prompt.
pub fn group_of(request: &EditRequest) -> GroupLabel {
    if request.is_sequence_initial() && request.subject.len() == 1 {
        GroupLabel::Collapse
    } else {
        GroupLabel::Normal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixMode {
    None,
    RandomPrefix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub case_id: String,
    pub group: GroupLabel,
    pub efficacy: bool,
    /// Absent when the case has no paraphrases.
    pub generalization: Option<f64>,
    /// Absent when the case has no locality probes.
    pub locality: Option<f64>,
    pub ppl_before: f64,
    pub ppl_after: f64,
    /// Prefix prepended at test time, if any.
    pub test_prefix: Option<Vec<TokenId>>,
}

/// Scores one edited model against its unedited original.
pub fn evaluate_case(
    pre_model: &TinyLm,
    post_model: &TinyLm,
    case: &EvalCase,
    prefix_mode: PrefixMode,
    ppl_text: &[TokenId],
    seed: u64,
) -> Result<EvalRow> {
    if pre_model.config() != post_model.config() {
        return Err(Error::InvalidConfig("pre and post models differ in configuration"));
    }
    let req = &case.edit;
    req.validate()?;
    let test_prefix = match prefix_mode {
        PrefixMode::RandomPrefix if req.is_sequence_initial() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let i = rng.random_range(0..req.prefixes.len());
            Some(req.prefixes.prefixes[i].clone())
        }
        _ => None,
    };
    let with_prefix = |p: &[TokenId]| -> Vec<TokenId> {
        // Only prompts that open with the subject get the prefix.
        match &test_prefix {
            Some(x) if p.starts_with(&req.subject) => x.iter().chain(p).copied().collect(),
            _ => p.to_vec(),
        }
    };

    let efficacy = prefers_new(post_model, &with_prefix(&req.prompt), req)?;
    let generalization = if case.paraphrase_prompts.is_empty() {
        None
    } else {
        let mut hits = 0;
        for p in &case.paraphrase_prompts {
            hits += prefers_new(post_model, &with_prefix(p), req)? as usize;
        }
        Some(hits as f64 / case.paraphrase_prompts.len() as f64)
    };
    let locality = if case.locality_prompts.is_empty() {
        None
    } else {
        let mut kept = 0;
        for probe in &case.locality_prompts {
            let before = argmax(&pre_model.last_logits(&probe.prompt)?);
            let after = argmax(&post_model.last_logits(&probe.prompt)?);
            kept += (before == after) as usize;
        }
        Some(kept as f64 / case.locality_prompts.len() as f64)
    };
    Ok(EvalRow {
        case_id: case.id.clone(),
        group: case.group(),
        efficacy,
        generalization,
        locality,
        ppl_before: windowed_perplexity(pre_model, ppl_text)?,
        ppl_after: windowed_perplexity(post_model, ppl_text)?,
        test_prefix,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub case_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub group: GroupLabel,
    pub count: usize,
    pub efficacy: f64,
    /// Mean over cases that have paraphrases.
    pub generalization: Option<f64>,
    /// Mean over cases that have locality probes.
    pub locality: Option<f64>,
    pub mean_ppl_ratio: f64,
    pub max_ppl_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prefix_mode: PrefixMode,
    pub rows: Vec<EvalRow>,
    pub failures: Vec<CaseFailure>,
    pub aggregates: Vec<EvalAggregate>,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Per-group aggregates of evaluation rows, collapse group first.
pub fn aggregate_eval(rows: &[EvalRow]) -> Vec<EvalAggregate> {
    [GroupLabel::Collapse, GroupLabel::Normal]
        .into_iter()
        .filter_map(|group| {
            let g: Vec<&EvalRow> = rows.iter().filter(|r| r.group == group).collect();
            if g.is_empty() {
                return None;
            }
            let ratios = || g.iter().map(|r| r.ppl_after / r.ppl_before);
            Some(EvalAggregate {
                group,
                count: g.len(),
                efficacy: g.iter().filter(|r| r.efficacy).count() as f64 / g.len() as f64,
                generalization: mean_of(g.iter().filter_map(|r| r.generalization)),
                locality: mean_of(g.iter().filter_map(|r| r.locality)),
                mean_ppl_ratio: mean_of(ratios()).unwrap_or(0.0),
                max_ppl_ratio: ratios().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect()
}

/// Edits the model for every case and evaluates the result. Case `i` draws
/// its test prefix with seed `seed + i`.
pub fn evaluate_suite(
    model: &TinyLm,
    cases: &[EvalCase],
    c: &SecondMoment,
    cfg: &EditConfig,
    prefix_mode: PrefixMode,
    ppl_text: &[TokenId],
    seed: u64,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let row = edit(model, &case.edit, c, cfg).and_then(|(post, _)| {
            evaluate_case(model, &post, case, prefix_mode, ppl_text, seed.wrapping_add(i as u64))
        });
        match row {
            Ok(r) => rows.push(r),
            Err(e) => failures.push(CaseFailure { case_id: case.id.clone(), error: format!("{e}") }),
        }
    }
    Ok(EvalReport { prefix_mode, aggregates: aggregate_eval(&rows), rows, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub case_id: String,
    pub group: GroupLabel,
    pub mode: EditMode,
    pub denominator: f64,
    pub numerator_norm: f64,
    pub delta_norm: f64,
    pub ppl_after: f64,
    /// `ppl_after / original_ppl`
    pub ppl_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkGroup {
    pub group: GroupLabel,
    pub count: usize,
    pub max_ppl: f64,
    pub mean_ppl: f64,
    pub max_ppl_ratio: f64,
    pub mean_abs_denominator: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub mode: EditMode,
    /// Perplexity of the unedited model.
    pub original_ppl: f64,
    pub rows: Vec<BenchmarkRow>,
    pub failures: Vec<CaseFailure>,
    /// Groups without successful cases are omitted.
    pub groups: Vec<BenchmarkGroup>,
}

impl BenchmarkTable {
    pub fn group(&self, group: GroupLabel) -> Option<&BenchmarkGroup> {
        self.groups.iter().find(|g| g.group == group)
    }

    pub fn denominator_report(&self) -> DenominatorReport {
        let rows: Vec<DenominatorRow> = self
            .rows
            .iter()
            .map(|r| DenominatorRow {
                case_id: r.case_id.clone(),
                group: r.group,
                mode: r.mode,
                abs_denominator: r.denominator.abs(),
                numerator_norm: r.numerator_norm,
                delta_norm: r.delta_norm,
            })
            .collect();
        DenominatorReport { aggregates: aggregate_rows(&rows), rows }
    }
}

/// Edits every case in `mode` with the denominator floor disabled and
/// measures perplexity after each edit. Failing cases are recorded.
pub fn collapse_benchmark(
    model: &TinyLm,
    cases: &[EvalCase],
    mode: EditMode,
    c: &SecondMoment,
    cfg: &EditConfig,
    ppl_text: &[TokenId],
) -> Result<BenchmarkTable> {
    let original_ppl = windowed_perplexity(model, ppl_text)?;
    let cfg = cfg.without_floor();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for case in cases {
        let req = case.edit.with_mode(mode);
        let row = edit(model, &req, c, &cfg).and_then(|(post, outcome)| {
            let ppl_after = windowed_perplexity(&post, ppl_text)?;
            Ok(BenchmarkRow {
                case_id: case.id.clone(),
                group: case.group(),
                mode,
                denominator: outcome.denominator,
                numerator_norm: outcome.numerator_norm(),
                delta_norm: outcome.delta_norm(),
                ppl_after,
                ppl_ratio: ppl_after / original_ppl,
            })
        });
        match row {
            Ok(r) => rows.push(r),
            Err(e) => failures.push(CaseFailure { case_id: case.id.clone(), error: format!("{e}") }),
        }
    }
    let groups = [GroupLabel::Collapse, GroupLabel::Normal]
        .into_iter()
        .filter_map(|group| {
            let g: Vec<&BenchmarkRow> = rows.iter().filter(|r| r.group == group).collect();
            if g.is_empty() {
                return None;
            }
            let n = g.len() as f64;
            Some(BenchmarkGroup {
                group,
                count: g.len(),
                max_ppl: g.iter().map(|r| r.ppl_after).fold(f64::NEG_INFINITY, f64::max),
                mean_ppl: g.iter().map(|r| r.ppl_after).sum::<f64>() / n,
                max_ppl_ratio: g.iter().map(|r| r.ppl_ratio).fold(f64::NEG_INFINITY, f64::max),
                mean_abs_denominator: g.iter().map(|r| r.denominator.abs()).sum::<f64>() / n,
            })
        })
        .collect();
    Ok(BenchmarkTable { mode, original_ppl, rows, failures, groups })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    BosRemoved,
    SecondToFirst,
    FirstToSecond,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::Baseline, Variant::BosRemoved, Variant::SecondToFirst, Variant::FirstToSecond];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::BosRemoved => "bos_removed",
            Variant::SecondToFirst => "second_to_first",
            Variant::FirstToSecond => "first_to_second",
        }
    }
}

/// The model as seen by one ablation variant, or `None` when the variant
/// does not apply (BOS removal on a model without BOS).
pub fn variant_model(model: &TinyLm, variant: Variant) -> Result<Option<TinyLm>> {
    Ok(match variant {
        Variant::Baseline => Some(model.clone()),
        Variant::BosRemoved if model.config().bos_mode == BosMode::Prepend => Some(model.with_bos_mode(BosMode::None)?),
        Variant::BosRemoved => None,
        Variant::SecondToFirst => Some(apply_pos_swap(model, PosSwap::SecondToFirst)),
        Variant::FirstToSecond => Some(apply_pos_swap(model, PosSwap::FirstToSecond)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    /// `None` when the variant was skipped.
    pub table: Option<BenchmarkTable>,
    pub skipped_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub mode: EditMode,
    pub variants: Vec<VariantResult>,
}

/// [`collapse_benchmark`] under every [`Variant`], all sharing `c`.
pub fn ablation_suite(
    model: &TinyLm,
    cases: &[EvalCase],
    mode: EditMode,
    c: &SecondMoment,
    cfg: &EditConfig,
    ppl_text: &[TokenId],
) -> Result<AblationReport> {
    let mut variants = Vec::new();
    for variant in Variant::ALL {
        let result = match variant_model(model, variant)? {
            Some(m) => VariantResult {
                variant,
                table: Some(collapse_benchmark(&m, cases, mode, c, cfg, ppl_text)?),
                skipped_reason: None,
            },
            None => VariantResult {
                variant,
                table: None,
                skipped_reason: Some(String::from("model has no BOS token to remove")),
            },
        };
        variants.push(result);
    }
    Ok(AblationReport { mode, variants })
}
