// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edit suites as line-delimited JSON, one case per line.
//!
//! ```json
//! {"id":"Q-first","subject":"Q","prompt":"{} lives in ","old_object":"l","new_object":"p",
//!  "paraphrases":["{} is from "],"locality":[{"prompt":"R lives in ","expected":"o"}]}
//! ```
//!
//! `{}` marks where the subject goes. Objects are single bytes.

use std::io::{BufRead, Write};

use romelab_core::editor::{EditMode, EditRequest};
use romelab_core::eval::{EvalCase, LocalityProbe};
use romelab_core::keyspace::PrefixSet;
use romelab_core::model::{tokenize, TokenId};
use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

pub const SUBJECT_MARKER: &str = "{}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalityText {
    pub prompt: String,
    pub expected: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteCase {
    pub id: String,
    pub subject: String,
    pub prompt: String,
    pub old_object: String,
    pub new_object: String,
    #[serde(default)]
    pub paraphrases: Vec<String>,
    #[serde(default)]
    pub locality: Vec<LocalityText>,
}

fn object_token(id: &str, s: &str) -> Result<TokenId> {
    match s.as_bytes() {
        [b] => Ok(*b as TokenId),
        _ => Err(LabError::Suite(format!("case {id}: objects must be exactly one byte, got {s:?}"))),
    }
}

/// Splits a template at its single subject marker.
fn fill(id: &str, template: &str, subject: &str) -> Result<(Vec<TokenId>, usize)> {
    if template.matches(SUBJECT_MARKER).count() != 1 {
        return Err(LabError::Suite(format!("case {id}: {template:?} must contain {SUBJECT_MARKER} exactly once")));
    }
    let start = template.find(SUBJECT_MARKER).expect("marker present");
    Ok((tokenize(&template.replacen(SUBJECT_MARKER, subject, 1)), start))
}

impl SuiteCase {
    /// Resolves the text case into token form with the given prefixes.
    pub fn to_eval_case(&self, prefixes: &PrefixSet, mode: EditMode) -> Result<EvalCase> {
        if self.subject.is_empty() {
            return Err(LabError::Suite(format!("case {}: empty subject", self.id)));
        }
        let (prompt, start) = fill(&self.id, &self.prompt, &self.subject)?;
        let edit = EditRequest::new(
            prompt,
            start,
            self.subject.len(),
            object_token(&self.id, &self.old_object)?,
            object_token(&self.id, &self.new_object)?,
            prefixes.clone(),
            mode,
        )?;
        let paraphrase_prompts =
            self.paraphrases.iter().map(|p| fill(&self.id, p, &self.subject).map(|(t, _)| t)).collect::<Result<_>>()?;
        let locality_prompts = self
            .locality
            .iter()
            .map(|l| Ok(LocalityProbe { prompt: tokenize(&l.prompt), expected: object_token(&self.id, &l.expected)? }))
            .collect::<Result<_>>()?;
        let case = EvalCase { id: self.id.clone(), edit, paraphrase_prompts, locality_prompts };
        case.validate()?;
        Ok(case)
    }
}

pub fn read_suite(reader: impl BufRead) -> Result<Vec<SuiteCase>> {
    let mut cases: Vec<SuiteCase> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LabError::Suite(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let case: SuiteCase =
            serde_json::from_str(&line).map_err(|e| LabError::Suite(format!("line {}: {e}", i + 1)))?;
        if cases.iter().any(|c| c.id == case.id) {
            return Err(LabError::Suite(format!("line {}: duplicate case id {:?}", i + 1, case.id)));
        }
        cases.push(case);
    }
    Ok(cases)
}

pub fn write_suite(mut writer: impl Write, cases: &[SuiteCase]) -> Result<()> {
    for c in cases {
        let line = serde_json::to_string(c).map_err(|e| LabError::Suite(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| LabError::Suite(e.to_string()))?;
    }
    Ok(())
}
