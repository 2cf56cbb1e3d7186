// SPDX-License-Identifier: MIT OR Apache-2.0

//! Why did an edit collapse? Denominator statistics, divergence between
//! prefixed and unprefixed keys, and how tightly first-token keys cluster.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::editor::{EditMode, EditOutcome};
use crate::keyspace::{KeyBundle, SecondMoment};
use crate::linalg::{pca_project, Vector};
use crate::model::{TinyLm, TokenId};
use crate::{Error, Result};

/// Mean Euclidean distance of a set of vectors to its centroid.
pub fn cluster_distance(embeddings: &[Vector]) -> Result<f64> {
    let centroid = Vector::mean(embeddings)?;
    let total: f64 = embeddings.iter().map(|e| e.sub(&centroid).norm()).sum();
    Ok(total / embeddings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupLabel {
    /// Subject is the single, sequence-initial token of the prompt.
    Collapse,
    Normal,
}

impl GroupLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupLabel::Collapse => "collapse",
            GroupLabel::Normal => "normal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenominatorRow {
    pub case_id: String,
    pub group: GroupLabel,
    pub mode: EditMode,
    pub abs_denominator: f64,
    pub numerator_norm: f64,
    pub delta_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenominatorAggregate {
    pub group: GroupLabel,
    pub count: usize,
    pub mean_abs_denominator: f64,
    pub mean_numerator_norm: f64,
    pub mean_delta_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenominatorReport {
    pub rows: Vec<DenominatorRow>,
    /// One entry per group present, collapse group first.
    pub aggregates: Vec<DenominatorAggregate>,
}

impl DenominatorReport {
    pub fn aggregate(&self, group: GroupLabel) -> Option<&DenominatorAggregate> {
        self.aggregates.iter().find(|a| a.group == group)
    }
}

/// Per-case numerator/denominator rows and their per-group means.
pub fn denominator_stats(outcomes: &[(&str, &EditOutcome, GroupLabel)]) -> Result<DenominatorReport> {
    if outcomes.is_empty() {
        return Err(Error::EmptyInput("outcomes"));
    }
    let rows: Vec<DenominatorRow> = outcomes
        .iter()
        .map(|(id, o, g)| DenominatorRow {
            case_id: String::from(*id),
            group: *g,
            mode: o.mode,
            abs_denominator: o.denominator.abs(),
            numerator_norm: o.numerator_norm(),
            delta_norm: o.delta_norm(),
        })
        .collect();
    Ok(DenominatorReport { aggregates: aggregate_rows(&rows), rows })
}

/// Per-group means of denominator rows.
pub fn aggregate_rows(rows: &[DenominatorRow]) -> Vec<DenominatorAggregate> {
    [GroupLabel::Collapse, GroupLabel::Normal]
        .into_iter()
        .filter_map(|group| {
            let members: Vec<&DenominatorRow> = rows.iter().filter(|r| r.group == group).collect();
            if members.is_empty() {
                return None;
            }
            let n = members.len() as f64;
            let mean = |f: fn(&DenominatorRow) -> f64| members.iter().map(|r| f(r)).sum::<f64>() / n;
            Some(DenominatorAggregate {
                group,
                count: members.len(),
                mean_abs_denominator: mean(|r| r.abs_denominator),
                mean_numerator_norm: mean(|r| r.numerator_norm),
                mean_delta_norm: mean(|r| r.delta_norm),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConcentration {
    pub layer: usize,
    /// `D` over the keys of the first token of every prompt.
    pub d_first: f64,
    /// `D` over the keys of every later token.
    pub d_subsequent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationProfile {
    pub layers: Vec<LayerConcentration>,
    /// "first token of each prompt" vs "all later tokens".
    pub first_token_count: usize,
    pub subsequent_token_count: usize,
}

/// First-token vs later-token key concentration for layers `0..=edited_layer`.
pub fn layer_profile(model: &TinyLm, prompts: &[Vec<TokenId>]) -> Result<ConcentrationProfile> {
    layer_profile_through(model, prompts, model.config().edited_layer)
}

/// [`layer_profile`] for layers `0..=last_layer`.
pub fn layer_profile_through(
    model: &TinyLm,
    prompts: &[Vec<TokenId>],
    last_layer: usize,
) -> Result<ConcentrationProfile> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput("prompts"));
    }
    if last_layer >= model.config().n_layers {
        return Err(Error::InvalidConfig("layer out of range"));
    }
    let n_layers = last_layer + 1;
    let mut first: Vec<Vec<Vector>> = (0..n_layers).map(|_| Vec::new()).collect();
    let mut rest: Vec<Vec<Vector>> = (0..n_layers).map(|_| Vec::new()).collect();
    for p in prompts {
        if p.len() < 2 {
            return Err(Error::SequenceTooShort { len: p.len(), min: 2 });
        }
        let keys = model.layer_keys(p)?;
        for (l, layer_keys) in keys.into_iter().take(n_layers).enumerate() {
            let mut it = layer_keys.into_iter();
            first[l].push(it.next().expect("non-empty prompt"));
            rest[l].extend(it);
        }
    }
    let layers = (0..n_layers)
        .map(|l| {
            Ok(LayerConcentration {
                layer: l,
                d_first: cluster_distance(&first[l])?,
                d_subsequent: cluster_distance(&rest[l])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConcentrationProfile { layers, first_token_count: first[0].len(), subsequent_token_count: rest[0].len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationComparison {
    /// Distance between the two population centroids.
    pub centroid_distance: f64,
    /// Cosine between paired members, one per case.
    pub cosines: Vec<f64>,
    pub mean_cosine: f64,
}

/// Joint 2-D PCA coordinates of two populations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairProjection {
    pub first: Vec<[f64; 2]>,
    pub second: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    /// `{k̄}` vs `{k^u}`.
    pub prefixed_vs_unprefixed: PopulationComparison,
    /// `{C⁻¹k̄}` vs `{k^u}`.
    pub whitened_vs_unprefixed: PopulationComparison,
    pub prefixed_projection: PairProjection,
    pub whitened_projection: PairProjection,
}

/// Centroid distance and per-case cosines between two paired populations.
pub fn compare_populations(a: &[Vector], b: &[Vector]) -> Result<PopulationComparison> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch("populations must be paired"));
    }
    let centroid_distance = Vector::mean(a)?.sub(&Vector::mean(b)?).norm();
    let cosines: Vec<f64> = a.iter().zip(b).map(|(x, y)| x.cosine(y)).collect();
    let mean_cosine = cosines.iter().sum::<f64>() / cosines.len() as f64;
    Ok(PopulationComparison { centroid_distance, cosines, mean_cosine })
}

fn project_pair(a: &[Vector], b: &[Vector]) -> Result<PairProjection> {
    let all: Vec<Vector> = a.iter().chain(b).cloned().collect();
    let coords: Vec<[f64; 2]> = match pca_project(&all, 2) {
        Ok(p) => p.iter().map(|v| [v.as_slice()[0], v.as_slice()[1]]).collect(),
        Err(Error::DegenerateSpread) => alloc::vec![[0.0, 0.0]; all.len()],
        Err(e) => return Err(e),
    };
    let (first, second) = coords.split_at(a.len());
    Ok(PairProjection { first: first.to_vec(), second: second.to_vec() })
}

pub fn key_divergence(bundles: &[KeyBundle], c: &SecondMoment) -> Result<DivergenceRecord> {
    if bundles.len() < 2 {
        return Err(Error::EmptyInput("key divergence needs at least two bundles"));
    }
    let k_bar: Vec<Vector> = bundles.iter().map(|b| b.k_bar.clone()).collect();
    let k_u: Vec<Vector> = bundles.iter().map(|b| b.k_u.clone()).collect();
    let whitened: Vec<Vector> = k_bar.iter().map(|k| c.solve(k)).collect::<Result<_>>()?;
    Ok(DivergenceRecord {
        prefixed_vs_unprefixed: compare_populations(&k_bar, &k_u)?,
        whitened_vs_unprefixed: compare_populations(&whitened, &k_u)?,
        prefixed_projection: project_pair(&k_bar, &k_u)?,
        whitened_projection: project_pair(&whitened, &k_u)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLevel {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseRisk {
    pub level: RiskLevel,
    /// `|denominator| / baseline`
    pub ratio: f64,
}

/// Default ratio below which an edit is flagged.
pub const DEFAULT_RISK_THRESHOLD: f64 = 0.02;

pub fn collapse_risk(outcome: &EditOutcome, baseline_denominator: f64) -> Result<CollapseRisk> {
    denominator_risk(outcome.denominator, baseline_denominator, DEFAULT_RISK_THRESHOLD)
}

/// High iff `|denominator| < threshold · baseline` (strict).
pub fn denominator_risk(denominator: f64, baseline: f64, threshold: f64) -> Result<CollapseRisk> {
    if !(baseline > 0.0) {
        return Err(Error::InvalidConfig("baseline denominator must be positive"));
    }
    let level = if denominator.abs() < threshold * baseline { RiskLevel::High } else { RiskLevel::Low };
    Ok(CollapseRisk { level, ratio: denominator.abs() / baseline })
}
