// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rank-one editing of the edited-layer MLP down-projection.
//!
//! Given a left key `k̄`, a right key `k_right` and a target value `v*`:
//!
//! ```text
//! q  = C⁻¹ k̄
//! Ŵ  = W + (v* − W k_right) qᵀ / (qᵀ k_right)
//! ```
//!
//! With `k_right = k̄` this is the exact minimizer of `‖Ŵ K − V‖` subject to
//! `Ŵ k̄ = v*` (consistent keys). The inconsistent form uses the unprefixed
//! key `k^u` on the right while `q` still comes from `k̄`; when `k^u` is nearly
//! orthogonal to `q` the denominator collapses and `Δ` explodes.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::keyspace::{prefixed_key_in_prompt, KeyBundle, PrefixSet, SecondMoment};
use crate::linalg::{frobenius_norm, outer, Matrix, Vector};
use crate::model::{injection_gradient, Target, TinyLm, TokenId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    /// `k̄` inside `C⁻¹k̄`, `k^u` everywhere else.
    RomeInconsistent,
    /// `k̄` everywhere.
    CRome,
}

/// One fact to insert: after the edit, `prompt` should continue with
/// `new_object` instead of `old_object`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub subject: Vec<TokenId>,
    pub prompt: Vec<TokenId>,
    /// Index of the subject's first token within `prompt`.
    pub subject_start: usize,
    pub old_object: TokenId,
    pub new_object: TokenId,
    pub prefixes: PrefixSet,
    pub mode: EditMode,
}

impl EditRequest {
    pub fn new(
        prompt: Vec<TokenId>,
        subject_start: usize,
        subject_len: usize,
        old_object: TokenId,
        new_object: TokenId,
        prefixes: PrefixSet,
        mode: EditMode,
    ) -> Result<Self> {
        let end = subject_start + subject_len;
        if subject_len == 0 || end > prompt.len() {
            return Err(Error::InvalidRequest("subject span must lie inside the prompt"));
        }
        let req = Self {
            subject: prompt[subject_start..end].to_vec(),
            prompt,
            subject_start,
            old_object,
            new_object,
            prefixes,
            mode,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        let end = self.subject_start + self.subject.len();
        if self.subject.is_empty()
            || end > self.prompt.len()
            || self.prompt[self.subject_start..end] != self.subject[..]
        {
            return Err(Error::InvalidRequest("subject span does not occur at subject_start"));
        }
        if self.old_object == self.new_object {
            return Err(Error::InvalidRequest("old and new object must differ"));
        }
        if self.prefixes.is_empty() {
            return Err(Error::InvalidRequest("prefix set is empty"));
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: EditMode) -> Self {
        Self { mode, ..self.clone() }
    }

    /// Input position whose logits predict the object.
    pub fn target_position(&self) -> usize {
        self.prompt.len() - 1
    }

    pub fn subject_last(&self) -> usize {
        self.subject_start + self.subject.len() - 1
    }

    /// The subject opens the prompt.
    pub fn is_sequence_initial(&self) -> bool {
        self.subject_start == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValueSearchConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Weight of the `‖v − v₀‖²` pull toward the original value.
    pub weight_decay: f64,
    /// Gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Recorded with the run; the search itself draws no random numbers.
    pub seed: u64,
    /// Also score `o*` after each `x_i ⊕ prompt` and average the losses.
    pub average_over_prefixes: bool,
}

impl Default for ValueSearchConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.5,
            weight_decay: 1e-4,
            grad_clip: 10.0,
            seed: 0,
            average_over_prefixes: false,
        }
    }
}

impl ValueSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("value search learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::InvalidConfig("weight decay and clip must be non-negative"));
        }
        Ok(())
    }
}

/// Default relative denominator floor.
pub const DEFAULT_DENOM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub value_search: ValueSearchConfig,
    /// Edits whose `|qᵀk_right| < floor·‖q‖·‖k_right‖` are refused. `0`
    /// disables the check.
    pub denom_floor: f64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self { value_search: ValueSearchConfig::default(), denom_floor: DEFAULT_DENOM_FLOOR }
    }
}

impl EditConfig {
    pub fn without_floor(&self) -> Self {
        Self { denom_floor: 0.0, ..self.clone() }
    }
}

/// Result of [`rank_one_update`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOneUpdate {
    pub w_hat: Matrix,
    pub delta: Matrix,
    /// `(v* − W k_right) (C⁻¹k̄)ᵀ`
    pub numerator: Matrix,
    /// `(C⁻¹k̄)ᵀ k_right`
    pub denominator: f64,
    /// `C⁻¹k̄`
    pub left: Vector,
}

pub fn rank_one_update(
    w: &Matrix,
    c: &SecondMoment,
    k_bar: &Vector,
    k_right: &Vector,
    v_star: &Vector,
    denom_floor: f64,
) -> Result<RankOneUpdate> {
    if c.dim() != w.cols() || k_bar.dim() != w.cols() || k_right.dim() != w.cols() {
        return Err(Error::DimensionMismatch("keys and C must match the columns of W"));
    }
    if v_star.dim() != w.rows() {
        return Err(Error::DimensionMismatch("v* must match the rows of W"));
    }
    let q = c.solve(k_bar)?;
    let denominator = q.dot(k_right);
    let floor = denom_floor * q.norm() * k_right.norm();
    if denominator.abs() < floor || denominator == 0.0 {
        return Err(Error::DenominatorBelowFloor { denominator, floor });
    }
    let residual = v_star.sub(&w.matvec(k_right)?);
    let numerator = outer(&residual, &q);
    let delta = numerator.scale(1.0 / denominator).map_err(|_| Error::NonFinite("update matrix"))?;
    let w_hat = w.add(&delta)?;
    Ok(RankOneUpdate { w_hat, delta, numerator, denominator, left: q })
}

/// Everything computed for one edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub w_hat: Matrix,
    pub delta: Matrix,
    pub numerator: Matrix,
    pub denominator: f64,
    pub v_star: Vector,
    /// Value at the subject before the edit.
    pub v_initial: Vector,
    pub key_bundle: KeyBundle,
    pub mode: EditMode,
    pub value_loss_curve: Vec<f64>,
}

/// Scalar summary of an [`EditOutcome`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub mode: EditMode,
    pub denominator: f64,
    pub numerator_norm: f64,
    pub delta_norm: f64,
    pub value_loss_curve: Vec<f64>,
    pub k_bar_norm: f64,
    pub k_u_norm: f64,
    pub cosine_k_bar_k_u: f64,
    pub v_star_norm: f64,
    pub v_shift_norm: f64,
}

impl EditOutcome {
    pub fn numerator_norm(&self) -> f64 {
        frobenius_norm(&self.numerator)
    }

    pub fn delta_norm(&self) -> f64 {
        frobenius_norm(&self.delta)
    }

    pub fn summary(&self) -> EditSummary {
        let kb = &self.key_bundle;
        EditSummary {
            mode: self.mode,
            denominator: self.denominator,
            numerator_norm: self.numerator_norm(),
            delta_norm: self.delta_norm(),
            value_loss_curve: self.value_loss_curve.clone(),
            k_bar_norm: kb.k_bar.norm(),
            k_u_norm: kb.k_u.norm(),
            cosine_k_bar_k_u: kb.k_bar.cosine(&kb.k_u),
            v_star_norm: self.v_star.norm(),
            v_shift_norm: self.v_star.sub(&self.v_initial).norm(),
        }
    }
}

/// Value-vector search: minimizes
/// `NLL(o* | v injected at the subject) + λ ‖v − v₀‖²` with Adam, starting
/// from the original value `v₀`.
///
/// Returns `v*` and the loss before every step plus the final loss.
pub fn optimize_value(model: &TinyLm, request: &EditRequest, cfg: &ValueSearchConfig) -> Result<(Vector, Vec<f64>)> {
    request.validate()?;
    cfg.validate()?;
    let v0 = model.forward(&request.prompt)?.tapped_values[request.subject_last()].clone();

    // (tokens, injection position, target position)
    let mut contexts: Vec<(Vec<TokenId>, usize, usize)> =
        alloc::vec![(request.prompt.clone(), request.subject_last(), request.target_position())];
    if cfg.average_over_prefixes {
        for x in &request.prefixes.prefixes {
            let mut seq = x.clone();
            seq.extend_from_slice(&request.prompt);
            contexts.push((seq, x.len() + request.subject_last(), x.len() + request.target_position()));
        }
    }
    let weight = 1.0 / contexts.len() as f64;
    let objective = |v: &Vector| -> Result<(f64, Vec<f64>)> {
        let mut loss = 0.0;
        let mut grad = alloc::vec![0.0; v.dim()];
        for (toks, pos, tpos) in &contexts {
            let (l, g) = injection_gradient(model, toks, *pos, v, &[Target { pos: *tpos, token: request.new_object }])?;
            loss += weight * l;
            for (a, b) in grad.iter_mut().zip(g.as_slice()) {
                *a += weight * b;
            }
        }
        let shift = v.sub(&v0);
        loss += cfg.weight_decay * shift.dot(&shift);
        for (a, s) in grad.iter_mut().zip(shift.as_slice()) {
            *a += 2.0 * cfg.weight_decay * s;
        }
        Ok((loss, grad))
    };

    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut v = v0.clone().into_vec();
    let mut m1 = alloc::vec![0.0; v.len()];
    let mut m2 = alloc::vec![0.0; v.len()];
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let cur = Vector::new(v.clone()).map_err(|_| Error::NonFiniteLoss { step })?;
        let (loss, mut grad) = objective(&cur).map_err(|_| Error::NonFiniteLoss { step })?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        curve.push(loss);
        let norm = libm::sqrt(grad.iter().map(|g| g * g).sum::<f64>());
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let t = (step + 1) as f64;
        let bc1 = 1.0 - libm::pow(beta1, t);
        let bc2 = 1.0 - libm::pow(beta2, t);
        for i in 0..v.len() {
            m1[i] = beta1 * m1[i] + (1.0 - beta1) * grad[i];
            m2[i] = beta2 * m2[i] + (1.0 - beta2) * grad[i] * grad[i];
            v[i] -= cfg.learning_rate * (m1[i] / bc1) / (libm::sqrt(m2[i] / bc2) + eps);
        }
    }
    let v_star = Vector::new(v).map_err(|_| Error::NonFiniteLoss { step: cfg.steps })?;
    let (final_loss, _) = objective(&v_star)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: cfg.steps });
    }
    curve.push(final_loss);
    Ok((v_star, curve))
}

/// Runs the full edit and returns an edited copy of the model.
pub fn edit(
    model: &TinyLm,
    request: &EditRequest,
    c: &SecondMoment,
    cfg: &EditConfig,
) -> Result<(TinyLm, EditOutcome)> {
    request.validate()?;
    let mcfg = model.config();
    if c.layer != mcfg.edited_layer || c.dim() != mcfg.d_mlp {
        return Err(Error::DimensionMismatch("second moment was not estimated at the edited layer"));
    }
    let bundle = prefixed_key_in_prompt(
        model,
        &request.prompt,
        request.subject_start,
        request.subject.len(),
        &request.prefixes,
    )?;
    let (v_star, curve) = optimize_value(model, request, &cfg.value_search)?;
    let v_initial = model.forward(&request.prompt)?.tapped_values[request.subject_last()].clone();
    let k_right = match request.mode {
        EditMode::CRome => &bundle.k_bar,
        EditMode::RomeInconsistent => &bundle.k_u,
    };
    let update = rank_one_update(model.edited_weight(), c, &bundle.k_bar, k_right, &v_star, cfg.denom_floor)?;
    let edited = model.with_edited_weight(update.w_hat.clone())?;
    Ok((
        edited,
        EditOutcome {
            w_hat: update.w_hat,
            delta: update.delta,
            numerator: update.numerator,
            denominator: update.denominator,
            v_star,
            v_initial,
            key_bundle: bundle,
            mode: request.mode,
            value_loss_curve: curve,
        },
    ))
}

/// Reinstalls `original_w` as the edited-layer down-projection.
pub fn revert(model: &TinyLm, original_w: &Matrix) -> Result<TinyLm> {
    model.with_edited_weight(original_w.clone())
}
