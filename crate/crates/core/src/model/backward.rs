// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode gradients, written out by hand for this one architecture.

use alloc::vec;
use alloc::vec::Vec;

use super::{gelu_grad, log_softmax, ForwardCache, NormCache, TinyLm, TokenId};
use crate::linalg::{axpy, dot, Matrix, Vector};
use crate::{Error, Result};

/// One scored prediction: the logits at input position `pos` should put mass
/// on `token`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub pos: usize,
    pub token: TokenId,
}

/// Summed negative log-likelihood of `targets` and its gradient with respect
/// to `dlogits` (`T x vocab`, internal positions).
pub(crate) fn nll_and_dlogits(
    cache: &ForwardCache,
    vocab: usize,
    offset: usize,
    targets: &[Target],
) -> (f64, Vec<f64>) {
    let mut dlogits = vec![0.0; cache.logits.len()];
    let mut loss = 0.0;
    for tg in targets {
        let t = tg.pos + offset;
        let logp = log_softmax(&cache.logits[t * vocab..(t + 1) * vocab]);
        loss -= logp[tg.token as usize];
        let row = &mut dlogits[t * vocab..(t + 1) * vocab];
        for (g, lp) in row.iter_mut().zip(&logp) {
            *g += libm::exp(*lp);
        }
        row[tg.token as usize] -= 1.0;
    }
    (loss, dlogits)
}

/// Backpropagates `dlogits` through the final norm and layers
/// `n_layers-1 ..= down_to`, returning the gradient of the residual stream
/// entering layer `down_to`. Parameter gradients are accumulated into
/// `grads` when given; with `down_to == 0` that includes the embeddings.
pub(crate) fn backward(
    model: &TinyLm,
    cache: &ForwardCache,
    dlogits: &[f64],
    mut grads: Option<&mut TinyLm>,
    down_to: usize,
) -> Vec<f64> {
    let cfg = &model.config;
    let (d, m) = (cfg.d_model, cfg.d_mlp);
    let t_len = cache.len();

    // Tied output head.
    let mut dhidden = vec![0.0; t_len * d];
    for t in 0..t_len {
        let drow = &dlogits[t * cfg.vocab_size..(t + 1) * cfg.vocab_size];
        let dh = &mut dhidden[t * d..(t + 1) * d];
        for (v, &g) in drow.iter().enumerate() {
            if g != 0.0 {
                axpy(g, model.token_embedding.row(v), dh);
            }
        }
        if let Some(gr) = grads.as_deref_mut() {
            let h = &cache.hidden[t * d..(t + 1) * d];
            for (v, &g) in drow.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, h, gr.token_embedding.row_mut(v));
                }
            }
        }
    }
    let mut dx = {
        let (dg, db) = match grads.as_deref_mut() {
            Some(gr) => (Some(&mut gr.final_ln_gain[..]), Some(&mut gr.final_ln_bias[..])),
            None => (None, None),
        };
        layer_norm_backward(&dhidden, &cache.final_ln, &model.final_ln_gain, d, dg, db)
    };

    for li in (down_to..cfg.n_layers).rev() {
        let w = &model.layers[li];
        let c = &cache.layers[li];
        let mut g = grads.as_deref_mut().map(|gr| &mut gr.layers[li]);

        // MLP branch. An injected value is a leaf: nothing flows into the MLP there.
        let mut dvalue = dx.clone();
        if let Some((il, ip)) = cache.injected {
            if il == li {
                dvalue[ip * d..(ip + 1) * d].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let dkey = linear_backward(&dvalue, &c.key, m, &w.mlp_down, g.as_mut().map(|g| g.mlp_down.as_mut_slice()));
        let dpre: Vec<f64> = dkey.iter().zip(&c.pre).map(|(dk, &p)| dk * gelu_grad(p)).collect();
        let dh2 = linear_backward(&dpre, &c.h2, d, &w.mlp_up, g.as_mut().map(|g| g.mlp_up.as_mut_slice()));
        let dmid = {
            let (dg, db) = match g.as_mut() {
                Some(g) => (Some(&mut g.ln2_gain[..]), Some(&mut g.ln2_bias[..])),
                None => (None, None),
            };
            layer_norm_backward(&dh2, &c.ln2, &w.ln2_gain, d, dg, db)
        };
        for (a, b) in dx.iter_mut().zip(&dmid) {
            *a += b;
        }

        // Attention branch.
        let dctx = linear_backward(&dx, &c.ctx, d, &w.attn_out, g.as_mut().map(|g| g.attn_out.as_mut_slice()));
        let (dq, dk, dv) = attention_backward(&dctx, c, t_len, cfg.n_heads, cfg.head_dim());
        let mut dh1 = linear_backward(&dq, &c.h1, d, &w.attn_q, g.as_mut().map(|g| g.attn_q.as_mut_slice()));
        let dh1k = linear_backward(&dk, &c.h1, d, &w.attn_k, g.as_mut().map(|g| g.attn_k.as_mut_slice()));
        let dh1v = linear_backward(&dv, &c.h1, d, &w.attn_v, g.as_mut().map(|g| g.attn_v.as_mut_slice()));
        for ((a, b), c2) in dh1.iter_mut().zip(&dh1k).zip(&dh1v) {
            *a += b + c2;
        }
        let din = {
            let (dg, db) = match g.as_mut() {
                Some(g) => (Some(&mut g.ln1_gain[..]), Some(&mut g.ln1_bias[..])),
                None => (None, None),
            };
            layer_norm_backward(&dh1, &c.ln1, &w.ln1_gain, d, dg, db)
        };
        for (a, b) in dx.iter_mut().zip(&din) {
            *a += b;
        }
    }

    if down_to == 0 {
        if let Some(gr) = grads {
            for (t, &tok) in cache.tokens.iter().enumerate() {
                let src = &dx[t * d..(t + 1) * d];
                axpy(1.0, src, gr.token_embedding.row_mut(tok as usize));
                axpy(1.0, src, gr.position_embedding.row_mut(t));
            }
        }
    }
    dx
}

/// `dx = dy W`, and `dW += dy^T x` when `dw` is given.
fn linear_backward(dy: &[f64], x: &[f64], in_dim: usize, w: &Matrix, dw: Option<&mut [f64]>) -> Vec<f64> {
    let out_dim = w.rows();
    let t_len = dy.len() / out_dim;
    let mut dx = vec![0.0; t_len * in_dim];
    for t in 0..t_len {
        let dyt = &dy[t * out_dim..(t + 1) * out_dim];
        let dxt = &mut dx[t * in_dim..(t + 1) * in_dim];
        for (o, &g) in dyt.iter().enumerate() {
            if g != 0.0 {
                axpy(g, w.row(o), dxt);
            }
        }
    }
    if let Some(dw) = dw {
        for t in 0..t_len {
            let dyt = &dy[t * out_dim..(t + 1) * out_dim];
            let xt = &x[t * in_dim..(t + 1) * in_dim];
            for (o, &g) in dyt.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, xt, &mut dw[o * in_dim..(o + 1) * in_dim]);
                }
            }
        }
    }
    dx
}

fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    gain: &[f64],
    d: usize,
    dgain: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) -> Vec<f64> {
    let t_len = dy.len() / d;
    if let Some(dg) = dgain {
        for t in 0..t_len {
            for i in 0..d {
                dg[i] += dy[t * d + i] * cache.xhat[t * d + i];
            }
        }
    }
    if let Some(db) = dbias {
        for t in 0..t_len {
            axpy(1.0, &dy[t * d..(t + 1) * d], db);
        }
    }
    let mut dx = vec![0.0; dy.len()];
    let inv_d = 1.0 / d as f64;
    for t in 0..t_len {
        let xh = &cache.xhat[t * d..(t + 1) * d];
        let dxhat: Vec<f64> = dy[t * d..(t + 1) * d].iter().zip(gain).map(|(a, g)| a * g).collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() * inv_d;
        let mean_dxhat_xhat = dot(&dxhat, xh) * inv_d;
        let r = cache.rstd[t];
        for i in 0..d {
            dx[t * d + i] = r * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    dx
}

fn attention_backward(
    dctx: &[f64],
    c: &super::LayerCache,
    t_len: usize,
    n_heads: usize,
    hd: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = n_heads * hd;
    let scale = 1.0 / libm::sqrt(hd as f64);
    let mut dq = vec![0.0; t_len * d];
    let mut dk = vec![0.0; t_len * d];
    let mut dv = vec![0.0; t_len * d];
    let mut dp = vec![0.0; t_len];
    for h in 0..n_heads {
        let hs = h * hd..(h + 1) * hd;
        for t in 0..t_len {
            let p = &c.probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
            let dct = &dctx[t * d + hs.start..t * d + hs.end];
            let mut weighted = 0.0;
            for s in 0..=t {
                dp[s] = dot(dct, &c.v[s * d + hs.start..s * d + hs.end]);
                weighted += p[s] * dp[s];
                axpy(p[s], dct, &mut dv[s * d + hs.start..s * d + hs.end]);
            }
            let qt = &c.q[t * d + hs.start..t * d + hs.end];
            for s in 0..=t {
                let ds = p[s] * (dp[s] - weighted) * scale;
                if ds != 0.0 {
                    axpy(ds, &c.k[s * d + hs.start..s * d + hs.end], &mut dq[t * d + hs.start..t * d + hs.end]);
                    axpy(ds, qt, &mut dk[s * d + hs.start..s * d + hs.end]);
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Summed NLL of `targets` with `v` injected at input position `pos` of the
/// edited layer, and its exact gradient with respect to `v`.
///
/// Targets before `pos` cannot see the injection and contribute nothing to
/// the gradient.
pub fn injection_gradient(
    model: &TinyLm,
    tokens: &[TokenId],
    pos: usize,
    v: &Vector,
    targets: &[Target],
) -> Result<(f64, Vector)> {
    for tg in targets {
        if tg.pos >= tokens.len() {
            return Err(Error::PositionOutOfRange { pos: tg.pos, len: tokens.len() });
        }
        if tg.token as usize >= model.config.vocab_size {
            return Err(Error::TokenOutOfRange { token: tg.token, vocab: model.config.vocab_size });
        }
    }
    let cache = model.run_injected(tokens, pos, v)?;
    let cfg = &model.config;
    let offset = cfg.bos_offset();
    let (loss, dlogits) = nll_and_dlogits(&cache, cfg.vocab_size, offset, targets);
    if !loss.is_finite() {
        return Err(Error::NonFinite("injection loss"));
    }
    let dx = backward(model, &cache, &dlogits, None, cfg.edited_layer + 1);
    let d = cfg.d_model;
    let ip = pos + offset;
    Ok((loss, Vector::new(dx[ip * d..(ip + 1) * d].to_vec())?))
}

impl TinyLm {
    /// Gradient of `-log p(target | ...)` at `target_pos` with respect to the
    /// vector injected at `pos`.
    pub fn grad_wrt_injection(
        &self,
        tokens: &[TokenId],
        pos: usize,
        v: &Vector,
        target: TokenId,
        target_pos: usize,
    ) -> Result<Vector> {
        injection_gradient(self, tokens, pos, v, &[Target { pos: target_pos, token: target }]).map(|(_, g)| g)
    }

    /// Mean next-token NLL of `tokens` and the gradient of that mean with
    /// respect to every parameter.
    pub fn loss_and_gradients(&self, tokens: &[TokenId]) -> Result<(f64, TinyLm)> {
        let mut grads = TinyLm::zeros(self.config.clone())?;
        grads.zero_gains();
        let loss = self.accumulate_gradients(tokens, 1.0, &mut grads)?;
        Ok((loss, grads))
    }

    /// Adds `weight * d(mean NLL)/d(params)` into `grads`; returns the mean NLL.
    pub(crate) fn accumulate_gradients(&self, tokens: &[TokenId], weight: f64, grads: &mut TinyLm) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::SequenceTooShort { len: tokens.len(), min: 2 });
        }
        let input = &tokens[..tokens.len() - 1];
        let cache = self.run(input, None)?;
        let targets: Vec<Target> = (0..input.len()).map(|p| Target { pos: p, token: tokens[p + 1] }).collect();
        let (loss, mut dlogits) = nll_and_dlogits(&cache, self.config.vocab_size, self.config.bos_offset(), &targets);
        let n = targets.len() as f64;
        dlogits.iter_mut().for_each(|g| *g *= weight / n);
        backward(self, &cache, &dlogits, Some(grads), 0);
        Ok(loss / n)
    }

    pub(crate) fn zero_gains(&mut self) {
        for l in &mut self.layers {
            l.ln1_gain.iter_mut().for_each(|x| *x = 0.0);
            l.ln2_gain.iter_mut().for_each(|x| *x = 0.0);
        }
        self.final_ln_gain.iter_mut().for_each(|x| *x = 0.0);
    }
}
