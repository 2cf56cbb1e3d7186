// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 5 to 7 train the 4-layer, 64-wide model on the generated fact
//! world. The trained weights are cached under the cargo target tmpdir,
//! keyed by a hash of the configuration and corpus.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use romelab::config::RunConfig;
use romelab::container::{decode_model, encode_model};
use romelab::report::{sha256_hex, write_atomic};
use romelab::world::{FactWorld, DEFAULT_CORPUS_BYTES};
use romelab_core::diagnostics::{cluster_distance, denominator_stats, key_divergence, GroupLabel};
use romelab_core::editor::{rank_one_update, EditMode, EditOutcome};
use romelab_core::eval::{
    ablation_suite, collapse_benchmark, evaluate_suite, perplexity, variant_model, BenchmarkTable, EvalCase,
    PrefixMode, Variant,
};
use romelab_core::keyspace::{
    estimate_second_moment, sample_prefixes, second_moment_from_keys, KeyBundle, Ridge, SecondMoment,
};
use romelab_core::linalg::{Matrix, Vector};
use romelab_core::model::{train, BosMode, ModelConfig, TinyLm, TokenId};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

// ---------------------------------------------------------------------------
// Shared oracles

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `A Aᵀ / n + 0.1 I`, symmetrised entry by entry.
fn rand_spd(rng: &mut ChaCha8Rng, n: usize) -> SecondMoment {
    let a: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..n).map(|k| a[i][k] * a[j][k]).sum::<f64>() / n as f64;
            c[i * n + j] = s + if i == j { 0.1 } else { 0.0 };
            c[j * n + i] = c[i * n + j];
        }
    }
    SecondMoment::new(Matrix::new(n, n, c).unwrap(), n, 0.1, 0).unwrap()
}

/// Gauss-Jordan elimination with partial pivoting.
fn gauss_jordan(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let p = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, p);
        b.swap(col, p);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..n {
                    a[r][k] -= f * a[col][k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    (0..n).map(|i| b[i] / a[i][i]).collect()
}

fn dense(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn frob(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// 1. Constraint exactness

fn constraint_exactness() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let d = rng.random_range(2..=64);
        let m = rng.random_range(2..=64);
        let c = rand_spd(&mut rng, m);
        let w = rand_mat(&mut rng, d, m);
        let k_bar = rand_vec(&mut rng, m);
        let k_u = k_bar.add(&rand_vec(&mut rng, m).scale(0.5));
        let v_star = rand_vec(&mut rng, d);
        let k_right = if i % 2 == 0 { &k_bar } else { &k_u };
        let up = rank_one_update(&w, &c, &k_bar, k_right, &v_star, 0.0).unwrap();
        let out = up.w_hat.matvec(k_right).unwrap();
        let resid: Vec<f64> = out.as_slice().iter().zip(v_star.as_slice()).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&resid) / norm(v_star.as_slice()));
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(worst <= 1e-8 && secs < 5.0, format!("max relative residual {worst:.2e} (≤ 1e-8), {secs:.2} s (< 5 s)"))
}

// ---------------------------------------------------------------------------
// 2. Constrained least-squares oracle

fn least_squares_oracle() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let d = rng.random_range(2..=16);
        let m = rng.random_range(2..=16);
        let keys = rand_mat(&mut rng, m, 3 * m);
        let values = rand_mat(&mut rng, d, 3 * m);
        let kkt = keys.matmul(&keys.transpose()).unwrap();
        let vk = values.matmul(&keys.transpose()).unwrap();
        // Unconstrained least-squares fit W = V Kᵀ (K Kᵀ)⁻¹.
        let w_rows: Vec<Vec<f64>> = (0..d).map(|r| gauss_jordan(dense(&kkt), vk.row(r).to_vec())).collect();
        let w = Matrix::new(d, m, w_rows.concat()).unwrap();
        let sym: Vec<f64> = (0..m * m).map(|i| 0.5 * (kkt.get(i / m, i % m) + kkt.get(i % m, i / m))).collect();
        let c = SecondMoment::new(Matrix::new(m, m, sym).unwrap(), 3 * m, 0.0, 0).unwrap();
        let k_bar = rand_vec(&mut rng, m);
        let v_star = rand_vec(&mut rng, d);
        let up = rank_one_update(&w, &c, &k_bar, &k_bar, &v_star, 0.0).unwrap();
        // Each row: stationary point of ‖wK − v‖² + λ(w·k̄ − v*_r).
        let mut expected = Vec::with_capacity(d * m);
        for r in 0..d {
            let mut a = vec![vec![0.0; m + 1]; m + 1];
            let mut b = vec![0.0; m + 1];
            for i in 0..m {
                for j in 0..m {
                    a[i][j] = 2.0 * kkt.get(i, j);
                }
                a[i][m] = k_bar.as_slice()[i];
                a[m][i] = k_bar.as_slice()[i];
                b[i] = 2.0 * vk.get(r, i);
            }
            b[m] = v_star.as_slice()[r];
            expected.extend_from_slice(&gauss_jordan(a, b)[..m]);
        }
        let diff: Vec<f64> = up.w_hat.as_slice().iter().zip(&expected).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff));
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(worst <= 1e-5 && secs < 60.0, format!("max Frobenius distance {worst:.2e} (≤ 1e-5), {secs:.2} s (< 60 s)"))
}

// ---------------------------------------------------------------------------
// 3. Denominator collapse law

fn denominator_law() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (mut worst_den, mut worst_delta): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let (d, m) = (rng.random_range(2..=24), rng.random_range(3..=24));
        let c = rand_spd(&mut rng, m);
        let w = rand_mat(&mut rng, d, m);
        let k_bar = rand_vec(&mut rng, m);
        let q = c.solve(&k_bar).unwrap();
        let q_hat = q.scale(1.0 / q.norm());
        let noise = rand_vec(&mut rng, m);
        let perp = noise.sub(&q_hat.scale(noise.dot(&q_hat)));
        let along = rng.random_range(0.5..2.0);
        let residual = rand_vec(&mut rng, d);
        let build = |t: f64| {
            let k_right = q_hat.scale(along * t).add(&perp);
            // v* − W k_right stays equal to `residual` for every t.
            let v_star = w.matvec(&k_right).unwrap().add(&residual);
            rank_one_update(&w, &c, &k_bar, &k_right, &v_star, 0.0).unwrap()
        };
        let base = build(1.0);
        for t in [0.1, 0.01] {
            let up = build(t);
            let den_ratio = up.denominator.abs() / base.denominator.abs();
            let delta_ratio = frob(&up.delta) / frob(&base.delta);
            worst_den = worst_den.max((den_ratio / t - 1.0).abs());
            worst_delta = worst_delta.max((delta_ratio * t - 1.0).abs());
        }
    }
    verdict(
        worst_den < 0.01 && worst_delta < 0.05,
        format!("|den| scaling error {worst_den:.2e} (< 1%), ‖Δ‖ scaling error {worst_delta:.2e} (< 5%)"),
    )
}

// ---------------------------------------------------------------------------
// 4. Gradient correctness

/// `-ln softmax(logits)[target]` from a plain forward pass with injection.
fn injected_nll(m: &TinyLm, tokens: &[TokenId], pos: usize, v: &Vector, target: TokenId, at: usize) -> f64 {
    let trace = m.forward_with_injection(tokens, pos, v).unwrap();
    let row = trace.logits[at].as_slice();
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    lse - row[target as usize]
}

fn gradient_correctness() -> Verdict {
    let t = Instant::now();
    let configs = [
        (ModelConfig::byte_level(1, 8, 2, 8, 0), 1, vec![3, 70, 80, 90], 1),
        (ModelConfig::byte_level(2, 16, 4, 12, 1), 2, vec![65, 66, 67, 68, 69], 2),
        (ModelConfig::byte_level(2, 32, 4, 16, 0), 3, vec![10, 20, 30, 40, 50, 60], 0),
    ];
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (cfg, seed, tokens, pos) in configs {
        let m = TinyLm::new(cfg, seed).unwrap();
        let base = m.forward(&tokens).unwrap().tapped_values[pos].clone();
        let v =
            Vector::new(base.as_slice().iter().enumerate().map(|(i, x)| x + 0.05 * ((i % 3) as f64 - 1.0)).collect())
                .unwrap();
        let at = tokens.len() - 1;
        let target = 101;
        let grad = m.grad_wrt_injection(&tokens, pos, &v, target, at).unwrap();
        for i in 0..v.dim() {
            let mut plus = v.as_slice().to_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (injected_nll(&m, &tokens, pos, &Vector::new(plus).unwrap(), target, at)
                - injected_nll(&m, &tokens, pos, &Vector::new(minus).unwrap(), target, at))
                / (2.0 * h);
            let g = grad.as_slice()[i];
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(worst <= 1e-4 && secs < 30.0, format!("3 configs, max relative error {worst:.2e} (≤ 1e-4), {secs:.2} s"))
}

// ---------------------------------------------------------------------------
// 5 to 7. Trained model on the fact world

struct Trained {
    model: TinyLm,
    c: SecondMoment,
    cases: Vec<EvalCase>,
    held: Vec<TokenId>,
    cfg: RunConfig,
    plateau: (f64, f64),
    rome: BenchmarkTable,
}

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = RunConfig::example("corpus.txt", "suite.jsonl", "out");
        let world = FactWorld::new(cfg.seed);
        let text = world.corpus(DEFAULT_CORPUS_BYTES, cfg.seed + 1);
        let tokens: Vec<TokenId> = text.bytes().map(TokenId::from).collect();
        let (held, train_tokens) = tokens.split_at(cfg.corpus.held_out_bytes);
        let key = sha256_hex(format!("{}\n{}", cfg.to_toml().unwrap(), sha256_hex(text.as_bytes())).as_bytes());
        let path = cache_dir().join(format!("model-{}.rlw", &key[..16]));
        let losses_path = path.with_extension("losses");
        let (model, losses) = match (std::fs::read(&path), std::fs::read(&losses_path)) {
            (Ok(bytes), Ok(l)) => (
                decode_model(&bytes).unwrap(),
                l.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            _ => {
                let init = TinyLm::new(cfg.model_config(), cfg.seed).unwrap();
                let out = train(&init, train_tokens, cfg.train.steps, &cfg.train.train_config(cfg.seed)).unwrap();
                write_atomic(&path, &encode_model(&out.model).unwrap()).unwrap();
                let l: Vec<u8> = out.losses.iter().flat_map(|x| x.to_le_bytes()).collect();
                write_atomic(&losses_path, &l).unwrap();
                (out.model, out.losses)
            }
        };
        // Plateau: mean loss over the final 10% of steps vs the 10% before it.
        let n = losses.len() / 10;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let plateau = (mean(&losses[losses.len() - 2 * n..losses.len() - n]), mean(&losses[losses.len() - n..]));
        let layer = cfg.model.edited_layer;
        let c = estimate_second_moment(&model, train_tokens, layer, cfg.covariance.ridge, cfg.covariance.max_samples)
            .unwrap();
        let p = &cfg.prefixes;
        let prefixes = sample_prefixes(&model, p.count, p.min_len..=p.max_len, cfg.seed, p.source).unwrap();
        let cases: Vec<EvalCase> =
            world.suite(cfg.seed, 5).iter().map(|s| s.to_eval_case(&prefixes, EditMode::CRome).unwrap()).collect();
        let rome =
            collapse_benchmark(&model, &cases, EditMode::RomeInconsistent, &c, &cfg.edit_config(), held).unwrap();
        Trained { model, c, cases, held: held.to_vec(), cfg, plateau, rome }
    })
}

fn group_counts(cases: &[EvalCase]) -> (usize, usize) {
    let first = cases.iter().filter(|c| c.group() == GroupLabel::Collapse).count();
    (first, cases.len() - first)
}

fn toy_collapse() -> Verdict {
    let t = trained();
    let (n_first, n_mid) = group_counts(&t.cases);
    let cfg = t.model.config();
    let setup_ok = cfg.n_layers == 4
        && cfg.d_model == 64
        && cfg.bos_mode == BosMode::None
        && DEFAULT_CORPUS_BYTES >= 256 * 1024
        && n_first >= 20
        && n_mid >= 20
        && t.rome.failures.is_empty();
    let (prev, last) = t.plateau;
    let plateau_ok = (prev - last).abs() <= 0.05 * prev;
    let (Some(first), Some(mid)) = (t.rome.group(GroupLabel::Collapse), t.rome.group(GroupLabel::Normal)) else {
        return verdict(false, "a group is empty".into());
    };
    let a = first.mean_abs_denominator < mid.mean_abs_denominator;
    let b = first.max_ppl_ratio > mid.max_ppl_ratio;
    verdict(
        setup_ok && plateau_ok && a && b,
        format!(
            "{n_first} first-token / {n_mid} mid cases; loss {prev:.3} → {last:.3} over the last 20% of steps; \
             mean |den| {:.3} < {:.3}: {a}; max ppl ratio {:.3} > {:.3}: {b}",
            first.mean_abs_denominator, mid.mean_abs_denominator, first.max_ppl_ratio, mid.max_ppl_ratio
        ),
    )
}

fn c_rome_stability() -> Verdict {
    let t = trained();
    let table = collapse_benchmark(&t.model, &t.cases, EditMode::CRome, &t.c, &t.cfg.edit_config(), &t.held).unwrap();
    let worst = table.rows.iter().map(|r| r.ppl_ratio).fold(0.0, f64::max);
    let all = table.rows.len() == t.cases.len() && table.failures.is_empty();
    verdict(
        all && worst <= 2.0,
        format!("{} of {} cases edited, max ppl ratio {worst:.3} (≤ 2)", table.rows.len(), t.cases.len()),
    )
}

fn prefix_at_test() -> Verdict {
    let t = trained();
    let first: Vec<EvalCase> = t.cases.iter().filter(|c| c.group() == GroupLabel::Collapse).cloned().collect();
    let run = |mode| {
        let r = evaluate_suite(&t.model, &first, &t.c, &t.cfg.edit_config(), mode, &t.held, t.cfg.seed).unwrap();
        assert!(r.failures.is_empty(), "{:?}", r.failures);
        r.aggregates.into_iter().find(|a| a.group == GroupLabel::Collapse).unwrap()
    };
    let none = run(PrefixMode::None);
    let prefixed = run(PrefixMode::RandomPrefix);
    let (ln, lp) = (none.locality.unwrap(), prefixed.locality.unwrap());
    verdict(
        prefixed.efficacy >= none.efficacy && ln >= 0.9 && lp >= 0.9,
        format!(
            "{} cases; efficacy random_prefix {:.3} ≥ none {:.3}; locality {ln:.3} / {lp:.3} (≥ 0.9)",
            first.len(),
            prefixed.efficacy,
            none.efficacy
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Metric oracles

fn naive_perplexity(m: &TinyLm, text: &[TokenId]) -> f64 {
    let trace = m.forward(&text[..text.len() - 1]).unwrap();
    let mut nll = 0.0;
    for (row, &next) in trace.logits.iter().zip(&text[1..]) {
        let z: f64 = row.as_slice().iter().map(|x| x.exp()).sum();
        nll -= (row.as_slice()[next as usize].exp() / z).ln();
    }
    (nll / (text.len() - 1) as f64).exp()
}

fn outcome(rng: &mut ChaCha8Rng) -> EditOutcome {
    let (d, m) = (3, 4);
    let c = rand_spd(rng, m);
    let k_bar = rand_vec(rng, m);
    let k_u = k_bar.add(&rand_vec(rng, m).scale(0.4));
    let v_star = rand_vec(rng, d);
    let up = rank_one_update(&rand_mat(rng, d, m), &c, &k_bar, &k_u, &v_star, 0.0).unwrap();
    EditOutcome {
        w_hat: up.w_hat,
        delta: up.delta,
        numerator: up.numerator,
        denominator: up.denominator,
        v_star: v_star.clone(),
        v_initial: v_star,
        key_bundle: KeyBundle {
            per_prefix_keys: vec![k_bar.clone()],
            k_bar,
            k_u,
            subject_tokens: vec![1],
            subject_last_index: 0,
        },
        mode: EditMode::RomeInconsistent,
        value_loss_curve: vec![],
    }
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name, err: f64| {
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max(err);
    };

    // cluster_distance: centroid first, then mean Euclidean distance.
    for _ in 0..5 {
        let n = rng.random_range(2..=20);
        let xs: Vec<Vector> = (0..rng.random_range(2..=40)).map(|_| rand_vec(&mut rng, n)).collect();
        let mut centroid = vec![0.0; n];
        for x in &xs {
            for i in 0..n {
                centroid[i] += x.as_slice()[i] / xs.len() as f64;
            }
        }
        let brute = xs
            .iter()
            .map(|x| norm(&x.as_slice().iter().zip(&centroid).map(|(a, b)| a - b).collect::<Vec<_>>()))
            .sum::<f64>()
            / xs.len() as f64;
        note("cluster_distance", (cluster_distance(&xs).unwrap() - brute).abs());
    }

    // perplexity against a naive softmax over random models and texts.
    for seed in 0..4 {
        let m = TinyLm::new(ModelConfig::byte_level(2, 16, 2, 24, 1), seed).unwrap();
        let text: Vec<TokenId> = (0..24).map(|_| rng.random_range(0..256)).collect();
        let naive = naive_perplexity(&m, &text);
        note("perplexity", (perplexity(&m, &text).unwrap() - naive).abs() / naive);
    }
    let mut uniform = TinyLm::new(ModelConfig::byte_level(1, 8, 2, 16, 0), 1).unwrap();
    uniform.final_ln_gain.iter_mut().for_each(|g| *g = 0.0);
    uniform.final_ln_bias.iter_mut().for_each(|g| *g = 0.0);
    let uniform_ppl = perplexity(&uniform, &[1, 2, 3, 4, 5, 6]).unwrap();
    let vocab = uniform.config().vocab_size as f64;

    // denominator_stats against per-group means.
    let outcomes: Vec<(EditOutcome, GroupLabel)> = (0..24)
        .map(|i| (outcome(&mut rng), if i % 3 == 0 { GroupLabel::Collapse } else { GroupLabel::Normal }))
        .collect();
    let ids: Vec<String> = (0..outcomes.len()).map(|i| format!("c{i}")).collect();
    let input: Vec<(&str, &EditOutcome, GroupLabel)> =
        outcomes.iter().zip(&ids).map(|((o, g), id)| (id.as_str(), o, *g)).collect();
    let report = denominator_stats(&input).unwrap();
    for group in [GroupLabel::Collapse, GroupLabel::Normal] {
        let members: Vec<&EditOutcome> = outcomes.iter().filter(|(_, g)| *g == group).map(|(o, _)| o).collect();
        let n = members.len() as f64;
        let agg = report.aggregate(group).unwrap();
        let den = members.iter().map(|o| o.denominator.abs()).sum::<f64>() / n;
        let num = members.iter().map(|o| frob(&o.numerator)).sum::<f64>() / n;
        let delta = members.iter().map(|o| frob(&o.delta)).sum::<f64>() / n;
        note("denominator_stats", (agg.mean_abs_denominator - den).abs());
        note("denominator_stats", (agg.mean_numerator_norm - num).abs());
        note("denominator_stats", (agg.mean_delta_norm - delta).abs());
    }

    // key_divergence with C⁻¹k̄ from Gauss-Jordan.
    let n = 6;
    let keys: Vec<Vector> = (0..40).map(|_| rand_vec(&mut rng, n)).collect();
    let c = second_moment_from_keys(&keys, Ridge::Absolute(0.1), 0).unwrap();
    let bundles: Vec<KeyBundle> = (0..12)
        .map(|_| {
            let k_bar = rand_vec(&mut rng, n);
            KeyBundle {
                per_prefix_keys: vec![k_bar.clone()],
                k_bar,
                k_u: rand_vec(&mut rng, n),
                subject_tokens: vec![1],
                subject_last_index: 0,
            }
        })
        .collect();
    let rec = key_divergence(&bundles, &c).unwrap();
    let k_bar: Vec<Vec<f64>> = bundles.iter().map(|b| b.k_bar.as_slice().to_vec()).collect();
    let k_u: Vec<Vec<f64>> = bundles.iter().map(|b| b.k_u.as_slice().to_vec()).collect();
    let whitened: Vec<Vec<f64>> = k_bar.iter().map(|k| gauss_jordan(dense(c.matrix()), k.clone())).collect();
    let mean = |vs: &[Vec<f64>]| -> Vec<f64> {
        (0..n).map(|i| vs.iter().map(|v| v[i]).sum::<f64>() / vs.len() as f64).collect()
    };
    let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b));
    for (pop, cmp) in [(&k_bar, &rec.prefixed_vs_unprefixed), (&whitened, &rec.whitened_vs_unprefixed)] {
        let (ma, mb) = (mean(pop), mean(&k_u));
        let dist = norm(&ma.iter().zip(&mb).map(|(a, b)| a - b).collect::<Vec<_>>());
        note("key_divergence", (cmp.centroid_distance - dist).abs());
        for (i, got) in cmp.cosines.iter().enumerate() {
            note("key_divergence", (got - cos(&pop[i], &k_u[i])).abs());
        }
    }

    let within = worst.values().all(|e| *e <= 1e-10);
    let details: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    verdict(
        within && uniform_ppl == vocab,
        format!("max error {} (≤ 1e-10); uniform ppl {uniform_ppl} = vocab {vocab}", details.join(", ")),
    )
}

// ---------------------------------------------------------------------------
// 9. Determinism

fn romelab(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_romelab")).args(args).current_dir(dir).output().unwrap().status.success()
}

fn hashes(dir: &Path) -> BTreeMap<String, String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), sha256_hex(&std::fs::read(e.path()).unwrap()))
        })
        .collect()
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(romelab(d, &["gen-world", "--out", ".", "--seed", "9", "--bytes", "8000"]));
    let suite = std::fs::read_to_string(d.join("suite.jsonl")).unwrap();
    std::fs::write(d.join("suite.jsonl"), suite.lines().take(4).map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    let mut cfg = RunConfig::example("corpus.txt", "suite.jsonl", "out");
    cfg.seed = 9;
    (cfg.model.n_layers, cfg.model.d_model, cfg.model.n_heads, cfg.model.max_seq) = (2, 16, 2, 32);
    cfg.corpus.held_out_bytes = 512;
    (cfg.train.steps, cfg.train.seq_len, cfg.train.batch_size) = (10, 32, 2);
    cfg.covariance.max_samples = 1000;
    cfg.value_search.steps = 5;
    std::fs::write(d.join("romelab.toml"), cfg.to_toml().unwrap()).unwrap();

    let runs: Vec<Vec<&str>> = vec![
        vec!["train"],
        vec!["estimate-cov"],
        vec!["edit", "--case", "B-first"],
        vec!["edit", "--case", "B-mid", "--mode", "rome", "--prefix-test", "on"],
        vec!["diagnose"],
        vec!["eval", "--prefix-test", "on"],
        vec!["sweep"],
    ];
    let pipeline = || {
        runs.iter().all(|r| {
            let args: Vec<&str> = r[..1].iter().chain(&["--config", "romelab.toml"]).chain(&r[1..]).copied().collect();
            romelab(d, &args)
        })
    };
    if !pipeline() {
        return verdict(false, "a command failed".into());
    }
    let first = hashes(&d.join("out"));
    if !pipeline() {
        return verdict(false, "a command failed on rerun".into());
    }
    let second = hashes(&d.join("out"));
    let differing: Vec<&String> = first.iter().filter(|(k, v)| second.get(*k) != Some(v)).map(|(k, _)| k).collect();
    verdict(
        differing.is_empty() && first.len() == second.len(),
        format!("{} commands, {} output files, {} differ", runs.len(), first.len(), differing.len()),
    )
}

// ---------------------------------------------------------------------------
// 10. Ablation plumbing

fn ablation_plumbing() -> Verdict {
    let model = TinyLm::new(ModelConfig::byte_level(2, 16, 2, 16, 0).with_bos(), 4).unwrap();
    let prompt: Vec<TokenId> = b"Q lives in ".iter().map(|&b| TokenId::from(b)).collect();
    let before = model.forward(&prompt).unwrap().positions[0];
    let removed = variant_model(&model, Variant::BosRemoved).unwrap().unwrap();
    let after = removed.forward(&prompt).unwrap().positions[0];
    let no_bos = TinyLm::new(ModelConfig::byte_level(2, 16, 2, 16, 0), 4).unwrap();
    let skip_ok = variant_model(&no_bos, Variant::BosRemoved).unwrap().is_none();

    // The suite must run the BOS-removed variant on a BOS model.
    let keys = model.layer_keys(&(0..15).collect::<Vec<_>>()).unwrap()[0].clone();
    let c = second_moment_from_keys(&keys, Ridge::default(), 0).unwrap();
    let prefixes = romelab_core::keyspace::PrefixSet::user_supplied(vec![vec![65, 66]]).unwrap();
    let case = romelab::suite::SuiteCase {
        id: "q".into(),
        subject: "Q".into(),
        prompt: "{} lives in ".into(),
        old_object: "a".into(),
        new_object: "b".into(),
        paraphrases: vec![],
        locality: vec![],
    }
    .to_eval_case(&prefixes, EditMode::CRome)
    .unwrap();
    let mut ecfg = RunConfig::example("c", "s", "o").edit_config();
    ecfg.value_search.steps = 2;
    let held: Vec<TokenId> = (40..80).collect();
    let suite = ablation_suite(&model, &[case], EditMode::CRome, &c, &ecfg, &held).unwrap();
    let bos_ran = suite.variants.iter().any(|v| v.variant == Variant::BosRemoved && v.table.is_some());

    // Weight diff of the position swaps.
    let mut swaps_ok = true;
    for (variant, dst, src) in [(Variant::SecondToFirst, 0, 1), (Variant::FirstToSecond, 1, 0)] {
        let swapped = variant_model(&model, variant).unwrap().unwrap();
        for ((name, shape, a), (_, _, b)) in model.named_tensors().into_iter().zip(swapped.named_tensors()) {
            if name != "position_embedding" {
                swaps_ok &= a == b;
                continue;
            }
            let d = shape[1];
            for row in 0..shape[0] {
                let (ra, rb) = (&a[row * d..(row + 1) * d], &b[row * d..(row + 1) * d]);
                swaps_ok &= if row == dst { rb == &a[src * d..(src + 1) * d] && ra != rb } else { ra == rb };
            }
        }
    }
    verdict(
        before == 1 && after == 0 && skip_ok && bos_ran && swaps_ok,
        format!(
            "subject position {before} → {after}; skipped without BOS: {skip_ok}; ran in suite: {bos_ran}; \
             swaps touch only the target row: {swaps_ok}"
        ),
    )
}

type Criterion = (u8, &'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "constraint exactness", constraint_exactness),
        (2, "constrained least-squares oracle", least_squares_oracle),
        (3, "denominator collapse law", denominator_law),
        (4, "gradient correctness", gradient_correctness),
        (5, "toy collapse reproduction", toy_collapse),
        (6, "C-ROME stability", c_rome_stability),
        (7, "prefix-at-test", prefix_at_test),
        (8, "metric oracles", metric_oracles),
        (9, "determinism", determinism),
        (10, "ablation plumbing", ablation_plumbing),
    ];
    let only: Option<Vec<u8>> = std::env::args()
        .nth(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.split(',').filter_map(|s| s.parse().ok()).collect());
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += usize::from(!v.pass);
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {status} {name}: {} [{:.1} s]", v.detail, t.elapsed().as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
