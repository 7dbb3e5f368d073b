//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signer_core::corpus::{GlossExample, PoseSequence, TokenId, NUM_RESERVED};
use signer_core::diffkit::gradcheck::{check_gradients, FD_STEP};
use signer_core::diffkit::{DiffError, Tensor};
use signer_core::slp_moe::{gate_objective_graph, MoeWeights};
use signer_core::slul::{combined_graph, LossWeights, MaskPlan, ModelConfig, SlulParams};
use signer_core::stabilizer::StabilizerConfig;

pub const SRC_V: usize = 14;

/// `frames[t][c]` view for the oracles.
pub fn rows(p: &PoseSequence) -> Vec<Vec<f64>> {
    (0..p.frames()).map(|t| p.frame(t).to_vec()).collect()
}

pub fn hand_cols(p: &PoseSequence) -> Vec<usize> {
    p.hand_idx().iter().flat_map(|&j| [2 * j, 2 * j + 1]).collect()
}

/// Plain gradient descent on the full objective, written from the loss
/// definitions term by term, run until the gradient vanishes.
pub fn descent_oracle(input: &PoseSequence, anchor: &[f64], k: &StabilizerConfig) -> Vec<Vec<f64>> {
    let p = rows(input);
    let cols = hand_cols(input);
    let (n, w) = (p.len(), p[0].len());
    let mut x = p.clone();
    let lip = 2.0 * (k.lambda_fid + k.lambda_hand + 16.0 * k.lambda_smooth + 4.0 * k.lambda_vel);
    let step = 1.0 / lip;
    for _ in 0..200_000 {
        let mut g = vec![vec![0.0; w]; n];
        for t in 0..n {
            for c in 0..w {
                g[t][c] += 2.0 * k.lambda_fid * (x[t][c] - p[t][c]);
            }
            for (h, &c) in cols.iter().enumerate() {
                g[t][c] += 2.0 * k.lambda_hand * (x[t][c] - anchor[t * cols.len() + h]);
            }
        }
        for t in 2..n {
            for c in 0..w {
                let j = x[t][c] - 2.0 * x[t - 1][c] + x[t - 2][c];
                g[t][c] += 2.0 * k.lambda_smooth * j;
                g[t - 1][c] -= 4.0 * k.lambda_smooth * j;
                g[t - 2][c] += 2.0 * k.lambda_smooth * j;
            }
        }
        for t in 1..n {
            for c in 0..w {
                let d = 2.0 * k.lambda_vel * (x[t][c] - x[t - 1][c]);
                g[t][c] += d;
                g[t - 1][c] -= d;
            }
        }
        let gmax = g.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax < 1e-11 {
            break;
        }
        for t in 0..n {
            for c in 0..w {
                x[t][c] -= step * g[t][c];
            }
        }
    }
    x
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Minimum over every warping path, enumerated recursively.
pub fn all_paths(a: &PoseSequence, b: &PoseSequence, i: usize, j: usize) -> f64 {
    let here = dist(a.frame(i), b.frame(j));
    if i == a.frames() - 1 && j == b.frames() - 1 {
        return here;
    }
    let mut best = f64::INFINITY;
    if i + 1 < a.frames() {
        best = best.min(all_paths(a, b, i + 1, j));
    }
    if j + 1 < b.frames() {
        best = best.min(all_paths(a, b, i, j + 1));
    }
    if i + 1 < a.frames() && j + 1 < b.frames() {
        best = best.min(all_paths(a, b, i + 1, j + 1));
    }
    here + best
}

pub fn counter_bleu1(cand: &[TokenId], reference: &[TokenId]) -> f64 {
    let mut rc: HashMap<TokenId, usize> = HashMap::new();
    for t in reference {
        *rc.entry(*t).or_default() += 1;
    }
    let mut cc: HashMap<TokenId, usize> = HashMap::new();
    for t in cand {
        *cc.entry(*t).or_default() += 1;
    }
    let clipped: usize = cc.iter().map(|(t, c)| (*c).min(rc.get(t).copied().unwrap_or(0))).sum();
    let bp = if cand.len() > reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / cand.len() as f64).exp()
    };
    bp * clipped as f64 / cand.len() as f64
}

pub fn brute_lcs(a: &[TokenId], b: &[TokenId]) -> usize {
    match (a.split_first(), b.split_first()) {
        (Some((x, ra)), Some((y, rb))) => {
            if x == y {
                1 + brute_lcs(ra, rb)
            } else {
                brute_lcs(ra, b).max(brute_lcs(a, rb))
            }
        }
        _ => 0,
    }
}

/// Unsmoothed BLEU-1..4 from n-gram lists compared element by element.
/// Orders the candidate is too short for are left out of the mean.
pub fn counter_bleu(cand: &[TokenId], reference: &[TokenId]) -> [f64; 4] {
    let grams = |s: &[TokenId], n: usize| -> Vec<Vec<TokenId>> { s.windows(n).map(|w| w.to_vec()).collect() };
    let mut logs = Vec::new();
    let mut out = [0.0; 4];
    let bp = if cand.len() > reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / cand.len() as f64).exp()
    };
    for n in 1..=4 {
        let cg = grams(cand, n);
        if !cg.is_empty() {
            let mut pool = grams(reference, n);
            let mut hits = 0;
            for g in &cg {
                if let Some(i) = pool.iter().position(|r| r == g) {
                    pool.swap_remove(i);
                    hits += 1;
                }
            }
            logs.push(if hits == 0 { f64::NEG_INFINITY } else { (hits as f64 / cg.len() as f64).ln() });
        }
        out[n - 1] = bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp();
    }
    out
}

pub fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn random_example(rng: &mut ChaCha8Rng, gloss_v: usize) -> GlossExample {
    let plen = rng.gen_range(1..5);
    let glen = rng.gen_range(1..4);
    GlossExample {
        lang: rng.gen_range(NUM_RESERVED..SRC_V) as TokenId,
        prompt: (0..plen).map(|_| rng.gen_range(NUM_RESERVED..SRC_V) as TokenId).collect(),
        gloss: (0..glen).map(|_| rng.gen_range(NUM_RESERVED..gloss_v) as TokenId).collect(),
        expert_index: 0,
        pose_ref: String::new(),
    }
}

/// Central differences of the four-term objective over every parameter, with
/// the mask plan and clean-branch targets held fixed.
pub fn slul_gradcheck(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = SlulParams::init(
        &ModelConfig {
            d_model: 4,
            heads: 2,
            d_ff: 4,
            init_seed: seed,
        },
        SRC_V,
        8,
    )
    .unwrap();
    let batch: Vec<GlossExample> = (0..2).map(|_| random_example(&mut rng, 8)).collect();
    let flags: Vec<Vec<bool>> = batch
        .iter()
        .map(|ex| {
            let mut f: Vec<bool> = ex.gloss.iter().map(|_| rng.gen_bool(0.5)).collect();
            f[0] = true;
            f
        })
        .collect();
    let plan = MaskPlan::with_flags(&p, &batch, flags).unwrap();
    let w = LossWeights {
        rho: 0.5,
        tau: 0.5,
        lambda_sagm: 0.7,
        lambda_kl: 0.9,
        lambda_con: 0.3,
    };
    let report = check_gradients(
        p.tensors(),
        |g, vars| {
            let b = p.bind_vars(vars.to_vec());
            let nodes = combined_graph(g, &b, &batch, &plan, &w).map_err(|e| DiffError::InvalidArgument(e.to_string()))?;
            Ok(nodes.combined)
        },
        FD_STEP,
    )
    .unwrap();
    report.max_rel_err
}

/// One random gate instance: `(d, k, batch)` drawn small, entropy bonus on.
pub fn gate_gradcheck(rng: &mut ChaCha8Rng) -> f64 {
    let weights = MoeWeights {
        lambda_moe: 1.0,
        entropy_bonus: 0.3,
    };
    let (d, k, b) = (rng.gen_range(2..6), rng.gen_range(2..5), rng.gen_range(1..6));
    let w = random_tensor(rng, d, k, 1.0);
    let x = random_tensor(rng, b, d, 1.0);
    let y: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
    let report = check_gradients(
        &[w],
        |g, v| {
            let (_, _, obj) = gate_objective_graph(g, v[0], x.clone(), &y, &weights)
                .map_err(|e| DiffError::InvalidArgument(e.to_string()))?;
            Ok(obj)
        },
        FD_STEP,
    )
    .unwrap();
    report.max_rel_err
}
