//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Criteria 5 to 7 train the default configuration end to end, which takes a
//! few minutes in an optimised build.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signer_core::config::RunConfig;
use signer_core::corpus::{default_lexicon, write_corpus, GlossExample, PosePriorDb, PoseSequence, TokenId, Vocab};
use signer_core::evalkit::{back_translate, bleu, dtw, lcs_len, rouge_l, Smoothing};
use signer_core::pipeline::*;
use signer_core::slp_moe::{moe_losses, retrieve};
use signer_core::slul::{combined_loss, LossWeights, ModelConfig, SlulParams};
use signer_core::stabilizer::{stabilize, HandAnchor, StabilizerConfig};

mod common;
use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn check(out: &mut Vec<bool>, id: &str, name: &str, f: impl FnOnce() -> Outcome) {
    let o = f();
    println!("criterion {id} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    out.push(o.pass);
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let slul = (0..20).map(slul_gradcheck).fold(0.0f64, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gate = (0..20).map(|_| gate_gradcheck(&mut rng)).fold(0.0f64, f64::max);
    let t = start.elapsed();
    outcome(
        slul <= 1e-4 && gate <= 1e-4 && t < Duration::from_secs(60),
        format!("20 SLUL instances max rel err {slul:.2e}, 20 gate instances {gate:.2e}, {:.1}s", t.as_secs_f64()),
    )
}

fn loss_identities() -> Outcome {
    let p = SlulParams::init(
        &ModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 8,
            init_seed: 4,
        },
        SRC_V,
        10,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let batch: Vec<GlossExample> = (0..4).map(|_| random_example(&mut rng, 10)).collect();
    let w = LossWeights {
        rho: 0.5,
        ..LossWeights::default()
    };
    let rho0 = combined_loss(&p, &batch, &LossWeights { rho: 0.0, ..w.clone() }, &mut rng).unwrap();
    let single = combined_loss(&p, &batch[..1], &w, &mut rng).unwrap();
    let zero = LossWeights {
        lambda_sagm: 0.0,
        lambda_kl: 0.0,
        lambda_con: 0.0,
        ..w
    };
    let z = combined_loss(&p, &batch, &zero, &mut rng).unwrap();
    let (l_moe, l_ent) = moe_losses(&[0.25; 4], 1).unwrap();
    let ln4 = 4f64.ln();
    let pass = rho0.l_sagm == 0.0
        && rho0.l_kl == 0.0
        && single.l_con.abs() <= 1e-12
        && (l_moe - ln4).abs() <= 1e-12
        && (l_ent - ln4).abs() <= 1e-12
        && z.combined == z.l_slul;
    outcome(
        pass,
        format!(
            "rho=0: sagm {}, kl {}; B=1: con {:.1e}; uniform K=4: moe-ln4 {:.1e}, ent-ln4 {:.1e}; zero lambdas: combined-slul {}",
            rho0.l_sagm,
            rho0.l_kl,
            single.l_con,
            l_moe - ln4,
            l_ent - ln4,
            z.combined - z.l_slul
        ),
    )
}

fn random_pose(rng: &mut ChaCha8Rng, frames: usize, joints: usize) -> PoseSequence {
    let hands: Vec<usize> = (0..joints).filter(|_| rng.gen_bool(0.3)).collect();
    let coords = (0..frames * joints * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
    PoseSequence::new(frames, joints, coords, hands).unwrap()
}

fn stabilizer_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (frames, joints) = (rng.gen_range(3..=64), rng.gen_range(1..=16));
        let p = random_pose(&mut rng, frames, joints);
        let anchor: Vec<f64> = p.hand_track().iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
        let k = StabilizerConfig {
            lambda_fid: rng.gen_range(0.5..2.0),
            lambda_smooth: rng.gen_range(0.0..3.0),
            lambda_vel: rng.gen_range(0.0..1.0),
            lambda_hand: rng.gen_range(0.0..10.0),
            hand_anchor: HandAnchor::GroundTruth,
        };
        let out = stabilize(&p, Some(&anchor), &k).unwrap();
        for (t, row) in descent_oracle(&p, &anchor, &k).iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                worst = worst.max((out.poses.frame(t)[c] - v).abs());
            }
        }
    }
    let p = PoseSequence::new(3, 1, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0], vec![]).unwrap();
    let k = StabilizerConfig {
        lambda_fid: 1.0,
        lambda_smooth: 1.0,
        lambda_vel: 0.0,
        lambda_hand: 0.0,
        hand_anchor: HandAnchor::InputPose,
    };
    let out = stabilize(&p, None, &k).unwrap();
    let want = [2.0 / 7.0, 3.0 / 7.0, 2.0 / 7.0];
    let hand = (0..3).map(|t| (out.poses.frame(t)[0] - want[t]).abs()).fold(0.0f64, f64::max);
    outcome(
        worst <= 1e-6 && hand <= 1e-12,
        format!("50 instances max coordinate err {worst:.2e}; (0,1,0) case err {hand:.1e}"),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut dtw_err = 0.0f64;
    for n in 1..=5 {
        for m in 1..=5 {
            for _ in 0..4 {
                let mut draw = |frames: usize| {
                    let coords = (0..frames * 3 * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
                    PoseSequence::new(frames, 3, coords, vec![0]).unwrap()
                };
                let (a, b) = (draw(n), draw(m));
                dtw_err = dtw_err.max((dtw(&a, &b).unwrap() - all_paths(&a, &b, 0, 0)).abs());
            }
        }
    }
    let exact = bleu(&[4, 5, 6, 7], &[vec![4, 5, 6, 7]], Smoothing::AddOne).unwrap();
    let clipped = bleu(&[4, 4, 4, 4], &[vec![4, 5]], Smoothing::AddOne).unwrap()[0];
    let mut lcs_ok = true;
    for _ in 0..200 {
        let a: Vec<TokenId> = (0..rng.gen_range(0..=8)).map(|_| rng.gen_range(4..7)).collect();
        let b: Vec<TokenId> = (0..rng.gen_range(0..=8)).map(|_| rng.gen_range(4..7)).collect();
        lcs_ok &= lcs_len(&a, &b) == brute_lcs(&a, &b);
    }
    let rouge_ok = rouge_l(&[4, 5, 6], &[4, 5, 6], 1.0) == 1.0 && rouge_l(&[4, 5], &[6, 7], 1.0) == 0.0;

    let vocab = Vocab::build(&default_lexicon(50)).unwrap();
    let db = PosePriorDb::generate(1, &vocab, 4, 12, 16).unwrap();
    let ids: Vec<TokenId> = vocab.lexicon_ids().collect();
    let mut recovered = 0;
    for _ in 0..500 {
        let g: Vec<TokenId> = (0..rng.gen_range(1..=8)).map(|_| ids[rng.gen_range(0..ids.len())]).collect();
        let pose = retrieve(&g, rng.gen_range(0..4), &db, &vocab).unwrap();
        recovered += usize::from(back_translate(&pose, &db, &vocab, 16).unwrap() == g);
    }
    let pass = dtw_err <= 1e-12
        && exact == [1.0; 4]
        && (clipped - 0.25).abs() <= 1e-15
        && (counter_bleu1(&[4, 4, 4, 4], &[4, 5]) - 0.25).abs() <= 1e-15
        && lcs_ok
        && rouge_ok
        && recovered == 500;
    outcome(
        pass,
        format!(
            "DTW vs path enumeration max err {dtw_err:.1e}; exact-match BLEU {exact:?}; \"a a a a\" vs \"a b\" BLEU-1 {clipped}; LCS recursion {}; ROUGE examples {}; back-translation {recovered}/500",
            if lcs_ok { "ok" } else { "mismatch" },
            if rouge_ok { "ok" } else { "mismatch" }
        ),
    )
}

fn determinism() -> Outcome {
    let mut c = RunConfig::default();
    c.corpus.glosses = 8;
    c.corpus.n_train = 120;
    c.corpus.n_dev = 10;
    c.corpus.n_test = 20;
    c.model.d_model = 16;
    c.model.heads = 2;
    c.model.d_ff = 16;
    c.slul_opt.steps = 40;
    c.slul_opt.batch_size = 8;
    c.gate_opt.steps = 40;
    let run = || {
        let d = build_dataset(&c).unwrap();
        let t = train_all(&c, &d).unwrap();
        let s = run_study(&c, &d, &t).unwrap();
        let mut ckpts = vec![t.slul.to_checkpoint().to_text(), t.gate.to_checkpoint().to_text()];
        for (_, s, g) in &t.snapshots {
            ckpts.push(s.to_checkpoint().to_text());
            ckpts.push(g.to_checkpoint().to_text());
        }
        (write_corpus(&d.train, &d.vocabs), d.db.to_json(), ckpts, s)
    };
    let same_run = run() == run();
    let default = RunConfig::default();
    let a = build_dataset(&default).unwrap();
    let b = build_dataset(&default).unwrap();
    let same_data = write_corpus(&a.train, &a.vocabs) == write_corpus(&b.train, &b.vocabs) && a.db.to_json() == b.db.to_json();
    outcome(
        same_run && same_data,
        format!(
            "small config corpus/DB/checkpoints/study identical across runs: {same_run}; default corpus and DB identical: {same_data}"
        ),
    )
}

struct EndToEnd {
    elapsed: Duration,
    study: StudyReport,
}

fn end_to_end() -> EndToEnd {
    let cfg = RunConfig::default();
    let start = Instant::now();
    let data = build_dataset(&cfg).unwrap();
    let set = train_all(&cfg, &data).unwrap();
    let study = run_study(&cfg, &data, &set).unwrap();
    EndToEnd {
        elapsed: start.elapsed(),
        study,
    }
}

fn main() -> ExitCode {
    let mut passed = Vec::new();
    check(&mut passed, "1", "gradient suite", gradient_suite);
    check(&mut passed, "2", "loss identities", loss_identities);
    check(&mut passed, "3", "stabilizer exactness", stabilizer_exactness);
    check(&mut passed, "4", "metric oracles", metric_oracles);

    let e2e = end_to_end();
    let full = e2e.study.row(ROW_FULL).unwrap().clone();
    check(&mut passed, "5", "end-to-end synthetic run", || {
        outcome(
            full.gloss_exact >= 0.90 && full.gate_accuracy >= 0.95 && e2e.elapsed <= Duration::from_secs(600),
            format!(
                "exact match {:.3}, gate accuracy {:.3}, train + eval {:.0}s",
                full.gloss_exact,
                full.gate_accuracy,
                e2e.elapsed.as_secs_f64()
            ),
        )
    });
    check(&mut passed, "6", "trend reproduction", || {
        let dtws: Vec<f64> = e2e.study.trend.iter().map(|(_, r)| r.dtw).collect();
        let falling = dtws.len() == 4 && dtws.windows(2).all(|w| w[1] < w[0]);
        let (no_moe, no_sagm) = (e2e.study.row(ROW_SAGM), e2e.study.row(ROW_MOE));
        let beats = match (no_moe, no_sagm) {
            (Some(a), Some(b)) => full.dtw < a.dtw && full.dtw < b.dtw && full.bleu[3] > a.bleu[3] && full.bleu[3] > b.bleu[3],
            _ => false,
        };
        let fmt = |r: Option<&signer_core::evalkit::EvalReport>| {
            r.map(|r| format!("DTW {:.3} BLEU-4 {:.4}", r.dtw, r.bleu[3])).unwrap_or_else(|| "missing".into())
        };
        outcome(
            falling && beats,
            format!(
                "snapshot DTW {dtws:.3?}; full DTW {:.3} BLEU-4 {:.4}; no-MoE {}; no-SAGM {}",
                full.dtw,
                full.bleu[3],
                fmt(no_moe),
                fmt(no_sagm)
            ),
        )
    });
    check(&mut passed, "7", "stability under noise", || {
        let n = &e2e.study.noise;
        outcome(
            n.max_ratio <= 0.5 && n.accuracy_after >= n.accuracy_before,
            format!(
                "jerk ratio max {:.4} pooled {:.4} over {}; accuracy {:.3} -> {:.3}",
                n.max_ratio, n.pooled_ratio, n.n, n.accuracy_before, n.accuracy_after
            ),
        )
    });
    check(&mut passed, "8", "determinism", determinism);

    let ok = passed.iter().filter(|p| **p).count();
    println!("acceptance: {ok}/{} criteria passed", passed.len());
    if ok == passed.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
