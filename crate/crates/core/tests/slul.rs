use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use signer_core::corpus::{GlossExample, TokenId, BOS, EOS, MASK, PAD};
use signer_core::diffkit::{info_nce, kl_divergence, OptConfig, Tensor};
use signer_core::slul::*;

mod common;
use common::*;

fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        d_ff: 8,
        init_seed: seed,
    }
}

fn tiny(seed: u64, gloss_v: usize) -> SlulParams {
    SlulParams::init(&tiny_config(seed), SRC_V, gloss_v).unwrap()
}

/// Output projection zeroed: every non-blocked token gets logit 0.
fn uniform(gloss_v: usize) -> SlulParams {
    let mut p = tiny(1, gloss_v);
    p.get_mut("out.w").unwrap().data_mut().fill(0.0);
    p.get_mut("out.b").unwrap().data_mut().fill(0.0);
    p
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|z| (z - m).exp()).sum();
    row.iter().map(|z| z - m - s.ln()).collect()
}

#[test]
fn encode_prepends_the_language_tag() {
    let p = tiny(3, 9);
    let h = encode(&p, 5, &[4, 6, 7, 8, 9]).unwrap();
    assert_eq!(h.shape(), [6, 8]);
    assert_eq!(h, encode(&p, 5, &[4, 6, 7, 8, 9]).unwrap());
    assert!(matches!(encode(&p, 5, &[]), Err(SlulError::EmptyPrompt)));
}

#[test]
fn encode_is_order_sensitive() {
    let p = tiny(3, 9);
    assert_ne!(encode(&p, 5, &[4, 6, 7]).unwrap(), encode(&p, 5, &[6, 4, 7]).unwrap());
}

#[test]
fn uniform_logits_give_closed_form_losses() {
    // 4 reserved + 9 glosses; PAD, BOS and MASK are blocked, leaving 10 outcomes.
    let p = uniform(13);
    let h = encode(&p, 5, &[4, 6]).unwrap();
    let nll = nll_loss(&p, &[7], &h).unwrap();
    assert!((nll - 2.0 * 10f64.ln()).abs() < 1e-12, "{nll}");
    assert!((nll - 4.60517).abs() < 1e-5);
    let gloss = [7, 8, 9];
    let flags = [false, true, false];
    let masked = apply_mask(&gloss, &flags);
    let l = sagm_loss(&p, &gloss, &masked, &flags, &h).unwrap();
    assert!((l - 10f64.ln()).abs() < 1e-12);
    let kl = kl_consistency(&p, &gloss, &masked, &flags, &h).unwrap();
    assert!(kl.abs() < 1e-12);
}

#[test]
fn nll_matches_position_by_position_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = tiny(9, 11);
    for _ in 0..10 {
        let ex = random_example(&mut rng, 11);
        let h = encode(&p, ex.lang, &ex.prompt).unwrap();
        let z = teacher_forced_logits(&p, &ex.gloss, &h).unwrap();
        assert_eq!(z.rows(), ex.gloss.len() + 1);
        let targets: Vec<TokenId> = ex.gloss.iter().copied().chain([EOS]).collect();
        let want: f64 = targets
            .iter()
            .enumerate()
            .map(|(t, &y)| -log_softmax_row(z.row(t))[y as usize])
            .sum();
        let got = nll_loss(&p, &ex.gloss, &h).unwrap();
        assert!((got - want).abs() < 1e-10 * want.max(1.0));
    }
    let h = encode(&p, 4, &[5]).unwrap();
    assert!(matches!(nll_loss(&p, &[], &h), Err(SlulError::EmptyGloss)));
}

#[test]
fn blocked_tokens_have_no_mass() {
    let p = tiny(9, 11);
    let h = encode(&p, 4, &[5, 6]).unwrap();
    let z = teacher_forced_logits(&p, &[4, 5], &h).unwrap();
    for t in 0..z.rows() {
        let lp = log_softmax_row(z.row(t));
        for id in [PAD, BOS, MASK] {
            assert!(lp[id as usize].exp() == 0.0);
        }
    }
}

#[test]
fn sagm_and_kl_match_oracles_from_raw_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = tiny(2, 10);
    for _ in 0..10 {
        let ex = random_example(&mut rng, 10);
        let h = encode(&p, ex.lang, &ex.prompt).unwrap();
        let (masked, flags) = sagm_mask(&ex.gloss, 0.5, rng.gen());
        let zm = reconstruction_logits(&p, &masked, &h).unwrap();
        let zc = reconstruction_logits(&p, &ex.gloss, &h).unwrap();
        let mut want_sagm = 0.0;
        let mut want_kl = 0.0;
        let m = flags.iter().filter(|&&f| f).count();
        for t in (0..ex.gloss.len()).filter(|&t| flags[t]) {
            let lm = log_softmax_row(zm.row(t));
            let lc = log_softmax_row(zc.row(t));
            want_sagm -= lm[ex.gloss[t] as usize];
            let pm: Vec<f64> = lm.iter().map(|v| v.exp()).collect();
            let pc: Vec<f64> = lc.iter().map(|v| v.exp()).collect();
            want_kl += kl_divergence(&pm, &pc) / m as f64;
        }
        let got_sagm = sagm_loss(&p, &ex.gloss, &masked, &flags, &h).unwrap();
        let got_kl = kl_consistency(&p, &ex.gloss, &masked, &flags, &h).unwrap();
        assert!((got_sagm - want_sagm).abs() < 1e-10, "{got_sagm} vs {want_sagm}");
        assert!((got_kl - want_kl).abs() < 1e-10, "{got_kl} vs {want_kl}");
        assert!(got_kl >= 0.0);
    }
}

#[test]
fn kl_two_point_closed_form() {
    let kl = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]);
    let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert!((kl - want).abs() < 1e-15);
    assert!((kl - 0.143841).abs() < 1e-6);
}

#[test]
fn kl_is_nonnegative_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for s in 0..20 {
        let p = tiny(s, 10);
        let ex = random_example(&mut rng, 10);
        let h = encode(&p, ex.lang, &ex.prompt).unwrap();
        let (masked, flags) = sagm_mask(&ex.gloss, 0.7, s);
        assert!(kl_consistency(&p, &ex.gloss, &masked, &flags, &h).unwrap() >= 0.0);
    }
}

#[test]
fn degenerate_mask_rates() {
    let g: Vec<TokenId> = (4..12).collect();
    let (m0, f0) = sagm_mask(&g, 0.0, 1);
    assert_eq!(m0, g);
    assert!(f0.iter().all(|&f| !f));
    let (m1, f1) = sagm_mask(&g, 1.0, 1);
    assert!(m1.iter().all(|&t| t == MASK));
    assert!(f1.iter().all(|&f| f));
    assert_eq!(sagm_mask(&g, 0.3, 9), sagm_mask(&g, 0.3, 9));
}

#[test]
fn mask_frequency_within_five_sigma() {
    let rho = 0.15;
    let g = vec![4 as TokenId; 100];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut hits = 0usize;
    let n = 100_000usize;
    for _ in 0..n / g.len() {
        hits += sagm_mask_with(&g, rho, &mut rng).1.iter().filter(|&&f| f).count();
    }
    let sigma = (n as f64 * rho * (1.0 - rho)).sqrt();
    assert!((hits as f64 - n as f64 * rho).abs() < 5.0 * sigma, "{hits}");
}

#[test]
fn unmasked_positions_contribute_nothing() {
    let p = tiny(2, 10);
    let h = encode(&p, 4, &[5, 6]).unwrap();
    let g = [4, 5, 6];
    let none = [false; 3];
    assert_eq!(sagm_loss(&p, &g, &g, &none, &h).unwrap(), 0.0);
    assert_eq!(kl_consistency(&p, &g, &g, &none, &h).unwrap(), 0.0);
}

#[test]
fn contrastive_identities() {
    let p = tiny(5, 10);
    let h = encode(&p, 4, &[5, 6]).unwrap();
    assert!(contrastive_loss(&p, &[(h.clone(), vec![4, 5])], 0.07).unwrap().abs() < 1e-12);
    assert!(contrastive_loss(&p, &[(h, vec![4])], 0.0).is_err());

    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let g = Tensor::from_rows(&[vec![0.3, 0.0], vec![0.3, 0.0]]).unwrap();
    assert!((info_nce(&x, &g, 0.07).unwrap() - 2f64.ln()).abs() < 1e-12);

    // Every g row has 1 in its last coordinate, so moving x_0 along it raises
    // all similarities of row 0 by the same constant.
    let x = Tensor::from_rows(&[vec![0.4, -0.2, 0.1], vec![-0.3, 0.5, 0.2]]).unwrap();
    let g = Tensor::from_rows(&[vec![0.7, 0.1, 1.0], vec![-0.2, 0.6, 1.0]]).unwrap();
    let mut shifted = x.clone();
    shifted.data_mut()[2] += 3.0;
    let a = info_nce(&x, &g, 0.5).unwrap();
    let b = info_nce(&shifted, &g, 0.5).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn combined_is_the_exact_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let p = tiny(4, 10);
    let batch: Vec<GlossExample> = (0..4).map(|_| random_example(&mut rng, 10)).collect();
    let w = LossWeights {
        rho: 0.5,
        ..LossWeights::default()
    };
    let parts = combined_loss(&p, &batch, &w, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let sum = parts.l_slul + w.lambda_sagm * parts.l_sagm + w.lambda_kl * parts.l_kl + w.lambda_con * parts.l_con;
    assert!((parts.combined - sum).abs() < 1e-12);
    for v in [parts.l_slul, parts.l_sagm, parts.l_kl, parts.l_con] {
        assert!(v >= 0.0);
    }
    assert_eq!(parts.mask_flags.len(), batch.len());

    let zero = LossWeights {
        lambda_sagm: 0.0,
        lambda_kl: 0.0,
        lambda_con: 0.0,
        ..w.clone()
    };
    let z = combined_loss(&p, &batch, &zero, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(z.combined, z.l_slul);

    let rho0 = LossWeights { rho: 0.0, ..w };
    let r = combined_loss(&p, &batch, &rho0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!((r.l_sagm, r.l_kl), (0.0, 0.0));
}

#[test]
fn single_example_batch_has_zero_contrastive_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = tiny(4, 10);
    let batch = vec![random_example(&mut rng, 10)];
    let parts = combined_loss(&p, &batch, &LossWeights::default(), &mut rng).unwrap();
    assert!(parts.l_con.abs() < 1e-12);
}

#[test]
fn rejects_bad_weights_and_empty_batches() {
    let p = tiny(4, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = vec![random_example(&mut rng, 10)];
    for w in [
        LossWeights { lambda_kl: -1.0, ..LossWeights::default() },
        LossWeights { rho: 1.5, ..LossWeights::default() },
        LossWeights { tau: 0.0, ..LossWeights::default() },
    ] {
        assert!(combined_loss(&p, &batch, &w, &mut rng).is_err());
    }
    assert!(combined_loss(&p, &[], &LossWeights::default(), &mut rng).is_err());
}

#[test]
fn combined_gradients_match_finite_differences() {
    for seed in 0..20 {
        let err = slul_gradcheck(seed);
        assert!(err <= 1e-4, "instance {seed}: max rel err {err}");
    }
}

#[test]
fn eos_first_model_decodes_empty() {
    let mut p = tiny(3, 9);
    p.get_mut("out.w").unwrap().data_mut().fill(0.0);
    let b = p.get_mut("out.b").unwrap();
    b.data_mut().fill(0.0);
    b.data_mut()[EOS as usize] = 5.0;
    let h = encode(&p, 4, &[5, 6]).unwrap();
    assert!(decode_greedy(&p, &h, 8).unwrap().is_empty());
    assert!(decode_greedy(&p, &h, 0).is_err());
}

#[test]
fn decode_reads_only_the_encoding() {
    let p = tiny(3, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ex = random_example(&mut rng, 9);
    let blank = GlossExample {
        gloss: vec![],
        ..ex.clone()
    };
    let a = decode_greedy(&p, &encode(&p, ex.lang, &ex.prompt).unwrap(), 6).unwrap();
    let b = decode_greedy(&p, &encode(&p, blank.lang, &blank.prompt).unwrap(), 6).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 6);
}

fn toy_corpus(n: usize, seed: u64) -> Vec<GlossExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let gloss: Vec<TokenId> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(4..10)).collect();
            // Prompt words mirror the gloss ids in the source table.
            let prompt = gloss.iter().map(|g| g + 2).collect();
            GlossExample {
                lang: 4,
                prompt,
                gloss,
                expert_index: 0,
                pose_ref: String::new(),
            }
        })
        .collect()
}

#[test]
fn zero_steps_leave_parameters_unchanged() {
    let p = tiny(6, 10);
    let opt = OptConfig {
        steps: 0,
        ..OptConfig::default()
    };
    let out = train_slul(&toy_corpus(10, 1), p.clone(), &LossWeights::default(), &opt, &[0]).unwrap();
    assert_eq!(out.params, p);
    assert!(out.log.is_empty());
    assert_eq!(out.snapshots, vec![(0, p)]);
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let data = toy_corpus(200, 2);
    let p = tiny(6, 10);
    let opt = OptConfig {
        steps: 200,
        batch_size: 8,
        ..OptConfig::default()
    };
    let w = LossWeights::default();
    let a = train_slul(&data, p.clone(), &w, &opt, &quarter_steps(200)).unwrap();
    let mean = |r: &[LossRecord]| r.iter().map(|x| x.l_slul).sum::<f64>() / r.len() as f64;
    assert!(mean(&a.log[190..]) < mean(&a.log[..10]));
    let b = train_slul(&data, p.clone(), &w, &opt, &[]).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.params, b.params);
    assert_eq!(a.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![50, 100, 150, 200]);
    assert_eq!(a.snapshots[3].1, a.params);
    // PAD never appears in any input, so its embedding rows never move.
    for name in ["src_emb", "gloss_emb"] {
        assert_eq!(a.params.get(name).unwrap().row(0), p.get(name).unwrap().row(0));
    }
}

#[test]
fn loss_log_serialises_one_record_per_line() {
    let data = toy_corpus(20, 2);
    let opt = OptConfig {
        steps: 3,
        batch_size: 4,
        ..OptConfig::default()
    };
    let out = train_slul(&data, tiny(6, 10), &LossWeights::default(), &opt, &[]).unwrap();
    let text = log_to_jsonl(&out.log);
    let back: Vec<LossRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, out.log);
}

#[test]
fn divergence_reports_the_step() {
    let data = toy_corpus(20, 2);
    let opt = OptConfig {
        steps: 5,
        learning_rate: 1e300,
        clip_norm: 0.0,
        warmup: 0,
        ..OptConfig::default()
    };
    match train_slul(&data, tiny(6, 10), &LossWeights::default(), &opt, &[]) {
        Err(SlulError::Diverged { step }) => assert!(step < 5),
        other => panic!("expected divergence, got {:?}", other.map(|t| t.log.len())),
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let p = tiny(11, 10);
    let text = p.to_checkpoint().to_text();
    let back = SlulParams::from_checkpoint(&signer_core::checkpoint::Checkpoint::from_text(&text).unwrap()).unwrap();
    assert_eq!(back, p);
}
