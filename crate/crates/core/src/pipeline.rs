//! Prompt to stabilised poses, evaluation, and the comparison studies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, EvalConfig, RunConfig, Selection};
use crate::corpus::{
    default_lexicon, gen_corpus, CorpusError, GlossExample, PosePriorDb, PoseSequence, TokenId, Vocabularies,
};
use crate::diffkit::{argmax, mean_pool, DiffError, Tensor};
use crate::evalkit::{back_translate, corpus_bleu, dtw, rouge_l, EvalError, EvalReport};
use crate::slp_moe::{blend, gate, retrieve, train_gate, GateParams, GateTraining, MoeError};
use crate::slul::{decode_greedy, encode, quarter_steps, train_slul, LossWeights, SlulError, SlulParams, SlulTraining};
use crate::stabilizer::{jerk_report, stabilize, HandAnchor, JerkReport, StabilizedResult, StabilizerConfig, StabilizerError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Slul(#[from] SlulError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Stabilizer(#[from] StabilizerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("example {index}: {source}")]
    Example {
        index: usize,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    /// True for divergence and other non-finite results.
    pub fn is_numerical(&self) -> bool {
        match self {
            PipelineError::Slul(SlulError::Diverged { .. }) | PipelineError::Moe(MoeError::Diverged { .. }) => true,
            PipelineError::Stabilizer(StabilizerError::NotPositiveDefinite(_)) => true,
            PipelineError::Example { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

fn at<T>(index: usize, r: Result<T, PipelineError>) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError::Example {
        index,
        source: Box::new(e),
    })
}

/// Vocabularies, prior database and the train/dev/test splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocabs: Vocabularies,
    pub db: PosePriorDb,
    pub train: Vec<GlossExample>,
    pub dev: Vec<GlossExample>,
    pub test: Vec<GlossExample>,
}

pub fn build_vocabs(cfg: &RunConfig) -> Result<Vocabularies, PipelineError> {
    Ok(Vocabularies::build(&default_lexicon(cfg.corpus.glosses), cfg.corpus.experts)?)
}

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset, PipelineError> {
    cfg.validate()?;
    let c = &cfg.corpus;
    let vocabs = build_vocabs(cfg)?;
    let db = PosePriorDb::generate(cfg.prior_seed(), &vocabs.gloss, c.experts, c.joints, c.frames_per_gloss)?;
    let mut all = gen_corpus(cfg.corpus_seed(), c.n_train + c.n_dev + c.n_test, &vocabs, &db)?;
    let test = all.split_off(c.n_train + c.n_dev);
    let dev = all.split_off(c.n_train);
    Ok(Dataset {
        vocabs,
        db,
        train: all,
        dev,
        test,
    })
}

/// Trained components for one pipeline variant. Without a gate, every expert
/// gets weight `1/K` and the poses are blended.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub slul: &'a SlulParams,
    pub gate: Option<&'a GateParams>,
    pub vocabs: &'a Vocabularies,
    pub db: &'a PosePriorDb,
}

#[derive(Clone, Debug)]
pub struct PromptOutput {
    pub gloss: Vec<TokenId>,
    pub gates: Vec<f64>,
    pub chosen: usize,
    /// Pose sequence before stabilisation.
    pub raw: PoseSequence,
    pub stabilized: StabilizedResult,
    pub jerk: JerkReport,
}

/// Splits an optional leading language tag off a prompt. Without a tag the
/// first language is used and `tagged` is false.
pub fn parse_prompt(vocabs: &Vocabularies, experts: usize, text: &str) -> Result<(TokenId, Vec<TokenId>, bool), PipelineError> {
    let mut words = text.split_whitespace().peekable();
    let tag = words.peek().and_then(|w| {
        let id = vocabs.source.id(w)?;
        vocabs.expert_of_lang(id, experts).map(|_| id)
    });
    if tag.is_some() {
        words.next();
    }
    let rest: Vec<&str> = words.collect();
    let prompt = vocabs.source.tokenize(&rest.join(" "));
    if prompt.is_empty() {
        return Err(SlulError::EmptyPrompt.into());
    }
    let lang = match tag {
        Some(t) => t,
        None => vocabs
            .lang_id(0)
            .ok_or_else(|| CorpusError::InvalidParameter("no language tags".into()))?,
    };
    Ok((lang, prompt, tag.is_some()))
}

/// Encode, decode greedily, gate, select or blend, stabilise.
pub fn run_tokens(
    m: &Models<'_>,
    lang: TokenId,
    prompt: &[TokenId],
    eval: &EvalConfig,
    stab: &StabilizerConfig,
) -> Result<PromptOutput, PipelineError> {
    let h = encode(m.slul, lang, prompt)?;
    let gloss = decode_greedy(m.slul, &h, eval.max_decode_len)?;
    let gates = match m.gate {
        Some(p) => gate(&mean_pool(&h)?, p)?,
        None => vec![1.0 / m.db.k() as f64; m.db.k()],
    };
    let chosen = argmax(&gates);
    let raw = if gloss.is_empty() {
        PoseSequence::constant(m.db.canonical_len(), &m.db.neutral_frame(), m.db.hand_idx().to_vec())?
    } else if m.gate.is_some() && eval.selection == Selection::Hard {
        retrieve(&gloss, chosen, m.db, &m.vocabs.gloss)?
    } else {
        blend(&gloss, &gates, m.db, &m.vocabs.gloss)?
    };
    // At inference the reference hands are those of the selected motion: the
    // chosen expert under hard selection, the blended tracks otherwise.
    let stabilized = stabilize(&raw, None, stab)?;
    let jerk = jerk_report(&raw, &stabilized.poses)?;
    Ok(PromptOutput {
        gloss,
        gates,
        chosen,
        raw,
        stabilized,
        jerk,
    })
}

#[derive(Default)]
struct Accumulator {
    pairs: Vec<(Vec<TokenId>, Vec<Vec<TokenId>>)>,
    rouge: f64,
    dtw: f64,
    exact: usize,
    gate_hits: usize,
}

impl Accumulator {
    fn push(
        &mut self,
        db: &PosePriorDb,
        vocabs: &Vocabularies,
        ex: &GlossExample,
        pose: &PoseSequence,
        eval: &EvalConfig,
    ) -> Result<(), PipelineError> {
        let back = back_translate(pose, db, &vocabs.gloss, db.canonical_len())?;
        let reference = retrieve(&ex.gloss, ex.expert_index, db, &vocabs.gloss)?;
        self.dtw += dtw(pose, &reference)?;
        self.rouge += rouge_l(&back, &ex.gloss, eval.rouge_beta);
        self.pairs.push((back, vec![ex.gloss.clone()]));
        Ok(())
    }

    fn finish(self, eval: &EvalConfig) -> EvalReport {
        let n = self.pairs.len();
        let d = n.max(1) as f64;
        EvalReport {
            bleu: corpus_bleu(&self.pairs, eval.smoothing),
            rouge_l: self.rouge / d,
            dtw: self.dtw / d,
            n,
            gloss_exact: self.exact as f64 / d,
            gate_accuracy: self.gate_hits as f64 / d,
        }
    }
}

/// Runs every example through the pipeline, back-translates the stabilised
/// poses and scores them against the reference glosses. DTW is measured
/// against the reference expert's poses for the reference gloss.
pub fn evaluate(
    m: &Models<'_>,
    test: &[GlossExample],
    eval: &EvalConfig,
    stab: &StabilizerConfig,
) -> Result<EvalReport, PipelineError> {
    let mut acc = Accumulator::default();
    for (i, ex) in test.iter().enumerate() {
        at(i, (|| {
            let out = run_tokens(m, ex.lang, &ex.prompt, eval, stab)?;
            acc.exact += usize::from(out.gloss == ex.gloss);
            acc.gate_hits += usize::from(out.chosen == ex.expert_index);
            acc.push(m.db, m.vocabs, ex, &out.stabilized.poses, eval)
        })())?;
    }
    Ok(acc.finish(eval))
}

/// Upper-bound run that feeds the reference gloss and expert straight into
/// selection and stabilisation.
pub fn evaluate_oracle(
    data: &Dataset,
    test: &[GlossExample],
    eval: &EvalConfig,
    stab: &StabilizerConfig,
) -> Result<EvalReport, PipelineError> {
    let mut acc = Accumulator::default();
    for (i, ex) in test.iter().enumerate() {
        at(i, (|| {
            let pose = retrieve(&ex.gloss, ex.expert_index, &data.db, &data.vocabs.gloss)?;
            let anchor = (stab.hand_anchor == HandAnchor::GroundTruth).then(|| pose.hand_track());
            let out = stabilize(&pose, anchor.as_deref(), stab)?;
            acc.exact += 1;
            acc.gate_hits += 1;
            acc.push(&data.db, &data.vocabs, ex, &out.poses, eval)
        })())?;
    }
    Ok(acc.finish(eval))
}

/// Weights of the ablation trained without the masked-gloss terms.
pub fn without_sagm(w: &LossWeights) -> LossWeights {
    LossWeights {
        lambda_sagm: 0.0,
        lambda_kl: 0.0,
        ..w.clone()
    }
}

pub fn train_slul_stage(
    cfg: &RunConfig,
    data: &Dataset,
    weights: &LossWeights,
    snapshots: bool,
) -> Result<SlulTraining, PipelineError> {
    let cfg = cfg.resolved();
    let init = SlulParams::init(&cfg.model, data.vocabs.source.len(), data.vocabs.gloss.len())?;
    let at = if snapshots { quarter_steps(cfg.slul_opt.steps) } else { Vec::new() };
    Ok(train_slul(&data.train, init, weights, &cfg.slul_opt, &at)?)
}

/// Gate training pairs `(Pool(H), y)` from a frozen encoder.
pub fn gate_data(slul: &SlulParams, examples: &[GlossExample]) -> Result<Vec<(Vec<f64>, usize)>, PipelineError> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            at(i, (|| {
                let h: Tensor = encode(slul, ex.lang, &ex.prompt)?;
                Ok((mean_pool(&h)?, ex.expert_index))
            })())
        })
        .collect()
}

/// Gate over `slul`'s encoder, trained for `steps` (the configured count when `None`).
pub fn train_gate_stage(
    cfg: &RunConfig,
    data: &Dataset,
    slul: &SlulParams,
    steps: Option<usize>,
) -> Result<GateTraining, PipelineError> {
    let cfg = cfg.resolved();
    let pairs = gate_data(slul, &data.train)?;
    let mut opt = cfg.gate_opt.clone();
    if let Some(s) = steps {
        opt.steps = s;
    }
    let init = GateParams::zeros(cfg.model.d_model, cfg.corpus.experts);
    Ok(train_gate(&pairs, init, &cfg.moe, &opt)?)
}

/// Everything the comparison studies need.
#[derive(Clone, Debug)]
pub struct TrainedSet {
    pub slul: SlulParams,
    pub gate: GateParams,
    pub no_sagm: Option<(SlulParams, GateParams)>,
    /// `(slul steps, encoder, gate)` at each quarter of training.
    pub snapshots: Vec<(usize, SlulParams, GateParams)>,
}

/// Gate steps matching a SLUL snapshot taken after `done` of `total` steps.
pub fn snapshot_gate_steps(cfg: &RunConfig, done: usize, total: usize) -> usize {
    if total == 0 {
        return cfg.gate_opt.steps;
    }
    cfg.gate_opt.steps * done / total
}

pub fn train_all(cfg: &RunConfig, data: &Dataset) -> Result<TrainedSet, PipelineError> {
    let full = train_slul_stage(cfg, data, &cfg.loss, true)?;
    let gate = train_gate_stage(cfg, data, &full.params, None)?.params;
    let total = cfg.slul_opt.steps;
    let snapshots = full
        .snapshots
        .iter()
        .map(|(s, p)| {
            let g = train_gate_stage(cfg, data, p, Some(snapshot_gate_steps(cfg, *s, total)))?.params;
            Ok((*s, p.clone(), g))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let no_sagm = if cfg.eval.ablations {
        let s = train_slul_stage(cfg, data, &without_sagm(&cfg.loss), false)?.params;
        let g = train_gate_stage(cfg, data, &s, None)?.params;
        Some((s, g))
    } else {
        None
    };
    Ok(TrainedSet {
        slul: full.params,
        gate,
        no_sagm,
        snapshots,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub n: usize,
    /// `Σ jerk_after / Σ jerk_before`.
    pub pooled_ratio: f64,
    /// Largest per-example ratio.
    pub max_ratio: f64,
    /// Back-translation token accuracy of the noisy and stabilised poses.
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

fn token_accuracy(back: &[TokenId], gloss: &[TokenId]) -> usize {
    back.iter().zip(gloss).filter(|(a, b)| a == b).count()
}

/// Adds Gaussian noise with `σ = fraction × (max − min)` of each reference
/// sequence, then stabilises against that reference's hands.
pub fn noise_study(
    data: &Dataset,
    test: &[GlossExample],
    fraction: f64,
    stab: &StabilizerConfig,
    seed: u64,
) -> Result<NoiseReport, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut before, mut after, mut max_ratio) = (0.0, 0.0, 0.0f64);
    let (mut hits_before, mut hits_after, mut tokens) = (0, 0, 0);
    for (i, ex) in test.iter().enumerate() {
        at(i, (|| {
            let clean = retrieve(&ex.gloss, ex.expert_index, &data.db, &data.vocabs.gloss)?;
            let (lo, hi) = clean.value_range();
            let sigma = fraction * (hi - lo);
            let mut noisy = clean.clone();
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("positive sigma");
                for c in noisy.coords_mut() {
                    *c += normal.sample(&mut rng);
                }
            }
            let anchor = (stab.hand_anchor == HandAnchor::GroundTruth).then(|| clean.hand_track());
            let out = stabilize(&noisy, anchor.as_deref(), stab)?;
            let j = jerk_report(&noisy, &out.poses)?;
            before += j.jerk_before;
            after += j.jerk_after;
            max_ratio = max_ratio.max(j.ratio);
            let seg = data.db.canonical_len();
            hits_before += token_accuracy(&back_translate(&noisy, &data.db, &data.vocabs.gloss, seg)?, &ex.gloss);
            hits_after += token_accuracy(&back_translate(&out.poses, &data.db, &data.vocabs.gloss, seg)?, &ex.gloss);
            tokens += ex.gloss.len();
            Ok(())
        })())?;
    }
    let t = tokens.max(1) as f64;
    Ok(NoiseReport {
        n: test.len(),
        pooled_ratio: if before > 0.0 { after / before } else { 1.0 },
        max_ratio,
        accuracy_before: hits_before as f64 / t,
        accuracy_after: hits_after as f64 / t,
    })
}

pub const ROW_BASE: &str = "SLUL";
pub const ROW_SAGM: &str = "SLUL + SAGM Loss";
pub const ROW_MOE: &str = "SLUL + SLP MoE";
pub const ROW_FULL: &str = "SLUL + SAGM Loss + SLP MoE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    /// Ablation rows, full pipeline last.
    pub rows: Vec<(String, EvalReport)>,
    /// `(slul steps, report)` for each training-period snapshot.
    pub trend: Vec<(usize, EvalReport)>,
    pub oracle: EvalReport,
    pub noise: NoiseReport,
}

impl StudyReport {
    pub fn row(&self, name: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}

pub fn run_study(cfg: &RunConfig, data: &Dataset, set: &TrainedSet) -> Result<StudyReport, PipelineError> {
    let (eval, stab) = (&cfg.eval, &cfg.stabilizer);
    let models = |slul, gate| Models {
        slul,
        gate,
        vocabs: &data.vocabs,
        db: &data.db,
    };
    let mut rows = Vec::new();
    if let Some((s, g)) = &set.no_sagm {
        rows.push((ROW_BASE.to_string(), evaluate(&models(s, None), &data.test, eval, stab)?));
        rows.push((ROW_SAGM.to_string(), evaluate(&models(&set.slul, None), &data.test, eval, stab)?));
        rows.push((ROW_MOE.to_string(), evaluate(&models(s, Some(g)), &data.test, eval, stab)?));
    }
    rows.push((ROW_FULL.to_string(), evaluate(&models(&set.slul, Some(&set.gate)), &data.test, eval, stab)?));
    let trend_eval = EvalConfig {
        selection: eval.trend_selection,
        ..eval.clone()
    };
    let trend = set
        .snapshots
        .iter()
        .map(|(steps, s, g)| Ok((*steps, evaluate(&models(s, Some(g)), &data.test, &trend_eval, stab)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let oracle = evaluate_oracle(data, &data.test, eval, stab)?;
    let noise = noise_study(data, &data.test, eval.noise_fraction, stab, cfg.noise_seed())?;
    Ok(StudyReport {
        rows,
        trend,
        oracle,
        noise,
    })
}
