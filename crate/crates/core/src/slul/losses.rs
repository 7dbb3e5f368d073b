use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Bound, SlulParams};
use super::SlulError;
use crate::corpus::{GlossExample, TokenId, BOS, EOS, MASK};
use crate::diffkit::{argmax, log_softmax_rows, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Gloss masking rate.
    pub rho: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub lambda_sagm: f64,
    pub lambda_kl: f64,
    pub lambda_con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rho: 0.4,
            tau: 0.07,
            lambda_sagm: 1.0,
            lambda_kl: 0.5,
            lambda_con: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), SlulError> {
        let lambdas = [self.lambda_sagm, self.lambda_kl, self.lambda_con];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(SlulError::InvalidArgument(format!("loss weights must be finite and >= 0: {lambdas:?}")));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(SlulError::InvalidArgument(format!("rho {} outside [0, 1]", self.rho)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(SlulError::InvalidArgument(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlulLossParts {
    pub l_slul: f64,
    pub l_sagm: f64,
    pub l_kl: f64,
    pub l_con: f64,
    pub combined: f64,
    /// `mask_flags[i][t]` is set when gloss position `t` of example `i` was masked.
    pub mask_flags: Vec<Vec<bool>>,
}

fn target_ids(gloss: &[TokenId]) -> Vec<usize> {
    gloss.iter().map(|&g| g as usize).chain([EOS as usize]).collect()
}

fn teacher_input(gloss: &[TokenId]) -> Vec<TokenId> {
    std::iter::once(BOS).chain(gloss.iter().copied()).collect()
}

pub fn encode(params: &SlulParams, lang: TokenId, prompt: &[TokenId]) -> Result<Tensor, SlulError> {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let h = b.encode(&mut g, lang, prompt)?;
    Ok(g.value(h).clone())
}

/// Logits for `g + [EOS]` under BOS-shifted teacher forcing, `(T+1) × V`.
pub fn teacher_forced_logits(params: &SlulParams, gloss: &[TokenId], h: &Tensor) -> Result<Tensor, SlulError> {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let hv = g.constant(h.clone());
    let s = b.decode_states(&mut g, hv, &teacher_input(gloss), true)?;
    let z = b.logits(&mut g, s)?;
    Ok(g.value(z).clone())
}

/// Logits of the whole-sequence pass over `input`, `T × V`; row `t` predicts `g_t`.
pub fn reconstruction_logits(params: &SlulParams, input: &[TokenId], h: &Tensor) -> Result<Tensor, SlulError> {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let hv = g.constant(h.clone());
    let s = b.decode_states(&mut g, hv, input, false)?;
    let z = b.logits(&mut g, s)?;
    Ok(g.value(z).clone())
}

/// `−Σ_t log p(g_t | g_<t, H)` over the gloss plus the closing EOS.
pub fn nll_loss(params: &SlulParams, gloss: &[TokenId], h: &Tensor) -> Result<f64, SlulError> {
    if gloss.is_empty() {
        return Err(SlulError::EmptyGloss);
    }
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let hv = g.constant(h.clone());
    let s = b.decode_states(&mut g, hv, &teacher_input(gloss), true)?;
    let z = b.logits(&mut g, s)?;
    let targets = target_ids(gloss);
    let loss = g.cross_entropy(z, &targets, &vec![1.0; targets.len()])?;
    Ok(g.value(loss).item())
}

/// Masks each position independently with probability `rho` (`u_t < rho`).
pub fn sagm_mask(gloss: &[TokenId], rho: f64, seed: u64) -> (Vec<TokenId>, Vec<bool>) {
    sagm_mask_with(gloss, rho, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sagm_mask_with<R: Rng>(gloss: &[TokenId], rho: f64, rng: &mut R) -> (Vec<TokenId>, Vec<bool>) {
    let flags: Vec<bool> = gloss.iter().map(|_| rng.gen::<f64>() < rho).collect();
    (apply_mask(gloss, &flags), flags)
}

pub fn apply_mask(gloss: &[TokenId], flags: &[bool]) -> Vec<TokenId> {
    gloss
        .iter()
        .zip(flags)
        .map(|(&t, &m)| if m { MASK } else { t })
        .collect()
}

fn check_mask(gloss: &[TokenId], masked: &[TokenId], flags: &[bool]) -> Result<(), SlulError> {
    if gloss.len() != masked.len() || gloss.len() != flags.len() {
        return Err(SlulError::InvalidArgument("gloss, masked gloss and flags differ in length".into()));
    }
    Ok(())
}

/// `−Σ_{t masked} log p(g_t | g̃, H)`.
pub fn sagm_loss(
    params: &SlulParams,
    gloss: &[TokenId],
    masked: &[TokenId],
    flags: &[bool],
    h: &Tensor,
) -> Result<f64, SlulError> {
    check_mask(gloss, masked, flags)?;
    if !flags.iter().any(|&m| m) {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let hv = g.constant(h.clone());
    let s = b.decode_states(&mut g, hv, masked, false)?;
    let z = b.logits(&mut g, s)?;
    let targets: Vec<usize> = gloss.iter().map(|&t| t as usize).collect();
    let w: Vec<f64> = flags.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let loss = g.cross_entropy(z, &targets, &w)?;
    Ok(g.value(loss).item())
}

/// Mean over masked positions of `KL(p(·|g̃,H) ‖ p(·|g,H))`.
pub fn kl_consistency(
    params: &SlulParams,
    gloss: &[TokenId],
    masked: &[TokenId],
    flags: &[bool],
    h: &Tensor,
) -> Result<f64, SlulError> {
    check_mask(gloss, masked, flags)?;
    let w = kl_row_weights(flags);
    if w.is_empty() {
        return Ok(0.0);
    }
    let target = log_softmax_rows(&reconstruction_logits(params, gloss, h)?);
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let hv = g.constant(h.clone());
    let s = b.decode_states(&mut g, hv, masked, false)?;
    let z = b.logits(&mut g, s)?;
    let loss = g.kl_to_target(z, target, &w)?;
    Ok(g.value(loss).item())
}

/// `1/m` on the `m` masked rows, `0` elsewhere; empty when nothing is masked.
fn kl_row_weights(flags: &[bool]) -> Vec<f64> {
    let m = flags.iter().filter(|&&f| f).count();
    if m == 0 {
        return Vec::new();
    }
    flags.iter().map(|&f| if f { 1.0 / m as f64 } else { 0.0 }).collect()
}

/// In-batch InfoNCE between pooled encoder states and pooled teacher-forced
/// decoder states. The positive pair is included in the denominator.
pub fn contrastive_loss(params: &SlulParams, batch: &[(Tensor, Vec<TokenId>)], tau: f64) -> Result<f64, SlulError> {
    if batch.is_empty() {
        return Err(SlulError::InvalidArgument("contrastive loss over an empty batch".into()));
    }
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let mut xs = Vec::with_capacity(batch.len());
    let mut gs = Vec::with_capacity(batch.len());
    for (h, gloss) in batch {
        let hv = g.constant(h.clone());
        xs.push(g.mean_rows(hv)?);
        let s = b.decode_states(&mut g, hv, &teacher_input(gloss), true)?;
        gs.push(g.mean_rows(s)?);
    }
    let x = g.stack_rows(&xs)?;
    let y = g.stack_rows(&gs)?;
    let loss = g.info_nce(x, y, tau)?;
    Ok(g.value(loss).item())
}

/// Masks and clean-branch KL targets for one minibatch. Targets are fixed log
/// probabilities, so the clean branch receives no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub flags: Vec<Vec<bool>>,
    pub kl_targets: Vec<Option<Tensor>>,
}

impl MaskPlan {
    pub fn draw<R: Rng>(
        params: &SlulParams,
        batch: &[GlossExample],
        rho: f64,
        rng: &mut R,
    ) -> Result<Self, SlulError> {
        let flags: Vec<Vec<bool>> = batch.iter().map(|ex| sagm_mask_with(&ex.gloss, rho, rng).1).collect();
        Self::with_flags(params, batch, flags)
    }

    pub fn with_flags(params: &SlulParams, batch: &[GlossExample], flags: Vec<Vec<bool>>) -> Result<Self, SlulError> {
        if flags.len() != batch.len() {
            return Err(SlulError::InvalidArgument("one flag row per example required".into()));
        }
        let mut kl_targets = Vec::with_capacity(batch.len());
        for (ex, f) in batch.iter().zip(&flags) {
            if f.len() != ex.gloss.len() {
                return Err(SlulError::InvalidArgument("flag row length differs from gloss".into()));
            }
            if f.iter().any(|&m| m) {
                let h = encode(params, ex.lang, &ex.prompt)?;
                kl_targets.push(Some(log_softmax_rows(&reconstruction_logits(params, &ex.gloss, &h)?)));
            } else {
                kl_targets.push(None);
            }
        }
        Ok(Self { flags, kl_targets })
    }
}

/// Loss nodes of [`combined_graph`].
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub l_slul: Var,
    pub l_sagm: Var,
    pub l_kl: Var,
    pub l_con: Var,
    pub combined: Var,
}

/// Builds the four-term objective for `batch` in `g`. Example terms are summed
/// over positions and averaged over the batch.
pub fn combined_graph(
    g: &mut Graph<'_>,
    b: &Bound,
    batch: &[GlossExample],
    plan: &MaskPlan,
    w: &LossWeights,
) -> Result<LossNodes, SlulError> {
    if batch.is_empty() {
        return Err(SlulError::InvalidArgument("empty batch".into()));
    }
    if plan.flags.len() != batch.len() || plan.kl_targets.len() != batch.len() {
        return Err(SlulError::InvalidArgument("mask plan does not match batch".into()));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let (mut nll, mut sagm, mut kl) = (Vec::new(), Vec::new(), Vec::new());
    let (mut xs, mut gs) = (Vec::new(), Vec::new());
    for (i, ex) in batch.iter().enumerate() {
        if ex.gloss.is_empty() {
            return Err(SlulError::EmptyGloss);
        }
        let h = b.encode(g, ex.lang, &ex.prompt)?;
        let s = b.decode_states(g, h, &teacher_input(&ex.gloss), true)?;
        let z = b.logits(g, s)?;
        let targets = target_ids(&ex.gloss);
        nll.push((inv_b, g.cross_entropy(z, &targets, &vec![1.0; targets.len()])?));
        xs.push(g.mean_rows(h)?);
        gs.push(g.mean_rows(s)?);

        let flags = &plan.flags[i];
        if let Some(target) = &plan.kl_targets[i] {
            let masked = apply_mask(&ex.gloss, flags);
            let sm = b.decode_states(g, h, &masked, false)?;
            let zm = b.logits(g, sm)?;
            let gold: Vec<usize> = ex.gloss.iter().map(|&t| t as usize).collect();
            let mw: Vec<f64> = flags.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            sagm.push((inv_b, g.cross_entropy(zm, &gold, &mw)?));
            kl.push((inv_b, g.kl_to_target(zm, target.clone(), &kl_row_weights(flags))?));
        }
    }
    let l_slul = g.weighted_sum(&nll)?;
    let l_sagm = g.weighted_sum(&sagm)?;
    let l_kl = g.weighted_sum(&kl)?;
    let x = g.stack_rows(&xs)?;
    let y = g.stack_rows(&gs)?;
    let l_con = g.info_nce(x, y, w.tau)?;
    let combined = g.weighted_sum(&[
        (1.0, l_slul),
        (w.lambda_sagm, l_sagm),
        (w.lambda_kl, l_kl),
        (w.lambda_con, l_con),
    ])?;
    Ok(LossNodes {
        l_slul,
        l_sagm,
        l_kl,
        l_con,
        combined,
    })
}

pub(crate) fn read_parts(g: &Graph<'_>, n: &LossNodes, flags: Vec<Vec<bool>>) -> SlulLossParts {
    SlulLossParts {
        l_slul: g.value(n.l_slul).item(),
        l_sagm: g.value(n.l_sagm).item(),
        l_kl: g.value(n.l_kl).item(),
        l_con: g.value(n.l_con).item(),
        combined: g.value(n.combined).item(),
        mask_flags: flags,
    }
}

/// Evaluates the objective with masks drawn from `rng`.
pub fn combined_loss<R: Rng>(
    params: &SlulParams,
    batch: &[GlossExample],
    w: &LossWeights,
    rng: &mut R,
) -> Result<SlulLossParts, SlulError> {
    w.validate()?;
    let plan = MaskPlan::draw(params, batch, w.rho, rng)?;
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let nodes = combined_graph(&mut g, &b, batch, &plan, w)?;
    Ok(read_parts(&g, &nodes, plan.flags))
}

/// Argmax decoding from BOS until EOS or `max_len` tokens. Reads only `h`
/// and the weights.
pub fn decode_greedy(params: &SlulParams, h: &Tensor, max_len: usize) -> Result<Vec<TokenId>, SlulError> {
    if max_len == 0 {
        return Err(SlulError::InvalidArgument("max_len must be >= 1".into()));
    }
    let mut out: Vec<TokenId> = Vec::new();
    while out.len() < max_len {
        let z = teacher_forced_logits(params, &out, h)?;
        let next = argmax(z.row(z.rows() - 1)) as TokenId;
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(out)
}
