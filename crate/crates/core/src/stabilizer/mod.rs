//! Quadratic keypoint refinement: jerk, velocity, hand-anchor and data-fidelity
//! penalties, solved exactly per coordinate.

mod band;

pub use band::{solve_pentadiagonal, Pentadiagonal};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, PoseSequence};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StabilizerError {
    #[error("sequence has {frames} frames, at least {needed} required")]
    TooShort { frames: usize, needed: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("system is not positive definite at row {0}")]
    NotPositiveDefinite(usize),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandAnchor {
    /// Supplied reference hand keypoints.
    GroundTruth,
    /// The hands of the sequence being refined.
    InputPose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilizerConfig {
    pub lambda_smooth: f64,
    pub lambda_hand: f64,
    pub lambda_vel: f64,
    pub lambda_fid: f64,
    pub hand_anchor: HandAnchor,
}

impl Default for StabilizerConfig {
    fn default() -> Self {
        Self {
            lambda_smooth: 1.0,
            lambda_hand: 10.0,
            lambda_vel: 0.1,
            lambda_fid: 1.0,
            hand_anchor: HandAnchor::GroundTruth,
        }
    }
}

impl StabilizerConfig {
    pub fn validate(&self) -> Result<(), StabilizerError> {
        let all = [self.lambda_smooth, self.lambda_hand, self.lambda_vel, self.lambda_fid];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(StabilizerError::Config(format!("weights must be finite and >= 0: {all:?}")));
        }
        if self.lambda_fid <= 0.0 && self.lambda_hand <= 0.0 {
            return Err(StabilizerError::Config(
                "lambda_fid or lambda_hand must be positive; otherwise the objective is translation invariant".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_smooth: f64,
    pub l_hand: f64,
    pub l_vel: f64,
    pub l_fid: f64,
}

impl LossParts {
    pub fn objective(&self, cfg: &StabilizerConfig) -> f64 {
        cfg.lambda_fid * self.l_fid
            + cfg.lambda_smooth * self.l_smooth
            + cfg.lambda_vel * self.l_vel
            + cfg.lambda_hand * self.l_hand
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub method: String,
    /// Number of banded factorisations (one per coordinate track).
    pub iterations: usize,
    /// `‖∇F‖_∞` at the returned solution.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilizedResult {
    pub poses: PoseSequence,
    pub parts: LossParts,
    pub report: SolverReport,
}

fn require_frames(p: &PoseSequence, needed: usize) -> Result<(), StabilizerError> {
    if p.frames() < needed {
        return Err(StabilizerError::TooShort { frames: p.frames(), needed });
    }
    Ok(())
}

/// `Σ_{t≥2} ‖P_t − 2P_{t−1} + P_{t−2}‖²`.
pub fn smooth_loss(p: &PoseSequence) -> Result<f64, StabilizerError> {
    require_frames(p, 3)?;
    let w = p.frame_width();
    let c = p.coords();
    let mut s = 0.0;
    for t in 2..p.frames() {
        for i in 0..w {
            let j = c[t * w + i] - 2.0 * c[(t - 1) * w + i] + c[(t - 2) * w + i];
            s += j * j;
        }
    }
    Ok(s)
}

/// `Σ_{t≥1} ‖P_t − P_{t−1}‖²`.
pub fn vel_loss(p: &PoseSequence) -> Result<f64, StabilizerError> {
    require_frames(p, 2)?;
    let w = p.frame_width();
    let c = p.coords();
    let s = (1..p.frames())
        .flat_map(|t| (0..w).map(move |i| c[t * w + i] - c[(t - 1) * w + i]))
        .map(|d| d * d)
        .sum();
    Ok(s)
}

/// `Σ_t ‖H_t − H*_t‖²` over the hand keypoints; `anchor` is laid out like
/// [`PoseSequence::hand_track`].
pub fn hand_loss(p: &PoseSequence, anchor: &[f64]) -> Result<f64, StabilizerError> {
    let track = p.hand_track();
    if track.len() != anchor.len() {
        return Err(StabilizerError::Shape(format!(
            "hand anchor has {} values, pose hands have {}",
            anchor.len(),
            track.len()
        )));
    }
    Ok(track.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `Σ_t ‖P_t − Q_t‖²`.
pub fn fid_loss(p: &PoseSequence, q: &PoseSequence) -> Result<f64, StabilizerError> {
    same_shape(p, q)?;
    Ok(p.coords().iter().zip(q.coords()).map(|(a, b)| (a - b) * (a - b)).sum())
}

fn same_shape(a: &PoseSequence, b: &PoseSequence) -> Result<(), StabilizerError> {
    if a.frames() != b.frames() || a.joints() != b.joints() || a.hand_idx() != b.hand_idx() {
        return Err(StabilizerError::Shape(format!(
            "{}x{} vs {}x{}",
            a.frames(),
            a.joints(),
            b.frames(),
            b.joints()
        )));
    }
    Ok(())
}

pub fn loss_parts(
    p: &PoseSequence,
    input: &PoseSequence,
    anchor: &[f64],
) -> Result<LossParts, StabilizerError> {
    Ok(LossParts {
        l_smooth: smooth_loss(p)?,
        l_hand: hand_loss(p, anchor)?,
        l_vel: vel_loss(p)?,
        l_fid: fid_loss(p, input)?,
    })
}

/// `F(P)` for the given input and hand anchor.
pub fn objective(
    p: &PoseSequence,
    input: &PoseSequence,
    anchor: &[f64],
    cfg: &StabilizerConfig,
) -> Result<f64, StabilizerError> {
    Ok(loss_parts(p, input, anchor)?.objective(cfg))
}

/// `∇F(P)`, flat like [`PoseSequence::coords`].
pub fn gradient(
    p: &PoseSequence,
    input: &PoseSequence,
    anchor: &[f64],
    cfg: &StabilizerConfig,
) -> Result<Vec<f64>, StabilizerError> {
    same_shape(p, input)?;
    require_frames(p, 3)?;
    let (t_n, w) = (p.frames(), p.frame_width());
    let c = p.coords();
    let mut g: Vec<f64> = c
        .iter()
        .zip(input.coords())
        .map(|(x, y)| 2.0 * cfg.lambda_fid * (x - y))
        .collect();
    for t in 2..t_n {
        for i in 0..w {
            let j = c[t * w + i] - 2.0 * c[(t - 1) * w + i] + c[(t - 2) * w + i];
            let s = 2.0 * cfg.lambda_smooth * j;
            g[t * w + i] += s;
            g[(t - 1) * w + i] -= 2.0 * s;
            g[(t - 2) * w + i] += s;
        }
    }
    for t in 1..t_n {
        for i in 0..w {
            let v = 2.0 * cfg.lambda_vel * (c[t * w + i] - c[(t - 1) * w + i]);
            g[t * w + i] += v;
            g[(t - 1) * w + i] -= v;
        }
    }
    let hands = p.hand_idx();
    if anchor.len() != t_n * hands.len() * 2 {
        return Err(StabilizerError::Shape("hand anchor length".into()));
    }
    for t in 0..t_n {
        for (h, &j) in hands.iter().enumerate() {
            for a in 0..2 {
                let idx = t * w + j * 2 + a;
                g[idx] += 2.0 * cfg.lambda_hand * (c[idx] - anchor[(t * hands.len() + h) * 2 + a]);
            }
        }
    }
    Ok(g)
}

/// Unique minimiser of
/// `λ_fid‖P−p‖² + λ_smooth·L_smooth + λ_vel·L_vel + λ_hand·L_hand`.
///
/// Every coordinate track is an independent symmetric positive-definite
/// pentadiagonal system. Without `anchor` the input's own hands are used.
pub fn stabilize(
    input: &PoseSequence,
    anchor: Option<&[f64]>,
    cfg: &StabilizerConfig,
) -> Result<StabilizedResult, StabilizerError> {
    cfg.validate()?;
    require_frames(input, 3)?;
    let hands = input.hand_idx();
    let own;
    let anchor = match anchor {
        Some(a) => a,
        None => {
            own = input.hand_track();
            &own
        }
    };
    if anchor.len() != input.frames() * hands.len() * 2 {
        return Err(StabilizerError::Shape(format!(
            "hand anchor has {} values, expected {}",
            anchor.len(),
            input.frames() * hands.len() * 2
        )));
    }
    if cfg.lambda_fid <= 0.0 && hands.len() < input.joints() {
        return Err(StabilizerError::Config(
            "lambda_fid = 0 leaves non-hand keypoints unanchored".into(),
        ));
    }
    let (t_n, w) = (input.frames(), input.frame_width());
    let mut hand_of = vec![None; w];
    for (h, &j) in hands.iter().enumerate() {
        hand_of[j * 2] = Some(h * 2);
        hand_of[j * 2 + 1] = Some(h * 2 + 1);
    }
    let mut out = input.coords().to_vec();
    let mut rhs = vec![0.0; t_n];
    for (i, hand) in hand_of.iter().enumerate() {
        let extra = if hand.is_some() { cfg.lambda_hand } else { 0.0 };
        let system = Pentadiagonal::smoother(t_n, cfg.lambda_fid + extra, cfg.lambda_smooth, cfg.lambda_vel);
        for t in 0..t_n {
            rhs[t] = cfg.lambda_fid * input.coords()[t * w + i];
            if let Some(hc) = hand {
                rhs[t] += cfg.lambda_hand * anchor[t * hands.len() * 2 + hc];
            }
        }
        let x = solve_pentadiagonal(&system, &rhs)?;
        for t in 0..t_n {
            out[t * w + i] = x[t];
        }
    }
    let poses = PoseSequence::new(t_n, input.joints(), out, hands.to_vec())?;
    let parts = loss_parts(&poses, input, anchor)?;
    let residual = gradient(&poses, input, anchor, cfg)?
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(StabilizedResult {
        poses,
        parts,
        report: SolverReport {
            method: "banded-cholesky".into(),
            iterations: w,
            residual,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JerkReport {
    pub jerk_before: f64,
    pub jerk_after: f64,
    pub ratio: f64,
}

/// `ratio = L_smooth(after) / L_smooth(before)`; `1` when both are zero.
pub fn jerk_report(before: &PoseSequence, after: &PoseSequence) -> Result<JerkReport, StabilizerError> {
    same_shape(before, after)?;
    let (b, a) = (smooth_loss(before)?, smooth_loss(after)?);
    let ratio = if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    };
    Ok(JerkReport {
        jerk_before: b,
        jerk_after: a,
        ratio,
    })
}

#[derive(Serialize, Deserialize)]
struct PoseFile {
    hand_idx: Vec<usize>,
    frames: Vec<Vec<[f64; 2]>>,
}

/// Nested `T × J × 2` JSON array with the hand subset.
pub fn pose_to_json(p: &PoseSequence) -> String {
    let file = PoseFile {
        hand_idx: p.hand_idx().to_vec(),
        frames: p.to_nested(),
    };
    serde_json::to_string(&file).expect("pose serialises") + "\n"
}

pub fn pose_from_json(text: &str) -> Result<PoseSequence, StabilizerError> {
    let file: PoseFile = serde_json::from_str(text)
        .map_err(|e| StabilizerError::Shape(format!("pose file: {e}")))?;
    Ok(PoseSequence::from_nested(&file.frames, file.hand_idx)?)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    parts: &'a LossParts,
    solver: &'a SolverReport,
}

/// Loss parts and solver report as JSON.
pub fn report_to_json(r: &StabilizedResult) -> String {
    serde_json::to_string_pretty(&Sidecar {
        parts: &r.parts,
        solver: &r.report,
    })
    .expect("report serialises")
        + "\n"
}
