//! Run configuration: every hyperparameter of every stage, with defaults.

use serde::{Deserialize, Serialize};

use crate::diffkit::OptConfig;
use crate::evalkit::Smoothing;
use crate::slp_moe::MoeWeights;
use crate::slul::{LossWeights, ModelConfig};
use crate::stabilizer::StabilizerConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Gloss lexicon size.
    pub glosses: usize,
    /// Experts, one per sign language.
    pub experts: usize,
    pub joints: usize,
    pub frames_per_gloss: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            glosses: 50,
            experts: 4,
            joints: 12,
            frames_per_gloss: 16,
            n_train: 2000,
            n_dev: 200,
            n_test: 500,
        }
    }
}

/// How a decoded gloss becomes a pose sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// The argmax expert's variants.
    #[default]
    Hard,
    /// Gate-weighted average of all experts.
    Blend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub selection: Selection,
    /// Selection used when scoring the training-period snapshots.
    pub trend_selection: Selection,
    pub max_decode_len: usize,
    pub smoothing: Smoothing,
    pub rouge_beta: f64,
    /// Train and score the no-SAGM and no-MoE variants alongside the full model.
    pub ablations: bool,
    /// Noise level of the stability study, as a fraction of each sequence's coordinate range.
    pub noise_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            selection: Selection::Hard,
            trend_selection: Selection::Blend,
            max_decode_len: 12,
            smoothing: Smoothing::AddOne,
            rouge_beta: 1.0,
            ablations: true,
            noise_fraction: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Stage seeds are derived from it by [`RunConfig::resolved`].
    pub seed: u64,
    pub out_dir: String,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub slul_opt: OptConfig,
    pub moe: MoeWeights,
    pub gate_opt: OptConfig,
    pub stabilizer: StabilizerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: "runs/default".into(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            slul_opt: OptConfig {
                steps: 6000,
                ..OptConfig::default()
            },
            moe: MoeWeights::default(),
            gate_opt: OptConfig {
                learning_rate: 1e-2,
                steps: 1500,
                batch_size: 256,
                clip_norm: 0.0,
                warmup: 0,
                final_lr_fraction: 1.0,
                ..OptConfig::default()
            },
            stabilizer: StabilizerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// SplitMix64 finaliser over `seed + stage`.
pub fn derive_seed(seed: u64, stage: u64) -> u64 {
    let mut z = seed.wrapping_add(stage.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub mod stage {
    pub const CORPUS: u64 = 1;
    pub const PRIOR: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const SLUL_OPT: u64 = 4;
    pub const GATE_OPT: u64 = 5;
    pub const NOISE: u64 = 6;
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn corpus_seed(&self) -> u64 {
        derive_seed(self.seed, stage::CORPUS)
    }

    pub fn prior_seed(&self) -> u64 {
        derive_seed(self.seed, stage::PRIOR)
    }

    pub fn noise_seed(&self) -> u64 {
        derive_seed(self.seed, stage::NOISE)
    }

    /// Copy with the model and optimiser seeds overwritten by values derived
    /// from `seed`, so the master seed alone fixes every random draw.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.init_seed = derive_seed(self.seed, stage::MODEL_INIT);
        c.slul_opt.seed = derive_seed(self.seed, stage::SLUL_OPT);
        c.gate_opt.seed = derive_seed(self.seed, stage::GATE_OPT);
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let c = &self.corpus;
        if c.glosses == 0 || c.n_train == 0 || c.n_test == 0 {
            return bad("corpus.glosses, corpus.n_train and corpus.n_test must be >= 1".into());
        }
        if c.experts < 2 || c.joints < 6 || c.frames_per_gloss < 3 {
            return bad(format!(
                "need experts >= 2, joints >= 6, frames_per_gloss >= 3; got {}, {}, {}",
                c.experts, c.joints, c.frames_per_gloss
            ));
        }
        let m = &self.model;
        if m.d_model == 0 || m.heads == 0 || m.d_model % m.heads != 0 || m.d_ff == 0 {
            return bad(format!(
                "model.d_model must be a positive multiple of model.heads, d_ff >= 1; got {}, {}, {}",
                m.d_model, m.heads, m.d_ff
            ));
        }
        self.loss.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.stabilizer.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let w = &self.moe;
        if ![w.lambda_moe, w.entropy_bonus].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return bad("moe weights must be finite and >= 0".into());
        }
        for (name, o) in [("slul_opt", &self.slul_opt), ("gate_opt", &self.gate_opt)] {
            if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) || o.batch_size == 0 {
                return bad(format!("{name}: learning_rate must be positive and batch_size >= 1"));
            }
            if !(o.clip_norm >= 0.0) || !(o.final_lr_fraction >= 0.0) || !(o.eps > 0.0) {
                return bad(format!("{name}: clip_norm, final_lr_fraction >= 0 and eps > 0 required"));
            }
            if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
                return bad(format!("{name}: betas must lie in [0, 1)"));
            }
        }
        let e = &self.eval;
        if e.max_decode_len == 0 || !(e.rouge_beta > 0.0) || !(e.noise_fraction >= 0.0) {
            return bad("eval: max_decode_len >= 1, rouge_beta > 0, noise_fraction >= 0 required".into());
        }
        Ok(())
    }
}
