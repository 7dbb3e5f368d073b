//! Rule-built pose prior database.
//!
//! Every gloss owns `K` variant trajectories. A variant is a per-gloss neutral
//! skeleton plus two low-frequency sinusoids per coordinate; variant `k` shifts
//! every phase by `2πk/K`, so the variants are distinct expressions of one sign
//! and their uniform average is exactly the static base pose.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, PoseSequence, Vocab};

/// Generation constants. Amplitudes are in normalised screen units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorRules {
    pub ring_radius: f64,
    pub max_offset: f64,
    pub first_amp: (f64, f64),
    pub second_amp: (f64, f64),
    pub hand_gain: f64,
}

impl Default for PriorRules {
    fn default() -> Self {
        Self {
            ring_radius: 0.22,
            max_offset: 0.035,
            first_amp: (0.02, 0.07),
            second_amp: (0.0, 0.04),
            hand_gain: 1.5,
        }
    }
}

/// Angular frequencies over the normalised segment time `τ ∈ [0, 1]`.
const OMEGA: [f64; 2] = [PI, 2.0 * PI];

impl PriorRules {
    /// Upper bound on `smooth_loss / (frames − 2)` for any generated variant.
    ///
    /// `|Δ² sin(ωτ + φ)| ≤ ω² Δτ²` with `Δτ = 1/(frames − 1)`, so each
    /// coordinate's second difference is bounded by `Σ_m a_m ω_m² Δτ²`.
    pub fn jerk_bound_per_frame(&self, joints: usize, frames: usize) -> f64 {
        let dt = 1.0 / (frames - 1) as f64;
        let per_coord =
            self.hand_gain.max(1.0) * (self.first_amp.1 * OMEGA[0].powi(2) + self.second_amp.1 * OMEGA[1].powi(2)) * dt * dt;
        2.0 * joints as f64 * per_coord * per_coord
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosePriorDb {
    k: usize,
    joints: usize,
    hand_idx: Vec<usize>,
    canonical_len: usize,
    entries: BTreeMap<String, Vec<PoseSequence>>,
}

#[derive(Serialize, Deserialize)]
struct DbFile {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "J")]
    joints: usize,
    hand_idx: Vec<usize>,
    entries: BTreeMap<String, Vec<Vec<Vec<[f64; 2]>>>>,
}

/// Default hand subset: the last four keypoints.
pub fn default_hand_idx(joints: usize) -> Vec<usize> {
    (joints.saturating_sub(4)..joints).collect()
}

/// FNV-1a, used to derive a stable per-gloss stream from the seed.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl PosePriorDb {
    pub fn new(
        k: usize,
        joints: usize,
        hand_idx: Vec<usize>,
        entries: BTreeMap<String, Vec<PoseSequence>>,
    ) -> Result<Self, CorpusError> {
        if entries.is_empty() {
            return Err(CorpusError::Db("database has no entries".into()));
        }
        let mut canonical_len = 0;
        for (gloss, variants) in &entries {
            if variants.len() != k {
                return Err(CorpusError::Db(format!(
                    "gloss {gloss:?} has {} variants, expected {k}",
                    variants.len()
                )));
            }
            for v in variants {
                if v.joints() != joints || v.hand_idx() != hand_idx.as_slice() {
                    return Err(CorpusError::Db(format!(
                        "gloss {gloss:?} has a variant with a different skeleton"
                    )));
                }
                canonical_len = canonical_len.max(v.frames());
            }
        }
        Ok(Self {
            k,
            joints,
            hand_idx,
            canonical_len,
            entries,
        })
    }

    /// Builds `K` smooth variants for every non-reserved token of `vocab`.
    pub fn generate(
        seed: u64,
        vocab: &Vocab,
        k: usize,
        joints: usize,
        frames_per_gloss: usize,
    ) -> Result<Self, CorpusError> {
        Self::generate_with(seed, vocab, k, joints, frames_per_gloss, &PriorRules::default())
    }

    pub fn generate_with(
        seed: u64,
        vocab: &Vocab,
        k: usize,
        joints: usize,
        frames_per_gloss: usize,
        rules: &PriorRules,
    ) -> Result<Self, CorpusError> {
        if k < 2 || joints < 6 || frames_per_gloss < 3 {
            return Err(CorpusError::InvalidParameter(format!(
                "need K >= 2, J >= 6, frames >= 3; got K={k}, J={joints}, frames={frames_per_gloss}"
            )));
        }
        let hand_idx = default_hand_idx(joints);
        let entries = vocab
            .lexicon()
            .iter()
            .map(|gloss| {
                let variants = (0..k)
                    .map(|v| variant(seed, gloss, v, k, joints, frames_per_gloss, &hand_idx, rules))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((gloss.clone(), variants))
            })
            .collect::<Result<BTreeMap<_, _>, CorpusError>>()?;
        Self::new(k, joints, hand_idx, entries)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn hand_idx(&self) -> &[usize] {
        &self.hand_idx
    }

    /// Common per-gloss length that retrieval resamples to.
    pub fn canonical_len(&self) -> usize {
        self.canonical_len
    }

    pub fn variants(&self, gloss: &str) -> Option<&[PoseSequence]> {
        self.entries.get(gloss).map(Vec::as_slice)
    }

    /// Glosses in lexicographic order.
    pub fn glosses(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[PoseSequence])> {
        self.entries.iter().map(|(g, v)| (g.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every non-reserved vocab token has an entry and vice versa.
    pub fn check_against(&self, vocab: &Vocab) -> Result<(), CorpusError> {
        for g in vocab.lexicon() {
            if !self.entries.contains_key(g) {
                return Err(CorpusError::Db(format!("gloss {g:?} missing from database")));
            }
        }
        if self.entries.len() != vocab.lexicon().len() {
            return Err(CorpusError::Db(
                "database has glosses outside the vocabulary".into(),
            ));
        }
        Ok(())
    }

    /// Mean of every frame in the database; a neutral resting pose.
    pub fn neutral_frame(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.joints * 2];
        let mut n = 0usize;
        for variants in self.entries.values() {
            for v in variants {
                for t in 0..v.frames() {
                    for (a, c) in acc.iter_mut().zip(v.frame(t)) {
                        *a += c;
                    }
                    n += 1;
                }
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        acc
    }

    pub fn to_json(&self) -> String {
        let file = DbFile {
            k: self.k,
            joints: self.joints,
            hand_idx: self.hand_idx.clone(),
            entries: self
                .entries
                .iter()
                .map(|(g, vs)| (g.clone(), vs.iter().map(PoseSequence::to_nested).collect()))
                .collect(),
        };
        let mut s = serde_json::to_string(&file).expect("database serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let file: DbFile =
            serde_json::from_str(text).map_err(|e| CorpusError::Format(e.to_string()))?;
        let entries = file
            .entries
            .iter()
            .map(|(g, vs)| {
                let seqs = vs
                    .iter()
                    .map(|rows| PoseSequence::from_nested(rows, file.hand_idx.clone()))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((g.clone(), seqs))
            })
            .collect::<Result<BTreeMap<_, _>, CorpusError>>()?;
        Self::new(file.k, file.joints, file.hand_idx, entries)
    }
}

#[allow(clippy::too_many_arguments)]
fn variant(
    seed: u64,
    gloss: &str,
    k: usize,
    num_variants: usize,
    joints: usize,
    frames: usize,
    hand_idx: &[usize],
    rules: &PriorRules,
) -> Result<PoseSequence, CorpusError> {
    // The gloss stream is independent of k, so all variants share base and amplitudes.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(gloss));
    let shift = 2.0 * PI * k as f64 / num_variants as f64;
    let mut params = Vec::with_capacity(joints * 2);
    for j in 0..joints {
        let angle = 2.0 * PI * j as f64 / joints as f64 + 0.3;
        let ring = [angle.cos(), angle.sin()];
        let gain = if hand_idx.contains(&j) {
            rules.hand_gain
        } else {
            1.0
        };
        for ring_c in ring {
            let base = 0.5
                + rules.ring_radius * ring_c
                + rng.gen_range(-rules.max_offset..=rules.max_offset);
            let a1 = gain * rng.gen_range(rules.first_amp.0..=rules.first_amp.1);
            let a2 = gain * rng.gen_range(rules.second_amp.0..=rules.second_amp.1);
            let p1 = rng.gen_range(0.0..2.0 * PI);
            let p2 = rng.gen_range(0.0..2.0 * PI);
            params.push((base, a1, a2, p1, p2));
        }
    }
    let mut coords = Vec::with_capacity(frames * joints * 2);
    for t in 0..frames {
        let tau = t as f64 / (frames - 1) as f64;
        for &(base, a1, a2, p1, p2) in &params {
            coords.push(
                base + a1 * (OMEGA[0] * tau + p1 + shift).sin()
                    + a2 * (OMEGA[1] * tau + p2 + shift).sin(),
            );
        }
    }
    PoseSequence::new(frames, joints, coords, hand_idx.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vocab() -> Vocab {
        Vocab::build(&["BOOK", "HELLO", "WORLD"]).unwrap()
    }

    fn second_difference_energy(p: &PoseSequence) -> f64 {
        let mut total = 0.0;
        for t in 2..p.frames() {
            for c in 0..p.frame_width() {
                let d = p.frame(t)[c] - 2.0 * p.frame(t - 1)[c] + p.frame(t - 2)[c];
                total += d * d;
            }
        }
        total
    }

    #[test]
    fn preconditions() {
        let v = small_vocab();
        assert!(PosePriorDb::generate(1, &v, 1, 12, 16).is_err());
        assert!(PosePriorDb::generate(1, &v, 4, 5, 16).is_err());
        assert!(PosePriorDb::generate(1, &v, 4, 12, 2).is_err());
    }

    #[test]
    fn variants_of_one_gloss_differ() {
        let db = PosePriorDb::generate(3, &small_vocab(), 4, 12, 16).unwrap();
        let vs = db.variants("HELLO").unwrap();
        for a in 0..4 {
            for b in a + 1..4 {
                let mean_dist: f64 = (0..16)
                    .map(|t| {
                        vs[a].frame(t)
                            .iter()
                            .zip(vs[b].frame(t))
                            .map(|(x, y)| (x - y).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .sum::<f64>()
                    / 16.0;
                assert!(mean_dist > 0.0, "variants {a} and {b} coincide");
            }
        }
    }

    #[test]
    fn uniform_average_is_static() {
        let db = PosePriorDb::generate(3, &small_vocab(), 4, 12, 16).unwrap();
        let vs = db.variants("WORLD").unwrap();
        let avg = |t: usize, c: usize| vs.iter().map(|v| v.frame(t)[c]).sum::<f64>() / 4.0;
        for t in 1..16 {
            for c in 0..24 {
                assert!((avg(t, c) - avg(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generated_jerk_is_below_rule_bound() {
        let rules = PriorRules::default();
        for frames in [3, 8, 16, 40] {
            let db = PosePriorDb::generate(9, &small_vocab(), 4, 12, frames).unwrap();
            let bound = rules.jerk_bound_per_frame(12, frames);
            for (_, vs) in db.iter() {
                for v in vs {
                    let per_frame = second_difference_energy(v) / (frames - 2) as f64;
                    assert!(per_frame < bound, "{per_frame} >= {bound}");
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed_gloss_variant() {
        let v = small_vocab();
        let a = PosePriorDb::generate(5, &v, 4, 12, 16).unwrap();
        let b = PosePriorDb::generate(5, &v, 4, 12, 16).unwrap();
        assert_eq!(a, b);
        // Adding glosses does not perturb existing entries.
        let wider = Vocab::build(&["BOOK", "HELLO", "WORLD", "ZOO"]).unwrap();
        let c = PosePriorDb::generate(5, &wider, 4, 12, 16).unwrap();
        assert_eq!(a.variants("HELLO"), c.variants("HELLO"));
    }

    #[test]
    fn coordinates_stay_on_screen() {
        let db = PosePriorDb::generate(2, &small_vocab(), 4, 12, 16).unwrap();
        for (_, vs) in db.iter() {
            for v in vs {
                let (lo, hi) = v.value_range();
                assert!(lo > 0.0 && hi < 1.0);
            }
        }
    }

    #[test]
    fn json_round_trip_is_byte_exact() {
        let db = PosePriorDb::generate(4, &small_vocab(), 3, 6, 5).unwrap();
        let text = db.to_json();
        let back = PosePriorDb::from_json(&text).unwrap();
        assert_eq!(back, db);
        assert_eq!(back.to_json(), text);
    }
}
