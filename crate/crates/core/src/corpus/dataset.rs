use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{is_reserved, CorpusError, PosePriorDb, TokenId, Vocab};

/// Prompt wrappers; `{}` is replaced by the space-separated gloss string.
/// The first entry is the identity (bare gloss) form.
pub const TEMPLATES: [&str; 6] = [
    "{}",
    "how do you sign {} ?",
    "please show me {}",
    "what is the sign for {} ?",
    "can you translate {} into sign language",
    "i want to say {}",
];

pub const MAX_GLOSS_LEN: usize = 8;

const SIGN_LANGUAGES: [&str; 8] = [
    "<asl>", "<bsl>", "<csl>", "<dgs>", "<lsf>", "<jsl>", "<libras>", "<auslan>",
];

const GLOSS_WORDS: [&str; 64] = [
    "AGAIN", "AIRPLANE", "APPLE", "BABY", "BEAUTIFUL", "BOOK", "BROTHER", "BUY", "CAR", "CARRY",
    "CAT", "CHAIR", "COFFEE", "COLD", "COOK", "DANCE", "DOCTOR", "DOG", "DRINK", "EAT", "FAMILY",
    "FINISH", "FRIEND", "GO", "GOOD", "HAPPY", "HELLO", "HELP", "HOME", "HOUSE", "HUNGRY", "I",
    "IT", "KNOW", "LEARN", "LIKE", "LOVE", "MEET", "MORNING", "MOTHER", "NAME", "NIGHT", "NO",
    "PLEASE", "RAIN", "READ", "SCHOOL", "SIGN", "SLEEP", "SORRY", "STOP", "TEACHER", "THANK-YOU",
    "TIME", "TOMORROW", "UNDERSTAND", "WAIT", "WALK", "WANT", "WATER", "WORK", "WORLD", "YES",
    "YOU",
];

/// Language tag for expert index `k`. Each sign language has its own
/// expression of every gloss, so the tag is what determines the ground-truth
/// pose variant.
pub fn language_tag(k: usize) -> String {
    SIGN_LANGUAGES
        .get(k)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("<lang{k}>"))
}

/// First `n` gloss lexemes of the built-in lexicon, extended with synthetic
/// names beyond its size.
pub fn default_lexicon(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            GLOSS_WORDS
                .get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("GLOSS-{i}"))
        })
        .collect()
}

/// Prompt-side and gloss-side token tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabularies {
    pub source: Vocab,
    pub gloss: Vocab,
}

impl Vocabularies {
    /// The gloss table holds only `glosses`; the source table adds template
    /// words and the `k` language tags.
    pub fn build<S: AsRef<str>>(glosses: &[S], k: usize) -> Result<Self, CorpusError> {
        let gloss = Vocab::build(glosses)?;
        let mut words: Vec<String> = gloss.lexicon().to_vec();
        for t in TEMPLATES {
            for w in t.split_whitespace().filter(|w| *w != "{}") {
                if !words.iter().any(|x| x == w) {
                    words.push(w.to_string());
                }
            }
        }
        words.extend((0..k).map(language_tag));
        let source = Vocab::build(&words)?;
        Ok(Self { source, gloss })
    }

    pub fn lang_id(&self, k: usize) -> Option<TokenId> {
        self.source.id(&language_tag(k))
    }

    /// Expert index encoded by a language-tag id, if it is one.
    pub fn expert_of_lang(&self, lang: TokenId, k: usize) -> Option<usize> {
        (0..k).find(|&e| self.lang_id(e) == Some(lang))
    }
}

/// One training record. `lang` and `prompt` are source ids, `gloss` are gloss ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlossExample {
    pub lang: TokenId,
    pub prompt: Vec<TokenId>,
    pub gloss: Vec<TokenId>,
    pub expert_index: usize,
    pub pose_ref: String,
}

/// `"GLOSS/k GLOSS/k ..."`: which variant of which gloss, in order.
pub fn pose_ref_for(glosses: &[&str], k: usize) -> String {
    glosses
        .iter()
        .map(|g| format!("{g}/{k}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses a pose reference into `(gloss, variant)` pairs.
pub fn parse_pose_ref(pose_ref: &str) -> Result<Vec<(String, usize)>, CorpusError> {
    pose_ref
        .split_whitespace()
        .map(|part| {
            let (g, k) = part
                .rsplit_once('/')
                .ok_or_else(|| CorpusError::Format(format!("bad pose_ref part {part:?}")))?;
            let k = k
                .parse()
                .map_err(|_| CorpusError::Format(format!("bad variant in {part:?}")))?;
            Ok((g.to_string(), k))
        })
        .collect()
}

pub fn gen_corpus(
    seed: u64,
    n: usize,
    vocabs: &Vocabularies,
    db: &PosePriorDb,
) -> Result<Vec<GlossExample>, CorpusError> {
    if n == 0 {
        return Err(CorpusError::InvalidParameter("corpus size must be >= 1".into()));
    }
    db.check_against(&vocabs.gloss)?;
    let k = db.k();
    let gloss_ids: Vec<TokenId> = vocabs.gloss.lexicon_ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let expert_index = rng.gen_range(0..k);
        let len = rng.gen_range(1..=MAX_GLOSS_LEN);
        let gloss: Vec<TokenId> = (0..len)
            .map(|_| *gloss_ids.choose(&mut rng).expect("non-empty lexicon"))
            .collect();
        let template = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
        let words: Vec<&str> = gloss
            .iter()
            .map(|&id| vocabs.gloss.token(id).expect("lexicon id"))
            .collect();
        let text = template.replace("{}", &words.join(" "));
        let lang = vocabs
            .lang_id(expert_index)
            .ok_or_else(|| CorpusError::InvalidParameter(format!("no language tag for {k} experts")))?;
        out.push(GlossExample {
            lang,
            prompt: vocabs.source.tokenize(&text),
            pose_ref: pose_ref_for(&words, expert_index),
            gloss,
            expert_index,
        });
    }
    Ok(out)
}

/// Referential integrity of one example against its tables and database.
pub fn validate_example(
    ex: &GlossExample,
    vocabs: &Vocabularies,
    db: &PosePriorDb,
) -> Result<(), CorpusError> {
    let bad = |msg: String| Err(CorpusError::Integrity(msg));
    if ex.gloss.is_empty() {
        return bad("empty gloss".into());
    }
    if let Some(id) = ex
        .gloss
        .iter()
        .find(|&&id| is_reserved(id) || vocabs.gloss.token(id).is_none())
    {
        return bad(format!("gloss id {id} is reserved or unknown"));
    }
    if ex.expert_index >= db.k() {
        return bad(format!("expert index {} >= K={}", ex.expert_index, db.k()));
    }
    if vocabs.source.token(ex.lang).is_none() || ex.prompt.iter().any(|&id| vocabs.source.token(id).is_none()) {
        return bad("prompt id out of range".into());
    }
    let parts = parse_pose_ref(&ex.pose_ref)?;
    if parts.len() != ex.gloss.len() {
        return bad(format!("pose_ref {:?} does not match gloss length", ex.pose_ref));
    }
    for ((g, k), &id) in parts.iter().zip(&ex.gloss) {
        let resolves = db.variants(g).is_some_and(|v| *k < v.len());
        if !resolves || vocabs.gloss.token(id) != Some(g.as_str()) {
            return bad(format!("pose_ref part {g}/{k} does not resolve"));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Record {
    lang: String,
    prompt: String,
    gloss: String,
    expert_index: usize,
    pose_ref: String,
}

/// One JSON object per line: `{lang, prompt, gloss, expert_index, pose_ref}`.
pub fn write_corpus(examples: &[GlossExample], vocabs: &Vocabularies) -> String {
    let mut out = String::new();
    for ex in examples {
        let rec = Record {
            lang: vocabs.source.detokenize(&[ex.lang]),
            prompt: vocabs.source.detokenize(&ex.prompt),
            gloss: vocabs.gloss.detokenize(&ex.gloss),
            expert_index: ex.expert_index,
            pose_ref: ex.pose_ref.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serialises"));
        out.push('\n');
    }
    out
}

pub fn read_corpus(text: &str, vocabs: &Vocabularies) -> Result<Vec<GlossExample>, CorpusError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let rec: Record = serde_json::from_str(line)
                .map_err(|e| CorpusError::Format(format!("line {}: {e}", i + 1)))?;
            let lang = vocabs
                .source
                .id(&rec.lang)
                .ok_or_else(|| CorpusError::Format(format!("line {}: unknown language tag", i + 1)))?;
            Ok(GlossExample {
                lang,
                prompt: vocabs.source.tokenize(&rec.prompt),
                gloss: vocabs.gloss.tokenize(&rec.gloss),
                expert_index: rec.expert_index,
                pose_ref: rec.pose_ref,
            })
        })
        .collect()
}
