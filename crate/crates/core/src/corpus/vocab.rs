use std::collections::HashMap;

use super::CorpusError;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const MASK: TokenId = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[BOS]", "[EOS]", "[MASK]"];
pub const NUM_RESERVED: usize = RESERVED.len();

/// Bijective token/id table. Ids `0..4` are the reserved symbols; the rest are
/// the lexicon in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

pub fn is_reserved(id: TokenId) -> bool {
    (id as usize) < NUM_RESERVED
}

impl Vocab {
    pub fn build<S: AsRef<str>>(lexicon: &[S]) -> Result<Self, CorpusError> {
        if lexicon.is_empty() {
            return Err(CorpusError::EmptyLexicon);
        }
        let mut words: Vec<&str> = lexicon.iter().map(AsRef::as_ref).collect();
        words.sort_unstable();
        for pair in words.windows(2) {
            if pair[0] == pair[1] {
                return Err(CorpusError::DuplicateLexeme(pair[0].to_string()));
            }
        }
        if let Some(w) = words.iter().find(|w| RESERVED.contains(w)) {
            return Err(CorpusError::DuplicateLexeme(w.to_string()));
        }
        if let Some(w) = words.iter().find(|w| w.is_empty() || w.contains(char::is_whitespace)) {
            return Err(CorpusError::InvalidLexeme(w.to_string()));
        }
        let tokens: Vec<String> = RESERVED
            .iter()
            .copied()
            .chain(words)
            .map(str::to_string)
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn lexicon(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    pub fn lexicon_ids(&self) -> impl Iterator<Item = TokenId> {
        (NUM_RESERVED as TokenId)..(self.tokens.len() as TokenId)
    }

    /// Whitespace tokenisation. Unknown lexemes become [`MASK`] and are logged.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| {
                self.id(w).unwrap_or_else(|| {
                    log::warn!("unknown lexeme {w:?} mapped to [MASK]");
                    MASK
                })
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, reserved header first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_RESERVED || lines[..NUM_RESERVED] != RESERVED {
            return Err(CorpusError::Format(
                "vocab file must start with the four reserved tokens".into(),
            ));
        }
        let body = &lines[NUM_RESERVED..];
        if body.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CorpusError::Format(
                "vocab tokens must be unique and sorted".into(),
            ));
        }
        let v = Self::build(body)?;
        Ok(v)
    }
}
