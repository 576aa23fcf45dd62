use std::collections::{BTreeMap, HashMap};
use std::fmt;

use super::{CorpusError, TrainingExample};

pub const WRITE: &str = "write:";
pub const READ: &str = "read:";
pub const CHOOSE: &str = "<choose>";
pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
pub const NO_AGREEMENT: &str = "<no_agreement>";

/// Reserved tokens, in id order.
pub const SPECIALS: [&str; 6] = [WRITE, READ, CHOOSE, UNK, PAD, NO_AGREEMENT];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const WRITE: TokenId = TokenId(0);
    pub const READ: TokenId = TokenId(1);
    pub const CHOOSE: TokenId = TokenId(2);
    pub const UNK: TokenId = TokenId(3);
    pub const PAD: TokenId = TokenId(4);
    pub const NO_AGREEMENT: TokenId = TokenId(5);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_marker(self) -> bool {
        self == TokenId::WRITE || self == TokenId::READ
    }

    /// Swaps `write:` and `read:`; every other token is unchanged.
    pub fn flipped(self) -> TokenId {
        match self {
            TokenId::WRITE => TokenId::READ,
            TokenId::READ => TokenId::WRITE,
            t => t,
        }
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bidirectional word/id map. The special tokens always hold ids 0..6.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit word list. Specials are
    /// prepended when missing; duplicates are dropped.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary {
            words: Vec::new(),
            ids: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s);
        }
        for w in words {
            v.push(w.as_ref());
        }
        v
    }

    fn push(&mut self, w: &str) {
        if !self.ids.contains_key(w) {
            let id = TokenId(self.words.len() as u32);
            self.words.push(w.to_string());
            self.ids.insert(w.to_string(), id);
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.ids.get(word).copied().unwrap_or(TokenId::UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn word(&self, id: TokenId) -> Result<&str, CorpusError> {
        self.words
            .get(id.index())
            .map(String::as_str)
            .ok_or(CorpusError::TokenOutOfRange(id.0, self.words.len()))
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>, CorpusError> {
        ids.iter().map(|&id| self.word(id).map(str::to_string)).collect()
    }

    /// One word per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        let words: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(CorpusError::Format(
                "vocabulary file must start with the special tokens".into(),
            ));
        }
        Ok(Self::from_words(words))
    }
}

/// Specials, then every dialogue word seen at least `min_count` times,
/// ordered by descending count with lexicographic ties.
pub fn build_vocab(corpus: &[TrainingExample], min_count: usize) -> Vocabulary {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in corpus {
        for w in &ex.dialogue {
            if !SPECIALS.contains(&w.as_str()) {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocabulary::from_words(kept.into_iter().map(|(w, _)| w))
}
