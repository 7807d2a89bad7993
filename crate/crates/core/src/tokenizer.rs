//! Whitespace vocabulary and fixed-length encoding.

use std::collections::HashMap;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

/// Default sequence length, counting the leading CLS token.
pub const DEFAULT_MAX_LEN: usize = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("min_freq must be at least 1")]
    ZeroMinFreq,
    #[error("max_size {0} cannot hold the {n} reserved tokens", n = RESERVED.len())]
    TooSmall(usize),
    #[error("vocabulary line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    /// Keeps tokens seen at least `min_freq` times, most frequent first
    /// (ties in lexicographic order), capped at `max_size` entries
    /// including the reserved ones.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        min_freq: usize,
        max_size: Option<usize>,
    ) -> Result<Self, VocabError> {
        if min_freq == 0 {
            return Err(VocabError::ZeroMinFreq);
        }
        if let Some(m) = max_size {
            if m < RESERVED.len() {
                return Err(VocabError::TooSmall(m));
            }
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut docs = 0;
        for text in corpus {
            docs += 1;
            for tok in text.split_whitespace() {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if docs == 0 {
            return Err(VocabError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq && !RESERVED.contains(&t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = max_size.map_or(usize::MAX, |m| m - RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(room).map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a regular token; reserved spellings are not looked up.
    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied().filter(|&id| id as usize >= RESERVED.len())
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `CLS` followed by the whitespace tokens of `text` (UNK for misses),
    /// truncated to `max_len` and padded with `PAD`.
    ///
    /// # Panics
    /// If `max_len < 2`.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 2, "max_len must be at least 2");
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(text.split_whitespace().take(max_len - 1).map(|t| self.id(t).unwrap_or(UNK)));
        let real = ids.len();
        ids.resize(max_len, PAD);
        let mut mask = vec![1u8; real];
        mask.resize(max_len, 0);
        TokenSequence { ids, mask }
    }

    /// Tokens of the real positions after CLS.
    pub fn decode(&self, seq: &TokenSequence) -> Vec<String> {
        seq.ids
            .iter()
            .zip(&seq.mask)
            .skip(1)
            .filter(|(_, &m)| m == 1)
            .map(|(&id, _)| self.token(id).unwrap_or(RESERVED[UNK as usize]).to_string())
            .collect()
    }

    /// `token<TAB>id` lines.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<Self, VocabError> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |reason: &str| VocabError::Malformed { line: i + 1, reason: reason.to_string() };
            let (tok, id) = line.split_once('\t').ok_or_else(|| bad("expected token<TAB>id"))?;
            let id: usize = id.parse().map_err(|_| bad("id is not an integer"))?;
            if id != tokens.len() {
                return Err(bad("ids must be dense and ascending"));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(VocabError::Malformed { line: 1, reason: "reserved tokens missing".into() });
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Token ids plus attention mask, both exactly `max_len` long.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of real (unmasked) positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// `(position, id)` of every unmasked slot.
    pub fn real_positions(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.ids.iter().zip(&self.mask).enumerate().filter(|(_, (_, &m))| m == 1).map(|(p, (&id, _))| (p, id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn build_examples() {
        let v = Vocabulary::build(["a a b"], 1, None).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("b"), Some(4));

        let v = Vocabulary::build(["a a b"], 2, None).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("b"), None);

        let v = Vocabulary::build(["a a b"], 1, Some(4)).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("a"), Some(3));

        assert_eq!(Vocabulary::build(std::iter::empty::<&str>(), 1, None), Err(VocabError::EmptyCorpus));
    }

    #[test]
    fn encode_examples() {
        let words: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let text = words.join(" ");
        let v = Vocabulary::build([text.as_str()], 1, None).unwrap();
        let seq = v.encode(&text, 64);
        assert_eq!(seq.ids.len(), 64);
        assert_eq!(seq.real_len(), 64);

        let seq = v.encode("", 64);
        assert_eq!(seq.ids[0], CLS);
        assert!(seq.ids[1..].iter().all(|&i| i == PAD));
        assert_eq!(seq.real_len(), 1);

        let v = Vocabulary::build(["a"], 1, None).unwrap();
        let seq = v.encode("a zzz", 6);
        assert_eq!(seq.ids, vec![CLS, v.id("a").unwrap(), UNK, PAD, PAD, PAD]);
        assert_eq!(seq.mask, vec![1, 1, 1, 0, 0, 0]);
    }

    #[test]
    fn reserved_spellings_become_unk() {
        let v = Vocabulary::build(["[PAD] x"], 1, None).unwrap();
        let seq = v.encode("[PAD] x", 4);
        assert_eq!(seq.ids, vec![CLS, UNK, v.id("x").unwrap(), PAD]);
    }

    #[test]
    fn lines_round_trip() {
        let v = Vocabulary::build(["the cat sat on the mat"], 1, None).unwrap();
        assert_eq!(Vocabulary::from_lines(&v.to_lines()).unwrap(), v);
        assert!(Vocabulary::from_lines("x\t0\n").is_err());
    }

    proptest! {
        #[test]
        fn encode_length_and_mask(words in proptest::collection::vec("[a-e]{1,3}", 0..40), max_len in 2usize..20) {
            let text = words.join(" ");
            let v = Vocabulary::build([text.as_str()], 1, None).unwrap();
            let seq = v.encode(&text, max_len);
            prop_assert_eq!(seq.ids.len(), max_len);
            prop_assert_eq!(seq.ids[0], CLS);
            for (&id, &m) in seq.ids.iter().zip(&seq.mask) {
                prop_assert_eq!(m == 0, id == PAD);
                prop_assert!((id as usize) < v.len());
            }
            let expect: Vec<String> = words.iter().take(max_len - 1).cloned().collect();
            prop_assert_eq!(v.decode(&seq), expect);
        }
    }
}
