use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::attributes::caption_words;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const SOS: &str = "[SOS]";
pub const EOS: &str = "[EOS]";
pub const MASK: &str = "[MASK]";

/// Word-level vocabulary. Ids are dense; the four special tokens come first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    pad: usize,
    sos: usize,
    eos: usize,
    mask: usize,
}

impl Vocab {
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut tokens: Vec<String> = [PAD, SOS, EOS, MASK].iter().map(|s| s.to_string()).collect();
        for w in words {
            if w.is_empty() || w.contains(char::is_whitespace) || w.starts_with('[') {
                return Err(Error::InvalidArgument(format!("invalid vocabulary word `{w}`")));
            }
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token `{t}`")));
            }
        }
        for special in [PAD, SOS, EOS, MASK] {
            if !index.contains_key(special) {
                return Err(Error::InvalidArgument(format!("missing special token {special}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary of the caption grammar.
    pub fn captions() -> Self {
        Self::from_words(caption_words()).expect("caption words are valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> usize {
        self.index[PAD]
    }

    pub fn sos(&self) -> usize {
        self.index[SOS]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn mask(&self) -> usize {
        self.index[MASK]
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.pad() || id == self.sos() || id == self.eos() || id == self.mask()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabFile {
            tokens: self.tokens.clone(),
            pad: self.pad(),
            sos: self.sos(),
            eos: self.eos(),
            mask: self.mask(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(s)?;
        let v = Self::from_tokens(f.tokens)?;
        if (v.pad(), v.sos(), v.eos(), v.mask()) != (f.pad, f.sos, f.eos, f.mask) {
            return Err(Error::InvalidArgument("special ids disagree with token list".into()));
        }
        Ok(v)
    }
}

/// `[SOS] words… [EOS] [PAD]…`, exactly `max_len` ids.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<Vec<usize>> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() + 2 > max_len {
        return Err(Error::TextOverflow {
            words: words.len(),
            max_len,
        });
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(vocab.sos());
    for w in words {
        match vocab.id(w) {
            Some(id) if !vocab.is_special(id) => ids.push(id),
            _ => return Err(Error::UnknownWord(w.to_string())),
        }
    }
    ids.push(vocab.eos());
    ids.resize(max_len, vocab.pad());
    Ok(ids)
}

/// Checks the `[SOS] … [EOS] [PAD]…` layout and returns the EOS index.
pub fn validate_sequence(ids: &[usize], vocab: &Vocab) -> Result<usize> {
    if ids.first() != Some(&vocab.sos()) {
        return Err(Error::MalformedSequence("does not start with [SOS]".into()));
    }
    let eos_positions: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == vocab.eos())
        .map(|(i, _)| i)
        .collect();
    let [eos] = eos_positions[..] else {
        return Err(Error::MalformedSequence(format!(
            "expected one [EOS], found {}",
            eos_positions.len()
        )));
    };
    if ids[eos + 1..].iter().any(|&t| t != vocab.pad()) {
        return Err(Error::MalformedSequence("non-[PAD] token after [EOS]".into()));
    }
    if let Some(&bad) = ids[1..eos]
        .iter()
        .find(|&&t| t >= vocab.len() || t == vocab.pad() || t == vocab.sos())
    {
        return Err(Error::MalformedSequence(format!("token {bad} inside the caption")));
    }
    Ok(eos)
}

pub fn detokenize(ids: &[usize], vocab: &Vocab) -> Result<String> {
    let eos = validate_sequence(ids, vocab)?;
    let words: Vec<&str> = ids[1..eos]
        .iter()
        .map(|&i| vocab.token(i).expect("validated id"))
        .collect();
    Ok(words.join(" "))
}
