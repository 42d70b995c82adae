//! Greedy longest-match wordpiece tokenization with BERT-style special tokens.
//!
//! Text is lowercased (ASCII only), split on whitespace and ASCII punctuation,
//! and each word is segmented greedily into the longest vocabulary pieces,
//! continuation pieces carrying the `##` prefix. A word that cannot be fully
//! segmented becomes a single `[UNK]`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Reserved tokens, in the order they must open a vocab file.
pub const RESERVED: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

pub const CONTINUATION_PREFIX: &str = "##";

const MAX_WORD_CHARS: usize = 100;

const DEFAULT_VOCAB: &str = include_str!("../assets/vocab.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        for (i, reserved) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*reserved) {
                return Err(Error::Config(format!(
                    "vocab line {} must be {reserved}",
                    i + 1
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Config(format!("vocab line {} is empty", i + 1)));
            }
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Config(format!(
                    "duplicate vocab token {tok:?} at line {}",
                    i + 1
                )));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Parses the one-token-per-line format.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(
            text.lines()
                .map(|l| l.trim_end_matches('\r').to_string())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    /// The vocabulary bundled with the crate, covering the synthetic tasks.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_VOCAB).expect("bundled vocab is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// What replaces tokens that are not kept by a top-k selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// Swap the token for `[MASK]` in place.
    #[default]
    ReplaceWithMask,
    /// Drop the token, shift the survivors left and pad the tail.
    DeleteAndRepad,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// `true` for every non-`[PAD]` position.
    pub attention_mask: Vec<bool>,
    pub tokens: Vec<String>,
    /// Byte span of each piece in the source text; `None` for specials.
    pub spans: Vec<Option<(usize, usize)>>,
    /// Index of the pre-tokenized word each piece came from.
    pub word_ids: Vec<Option<usize>>,
    /// Set when the sequence was produced by [`apply_mask`].
    pub mask_policy: Option<MaskPolicy>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `[CLS]`, `[SEP]` and `[PAD]` positions.
    pub fn is_special(&self, i: usize) -> bool {
        matches!(self.ids[i], CLS_ID | SEP_ID | PAD_ID)
    }

    /// Real, non-special positions in order.
    pub fn real_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_special(i)).collect()
    }

    pub fn real_count(&self) -> usize {
        (0..self.len()).filter(|&i| !self.is_special(i)).count()
    }

    /// Positions whose source word is in `words`.
    pub fn positions_of_words(&self, words: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.word_ids[i].is_some_and(|w| words.contains(&w)))
            .collect()
    }

    /// Re-pads a sequence to a longer length with `[PAD]`.
    pub fn padded_to(&self, n: usize) -> Result<TokenSequence> {
        if n < self.len() {
            return Err(Error::Contract(format!(
                "cannot pad length {} down to {n}",
                self.len()
            )));
        }
        let mut out = self.clone();
        let extra = n - self.len();
        out.ids.extend(std::iter::repeat_n(PAD_ID, extra));
        out.attention_mask.extend(std::iter::repeat_n(false, extra));
        out.tokens.extend(std::iter::repeat_n(PAD.to_string(), extra));
        out.spans.extend(std::iter::repeat_n(None, extra));
        out.word_ids.extend(std::iter::repeat_n(None, extra));
        Ok(out)
    }
}

/// A whitespace/punctuation-delimited word with its byte span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub span: (usize, usize),
}

/// Lowercases ASCII and splits on whitespace and ASCII punctuation, keeping
/// each punctuation character as its own word.
pub fn pre_tokenize(text: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut current: Option<(usize, String)> = None;
    let flush = |current: &mut Option<(usize, String)>, end: usize, words: &mut Vec<Word>| {
        if let Some((start, text)) = current.take() {
            words.push(Word {
                text,
                span: (start, end),
            });
        }
    };
    for (pos, ch) in text.char_indices() {
        if ch.is_whitespace() {
            flush(&mut current, pos, &mut words);
        } else if ch.is_ascii_punctuation() {
            flush(&mut current, pos, &mut words);
            words.push(Word {
                text: ch.to_string(),
                span: (pos, pos + ch.len_utf8()),
            });
        } else {
            current
                .get_or_insert_with(|| (pos, String::new()))
                .1
                .push(ch.to_ascii_lowercase());
        }
    }
    flush(&mut current, text.len(), &mut words);
    words
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocab,
}

impl Tokenizer {
    pub fn new(vocab: Vocab) -> Self {
        Tokenizer { vocab }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Splits one word into pieces as `(id, piece, byte range within word)`.
    pub fn wordpiece(&self, word: &str) -> Vec<(u32, String, (usize, usize))> {
        if word.chars().count() > MAX_WORD_CHARS {
            return vec![(UNK_ID, UNK.to_string(), (0, word.len()))];
        }
        let boundaries: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < boundaries.len() - 1 {
            let mut found = None;
            for end in (start + 1..boundaries.len()).rev() {
                let sub = &word[boundaries[start]..boundaries[end]];
                let candidate = if start > 0 {
                    format!("{CONTINUATION_PREFIX}{sub}")
                } else {
                    sub.to_string()
                };
                if let Some(id) = self.vocab.id(&candidate) {
                    found = Some((id, candidate, end));
                    break;
                }
            }
            match found {
                Some((id, piece, end)) => {
                    pieces.push((id, piece, (boundaries[start], boundaries[end])));
                    start = end;
                }
                None => return vec![(UNK_ID, UNK.to_string(), (0, word.len()))],
            }
        }
        pieces
    }

    /// Encodes `text` to exactly `n` positions: `[CLS]`, up to `n - 2` pieces,
    /// `[SEP]`, then `[PAD]` fill.
    pub fn encode(&self, text: &str, n: usize) -> Result<TokenSequence> {
        if n < 3 {
            return Err(Error::Config(format!("sequence length {n} < 3")));
        }
        let mut seq = TokenSequence {
            ids: vec![CLS_ID],
            attention_mask: vec![true],
            tokens: vec![CLS.to_string()],
            spans: vec![None],
            word_ids: vec![None],
            mask_policy: None,
        };
        'words: for (w, word) in pre_tokenize(text).iter().enumerate() {
            for (id, piece, (a, b)) in self.wordpiece(&word.text) {
                if seq.ids.len() == n - 1 {
                    break 'words;
                }
                seq.ids.push(id);
                seq.attention_mask.push(true);
                seq.tokens.push(piece);
                seq.spans.push(Some((word.span.0 + a, word.span.0 + b)));
                seq.word_ids.push(Some(w));
            }
        }
        seq.ids.push(SEP_ID);
        seq.attention_mask.push(true);
        seq.tokens.push(SEP.to_string());
        seq.spans.push(None);
        seq.word_ids.push(None);
        seq.padded_to(n)
    }

    /// Token strings for `ids`, specials included.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.vocab.token(id).unwrap_or(UNK).to_string())
            .collect()
    }
}

/// Drops `[CLS]`, `[SEP]` and `[PAD]` from decoded pieces.
pub fn strip_specials(pieces: &[String]) -> Vec<String> {
    pieces
        .iter()
        .filter(|p| !matches!(p.as_str(), CLS | SEP | PAD))
        .cloned()
        .collect()
}

/// Number of tokens selected by a top-k fraction: `ceil(k · real_count)`.
///
/// A tiny slack absorbs binary rounding, so `0.7 · 10` selects 7, not 8.
pub fn keep_count(k: f64, real_count: usize) -> usize {
    let raw = (k * real_count as f64 - 1e-9).ceil();
    (raw.max(0.0) as usize).min(real_count)
}

/// Replaces every real, non-special position not in `keep` according to
/// `policy`. Specials and padding are never touched; the length never changes.
pub fn apply_mask(
    seq: &TokenSequence,
    keep: &BTreeSet<usize>,
    policy: MaskPolicy,
) -> Result<TokenSequence> {
    if let Some(&bad) = keep.iter().find(|&&i| i >= seq.len() || seq.is_special(i)) {
        return Err(Error::Contract(format!(
            "keep set contains special or out-of-range position {bad}"
        )));
    }
    let mut out = match policy {
        MaskPolicy::ReplaceWithMask => {
            let mut out = seq.clone();
            for i in seq.real_positions() {
                if !keep.contains(&i) {
                    out.ids[i] = MASK_ID;
                    out.tokens[i] = MASK.to_string();
                }
            }
            out
        }
        MaskPolicy::DeleteAndRepad => {
            let mut out = TokenSequence {
                ids: Vec::with_capacity(seq.len()),
                attention_mask: Vec::with_capacity(seq.len()),
                tokens: Vec::with_capacity(seq.len()),
                spans: Vec::with_capacity(seq.len()),
                word_ids: Vec::with_capacity(seq.len()),
                mask_policy: None,
            };
            for i in 0..seq.len() {
                if seq.ids[i] == PAD_ID || (!seq.is_special(i) && !keep.contains(&i)) {
                    continue;
                }
                out.ids.push(seq.ids[i]);
                out.attention_mask.push(true);
                out.tokens.push(seq.tokens[i].clone());
                out.spans.push(seq.spans[i]);
                out.word_ids.push(seq.word_ids[i]);
            }
            out.padded_to(seq.len())?
        }
    };
    out.mask_policy = Some(policy);
    Ok(out)
}
