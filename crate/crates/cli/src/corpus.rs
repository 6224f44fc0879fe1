//! Character-level tokenizer and fixed-length chunking.

use std::collections::BTreeSet;
use std::path::Path;

use cedd_core::{Token, TokenSequence};

use crate::error::{io_err, CliError, Result};

/// Id of the unknown-character token; known characters start at 1.
pub const UNK: Token = 0;
const UNK_CHAR: char = '\u{FFFD}';

/// Sorted unique characters of a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Charset {
    chars: Vec<char>,
}

impl Charset {
    pub fn from_text(text: &str) -> Result<Self> {
        let set: BTreeSet<char> = text.chars().collect();
        if set.is_empty() {
            return Err(CliError::EmptyCorpus);
        }
        Ok(Self { chars: set.into_iter().collect() })
    }

    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let set: BTreeSet<char> = chars.into_iter().collect();
        if set.is_empty() {
            return Err(CliError::EmptyCorpus);
        }
        Ok(Self { chars: set.into_iter().collect() })
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Number of data tokens, the unknown token included.
    pub fn data_tokens(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn id(&self, c: char) -> Token {
        self.chars.binary_search(&c).map_or(UNK, |i| i + 1)
    }

    pub fn char(&self, id: Token) -> Option<char> {
        match id {
            UNK => Some(UNK_CHAR),
            i => self.chars.get(i - 1).copied(),
        }
    }

    /// Token ids and the number of characters mapped to [`UNK`].
    pub fn tokenize(&self, text: &str) -> (Vec<Token>, usize) {
        let mut unknown = 0;
        let ids = text
            .chars()
            .map(|c| {
                let id = self.id(c);
                unknown += usize::from(id == UNK);
                id
            })
            .collect();
        (ids, unknown)
    }

    /// Ids outside the charset (the mask token, for instance) render as `_`.
    pub fn detokenize(&self, ids: &[Token]) -> String {
        ids.iter().map(|&i| self.char(i).unwrap_or('_')).collect()
    }
}

/// Non-overlapping chunks of length `len`; the trailing remainder is dropped.
pub fn chunk(ids: &[Token], len: usize) -> (Vec<TokenSequence>, usize) {
    let chunks = ids.chunks_exact(len);
    let dropped = chunks.remainder().len();
    (chunks.map(|c| TokenSequence::new(c.to_vec())).collect(), dropped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub charset: Charset,
    pub train: Vec<TokenSequence>,
    pub eval: Vec<TokenSequence>,
    pub unknown: usize,
    pub dropped: usize,
    pub chars: usize,
}

impl Corpus {
    /// Tokenizes with `charset`, or with the text's own charset when `None`.
    pub fn from_text(text: &str, len: usize, eval_fraction: f64, charset: Option<Charset>) -> Result<Self> {
        if text.is_empty() {
            return Err(CliError::EmptyCorpus);
        }
        let charset = match charset {
            Some(c) => c,
            None => Charset::from_text(text)?,
        };
        let (ids, unknown) = charset.tokenize(text);
        let (mut train, dropped) = chunk(&ids, len);
        if train.is_empty() {
            return Err(CliError::EmptyCorpus);
        }
        let n_eval = (train.len() as f64 * eval_fraction).round() as usize;
        let n_eval = n_eval.min(train.len() - 1);
        let eval = train.split_off(train.len() - n_eval);
        Ok(Self { charset, train, eval, unknown, dropped, chars: ids.len() })
    }

    pub fn load(path: &Path, len: usize, eval_fraction: f64, charset: Option<Charset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_text(&text, len, eval_fraction, charset)
    }

    pub fn unknown_ratio(&self) -> f64 {
        self.unknown as f64 / self.chars.max(1) as f64
    }

    /// Held-out chunks, or the training chunks when nothing was held out.
    pub fn eval_or_train(&self) -> &[TokenSequence] {
        if self.eval.is_empty() {
            &self.train
        } else {
            &self.eval
        }
    }
}
