//! Closed token vocabulary for Match-3 sequences.
//!
//! Id layout is fixed so that ids only depend on `(dim, modulus, seq_len)`:
//!
//! | ids | tokens |
//! |-----|--------|
//! | 0..8 | `<pad> <bos> <eos> : ANS True False .` |
//! | 8..8+seq_len | position letters `A`, `B`, ... |
//! | next `modulus^dim` | fused tuple values `000` .. `999`, ascending |
//! | last `modulus` | single digits `0` .. `9` |

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const COT_START: TokenId = 3;
pub const ANS: TokenId = 4;
pub const TRUE: TokenId = 5;
pub const FALSE: TokenId = 6;
pub const FILLER: TokenId = 7;

pub const SPECIAL_TOKENS: [&str; 8] = ["<pad>", "<bos>", "<eos>", ":", "ANS", "True", "False", "."];
const NUM_SPECIALS: usize = SPECIAL_TOKENS.len();

const MAX_SEQ_LEN: usize = 26;
const MAX_VALUES: usize = 1_000_000;
const DIGIT_CHARS: &[u8] = b"0123456789abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("tuple dimension must be at least 1")]
    ZeroDim,
    #[error("modulus {0} outside supported range 2..=36")]
    Modulus(usize),
    #[error("sequence length {0} outside 3..=26 (one letter per position)")]
    SeqLen(usize),
    #[error("modulus^dim exceeds {MAX_VALUES} value tokens")]
    TooManyValues,
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} out of range")]
    IdOutOfRange(TokenId),
    #[error("token list does not match a ({dim}, {modulus}, {seq_len}) vocabulary")]
    Mismatch { dim: usize, modulus: usize, seq_len: usize },
}

/// Render a single digit.
pub fn digit_char(d: u8) -> char {
    DIGIT_CHARS[d as usize] as char
}

/// Letter naming tuple position `i` (`0 -> "A"`).
pub fn letter_token(i: usize) -> String {
    ((b'A' + i as u8) as char).to_string()
}

/// Fused value token for a tuple, e.g. `[1, 5] -> "15"`.
pub fn value_token(digits: &[u8]) -> String {
    digits.iter().map(|&d| digit_char(d)).collect()
}

/// Token for a single per-dimension sum digit.
///
/// With `dim == 1` the value tokens already occupy the bare digit strings,
/// so sum digits get a `=` prefix there to keep strings unique.
pub fn digit_token(d: u8, dim: usize) -> String {
    if dim == 1 {
        format!("={}", digit_char(d))
    } else {
        digit_char(d).to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub dim: usize,
    pub modulus: usize,
    pub seq_len: usize,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    dim: usize,
    modulus: usize,
    seq_len: usize,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.modulus == other.modulus
            && self.seq_len == other.seq_len
            && self.tokens == other.tokens
    }
}

impl Vocabulary {
    pub fn build(dim: usize, modulus: usize, seq_len: usize) -> Result<Self, VocabError> {
        if dim == 0 {
            return Err(VocabError::ZeroDim);
        }
        if !(2..=DIGIT_CHARS.len()).contains(&modulus) {
            return Err(VocabError::Modulus(modulus));
        }
        if !(3..=MAX_SEQ_LEN).contains(&seq_len) {
            return Err(VocabError::SeqLen(seq_len));
        }
        let n_values = checked_pow(modulus, dim).filter(|&n| n <= MAX_VALUES).ok_or(VocabError::TooManyValues)?;

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..seq_len).map(letter_token));
        let mut digits = vec![0u8; dim];
        for v in 0..n_values {
            let mut rest = v;
            for slot in digits.iter_mut().rev() {
                *slot = (rest % modulus) as u8;
                rest /= modulus;
            }
            tokens.push(value_token(&digits));
        }
        tokens.extend((0..modulus as u8).map(|d| digit_token(d, dim)));

        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        Ok(Self { dim, modulus, seq_len, tokens, index })
    }

    /// Rebuild from a serialized spec, checking the token list is the canonical one.
    pub fn from_spec(spec: &VocabSpec) -> Result<Self, VocabError> {
        let vocab = Self::build(spec.dim, spec.modulus, spec.seq_len)?;
        if vocab.tokens != spec.tokens {
            return Err(VocabError::Mismatch { dim: spec.dim, modulus: spec.modulus, seq_len: spec.seq_len });
        }
        Ok(vocab)
    }

    pub fn spec(&self) -> VocabSpec {
        VocabSpec { dim: self.dim, modulus: self.modulus, seq_len: self.seq_len, tokens: self.tokens.clone() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modulus(&self) -> usize {
        self.modulus
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<TokenId, VocabError> {
        self.index.get(token).copied().ok_or_else(|| VocabError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Result<&str, VocabError> {
        self.tokens.get(id as usize).map(String::as_str).ok_or(VocabError::IdOutOfRange(id))
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>, VocabError> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>, VocabError> {
        ids.iter().map(|&id| self.token(id).map(str::to_string)).collect()
    }

    /// Space-joined rendering, for logs and reports.
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.token(id).unwrap_or("<?>")).collect::<Vec<_>>().join(" ")
    }

    pub fn letter_id(&self, position: usize) -> TokenId {
        debug_assert!(position < self.seq_len);
        (NUM_SPECIALS + position) as TokenId
    }

    pub fn value_id(&self, digits: &[u8]) -> TokenId {
        debug_assert_eq!(digits.len(), self.dim);
        let v = digits.iter().fold(0usize, |acc, &d| acc * self.modulus + d as usize);
        (self.values_start() + v) as TokenId
    }

    pub fn digit_id(&self, d: u8) -> TokenId {
        debug_assert!((d as usize) < self.modulus);
        (self.digits_start() + d as usize) as TokenId
    }

    fn values_start(&self) -> usize {
        NUM_SPECIALS + self.seq_len
    }

    fn digits_start(&self) -> usize {
        self.len() - self.modulus
    }

    /// Position index for a letter token.
    pub fn letter_position(&self, id: TokenId) -> Option<usize> {
        let id = id as usize;
        (NUM_SPECIALS..self.values_start()).contains(&id).then(|| id - NUM_SPECIALS)
    }

    /// Tuple digits for a value token.
    pub fn value_digits(&self, id: TokenId) -> Option<Vec<u8>> {
        let id = id as usize;
        if !(self.values_start()..self.digits_start()).contains(&id) {
            return None;
        }
        let mut rest = id - self.values_start();
        let mut digits = vec![0u8; self.dim];
        for slot in digits.iter_mut().rev() {
            *slot = (rest % self.modulus) as u8;
            rest /= self.modulus;
        }
        Some(digits)
    }

    pub fn digit_value(&self, id: TokenId) -> Option<u8> {
        let id = id as usize;
        (self.digits_start()..self.len()).contains(&id).then(|| (id - self.digits_start()) as u8)
    }

    pub fn bool_id(label: bool) -> TokenId {
        if label {
            TRUE
        } else {
            FALSE
        }
    }
}

fn checked_pow(base: usize, exp: usize) -> Option<usize> {
    (0..exp).try_fold(1usize, |acc, _| acc.checked_mul(base))
}
