//! Word-level tokenizer with reserved control ids.
//!
//! Ids are stable hashes of lowercased words, so no vocabulary file is
//! needed and tokenization is identical across runs and platforms. Sentence
//! boundaries become SEP tokens; that placement is all the local alignment
//! machinery relies on.

use crate::caption::Caption;
use crate::encoder::TokenRole;

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
const RESERVED: u32 = 3;

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub vocab_size: u32,
}

/// Token ids plus the bookkeeping the encoders need.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedCaption {
    pub ids: Vec<u32>,
    pub roles: Vec<TokenRole>,
    /// Sentence index per token.
    pub sentence_of: Vec<usize>,
    /// Number of sentences actually encoded (>= 1 unless the caption is
    /// empty; may be less than the caption's count after truncation).
    pub sentence_count: usize,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Split into lowercased word tokens. Hyphens inside words are kept
/// (`bi-rads` stays one token); all other punctuation separates.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        let keep = c.is_alphanumeric() || (c == '-' && !current.is_empty());
        if keep {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            words.push(std::mem::take(&mut current).trim_matches('-').to_string());
        }
    }
    if !current.is_empty() {
        words.push(current.trim_matches('-').to_string());
    }
    words.retain(|w| !w.is_empty());
    words
}

impl Tokenizer {
    pub fn new(vocab_size: u32) -> Self {
        assert!(vocab_size > RESERVED, "vocab too small for reserved ids");
        Tokenizer { vocab_size }
    }

    pub fn word_id(&self, word: &str) -> u32 {
        RESERVED + (fnv1a(word) % (self.vocab_size - RESERVED) as u64) as u32
    }

    /// Tokenize sentence by sentence, appending SEP after each. Truncation
    /// drops whole trailing sentences first so SEP placement stays aligned
    /// with the encoded sentence count.
    pub fn tokenize(&self, caption: &Caption, max_tokens: usize) -> TokenizedCaption {
        let mut out = TokenizedCaption {
            ids: Vec::new(),
            roles: Vec::new(),
            sentence_of: Vec::new(),
            sentence_count: 0,
        };
        for (s_idx, sentence) in caption.sentences().enumerate() {
            let words = split_words(sentence);
            let needed = words.len() + 1;
            if out.ids.len() + needed > max_tokens {
                if out.sentence_count == 0 {
                    // a single oversized sentence: keep what fits plus SEP
                    let keep = max_tokens.saturating_sub(1);
                    for w in words.iter().take(keep) {
                        out.push(self.word_id(w), TokenRole::Word, 0);
                    }
                    out.push(SEP_ID, TokenRole::Sep, 0);
                    out.sentence_count = 1;
                }
                break;
            }
            for w in &words {
                out.push(self.word_id(w), TokenRole::Word, s_idx);
            }
            out.push(SEP_ID, TokenRole::Sep, s_idx);
            out.sentence_count = s_idx + 1;
        }
        out
    }
}

impl TokenizedCaption {
    fn push(&mut self, id: u32, role: TokenRole, sentence: usize) {
        self.ids.push(id);
        self.roles.push(role);
        self.sentence_of.push(sentence);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
