//! WordPiece tokenization: lowercase, split on whitespace and punctuation,
//! then greedy longest-match-first over the vocabulary.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const CONTINUATION: &str = "##";

/// Words longer than this many characters map straight to `[UNK]`.
pub const MAX_CHARS_PER_WORD: usize = 100;

const FIXTURE_VOCAB: &str = include_str!("../assets/vocab.txt");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    unk: usize,
    cls: usize,
    sep: usize,
    mask: usize,
}

impl Vocab {
    /// Builds a vocabulary where a token's id is its index. `[PAD]` must be id 0
    /// and every reserved token must appear exactly once.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("token {t:?} appears twice in the vocabulary")));
            }
        }
        let need = |name: &str| {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("vocabulary lacks reserved token {name}")))
        };
        if need(PAD)? != 0 {
            return Err(Error::Config("[PAD] must have id 0".into()));
        }
        let (unk, cls, sep, mask) = (need(UNK)?, need(CLS)?, need(SEP)?, need(MASK)?);
        Ok(Self {
            tokens,
            ids,
            unk,
            cls,
            sep,
            mask,
        })
    }

    /// One token per line; the line number is the id.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(
            text.lines()
                .map(|l| l.trim_end_matches('\r').to_string())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The small vocabulary shipped with the crate.
    pub fn fixture() -> Self {
        Self::parse(FIXTURE_VOCAB).expect("bundled vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> usize {
        0
    }
    pub fn unk_id(&self) -> usize {
        self.unk
    }
    pub fn cls_id(&self) -> usize {
        self.cls
    }
    pub fn sep_id(&self) -> usize {
        self.sep
    }
    pub fn mask_id(&self) -> usize {
        self.mask
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == 0 || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub attention_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of leading non-pad tokens.
    pub fn content_len(&self) -> usize {
        self.attention_mask.iter().take_while(|&&b| b).count()
    }

    /// Copy with the padding tail removed.
    pub fn trimmed(&self) -> TokenSequence {
        let n = self.content_len();
        TokenSequence {
            token_ids: self.token_ids[..n].to_vec(),
            segment_ids: self.segment_ids[..n].to_vec(),
            positions: self.positions[..n].to_vec(),
            attention_mask: self.attention_mask[..n].to_vec(),
        }
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let n = self.token_ids.len();
        if self.segment_ids.len() != n || self.positions.len() != n || self.attention_mask.len() != n {
            return Err(Error::Dim("token sequence fields differ in length".into()));
        }
        if let Some(&bad) = self.token_ids.iter().find(|&&t| t >= vocab.len()) {
            return Err(Error::Index(format!(
                "token id {bad} outside vocabulary of {}",
                vocab.len()
            )));
        }
        let k = self.content_len();
        if k < 2 || self.token_ids[0] != vocab.cls_id() || self.token_ids[k - 1] != vocab.sep_id() {
            return Err(Error::Input("sequence must be [CLS] ... [SEP]".into()));
        }
        if self.attention_mask[k..].iter().any(|&b| b) {
            return Err(Error::Input("attention mask is not a prefix".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vocab,
    lowercase: bool,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace())
}

impl Tokenizer {
    pub fn new(vocab: Vocab) -> Self {
        Self { vocab, lowercase: true }
    }

    pub fn with_lowercase(mut self, lowercase: bool) -> Self {
        self.lowercase = lowercase;
        self
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Lowercases (if enabled) and splits into words, with each punctuation
    /// character as its own word.
    pub fn basic_split(&self, text: &str) -> Vec<String> {
        let text = if self.lowercase {
            text.to_lowercase()
        } else {
            text.to_string()
        };
        let mut words = Vec::new();
        let mut cur = String::new();
        for c in text.chars() {
            if c.is_whitespace() || c.is_control() {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
            } else if is_punct(c) {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        words
    }

    /// Greedy longest-match-first pieces of one word; `None` if the word has
    /// no decomposition.
    pub fn wordpiece(&self, word: &str) -> Option<Vec<usize>> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() || chars.len() > MAX_CHARS_PER_WORD {
            return None;
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, CONTINUATION);
                }
                if let Some(id) = self.vocab.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            out.push(found?);
            start = end;
        }
        Some(out)
    }

    pub fn is_oov(&self, word: &str) -> bool {
        self.wordpiece(word).is_none()
    }

    /// Subword ids of `text` without special tokens or padding.
    pub fn encode_words(&self, text: &str) -> Vec<usize> {
        self.basic_split(text)
            .iter()
            .flat_map(|w| self.wordpiece(w).unwrap_or_else(|| vec![self.vocab.unk_id()]))
            .collect()
    }

    /// `[CLS] pieces [SEP]` padded to `max_len`; pieces are truncated so both
    /// specials always survive.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        if self.vocab.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        if max_len < 3 {
            return Err(Error::Config(format!("max_len {max_len} leaves no room for a token")));
        }
        let mut pieces = self.encode_words(text);
        pieces.truncate(max_len - 2);
        let mut token_ids = Vec::with_capacity(max_len);
        token_ids.push(self.vocab.cls_id());
        token_ids.extend(pieces);
        token_ids.push(self.vocab.sep_id());
        let used = token_ids.len();
        token_ids.resize(max_len, self.vocab.pad_id());
        Ok(TokenSequence {
            token_ids,
            segment_ids: vec![0; max_len],
            positions: (0..max_len).collect(),
            attention_mask: (0..max_len).map(|i| i < used).collect(),
        })
    }

    /// Joins subwords, gluing `##` continuations and dropping special tokens.
    pub fn detokenize(&self, seq: &TokenSequence) -> Result<String> {
        self.decode_ids(&seq.token_ids)
    }

    pub fn decode_ids(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .vocab
                .token(id)
                .ok_or_else(|| Error::Index(format!("token id {id} outside vocabulary of {}", self.vocab.len())))?;
            if self.vocab.is_special(id) && id != self.vocab.unk_id() {
                continue;
            }
            if let Some(rest) = tok.strip_prefix(CONTINUATION) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        Ok(out)
    }

    /// Lowercased, punctuation-separated, single-spaced form of `text`;
    /// `detokenize ∘ tokenize` is the identity on in-vocabulary text up to this.
    pub fn normalize(&self, text: &str) -> String {
        self.basic_split(text).join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        let toks = [PAD, UNK, CLS, SEP, MASK, "un", "##able", "cat"];
        Tokenizer::new(Vocab::from_tokens(toks.iter().map(|s| s.to_string()).collect()).unwrap())
    }

    #[test]
    fn empty_text_is_cls_sep_and_padding() {
        let t = toy();
        let s = t.tokenize("", 5).unwrap();
        assert_eq!(s.token_ids, vec![2, 3, 0, 0, 0]);
        assert_eq!(s.attention_mask, vec![true, true, false, false, false]);
        assert_eq!(s.positions, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn greedy_longest_match() {
        let t = toy();
        let s = t.tokenize("unable", 6).unwrap();
        assert_eq!(&s.token_ids[..4], &[2, 5, 6, 3]);
        assert_eq!(t.detokenize(&s).unwrap(), "unable");
    }

    #[test]
    fn unknown_word_becomes_unk() {
        let t = toy();
        let s = t.tokenize("zebra", 4).unwrap();
        assert_eq!(&s.token_ids[..3], &[2, 1, 3]);
    }

    #[test]
    fn truncation_keeps_specials() {
        let t = toy();
        let s = t.tokenize("cat cat cat cat cat", 4).unwrap();
        assert_eq!(s.token_ids, vec![2, 7, 7, 3]);
        s.validate(t.vocab()).unwrap();
    }

    #[test]
    fn errors() {
        let t = toy();
        assert!(matches!(t.tokenize("cat", 2), Err(Error::Config(_))));
        assert!(matches!(Vocab::from_tokens(vec![]), Err(Error::Config(_))));
        assert!(matches!(t.decode_ids(&[99]), Err(Error::Index(_))));
        let dup = [PAD, UNK, CLS, SEP, MASK, MASK];
        assert!(Vocab::from_tokens(dup.iter().map(|s| s.to_string()).collect()).is_err());
    }

    #[test]
    fn overlong_word_is_unk() {
        let t = toy();
        let long = "un".repeat(51);
        assert_eq!(t.encode_words(&long), vec![1]);
    }

    #[test]
    fn specials_dropped_on_decode() {
        let t = toy();
        assert_eq!(t.decode_ids(&[2, 3]).unwrap(), "");
    }

    #[test]
    fn fixture_vocab_loads() {
        let v = Vocab::fixture();
        assert_eq!(v.pad_id(), 0);
        assert!(v.id("cat").is_some());
        let t = Tokenizer::new(v);
        assert_eq!(t.normalize("A Cat, near  the TREE."), "a cat , near the tree .");
    }
}
