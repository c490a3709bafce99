//! Tokenizers for the supported encoder families.
//!
//! * [`HashingTokenizer`]: word-level feature hashing for the tiny test encoder.
//! * [`WordPiece`]: BERT-style basic tokenization plus greedy longest-match
//!   subwords, driven by a `vocab.txt`.
//! * [`ByteLevelBpe`]: GPT-2/RoBERTa byte-level BPE driven by `vocab.json`
//!   and `merges.txt`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use icu_normalizer::DecomposingNormalizerBorrowed;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token ids for one text, already wrapped in the family's special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedInput {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    /// Set when content tokens were dropped to respect the length cap.
    pub truncated: bool,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub cls: u32,
    pub sep: u32,
    pub pad: u32,
    pub unk: u32,
}

#[derive(Debug, Clone)]
pub enum Tokenizer {
    Hashing(HashingTokenizer),
    WordPiece(WordPiece),
    ByteBpe(ByteLevelBpe),
}

impl Tokenizer {
    pub fn special(&self) -> SpecialIds {
        match self {
            Tokenizer::Hashing(_) => HashingTokenizer::SPECIAL,
            Tokenizer::WordPiece(w) => w.special,
            Tokenizer::ByteBpe(b) => b.special,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Hashing(h) => h.vocab_size,
            Tokenizer::WordPiece(w) => w.vocab.len(),
            Tokenizer::ByteBpe(b) => b.vocab.len(),
        }
    }

    /// Content token ids without special tokens.
    pub fn content_ids(&self, text: &str) -> Vec<u32> {
        match self {
            Tokenizer::Hashing(h) => h.content_ids(text),
            Tokenizer::WordPiece(w) => w.content_ids(text),
            Tokenizer::ByteBpe(b) => b.content_ids(text),
        }
    }

    /// `[CLS] content [SEP]`, truncated so the total length is at most `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenizedInput> {
        if max_len < 2 {
            return Err(Error::Encoder(format!(
                "max sequence length {max_len} leaves no room for special tokens"
            )));
        }
        let sp = self.special();
        let mut content = self.content_ids(text);
        let room = max_len - 2;
        let truncated = content.len() > room;
        content.truncate(room);
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(sp.cls);
        ids.extend(content);
        ids.push(sp.sep);
        let attention_mask = vec![1; ids.len()];
        Ok(TokenizedInput {
            ids,
            attention_mask,
            truncated,
        })
    }
}

/// Splits into lowercase alphanumeric words and single punctuation marks.
fn simple_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() && !c.is_control() {
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashingTokenizer {
    pub vocab_size: usize,
}

impl HashingTokenizer {
    pub const SPECIAL: SpecialIds = SpecialIds {
        pad: 0,
        unk: 1,
        cls: 2,
        sep: 3,
    };
    const RESERVED: u64 = 4;

    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > Self::RESERVED as usize);
        Self { vocab_size }
    }

    fn fnv1a(word: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn content_ids(&self, text: &str) -> Vec<u32> {
        let buckets = self.vocab_size as u64 - Self::RESERVED;
        simple_words(text)
            .iter()
            .map(|w| (Self::RESERVED + Self::fnv1a(w) % buckets) as u32)
            .collect()
    }
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn lookup(vocab: &HashMap<String, u32>, tok: &str) -> Result<u32> {
    vocab
        .get(tok)
        .copied()
        .ok_or_else(|| Error::Encoder(format!("vocabulary lacks special token {tok}")))
}

#[derive(Debug, Clone)]
pub struct WordPiece {
    vocab: HashMap<String, u32>,
    special: SpecialIds,
    lowercase: bool,
    max_word_chars: usize,
}

impl WordPiece {
    /// Reads `vocab.txt` (one token per line, id = line number).
    pub fn from_vocab_file(path: &Path, lowercase: bool) -> Result<Self> {
        Self::from_vocab(read_text(path)?.lines().map(str::to_string), lowercase)
    }

    pub fn from_vocab<I: IntoIterator<Item = String>>(tokens: I, lowercase: bool) -> Result<Self> {
        let vocab: HashMap<String, u32> = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| (t, i as u32))
            .collect();
        let special = SpecialIds {
            cls: lookup(&vocab, "[CLS]")?,
            sep: lookup(&vocab, "[SEP]")?,
            pad: lookup(&vocab, "[PAD]")?,
            unk: lookup(&vocab, "[UNK]")?,
        };
        Ok(Self {
            vocab,
            special,
            lowercase,
            max_word_chars: 100,
        })
    }

    fn is_punct(c: char) -> bool {
        let cp = c as u32;
        (33..=47).contains(&cp)
            || (58..=64).contains(&cp)
            || (91..=96).contains(&cp)
            || (123..=126).contains(&cp)
            || (0x2000..=0x206F).contains(&cp)
            || (0x3000..=0x303F).contains(&cp)
            || (0xFF01..=0xFF0F).contains(&cp)
            || matches!(c, '¡' | '¿' | '«' | '»' | '§' | '¶' | '·')
    }

    fn is_cjk(c: char) -> bool {
        let cp = c as u32;
        (0x4E00..=0x9FFF).contains(&cp)
            || (0x3400..=0x4DBF).contains(&cp)
            || (0x20000..=0x2A6DF).contains(&cp)
            || (0x2A700..=0x2B81F).contains(&cp)
            || (0xF900..=0xFAFF).contains(&cp)
            || (0x2F800..=0x2FA1F).contains(&cp)
    }

    fn is_combining_mark(c: char) -> bool {
        let cp = c as u32;
        (0x0300..=0x036F).contains(&cp)
            || (0x1AB0..=0x1AFF).contains(&cp)
            || (0x1DC0..=0x1DFF).contains(&cp)
            || (0x20D0..=0x20FF).contains(&cp)
            || (0xFE20..=0xFE2F).contains(&cp)
    }

    fn basic_tokens(&self, text: &str) -> Vec<String> {
        let mut cleaned = String::with_capacity(text.len());
        for c in text.chars() {
            if c == '\0' || c == '\u{FFFD}' {
                continue;
            }
            if c.is_whitespace() {
                cleaned.push(' ');
            } else if c.is_control() {
                continue;
            } else if Self::is_cjk(c) {
                cleaned.push(' ');
                cleaned.push(c);
                cleaned.push(' ');
            } else {
                cleaned.push(c);
            }
        }
        let mut out = Vec::new();
        for word in cleaned.split_whitespace() {
            let word: String = if self.lowercase {
                let lower = word.to_lowercase();
                DecomposingNormalizerBorrowed::new_nfd()
                    .normalize(&lower)
                    .chars()
                    .filter(|c| !Self::is_combining_mark(*c))
                    .collect()
            } else {
                word.to_string()
            };
            let mut cur = String::new();
            for c in word.chars() {
                if Self::is_punct(c) {
                    if !cur.is_empty() {
                        out.push(std::mem::take(&mut cur));
                    }
                    out.push(c.to_string());
                } else {
                    cur.push(c);
                }
            }
            if !cur.is_empty() {
                out.push(cur);
            }
        }
        out
    }

    fn word_pieces(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > self.max_word_chars {
            out.push(self.special.unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut sub: String = chars[start..end].iter().collect();
                if start > 0 {
                    sub.insert_str(0, "##");
                }
                if let Some(&id) = self.vocab.get(&sub) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.special.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    pub fn content_ids(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in self.basic_tokens(text) {
            self.word_pieces(&w, &mut out);
        }
        out
    }
}

/// GPT-2 byte to printable-unicode table.
fn byte_alphabet() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut n = 0u32;
    for b in 0..=255u32 {
        let printable =
            (33..=126).contains(&b) || (161..=172).contains(&b) || (174..=255).contains(&b);
        table[b as usize] = if printable {
            char::from_u32(b).unwrap()
        } else {
            let c = char::from_u32(256 + n).unwrap();
            n += 1;
            c
        };
    }
    table
}

#[derive(Debug, Clone)]
pub struct ByteLevelBpe {
    vocab: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    alphabet: [char; 256],
    special: SpecialIds,
}

impl ByteLevelBpe {
    pub fn from_files(vocab_json: &Path, merges_txt: &Path) -> Result<Self> {
        let vocab: HashMap<String, u32> = serde_json::from_str(&read_text(vocab_json)?)?;
        let merges = read_text(merges_txt)?;
        Self::new(vocab, merges.lines())
    }

    pub fn new<'a, I: IntoIterator<Item = &'a str>>(
        vocab: HashMap<String, u32>,
        merges: I,
    ) -> Result<Self> {
        let mut ranks = HashMap::new();
        for line in merges {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::Encoder(format!("bad merge line `{line}`")))?;
            let r = ranks.len();
            ranks.entry((a.to_string(), b.to_string())).or_insert(r);
        }
        let special = SpecialIds {
            cls: lookup(&vocab, "<s>")?,
            sep: lookup(&vocab, "</s>")?,
            pad: lookup(&vocab, "<pad>")?,
            unk: lookup(&vocab, "<unk>")?,
        };
        Ok(Self {
            vocab,
            ranks,
            alphabet: byte_alphabet(),
            special,
        })
    }

    /// GPT-2 pre-tokenization: contractions, ` ?letters`, ` ?digits`,
    /// ` ?other`, and whitespace runs that leave one space for the next word.
    pub fn pre_tokenize(text: &str) -> Vec<&str> {
        #[derive(PartialEq)]
        enum Class {
            Letter,
            Number,
            Other,
            Space,
        }
        fn class(c: char) -> Class {
            if c.is_whitespace() {
                Class::Space
            } else if c.is_alphabetic() {
                Class::Letter
            } else if c.is_numeric() {
                Class::Number
            } else {
                Class::Other
            }
        }
        const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];

        let idx: Vec<(usize, char)> = text.char_indices().collect();
        let end_of = |k: usize| idx.get(k).map_or(text.len(), |p| p.0);
        let mut out = Vec::new();
        let mut k = 0;
        while k < idx.len() {
            let (start, c) = idx[k];
            if c == '\'' {
                if let Some(m) = CONTRACTIONS.iter().find(|m| text[start..].starts_with(**m)) {
                    out.push(&text[start..start + m.len()]);
                    k += m.chars().count();
                    continue;
                }
            }
            let mut j = k;
            if c == ' ' && idx.get(k + 1).is_some_and(|p| class(p.1) != Class::Space) {
                j += 1;
            }
            let cls = class(idx[j].1);
            if cls != Class::Space {
                j += 1;
                while j < idx.len() && class(idx[j].1) == cls {
                    j += 1;
                }
                out.push(&text[start..end_of(j)]);
                k = j;
                continue;
            }
            let mut e = k;
            while e < idx.len() && class(idx[e].1) == Class::Space {
                e += 1;
            }
            if e < idx.len() && e - k > 1 {
                e -= 1;
            }
            out.push(&text[start..end_of(e)]);
            k = e;
        }
        out
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut parts: Vec<String> = word
            .bytes()
            .map(|b| self.alphabet[b as usize].to_string())
            .collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let (a, b) = (parts[i].clone(), parts[i + 1].clone());
            let mut merged = Vec::with_capacity(parts.len());
            let mut p = 0;
            while p < parts.len() {
                if p + 1 < parts.len() && parts[p] == a && parts[p + 1] == b {
                    merged.push(format!("{a}{b}"));
                    p += 2;
                } else {
                    merged.push(std::mem::take(&mut parts[p]));
                    p += 1;
                }
            }
            parts = merged;
        }
        parts
    }

    pub fn content_ids(&self, text: &str) -> Vec<u32> {
        Self::pre_tokenize(text)
            .into_iter()
            .flat_map(|w| self.bpe(w))
            .map(|p| self.vocab.get(&p).copied().unwrap_or(self.special.unk))
            .collect()
    }
}
