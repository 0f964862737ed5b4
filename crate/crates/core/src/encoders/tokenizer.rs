//! Byte-level byte-pair-encoding tokenizer compatible with the pretrained
//! text tower's vocabulary layout.
//!
//! The vocabulary is derived entirely from the merge list: 256 byte symbols,
//! the same symbols with an end-of-word marker, one entry per merge, then the
//! start and end markers. With an empty merge list this degenerates to a
//! 514-entry byte-level vocabulary, which the miniature models use.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use regex::Regex;

use crate::error::{Error, Result};

pub const START_OF_TEXT: &str = "<|startoftext|>";
pub const END_OF_TEXT: &str = "<|endoftext|>";
pub const DEFAULT_CONTEXT: usize = 77;

const WORD_END: &str = "</w>";

/// Token ids for one prompt, including start and end markers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    /// Set when the prompt exceeded the context and was cut.
    pub truncated: bool,
}

#[derive(Debug)]
pub struct Tokenizer {
    merges: Vec<(String, String)>,
    encoder: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    pattern: Regex,
    context: usize,
    sot: usize,
    eot: usize,
    cache: Mutex<HashMap<String, Vec<String>>>,
}

impl Clone for Tokenizer {
    fn clone(&self) -> Self {
        Self {
            merges: self.merges.clone(),
            encoder: self.encoder.clone(),
            ranks: self.ranks.clone(),
            byte_encoder: self.byte_encoder,
            pattern: self.pattern.clone(),
            context: self.context,
            sot: self.sot,
            eot: self.eot,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

/// Reversible map from bytes to printable characters.
fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = ('!' as u32..='~' as u32)
        .chain('¡' as u32..='¬' as u32)
        .chain('®' as u32..='ÿ' as u32)
        .collect();
    let mut chars = printable.clone();
    let mut extra = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            printable.push(b);
            chars.push(256 + extra);
            extra += 1;
        }
    }
    let mut table = ['\0'; 256];
    for (b, c) in printable.iter().zip(chars) {
        table[*b as usize] = char::from_u32(c).expect("valid scalar");
    }
    table
}

/// Symbols in vocabulary order (the order `bytes_to_unicode` visits them).
fn base_symbols() -> Vec<char> {
    let table = bytes_to_unicode();
    let mut order: Vec<u32> = ('!' as u32..='~' as u32)
        .chain('¡' as u32..='¬' as u32)
        .chain('®' as u32..='ÿ' as u32)
        .collect();
    for b in 0..256u32 {
        if !order.contains(&b) {
            order.push(b);
        }
    }
    order.into_iter().map(|b| table[b as usize]).collect()
}

impl Tokenizer {
    /// Builds a tokenizer from merge pairs, in priority order.
    pub fn from_merges(merges: Vec<(String, String)>, context: usize) -> Self {
        let mut vocab: Vec<String> = base_symbols().into_iter().map(String::from).collect();
        let words: Vec<String> = vocab.iter().map(|s| format!("{s}{WORD_END}")).collect();
        vocab.extend(words);
        for (a, b) in &merges {
            vocab.push(format!("{a}{b}"));
        }
        vocab.push(START_OF_TEXT.to_string());
        vocab.push(END_OF_TEXT.to_string());
        let encoder: HashMap<String, usize> =
            vocab.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
        let ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        let sot = encoder[START_OF_TEXT];
        let eot = encoder[END_OF_TEXT];
        let pattern = Regex::new(
            r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+",
        )
        .expect("static pattern");
        Self {
            merges,
            encoder,
            ranks,
            byte_encoder: bytes_to_unicode(),
            pattern,
            context,
            sot,
            eot,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// The 514-symbol byte-level tokenizer (no merges).
    pub fn byte_level(context: usize) -> Self {
        Self::from_merges(Vec::new(), context)
    }

    /// Reads a merges file: one `left right` pair per line; a leading
    /// `#version` line is skipped.
    pub fn from_merges_file(path: &Path, context: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let merges = Self::parse_merges(&text)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        Ok(Self::from_merges(merges, context))
    }

    pub fn parse_merges(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
        let mut merges = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => merges.push((a.to_string(), b.to_string())),
                _ => return Err(format!("line {}: malformed merge", n + 1)),
            }
        }
        Ok(merges)
    }

    /// The merge list in file form, one pair per line.
    pub fn merges_text(&self) -> String {
        self.merges.iter().map(|(a, b)| format!("{a} {b}\n")).collect()
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn end_of_text(&self) -> usize {
        self.eot
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        if let Some(hit) = self.cache.lock().expect("tokenizer cache").get(token) {
            return hit.clone();
        }
        let chars: Vec<char> = token.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str(WORD_END);
        }
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|r| (*r, w)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, w)| (w[0].clone(), w[1].clone()));
            let Some((first, second)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
        }
        self.cache
            .lock()
            .expect("tokenizer cache")
            .insert(token.to_string(), word.clone());
        word
    }

    /// Lower-cases, collapses whitespace, splits into words and applies the
    /// merges. Sequences longer than the context are cut to `context - 1`
    /// tokens plus the end marker.
    pub fn encode(&self, text: &str) -> Tokenized {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = vec![self.sot];
        for m in self.pattern.find_iter(&cleaned) {
            let mapped: String = m.as_str().bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for piece in self.bpe(&mapped) {
                ids.push(self.encoder[&piece]);
            }
        }
        ids.push(self.eot);
        let truncated = ids.len() > self.context;
        if truncated {
            ids.truncate(self.context);
            *ids.last_mut().expect("context > 0") = self.eot;
        }
        Tokenized { ids, truncated }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_level_vocabulary_has_514_entries() {
        let t = Tokenizer::byte_level(DEFAULT_CONTEXT);
        assert_eq!(t.vocab_size(), 514);
        assert_eq!(t.end_of_text(), 513);
    }

    #[test]
    fn byte_level_encoding_marks_word_ends() {
        let t = Tokenizer::byte_level(DEFAULT_CONTEXT);
        let out = t.encode("Hi  a");
        // sot, h, i</w>, a</w>, eot
        assert_eq!(out.ids.len(), 5);
        assert_eq!(out.ids[0], 512);
        assert_eq!(*out.ids.last().unwrap(), 513);
        assert!(out.ids[2] >= 256 && out.ids[2] < 512);
        assert!(!out.truncated);
    }

    #[test]
    fn merges_apply_by_rank() {
        let merges = vec![
            ("r".to_string(), "e".to_string()),
            ("re".to_string(), "al</w>".to_string()),
            ("a".to_string(), "l</w>".to_string()),
        ];
        let t = Tokenizer::from_merges(merges, DEFAULT_CONTEXT);
        assert_eq!(t.vocab_size(), 517);
        let out = t.encode("real");
        // r+e first, then a+l</w>, then re+al</w> once both halves exist
        assert_eq!(out.ids, vec![515, 513, 516]);
    }

    #[test]
    fn merges_text_round_trips() {
        let merges = vec![("r".to_string(), "e".to_string()), ("re".to_string(), "al</w>".to_string())];
        let t = Tokenizer::from_merges(merges.clone(), DEFAULT_CONTEXT);
        assert_eq!(Tokenizer::parse_merges(&t.merges_text()).unwrap(), merges);
        assert!(Tokenizer::parse_merges("a b c").is_err());
    }

    #[test]
    fn long_prompts_are_truncated_with_end_marker() {
        let t = Tokenizer::byte_level(8);
        let out = t.encode("a b c d e f g h i j");
        assert!(out.truncated);
        assert_eq!(out.ids.len(), 8);
        assert_eq!(*out.ids.last().unwrap(), t.end_of_text());
    }
}
