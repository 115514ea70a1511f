//! Deterministic tokenization used for token accounting and the reference LM.
//!
//! The default `unicode-word` scheme emits maximal runs of letters/digits as
//! tokens and every CJK ideograph as a token of its own; punctuation and
//! whitespace only separate tokens.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    UnicodeWord,
    Whitespace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub scheme: Scheme,
    pub lowercase: bool,
}

/// Han ideographs (unified, extensions and compatibility blocks).
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x2F800..=0x2FA1F
        | 0x30000..=0x3134F)
}

/// Borrowing token iterator; yields slices of the input.
pub struct Tokens<'a> {
    text: &'a str,
    pos: usize,
    scheme: Scheme,
}

impl<'a> Tokens<'a> {
    pub fn new(text: &'a str, scheme: Scheme) -> Self {
        Tokens { text, pos: 0, scheme }
    }
}

impl<'a> Iterator for Tokens<'a> {
    type Item = &'a str;

    fn next(&mut self) -> Option<&'a str> {
        let rest = &self.text[self.pos..];
        let mut start = None;
        for (off, c) in rest.char_indices() {
            let at = self.pos + off;
            match self.scheme {
                Scheme::Whitespace => {
                    if c.is_whitespace() {
                        if let Some(s) = start {
                            self.pos = at;
                            return Some(&self.text[s..at]);
                        }
                    } else if start.is_none() {
                        start = Some(at);
                    }
                }
                Scheme::UnicodeWord => {
                    if is_cjk(c) {
                        if let Some(s) = start {
                            self.pos = at;
                            return Some(&self.text[s..at]);
                        }
                        let end = at + c.len_utf8();
                        self.pos = end;
                        return Some(&self.text[at..end]);
                    } else if c.is_alphanumeric() {
                        if start.is_none() {
                            start = Some(at);
                        }
                    } else if let Some(s) = start {
                        self.pos = at;
                        return Some(&self.text[s..at]);
                    }
                }
            }
        }
        self.pos = self.text.len();
        start.map(|s| &self.text[s..])
    }
}

pub fn tokenize(text: &str, config: &TokenizerConfig) -> Vec<String> {
    Tokens::new(text, config.scheme).map(|t| if config.lowercase { t.to_lowercase() } else { t.to_string() }).collect()
}

pub fn count_tokens(text: &str, config: &TokenizerConfig) -> usize {
    Tokens::new(text, config.scheme).count()
}
