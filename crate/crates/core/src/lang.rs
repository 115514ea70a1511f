//! Code-point-class language tagging.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Language;
use crate::tokenize::is_cjk;

pub const DEFAULT_ZH_THRESHOLD: f64 = 0.30;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LanguageError {
    #[error("cannot determine language of empty text")]
    EmptyText,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LanguageDetector {
    /// Minimum share of Han ideographs among letter code points to tag `zh`.
    pub zh_threshold: f64,
}

impl Default for LanguageDetector {
    fn default() -> Self {
        LanguageDetector { zh_threshold: DEFAULT_ZH_THRESHOLD }
    }
}

fn is_latin_letter(c: char) -> bool {
    c.is_ascii_alphabetic() || matches!(c as u32, 0x00C0..=0x024F | 0x1E00..=0x1EFF) && c.is_alphabetic()
}

impl LanguageDetector {
    /// Shares are taken over letter code points only, so digits, punctuation
    /// and whitespace never dilute the ratio.
    pub fn detect(&self, text: &str) -> Result<Language, LanguageError> {
        if text.is_empty() {
            return Err(LanguageError::EmptyText);
        }
        let (mut cjk, mut latin, mut letters) = (0usize, 0usize, 0usize);
        for c in text.chars() {
            if is_cjk(c) {
                cjk += 1;
                letters += 1;
            } else if c.is_alphabetic() {
                letters += 1;
                if is_latin_letter(c) {
                    latin += 1;
                }
            }
        }
        if letters == 0 {
            return Ok(Language::Other);
        }
        let total = letters as f64;
        Ok(if cjk as f64 / total > self.zh_threshold {
            Language::Zh
        } else if latin as f64 / total > 0.5 {
            Language::En
        } else {
            Language::Other
        })
    }
}

pub fn detect_language(text: &str) -> Result<Language, LanguageError> {
    LanguageDetector::default().detect(text)
}
