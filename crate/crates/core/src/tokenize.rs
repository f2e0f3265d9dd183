//! Lexical analysis shared by the index, the sentence selector and the
//! fallback scorer.

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

/// Splits `text` into lowercased runs of Unicode letters and digits.
///
/// Every other character is a separator. No stemming, no stopword removal.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Optional normalisation applied on top of [`tokenize`]. Both are off by
/// default so that token streams stay bit-reproducible.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerOptions {
    #[serde(default)]
    pub stopwords: bool,
    #[serde(default)]
    pub stem: bool,
}

impl TokenizerOptions {
    pub fn is_plain(&self) -> bool {
        !self.stopwords && !self.stem
    }
}

pub struct Analyzer {
    options: TokenizerOptions,
    stemmer: Option<Stemmer>,
}

impl Analyzer {
    pub fn new(options: TokenizerOptions) -> Self {
        let stemmer = options.stem.then(|| Stemmer::create(Algorithm::English));
        Self { options, stemmer }
    }

    pub fn options(&self) -> TokenizerOptions {
        self.options
    }

    pub fn analyze(&self, text: &str) -> Vec<String> {
        let tokens = tokenize(text);
        if self.options.is_plain() {
            return tokens;
        }
        tokens
            .into_iter()
            .filter(|t| !(self.options.stopwords && is_stopword(t)))
            .map(|t| match &self.stemmer {
                Some(s) => s.stem(&t).into_owned(),
                None => t,
            })
            .collect()
    }
}

impl std::fmt::Debug for Analyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Analyzer").field("options", &self.options).finish()
    }
}

// Sorted for binary search.
const STOPWORDS: &[&str] = &[
    "a", "about", "an", "and", "are", "as", "at", "be", "been", "but", "by", "can", "could", "did",
    "do", "does", "for", "from", "had", "has", "have", "how", "if", "in", "into", "is", "it",
    "its", "of", "on", "or", "should", "so", "such", "than", "that", "the", "their", "then",
    "there", "these", "they", "this", "those", "to", "was", "were", "what", "when", "which",
    "who", "will", "with", "would",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}
