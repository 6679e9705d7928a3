//! Token counting for budgets and length filters.
//!
//! Real deployments count with the model's own tokenizer; here the counter is
//! pluggable and the default is whitespace words, which tracks prompt size
//! closely enough for budget enforcement and keeps the crate
//! dependency-free. Counts are approximate by design — everything that
//! consumes them (length filters, cost metrics) only needs consistency, not
//! any particular vocabulary.

/// Counts tokens in text. Implementations must be pure: equal input, equal
/// count.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> u64;
}

/// Whitespace-delimited words. The default.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> u64 {
        text.split_whitespace().count() as u64
    }
}

/// Unicode scalar values. A stricter proxy for byte-level vocabularies.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharsTokenizer;

impl Tokenizer for CharsTokenizer {
    fn count(&self, text: &str) -> u64 {
        text.chars().count() as u64
    }
}

/// Named tokenizer choice, for configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    #[default]
    Whitespace,
    Chars,
}

impl TokenizerKind {
    pub fn build(self) -> Box<dyn Tokenizer> {
        match self {
            TokenizerKind::Whitespace => Box::new(WhitespaceTokenizer),
            TokenizerKind::Chars => Box::new(CharsTokenizer),
        }
    }

    pub fn count(self, text: &str) -> u64 {
        match self {
            TokenizerKind::Whitespace => WhitespaceTokenizer.count(text),
            TokenizerKind::Chars => CharsTokenizer.count(text),
        }
    }

    /// Longest prefix of `text` with at most `cap` tokens. Original bytes
    /// are preserved — text at or under the cap comes back unchanged.
    pub fn truncate(self, text: &str, cap: u64) -> &str {
        match self {
            TokenizerKind::Whitespace => {
                let mut seen = 0u64;
                let mut in_token = false;
                for (i, c) in text.char_indices() {
                    if c.is_whitespace() {
                        in_token = false;
                    } else if !in_token {
                        in_token = true;
                        seen += 1;
                        if seen > cap {
                            return text[..i].trim_end();
                        }
                    }
                }
                text
            }
            TokenizerKind::Chars => match text.char_indices().nth(cap as usize) {
                Some((i, _)) => &text[..i],
                None => text,
            },
        }
    }
}
