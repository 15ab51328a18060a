//! UAS normalization and tokenization.
//!
//! Raw user agent strings are full of separators that carry no information
//! for the models ("/", ";") and of separators that should become their own
//! tokens ("(", ")", ":"). A fixed, ordered list of character edits rewrites
//! the string, whitespace is collapsed, and the result is split on spaces
//! and truncated to a fixed number of words.

/// A user agent string exactly as it arrived, e.g. from an HTTP log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawUas {
    pub text: String,
}

impl RawUas {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }
}

impl From<&str> for RawUas {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

/// Normalization settings: the ordered substitution list and the token cap.
#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    /// Maximum number of tokens kept per UAS; the tail is dropped.
    pub max_tokens: usize,
    /// (pattern, replacement) pairs applied globally, in order.
    pub substitutions: Vec<(String, String)>,
}

/// The canonical character edits, in application order. "%20" must precede
/// "%" so that encoded spaces are never split into a stray "20" token.
/// ")" is padded on both sides so parentheses become standalone tokens
/// ("( KHTML, like Gecko )"), while "(" keeps its left neighbour attached
/// ("SheinApp( shein ... )").
pub const DEFAULT_SUBSTITUTIONS: [(&str, &str); 8] = [
    ("%20", " "),
    ("_", "."),
    ("(", "( "),
    (")", " ) "),
    ("/", " "),
    (";", ""),
    (":", " : "),
    ("%", " "),
];

pub const DEFAULT_MAX_TOKENS: usize = 50;

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            substitutions: DEFAULT_SUBSTITUTIONS
                .iter()
                .map(|(p, r)| (p.to_string(), r.to_string()))
                .collect(),
        }
    }
}

impl PreprocessConfig {
    pub fn with_max_tokens(max_tokens: usize) -> Self {
        assert!(max_tokens >= 1, "max_tokens must be at least 1");
        Self {
            max_tokens,
            ..Self::default()
        }
    }
}

/// A preprocessed UAS: at most `max_tokens` whitespace-free words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedUas {
    pub tokens: Vec<String>,
    /// Token count before truncation.
    pub original_token_count: usize,
    pub truncated: bool,
}

impl TokenizedUas {
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Applies every substitution rule globally, in order, then collapses runs
/// of whitespace to single spaces and trims the ends. Total: any string in,
/// a single-spaced string out.
pub fn apply_substitutions(raw: &RawUas, config: &PreprocessConfig) -> String {
    let mut text = raw.text.clone();
    for (pattern, replacement) in &config.substitutions {
        text = text.replace(pattern.as_str(), replacement);
    }
    collapse_whitespace(&text)
}

fn collapse_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(ch);
        }
    }
    out
}

/// Normalizes and splits a raw UAS into at most `config.max_tokens` words.
/// An input that normalizes to nothing yields an empty token list.
pub fn tokenize(raw: &RawUas, config: &PreprocessConfig) -> TokenizedUas {
    let normalized = apply_substitutions(raw, config);
    let all: Vec<&str> = if normalized.is_empty() {
        Vec::new()
    } else {
        normalized.split(' ').collect()
    };
    let original_token_count = all.len();
    let truncated = original_token_count > config.max_tokens;
    let tokens = all
        .into_iter()
        .take(config.max_tokens)
        .map(str::to_string)
        .collect();
    TokenizedUas {
        tokens,
        original_token_count,
        truncated,
    }
}
