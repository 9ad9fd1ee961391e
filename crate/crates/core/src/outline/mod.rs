//! Outline extraction: keywords (RAKE) and extractive abstracts (TextRank),
//! plus assembly of (prompt, outline, story) training triples.

mod rake;
mod sentence;
mod stopwords;
mod textrank;

pub use rake::{rake_keywords, RakeKeyword};
pub use sentence::{split_sentences, Sentence};
pub use stopwords::{is_stopword, STOPWORDS_VERSION};
pub use textrank::{pagerank, textrank_abstract, RankedSentence};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Keyword-mode outlines join phrases with this separator; it is a plain
/// token sequence, so splitting on it reverses the join.
pub const KEYWORD_SEPARATOR: &str = " # ";

/// Stories are cut to this many whitespace-separated words before outline
/// extraction and example building.
pub const STORY_WORD_BUDGET: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutlineMode {
    Keyword,
    Abstract,
}

impl fmt::Display for OutlineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutlineMode::Keyword => write!(f, "keyword"),
            OutlineMode::Abstract => write!(f, "abstract"),
        }
    }
}

impl core::str::FromStr for OutlineMode {
    type Err = OutlineError;
    fn from_str(s: &str) -> Result<Self, OutlineError> {
        match s {
            "keyword" => Ok(OutlineMode::Keyword),
            "abstract" => Ok(OutlineMode::Abstract),
            other => Err(OutlineError::BadMode(String::from(other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlineConfig {
    pub mode: OutlineMode,
    pub n_keywords: usize,
    pub abstract_ratio: f64,
    /// PageRank damping factor.
    pub damping: f64,
    /// Power-iteration convergence tolerance (L-inf on scores).
    pub tolerance: f64,
    pub max_iterations: usize,
    /// BM25-style sentence-length weighting in the similarity graph;
    /// off by default so scores stay checkable by hand.
    pub bm25_weighting: bool,
}

impl Default for OutlineConfig {
    fn default() -> Self {
        Self {
            mode: OutlineMode::Abstract,
            n_keywords: 10,
            abstract_ratio: 0.30,
            damping: 0.85,
            tolerance: 1e-6,
            max_iterations: 100,
            bm25_weighting: false,
        }
    }
}

impl OutlineConfig {
    pub fn validate(&self) -> Result<(), OutlineError> {
        if !(self.abstract_ratio > 0.0 && self.abstract_ratio <= 1.0) {
            return Err(OutlineError::BadConfig(format!(
                "abstract_ratio {} outside (0, 1]",
                self.abstract_ratio
            )));
        }
        if self.n_keywords == 0 {
            return Err(OutlineError::BadConfig(String::from("n_keywords must be >= 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutlineError {
    BadMode(String),
    BadConfig(String),
    EmptyPrompt,
    EmptyStory,
}

impl fmt::Display for OutlineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutlineError::BadMode(m) => write!(f, "unknown outline mode {m:?}"),
            OutlineError::BadConfig(m) => write!(f, "bad outline config: {m}"),
            OutlineError::EmptyPrompt => write!(f, "prompt must be non-empty"),
            OutlineError::EmptyStory => write!(f, "story must be non-empty"),
        }
    }
}

impl core::error::Error for OutlineError {}

/// One corpus example after preparation.
#[derive(Debug, Clone, PartialEq)]
pub struct StoryTriple {
    pub prompt: String,
    pub outline: String,
    /// Story text after the 500-word truncation.
    pub story: String,
    /// Set when keyword extraction found only stopwords.
    pub outline_warning: bool,
}

/// Truncate to the first `STORY_WORD_BUDGET` whitespace-separated words.
pub fn truncate_story(story: &str) -> String {
    let mut words = story.split_whitespace();
    let mut out = String::new();
    for (i, w) in words.by_ref().take(STORY_WORD_BUDGET).enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(w);
    }
    out
}

/// Derive the outline from the (truncated) story and assemble the triple.
pub fn build_triple(
    prompt: &str,
    story: &str,
    cfg: &OutlineConfig,
) -> Result<StoryTriple, OutlineError> {
    cfg.validate()?;
    if prompt.trim().is_empty() {
        return Err(OutlineError::EmptyPrompt);
    }
    if story.trim().is_empty() {
        return Err(OutlineError::EmptyStory);
    }
    let story = truncate_story(story);
    let (outline, warning) = match cfg.mode {
        OutlineMode::Keyword => {
            let keywords = rake_keywords(&story, cfg);
            let warning = keywords.is_empty();
            let joined = keywords
                .iter()
                .map(|k| k.phrase.as_str())
                .collect::<Vec<_>>()
                .join(KEYWORD_SEPARATOR);
            (joined, warning)
        }
        OutlineMode::Abstract => {
            let kept = textrank_abstract(&story, cfg);
            let joined = kept
                .iter()
                .map(|s| s.text.trim())
                .collect::<Vec<_>>()
                .join(" ");
            (joined, false)
        }
    };
    Ok(StoryTriple {
        prompt: String::from(prompt),
        outline,
        story,
        outline_warning: warning,
    })
}

/// Lowercased word tokens with punctuation stripped; used by both
/// extractors for overlap and co-occurrence statistics.
pub(crate) fn content_words(text: &str) -> Vec<String> {
    words_with_breaks(text)
        .into_iter()
        .filter_map(|w| match w {
            WordToken::Word { lower, .. } => Some(lower),
            WordToken::Break => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum WordToken {
    /// Word with surrounding punctuation stripped; scoring uses `lower`,
    /// emitted keyword phrases use `original`.
    Word { lower: String, original: String },
    /// Punctuation boundary: candidate phrases never cross it.
    Break,
}

impl WordToken {
    #[cfg(test)]
    fn word(lower: &str) -> Self {
        WordToken::Word { lower: String::from(lower), original: String::from(lower) }
    }
}

/// Tokenize into words and punctuation breaks. A word carrying leading
/// punctuation emits a break before itself, trailing punctuation a break
/// after; a token that is all punctuation is just a break.
pub(crate) fn words_with_breaks(text: &str) -> Vec<WordToken> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let stripped = raw.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'');
        let lead_punct = raw.len() != stripped.len()
            && raw.find(stripped).map(|p| p > 0).unwrap_or(true);
        let trail_punct = raw.len() != stripped.len()
            && raw
                .find(stripped)
                .map(|p| p + stripped.len() < raw.len())
                .unwrap_or(true);
        if stripped.is_empty() {
            out.push(WordToken::Break);
            continue;
        }
        if lead_punct {
            out.push(WordToken::Break);
        }
        out.push(WordToken::Word {
            lower: stripped.to_lowercase(),
            original: String::from(stripped),
        });
        if trail_punct {
            out.push(WordToken::Break);
        }
    }
    out
}
