//! Versioned English stopword list, shipped in-repo so extractor scores
//! reproduce bit-exactly.

use alloc::collections::BTreeSet;

pub const STOPWORDS_VERSION: &str = "en_v1";

const RAW: &str = include_str!("../../data/stopwords_en_v1.txt");

/// Parse the shipped list. Extractors build this once per call and look
/// words up in lowercase.
pub fn stopword_set() -> BTreeSet<&'static str> {
    RAW.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

/// Case-insensitive one-off stopword test; hot paths hold a
/// [`stopword_set`] instead.
pub fn is_stopword(word: &str) -> bool {
    let lower = word.to_lowercase();
    stopword_set().contains(lower.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markers_and_pronouns_are_stopwords() {
        for w in ["and", "But", "because", "THE", "she", "won't"] {
            assert!(is_stopword(w), "{w}");
        }
        for w in ["dragon", "run", "zombie"] {
            assert!(!is_stopword(w), "{w}");
        }
    }

    #[test]
    fn list_is_nonempty_and_lowercase() {
        let set = stopword_set();
        assert!(set.len() > 100);
        assert!(set.iter().all(|w| *w == w.to_lowercase()));
    }
}
