//! Rule-based sentence splitting with character offsets.

use alloc::string::String;
use alloc::vec::Vec;

/// Honorifics and similar dotted abbreviations that never end a sentence.
/// Single capital initials ("A.", "B.") are covered by a rule, not the list.
const ABBREVIATIONS: [&str; 15] = [
    "Mr.", "Mrs.", "Ms.", "Dr.", "Prof.", "St.", "Sr.", "Jr.", "vs.", "etc.",
    "e.g.", "i.e.", "Inc.", "Ltd.", "Co.",
];

const CLOSING_QUOTES: [char; 6] = ['"', '\'', '\u{201d}', '\u{2019}', ')', ']'];
const OPENING_QUOTES: [char; 6] = ['"', '\'', '\u{201c}', '\u{2018}', '(', '['];

/// One sentence: trimmed text plus the raw byte span in the input. Spans
/// partition the input, with inter-sentence whitespace attached to the
/// preceding span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Split on `.` `!` `?` followed by whitespace and a capital letter or an
/// opening quote, with an abbreviation exception list. Empty input yields
/// an empty list; text without terminators is a single sentence.
pub fn split_sentences(text: &str) -> Vec<Sentence> {
    let mut sentences = Vec::new();
    if text.trim().is_empty() {
        return sentences;
    }
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if matches!(c, '.' | '!' | '?') && !(c == '.' && is_abbreviation(text, pos)) {
            // allow closing quotes between the terminator and the gap
            let mut j = i + 1;
            while j < chars.len() && CLOSING_QUOTES.contains(&chars[j].1) {
                j += 1;
            }
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            let gap = k > j;
            let next_opens = k < chars.len()
                && (chars[k].1.is_uppercase() || OPENING_QUOTES.contains(&chars[k].1));
            if gap && next_opens {
                let split_at = chars[k].0;
                push_sentence(&mut sentences, text, start, split_at);
                start = split_at;
                i = k;
                continue;
            }
        }
        i += 1;
    }
    push_sentence(&mut sentences, text, start, text.len());
    sentences
}

fn push_sentence(out: &mut Vec<Sentence>, text: &str, start: usize, end: usize) {
    if start >= end {
        return;
    }
    out.push(Sentence {
        text: String::from(text[start..end].trim()),
        start,
        end,
    });
}

/// The token ending at this `.` is an abbreviation: either on the list or a
/// single capital initial like "A.".
fn is_abbreviation(text: &str, dot_pos: usize) -> bool {
    let head = &text[..dot_pos];
    let token_start = head
        .rfind(|c: char| c.is_whitespace())
        .map(|p| p + 1)
        .unwrap_or(0);
    let token = &text[token_start..=dot_pos];
    if ABBREVIATIONS.contains(&token) {
        return true;
    }
    let mut cs = token.chars();
    matches!((cs.next(), cs.next(), cs.next()), (Some(c), Some('.'), None) if c.is_uppercase())
}
