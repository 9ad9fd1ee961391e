//! Trainable byte-pair-encoding tokenizer with reserved special tokens.
//!
//! Words are pre-segmented on whitespace with the space attached to the
//! following word, carried as the visible marker `Ġ` so vocabulary and
//! merges files stay line-parseable. Merges are learned greedily by pair
//! frequency; ties break on the lexicographic order of the pair, so
//! training is fully deterministic.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::collections::BTreeMap;
use core::fmt;

/// Word-initial space marker inside token strings.
pub const SPACE_MARKER: char = '\u{0120}'; // Ġ

pub const PAD: &str = "<PAD>";
pub const UNK: &str = "<UNK>";
pub const BOS: &str = "<S>";
pub const SEP: &str = "<SEP>";
pub const EOS: &str = "<EOS>";

/// Reserved tokens occupy the lowest five ids, in this order.
pub const RESERVED: [&str; 5] = [PAD, UNK, BOS, SEP, EOS];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const EOS_ID: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    EmptyCorpus,
    VocabTooSmall { requested: usize, minimum: usize },
    UnknownId { id: u32, bound: u32 },
    Parse { line: usize, message: String },
}

impl fmt::Display for TokenizerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenizerError::EmptyCorpus => write!(f, "cannot train BPE on an empty corpus"),
            TokenizerError::VocabTooSmall { requested, minimum } => write!(
                f,
                "vocab size {requested} below minimum {minimum} (base symbols + reserved)"
            ),
            TokenizerError::UnknownId { id, bound } => {
                write!(f, "token id {id} out of range (vocab size {bound})")
            }
            TokenizerError::Parse { line, message } => {
                write!(f, "line {line}: {message}")
            }
        }
    }
}

impl core::error::Error for TokenizerError {}

/// Bijective token/id map with the five reserved tokens at ids 0..5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let mut v = Self { token_to_id: BTreeMap::new(), id_to_token: Vec::new() };
        for tok in RESERVED {
            v.push(tok.to_owned());
        }
        v
    }

    fn push(&mut self, token: String) -> u32 {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Serialize as UTF-8 lines `token<TAB>id`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, token) in self.id_to_token.iter().enumerate() {
            out.push_str(token);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (token, id) = line.rsplit_once('\t').ok_or(TokenizerError::Parse {
                line: i + 1,
                message: "expected token<TAB>id".to_string(),
            })?;
            let id: u32 = id.parse().map_err(|_| TokenizerError::Parse {
                line: i + 1,
                message: format!("bad id {id:?}"),
            })?;
            entries.push((id, token.to_owned()));
        }
        entries.sort_by_key(|(id, _)| *id);
        let mut vocab = Self { token_to_id: BTreeMap::new(), id_to_token: Vec::new() };
        for (i, (id, token)) in entries.into_iter().enumerate() {
            if id as usize != i {
                return Err(TokenizerError::Parse {
                    line: i + 1,
                    message: format!("non-contiguous id {id}"),
                });
            }
            vocab.push(token);
        }
        for (i, tok) in RESERVED.iter().enumerate() {
            if vocab.token(i as u32) != Some(tok) {
                return Err(TokenizerError::Parse {
                    line: i + 1,
                    message: format!("reserved token {tok} missing from id {i}"),
                });
            }
        }
        Ok(vocab)
    }
}

/// Ordered list of symbol-pair merges; the list index is the priority.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeTable {
    pairs: Vec<(String, String)>,
}

impl MergeTable {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    /// Serialize as UTF-8 lines `left<SPACE>right` in priority order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (l, r) in &self.pairs {
            out.push_str(l);
            out.push(' ');
            out.push_str(r);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (l, r) = line.split_once(' ').ok_or(TokenizerError::Parse {
                line: i + 1,
                message: "expected left<SPACE>right".to_string(),
            })?;
            pairs.push((l.to_owned(), r.to_owned()));
        }
        Ok(Self { pairs })
    }
}

/// Trained tokenizer: vocabulary, merge table, and the fast merge-rank
/// lookup used by `encode`.
#[derive(Debug, Clone, PartialEq)]
pub struct BpeTokenizer {
    vocab: Vocabulary,
    merges: MergeTable,
    /// (left id, right id) -> (rank, merged id)
    ranks: BTreeMap<(u32, u32), (u32, u32)>,
}

impl BpeTokenizer {
    /// Greedy BPE training: repeatedly merge the highest-frequency adjacent
    /// symbol pair until `vocab_size` is reached or no pair occurs at least
    /// twice. Ties break by lexicographic order of the pair.
    pub fn train(corpus: &str, vocab_size: usize) -> Result<Self, TokenizerError> {
        // Word frequencies over marker-carrying words.
        let mut word_freq: BTreeMap<Vec<char>, u64> = BTreeMap::new();
        for piece in split_words(corpus) {
            *word_freq.entry(piece.chars().collect()).or_insert(0) += 1;
        }
        if word_freq.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }

        let mut vocab = Vocabulary::with_reserved();
        let mut alphabet: Vec<char> = word_freq
            .keys()
            .flat_map(|w| w.iter().copied())
            .collect();
        alphabet.sort_unstable();
        alphabet.dedup();
        for &c in &alphabet {
            vocab.push(c.to_string());
        }
        let minimum = vocab.len();
        if vocab_size < minimum {
            return Err(TokenizerError::VocabTooSmall { requested: vocab_size, minimum });
        }

        // Words as symbol-id sequences.
        let mut words: Vec<(Vec<u32>, u64)> = word_freq
            .into_iter()
            .map(|(chars, freq)| {
                let ids = chars
                    .iter()
                    .map(|c| vocab.id(&c.to_string()).expect("alphabet covers corpus"))
                    .collect();
                (ids, freq)
            })
            .collect();

        let mut merges = MergeTable::default();
        let mut ranks = BTreeMap::new();
        while vocab.len() < vocab_size {
            let mut pair_freq: BTreeMap<(u32, u32), u64> = BTreeMap::new();
            for (word, freq) in &words {
                for pair in word.windows(2) {
                    *pair_freq.entry((pair[0], pair[1])).or_insert(0) += freq;
                }
            }
            let best = pair_freq
                .iter()
                .filter(|(_, &freq)| freq >= 2)
                .filter(|((l, r), _)| {
                    // a merge must never produce a reserved marker string
                    let joined = format!(
                        "{}{}",
                        vocab.token(*l).expect("pair ids in vocab"),
                        vocab.token(*r).expect("pair ids in vocab")
                    );
                    !RESERVED.contains(&joined.as_str())
                })
                .max_by(|((al, ar), af), ((bl, br), bf)| {
                    af.cmp(bf).then_with(|| {
                        let a = (vocab.token(*al).unwrap(), vocab.token(*ar).unwrap());
                        let b = (vocab.token(*bl).unwrap(), vocab.token(*br).unwrap());
                        b.cmp(&a) // smaller pair wins the tie
                    })
                });
            let Some(((left, right), _)) = best else { break };
            let (left, right) = (*left, *right);
            let token = format!(
                "{}{}",
                vocab.token(left).unwrap(),
                vocab.token(right).unwrap()
            );
            let rank = merges.len() as u32;
            merges
                .pairs
                .push((vocab.token(left).unwrap().to_owned(), vocab.token(right).unwrap().to_owned()));
            let merged_id = vocab.push(token);
            ranks.insert((left, right), (rank, merged_id));
            for (word, _) in &mut words {
                merge_in_place(word, left, right, merged_id);
            }
        }

        Ok(Self { vocab, merges, ranks })
    }

    /// Rebuild from serialized vocabulary and merges.
    pub fn from_parts(vocab: Vocabulary, merges: MergeTable) -> Result<Self, TokenizerError> {
        let mut ranks = BTreeMap::new();
        for (rank, (l, r)) in merges.pairs.iter().enumerate() {
            let left = vocab.id(l).ok_or(TokenizerError::Parse {
                line: rank + 1,
                message: format!("merge left token {l:?} not in vocabulary"),
            })?;
            let right = vocab.id(r).ok_or(TokenizerError::Parse {
                line: rank + 1,
                message: format!("merge right token {r:?} not in vocabulary"),
            })?;
            let merged = vocab.id(&format!("{l}{r}")).ok_or(TokenizerError::Parse {
                line: rank + 1,
                message: format!("merged token {l}{r} not in vocabulary"),
            })?;
            ranks.insert((left, right), (rank as u32, merged));
        }
        Ok(Self { vocab, merges, ranks })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Encode text: whitespace pre-segmentation, then merges by priority.
    /// Unknown base symbols map to `<UNK>`. Never emits other reserved ids.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in split_words(text) {
            let mut symbols: Vec<u32> = word
                .chars()
                .map(|c| self.vocab.id(&c.to_string()).unwrap_or(UNK_ID))
                .collect();
            loop {
                let mut best: Option<(u32, (u32, u32), u32)> = None; // (rank, pair, merged id)
                for pair in symbols.windows(2) {
                    if let Some(&(rank, merged)) = self.ranks.get(&(pair[0], pair[1])) {
                        if best.map_or(true, |(r, _, _)| rank < r) {
                            best = Some((rank, (pair[0], pair[1]), merged));
                        }
                    }
                }
                let Some((_, (left, right), merged)) = best else { break };
                merge_in_place(&mut symbols, left, right, merged);
            }
            out.extend_from_slice(&symbols);
        }
        out
    }

    /// Decode ids to text. Regular tokens concatenate with the space marker
    /// restored; reserved tokens render as their literal markers set off by
    /// single spaces.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        let mut space_pending = false;
        for &id in ids {
            let token = self.vocab.token(id).ok_or(TokenizerError::UnknownId {
                id,
                bound: self.vocab.len() as u32,
            })?;
            let special = (id as usize) < RESERVED.len();
            if special {
                if !out.is_empty() && !out.ends_with(' ') {
                    out.push(' ');
                }
                out.push_str(token);
                space_pending = true;
            } else {
                let piece: String = token
                    .chars()
                    .map(|c| if c == SPACE_MARKER { ' ' } else { c })
                    .collect();
                if space_pending && !piece.starts_with(' ') {
                    out.push(' ');
                }
                out.push_str(&piece);
                space_pending = false;
            }
        }
        Ok(out)
    }
}

/// Whitespace pre-segmentation with the space attached to the following
/// word: `"the cat"` becomes `["the", "Ġcat"]`. A literal marker character
/// in the input is dropped from words (it cannot round-trip).
fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().enumerate().map(|(i, w)| {
        let body: String = w.chars().filter(|&c| c != SPACE_MARKER).collect();
        if i == 0 {
            body
        } else {
            let mut s = String::with_capacity(body.len() + 2);
            s.push(SPACE_MARKER);
            s.push_str(&body);
            s
        }
    })
}

fn merge_in_place(word: &mut Vec<u32>, left: u32, right: u32, merged: u32) {
    let mut i = 0;
    while i + 1 < word.len() {
        if word[i] == left && word[i + 1] == right {
            word[i] = merged;
            word.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_merge_on_repeated_pair_corpus() {
        // brute-force pair counts for "aaab aaab": (a,a) x4, (a,b) x2, and
        // the marker word contributes (Ġ,a) x1 pairs per occurrence.
        let tok = BpeTokenizer::train("aaab aaab", 16).unwrap();
        assert_eq!(
            tok.merges().pairs()[0],
            ("a".to_string(), "a".to_string())
        );
    }

    #[test]
    fn no_merge_budget_gives_empty_table() {
        let corpus = "ab ba";
        // base symbols: a, b, marker -> +5 reserved = 8
        let tok = BpeTokenizer::train(corpus, 8).unwrap();
        assert!(tok.merges().is_empty());
        assert_eq!(tok.vocab_size(), 8);
    }

    #[test]
    fn vocab_below_base_is_rejected() {
        let err = BpeTokenizer::train("abc", 3).unwrap_err();
        assert!(matches!(err, TokenizerError::VocabTooSmall { .. }));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert_eq!(
            BpeTokenizer::train("   ", 100).unwrap_err(),
            TokenizerError::EmptyCorpus
        );
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = "the cat sat on the mat. the cat ran.";
        let a = BpeTokenizer::train(corpus, 40).unwrap();
        let b = BpeTokenizer::train(corpus, 40).unwrap();
        assert_eq!(a.vocab().to_text(), b.vocab().to_text());
        assert_eq!(a.merges().to_text(), b.merges().to_text());
    }

    #[test]
    fn encode_empty_is_empty() {
        let tok = BpeTokenizer::train("a b", 10).unwrap();
        assert!(tok.encode("").is_empty());
        assert_eq!(tok.decode(&[]).unwrap(), "");
    }

    #[test]
    fn decode_encode_identity_on_ascii() {
        let corpus = "the quick brown fox jumps over the lazy dog";
        let tok = BpeTokenizer::train(corpus, 60).unwrap();
        for s in ["the quick fox", "dog over dog", "lazy the jumps"] {
            assert_eq!(tok.decode(&tok.encode(s)).unwrap(), s);
        }
    }

    #[test]
    fn encode_decode_encode_roundtrip() {
        let corpus = "banana bandana and a banana";
        let tok = BpeTokenizer::train(corpus, 40).unwrap();
        let ids = tok.encode("banana and bandana");
        let text = tok.decode(&ids).unwrap();
        assert_eq!(tok.encode(&text), ids);
    }

    #[test]
    fn unknown_symbols_map_to_unk() {
        let tok = BpeTokenizer::train("abc abc", 20).unwrap();
        let ids = tok.encode("axc");
        assert!(ids.contains(&UNK_ID));
        // no other reserved id appears unless inserted by the caller
        assert!(!ids.contains(&PAD_ID));
        assert!(!ids.contains(&SEP_ID));
    }

    #[test]
    fn special_token_literal_roundtrip() {
        let tok = BpeTokenizer::train("a b", 12).unwrap();
        let text = tok.decode(&[SEP_ID]).unwrap();
        assert_eq!(text, "<SEP>");
        // encode of the literal marker text never yields the reserved id
        let corpus_tok = BpeTokenizer::train("< S E P >", 20).unwrap();
        assert!(!corpus_tok.encode("<SEP>").contains(&SEP_ID));
    }

    #[test]
    fn layout_rendering_around_separators() {
        let tok = BpeTokenizer::train("prompt text outline words", 60).unwrap();
        let mut ids = tok.encode("prompt text");
        ids.push(SEP_ID);
        ids.extend(tok.encode("outline words"));
        ids.push(EOS_ID);
        assert_eq!(
            tok.decode(&ids).unwrap(),
            "prompt text <SEP> outline words <EOS>"
        );
    }

    #[test]
    fn vocab_and_merge_files_roundtrip() {
        let corpus = "round trip round trip tokens";
        let tok = BpeTokenizer::train(corpus, 40).unwrap();
        let vocab = Vocabulary::from_text(&tok.vocab().to_text()).unwrap();
        let merges = MergeTable::from_text(&tok.merges().to_text()).unwrap();
        let rebuilt = BpeTokenizer::from_parts(vocab, merges).unwrap();
        assert_eq!(rebuilt, tok);
        let s = "round tokens trip";
        assert_eq!(rebuilt.encode(s), tok.encode(s));
    }

    /// Naive O(n^2) oracle: apply the merge rules strictly in priority
    /// order, rescanning from the start after every applied rule.
    fn oracle_encode(tok: &BpeTokenizer, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in split_words(text) {
            let mut pieces: Vec<String> =
                word.chars().map(|c| c.to_string()).collect();
            'outer: loop {
                for (l, r) in tok.merges().pairs() {
                    for i in 0..pieces.len().saturating_sub(1) {
                        if &pieces[i] == l && &pieces[i + 1] == r {
                            let joined = format!("{}{}", pieces[i], pieces[i + 1]);
                            pieces[i] = joined;
                            pieces.remove(i + 1);
                            continue 'outer;
                        }
                    }
                }
                break;
            }
            for p in pieces {
                out.push(tok.vocab().id(&p).unwrap_or(UNK_ID));
            }
        }
        out
    }

    #[test]
    fn encode_matches_naive_merge_oracle() {
        use crate::rng::Prng;
        let corpus = "she sells sea shells by the sea shore and the shells she sells";
        let tok = BpeTokenizer::train(corpus, 70).unwrap();
        let alphabet: Vec<char> = "abdehlnorsty ".chars().collect();
        let mut rng = Prng::new(20);
        for _ in 0..20 {
            let len = 3 + rng.next_below(18);
            let s: String = (0..len)
                .map(|_| alphabet[rng.next_below(alphabet.len())])
                .collect();
            assert_eq!(tok.encode(&s), oracle_encode(&tok, &s), "input {s:?}");
        }
    }
}
