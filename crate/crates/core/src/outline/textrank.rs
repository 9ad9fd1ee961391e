//! Extractive abstracts: damped PageRank over a sentence-similarity graph.
//!
//! similarity(Si, Sj) = |content-token overlap| / (ln(1+|Si|) + ln(1+|Sj|)).
//! The `1+` keeps one-token sentences out of a log(1) = 0 denominator.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::sentence::split_sentences;
use super::stopwords::stopword_set;
use super::{content_words, OutlineConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RankedSentence {
    /// Index into `split_sentences(story)`.
    pub index: usize,
    pub score: f64,
    pub text: String,
}

/// Keep the top `max(1, round(abstract_ratio * n))` sentences by PageRank
/// score (round half up), emitted in original story order.
pub fn textrank_abstract(story: &str, cfg: &OutlineConfig) -> Vec<RankedSentence> {
    let sentences = split_sentences(story);
    let n = sentences.len();
    if n == 0 {
        return Vec::new();
    }
    let stopwords = stopword_set();
    let tokens: Vec<Vec<String>> = sentences.iter().map(|s| content_words(&s.text)).collect();
    let lengths: Vec<usize> = tokens.iter().map(Vec::len).collect();
    let content: Vec<BTreeSet<&str>> = tokens
        .iter()
        .map(|ws| {
            ws.iter()
                .map(String::as_str)
                .filter(|w| !stopwords.contains(*w))
                .collect()
        })
        .collect();

    // document frequency, for the optional BM25-style weighting
    let mut df: alloc::collections::BTreeMap<&str, usize> = alloc::collections::BTreeMap::new();
    if cfg.bm25_weighting {
        for set in &content {
            for w in set {
                *df.entry(w).or_insert(0) += 1;
            }
        }
    }

    let mut weights = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let overlap: f64 = if cfg.bm25_weighting {
                content[i]
                    .intersection(&content[j])
                    .map(|w| (1.0 + n as f64 / df[w] as f64).ln())
                    .sum()
            } else {
                content[i].intersection(&content[j]).count() as f64
            };
            if overlap == 0.0 {
                continue;
            }
            let denom = (1.0 + lengths[i] as f64).ln() + (1.0 + lengths[j] as f64).ln();
            let w = overlap / denom;
            weights[i][j] = w;
            weights[j][i] = w;
        }
    }

    let scores = pagerank(&weights, cfg.damping, cfg.tolerance, cfg.max_iterations);

    let keep = largest_half_up(cfg.abstract_ratio * n as f64).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept.into_iter()
        .map(|i| RankedSentence {
            index: i,
            score: scores[i],
            text: sentences[i].text.clone(),
        })
        .collect()
}

fn largest_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Damped PageRank with per-node base (1 - d) by power iteration, run to
/// the L-inf tolerance or `max_iterations`. Rows with no outgoing weight
/// spread their rank uniformly over all nodes, which keeps the score total
/// at n.
pub fn pagerank(weights: &[Vec<f64>], damping: f64, tolerance: f64, max_iterations: usize) -> Vec<f64> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let out_sum: Vec<f64> = weights.iter().map(|row| row.iter().sum()).collect();
    let mut scores = vec![1.0f64; n];
    for _ in 0..max_iterations {
        let dangling: f64 = (0..n)
            .filter(|&j| out_sum[j] == 0.0)
            .map(|j| scores[j])
            .sum();
        let mut next = vec![(1.0 - damping) + damping * dangling / n as f64; n];
        for j in 0..n {
            if out_sum[j] == 0.0 {
                continue;
            }
            let share = damping * scores[j] / out_sum[j];
            for i in 0..n {
                if weights[j][i] != 0.0 {
                    next[i] += share * weights[j][i];
                }
            }
        }
        let delta = scores
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        scores = next;
        if delta < tolerance {
            break;
        }
    }
    scores
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sentence_story_keeps_it() {
        let cfg = OutlineConfig::default();
        let kept = textrank_abstract("Only one sentence here", &cfg);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].index, 0);
    }

    #[test]
    fn unrelated_sentence_ranks_lowest() {
        let cfg = OutlineConfig::default();
        // S1 and S2 share content tokens; S3 shares none.
        let story = "The dragon guarded gold. The dragon loved gold. Rain fell quietly outside.";
        let sentences = split_sentences(story);
        assert_eq!(sentences.len(), 3);
        let stopwords = stopword_set();
        let tokens: Vec<Vec<String>> =
            sentences.iter().map(|s| content_words(&s.text)).collect();
        let content: Vec<BTreeSet<&str>> = tokens
            .iter()
            .map(|ws| {
                ws.iter()
                    .map(String::as_str)
                    .filter(|w| !stopwords.contains(*w))
                    .collect()
            })
            .collect();
        assert!(content[0].intersection(&content[2]).next().is_none());

        // power-iteration oracle on the 3-node graph
        let mut weights = vec![vec![0.0; 3]; 3];
        for i in 0..3 {
            for j in (i + 1)..3 {
                let overlap = content[i].intersection(&content[j]).count() as f64;
                if overlap > 0.0 {
                    let d = (1.0 + tokens[i].len() as f64).ln()
                        + (1.0 + tokens[j].len() as f64).ln();
                    weights[i][j] = overlap / d;
                    weights[j][i] = overlap / d;
                }
            }
        }
        let scores = pagerank(&weights, 0.85, 1e-6, 100);
        assert!(scores[2] < scores[0] && scores[2] < scores[1], "{scores:?}");

        let kept = textrank_abstract(story, &cfg);
        assert_eq!(kept.len(), 1);
        assert_ne!(kept[0].index, 2);
    }

    #[test]
    fn thirty_percent_of_ten_sentences_is_three() {
        let cfg = OutlineConfig::default();
        let story: String = (0..10)
            .map(|i| alloc::format!("Sentence number {i} talks about topic {}. ", i % 3))
            .collect();
        let kept = textrank_abstract(story.trim(), &cfg);
        assert_eq!(kept.len(), 3);
        // original order preserved
        assert!(kept.windows(2).all(|w| w[0].index < w[1].index));
    }

    #[test]
    fn rounding_is_half_up_with_floor_one() {
        assert_eq!(largest_half_up(0.3 * 1.0).max(1), 1);
        assert_eq!(largest_half_up(0.3 * 5.0).max(1), 2); // 1.5 rounds up
        assert_eq!(largest_half_up(0.3 * 4.0).max(1), 1); // 1.2 rounds down
        assert_eq!(largest_half_up(0.3 * 20.0).max(1), 6);
    }

    #[test]
    fn pagerank_scores_sum_to_n() {
        // includes a dangling node (no outgoing weight)
        let weights = alloc::vec![
            alloc::vec![0.0, 1.0, 0.5, 0.0],
            alloc::vec![1.0, 0.0, 0.2, 0.0],
            alloc::vec![0.5, 0.2, 0.0, 0.0],
            alloc::vec![0.0, 0.0, 0.0, 0.0],
        ];
        let scores = pagerank(&weights, 0.85, 1e-9, 200);
        let total: f64 = scores.iter().sum();
        assert!((total - 4.0).abs() < 1e-4, "total {total}");
    }

    #[test]
    fn extraction_is_deterministic() {
        let cfg = OutlineConfig::default();
        let story = "A b c. A b d. C d e. F g h.";
        assert_eq!(textrank_abstract(story, &cfg), textrank_abstract(story, &cfg));
    }
}
