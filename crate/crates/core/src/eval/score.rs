//! Transcript scoring: word error rate from a minimum-edit alignment, and
//! exact-match sentence accuracy.

use crate::error::{Error, Result};

/// A reference/hypothesis transcript pair, tokenized on construction:
/// lowercase, whitespace split, leading/trailing ASCII punctuation stripped,
/// empty tokens dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptPair {
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
}

/// Lowercase, split on whitespace, strip leading/trailing punctuation, drop
/// tokens that end up empty.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

impl TranscriptPair {
    pub fn new(reference: &str, hypothesis: &str) -> Self {
        TranscriptPair { reference: tokenize(reference), hypothesis: tokenize(hypothesis) }
    }
}

/// Word-level edit operation counts of the minimum-cost alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Minimum-edit-distance alignment with unit costs over words. When moves
/// tie on total cost, the backtrace prefers substitution over insertion over
/// deletion so the reported breakdown is deterministic; the total is the
/// plain Levenshtein distance either way.
pub fn align(p: &TranscriptPair) -> Result<EditCounts> {
    if p.reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let n = p.reference.len();
    let m = p.hypothesis.len();
    // cost[i][j]: edits turning reference[..i] into hypothesis[..j]
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in cost.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        cost[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let hit = (p.reference[i - 1] != p.hypothesis[j - 1]) as usize;
            cost[i][j] = (cost[i - 1][j - 1] + hit)
                .min(cost[i][j - 1] + 1)
                .min(cost[i - 1][j] + 1);
        }
    }
    // Backtrace, preferring diagonal (match/substitution), then insertion,
    // then deletion on ties.
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let hit = (p.reference[i - 1] != p.hypothesis[j - 1]) as usize;
            if cost[i][j] == cost[i - 1][j - 1] + hit {
                counts.substitutions += hit;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && cost[i][j] == cost[i][j - 1] + 1 {
            counts.insertions += 1;
            j -= 1;
        } else {
            counts.deletions += 1;
            i -= 1;
        }
    }
    Ok(counts)
}

/// Word error rate percent: `(I + S + D) / N * 100` over the minimum-edit
/// alignment. Can exceed 100 when the hypothesis is longer than the
/// reference.
pub fn wer(p: &TranscriptPair) -> Result<f64> {
    let counts = align(p)?;
    Ok(100.0 * counts.total() as f64 / p.reference.len() as f64)
}

/// Sentence-level accuracy percent: exact token-sequence matches over total.
pub fn sla(pairs: &[TranscriptPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let hits = pairs.iter().filter(|p| p.reference == p.hypothesis).count();
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}
