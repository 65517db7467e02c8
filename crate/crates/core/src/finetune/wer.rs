//! Levenshtein alignment and error rates.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// `(S + I + D) / |ref|`. `None` when the reference is empty but the
    /// hypothesis is not: the rate is undefined and only insertions are
    /// meaningful.
    pub fn rate(&self) -> Option<f64> {
        if self.reference_len == 0 {
            return if self.errors() == 0 { Some(0.0) } else { None };
        }
        Some(self.errors() as f64 / self.reference_len as f64)
    }

    pub fn merge(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.reference_len += other.reference_len;
    }
}

impl std::fmt::Display for EditCounts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.rate() {
            Some(r) => write!(
                f,
                "{:.4} (S={} I={} D={} N={})",
                r, self.substitutions, self.insertions, self.deletions, self.reference_len
            ),
            None => write!(f, "undefined: empty reference, {} insertions", self.insertions),
        }
    }
}

/// Minimum-edit alignment of `hyp` against `reference` with unit costs.
/// Among optimal alignments the backtrace prefers match/substitution, then
/// deletion, then insertion.
pub fn align<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dp[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            dp[i][j] = sub.min(dp[i - 1][j] + 1).min(dp[i][j - 1] + 1);
        }
    }
    let mut counts = EditCounts {
        reference_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hyp[j - 1]);
            if dp[i][j] == dp[i - 1][j - 1] + diff {
                counts.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[i][j] == dp[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Word-level counts over whitespace tokens.
pub fn word_error_rate(hyp: &str, reference: &str) -> EditCounts {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    align(&h, &r)
}

/// Character-level counts.
pub fn char_error_rate(hyp: &str, reference: &str) -> EditCounts {
    let h: Vec<char> = hyp.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    align(&h, &r)
}
