//! Token error rate by Levenshtein alignment.

use serde::{Deserialize, Serialize};

/// Edit counts of one or more aligned utterances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub wer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub n_ref_tokens: usize,
}

impl EvalResult {
    pub fn from_counts(
        substitutions: usize,
        insertions: usize,
        deletions: usize,
        n_ref_tokens: usize,
    ) -> Self {
        let edits = substitutions + insertions + deletions;
        // An empty reference divides by one instead of zero.
        let wer = edits as f64 / n_ref_tokens.max(1) as f64;
        Self {
            wer,
            substitutions,
            insertions,
            deletions,
            n_ref_tokens,
        }
    }

    pub fn edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Corpus-level total: edits and reference lengths are summed before
    /// dividing.
    pub fn aggregate<'a>(parts: impl IntoIterator<Item = &'a EvalResult>) -> Self {
        let (mut s, mut i, mut d, mut n) = (0, 0, 0, 0);
        for p in parts {
            s += p.substitutions;
            i += p.insertions;
            d += p.deletions;
            n += p.n_ref_tokens;
        }
        Self::from_counts(s, i, d, n)
    }
}

/// Aligns `hyp` against `reference` with unit costs. When several
/// alignments are optimal the backtrace prefers substitution, then
/// deletion, then insertion.
pub fn wer<A: PartialEq>(reference: &[A], hyp: &[A]) -> EvalResult {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = dp[(i - 1) * w + j] + 1;
            let ins = dp[i * w + j - 1] + 1;
            dp[i * w + j] = sub.min(del).min(ins);
        }
    }

    let (mut s, mut ins, mut del) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let differs = reference[i - 1] != hyp[j - 1];
            if dp[(i - 1) * w + j - 1] + usize::from(differs) == here {
                s += usize::from(differs);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * w + j] + 1 == here {
            del += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    EvalResult::from_counts(s, ins, del, n)
}
