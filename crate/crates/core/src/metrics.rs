//! Levenshtein distance and the word / character error rates built on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum number of unit-cost insertions, deletions and substitutions turning `a` into `b`.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Pooled error counts over a set of reference/hypothesis pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub edits: usize,
    pub reference_len: usize,
}

impl ErrorCounts {
    pub fn rate(&self) -> Result<f64> {
        if self.reference_len == 0 {
            return Err(Error::Contract(
                "error rate with zero total reference length".into(),
            ));
        }
        Ok(self.edits as f64 / self.reference_len as f64)
    }
}

/// `Σ edit_distance(ref, hyp) / Σ |ref|` over unit sequences.
pub fn pooled_error_rate<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Contract(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let counts = refs
        .iter()
        .zip(hyps)
        .fold(ErrorCounts::default(), |acc, (r, h)| ErrorCounts {
            edits: acc.edits + edit_distance(r, h),
            reference_len: acc.reference_len + r.len(),
        });
    counts.rate()
}

/// Word error rate over whitespace-separated words.
pub fn wer<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> Result<f64> {
    let split = |v: &[S]| -> Vec<Vec<String>> {
        v.iter()
            .map(|s| s.as_ref().split_whitespace().map(str::to_owned).collect())
            .collect()
    };
    pooled_error_rate(&split(refs), &split(hyps))
}

/// Character error rate.
pub fn cer<S: AsRef<str>>(refs: &[S], hyps: &[S]) -> Result<f64> {
    let chars = |v: &[S]| -> Vec<Vec<char>> { v.iter().map(|s| s.as_ref().chars().collect()).collect() };
    pooled_error_rate(&chars(refs), &chars(hyps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn classic_examples() {
        assert_eq!(edit_distance(&chars("kitten"), &chars("sitting")), 3);
        assert_eq!(edit_distance(&chars("abc"), &chars("abc")), 0);
        assert_eq!(edit_distance(&chars(""), &chars("abcd")), 4);
        assert_eq!(edit_distance(&chars("abcd"), &chars("")), 4);
    }

    #[test]
    fn rates() {
        assert_eq!(wer(&["a b c d"], &["a b c d"]).unwrap(), 0.0);
        assert_eq!(wer(&["a b c d"], &["a x c d"]).unwrap(), 0.25);
        // distances 1 and 2 over lengths 3 and 5
        let r = wer(&["a b c", "a b c d e"], &["a b x", "a c d"]).unwrap();
        assert_eq!(r, 3.0 / 8.0);
        assert_eq!(cer(&["abcd"], &["abce"]).unwrap(), 0.25);
        assert!(wer(&[""], &["a"]).is_err());
        assert!(wer(&["a"], &[]).is_err());
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(
            a in proptest::collection::vec(0u8..4, 0..10),
            b in proptest::collection::vec(0u8..4, 0..10),
            c in proptest::collection::vec(0u8..4, 0..10),
        ) {
            let ab = edit_distance(&a, &b);
            prop_assert_eq!(ab, edit_distance(&b, &a));
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
            prop_assert!(ab <= a.len().max(b.len()));
        }
    }
}
