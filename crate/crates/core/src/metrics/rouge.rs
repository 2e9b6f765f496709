use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{check_pairs, sorted_mean};
use crate::error::Result;

const BETA: f64 = 1.2;

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure `(1+β²)PR / (R + β²P)`; 0 when either side is empty.
pub fn rouge_l_pair(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(cand, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / cand.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = BETA * BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(cands: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_pairs(cands.len(), refs.len(), "rouge_l")?;
    Ok(sorted_mean(
        cands
            .iter()
            .zip(refs)
            .map(|(c, r)| rouge_l_pair(c, r))
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::super::tokenize;
    use super::*;

    #[test]
    fn hand_example() {
        let v = rouge_l_pair(&tokenize("a b c d"), &tokenize("a c d"));
        let (p, r, b2) = (0.75, 1.0, 1.44);
        assert!((v - (1.0 + b2) * p * r / (r + b2 * p)).abs() < 1e-15);
        assert_eq!(rouge_l_pair(&tokenize("a b"), &tokenize("a b")), 1.0);
        assert_eq!(rouge_l_pair(&tokenize("a b"), &tokenize("c d")), 0.0);
    }
}
