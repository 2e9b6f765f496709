use alloc::string::String;

use super::{check_pairs, ngram_counts};
use crate::error::{Error, Result};

/// Corpus BLEU with uniform weights over orders `1..=n` and a single
/// reference per candidate. Any zero modified precision gives 0.
pub fn bleu(
    cands: &[alloc::vec::Vec<String>],
    refs: &[alloc::vec::Vec<String>],
    n: usize,
) -> Result<f64> {
    check_pairs(cands.len(), refs.len(), "bleu")?;
    if !(1..=4).contains(&n) {
        return Err(Error::Contract(alloc::format!(
            "BLEU order {n} outside 1..=4"
        )));
    }
    let c: usize = cands.iter().map(|t| t.len()).sum();
    let r: usize = refs.iter().map(|t| t.len()).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (cand, reference) in cands.iter().zip(refs) {
            let rc = ngram_counts(reference, k);
            for (g, cnt) in ngram_counts(cand, k) {
                matched += cnt.min(rc.get(g).copied().unwrap_or(0));
                total += cnt;
            }
        }
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += libm::log(matched as f64 / total as f64);
    }
    let bp = if c < r {
        libm::exp(1.0 - r as f64 / c as f64)
    } else {
        1.0
    };
    Ok(bp * libm::exp(log_sum / n as f64))
}

/// BLEU-1 through BLEU-4.
pub fn bleu_all(
    cands: &[alloc::vec::Vec<String>],
    refs: &[alloc::vec::Vec<String>],
) -> Result<[f64; 4]> {
    Ok([
        bleu(cands, refs, 1)?,
        bleu(cands, refs, 2)?,
        bleu(cands, refs, 3)?,
        bleu(cands, refs, 4)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::super::tokenize;
    use super::*;

    fn b(c: &str, r: &str, n: usize) -> f64 {
        bleu(&[tokenize(c)], &[tokenize(r)], n).unwrap()
    }

    #[test]
    fn worked_examples() {
        assert!((b("the the the", "the cat", 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(b("a b c d", "a b c d", 4), 1.0);
        assert_eq!(b("x y", "a b", 1), 0.0);
        // c = 2 < r = 4: BP = e^{-1}
        assert!((b("a b", "a b c d", 1) - libm::exp(-1.0)).abs() < 1e-15);
    }

    #[test]
    fn deleting_a_match_never_raises_bleu1() {
        let full = b("a b c d e", "a b c x", 1);
        let cut = b("a c d e", "a b c x", 1);
        assert!(cut <= full);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(bleu(&[], &[], 1).is_err());
    }
}
