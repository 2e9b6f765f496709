use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use super::{check_pairs, ngram_counts, sorted_mean};
use crate::error::{Error, Result};

/// Plain CIDEr: per order `n ∈ 1..=4`, cosine similarity of TF-IDF n-gram
/// vectors with document frequencies over the references; mean over orders
/// times 10, then mean over pairs. A zero vector scores 0.
pub fn cider(cands: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_pairs(cands.len(), refs.len(), "cider")?;
    if refs.len() < 2 {
        return Err(Error::Contract(
            "CIDEr needs at least 2 reference documents".into(),
        ));
    }
    let n_docs = refs.len() as f64;
    let mut scores = alloc::vec![0.0; cands.len()];
    for n in 1..=4 {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for r in refs {
            let uniq: BTreeSet<&[String]> = ngram_counts(r, n).into_keys().collect();
            for g in uniq {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| {
            libm::log(n_docs) - libm::log(df.get(g).copied().unwrap_or(0).max(1) as f64)
        };
        for (i, (c, r)) in cands.iter().zip(refs).enumerate() {
            let vc: BTreeMap<&[String], f64> = ngram_counts(c, n)
                .into_iter()
                .map(|(g, k)| (g, k as f64 * idf(g)))
                .collect();
            let vr: BTreeMap<&[String], f64> = ngram_counts(r, n)
                .into_iter()
                .map(|(g, k)| (g, k as f64 * idf(g)))
                .collect();
            let dot: f64 = vc
                .iter()
                .map(|(g, a)| a * vr.get(g).copied().unwrap_or(0.0))
                .sum();
            let nc = libm::sqrt(vc.values().map(|a| a * a).sum::<f64>());
            let nr = libm::sqrt(vr.values().map(|a| a * a).sum::<f64>());
            if nc > 0.0 && nr > 0.0 {
                scores[i] += dot / (nc * nr) / 4.0;
            }
        }
    }
    Ok(10.0 * sorted_mean(scores))
}
