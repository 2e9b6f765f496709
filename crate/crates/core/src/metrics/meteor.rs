use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use super::{check_pairs, sorted_mean};
use crate::error::Result;

const ALPHA: f64 = 0.9;
const BETA: f64 = 3.0;
const GAMMA: f64 = 0.5;

/// Exact-match METEOR: the k-th occurrence of a word in the candidate aligns
/// with its k-th occurrence in the reference.
pub fn meteor_pair(cand: &[String], reference: &[String]) -> f64 {
    let mut ref_pos: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (j, w) in reference.iter().enumerate() {
        ref_pos.entry(w.as_str()).or_default().push(j);
    }
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut alignment: Vec<(usize, usize)> = Vec::new();
    for (i, w) in cand.iter().enumerate() {
        let k = seen.entry(w.as_str()).or_insert(0);
        if let Some(&j) = ref_pos.get(w.as_str()).and_then(|v| v.get(*k)) {
            alignment.push((i, j));
        }
        *k += 1;
    }
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (ALPHA * p + (1.0 - ALPHA) * r);
    let mut chunks = 1;
    for w in alignment.windows(2) {
        if !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1) {
            chunks += 1;
        }
    }
    let penalty = GAMMA * libm::pow(chunks as f64 / m as f64, BETA);
    fmean * (1.0 - penalty)
}

pub fn meteor(cands: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_pairs(cands.len(), refs.len(), "meteor")?;
    Ok(sorted_mean(
        cands
            .iter()
            .zip(refs)
            .map(|(c, r)| meteor_pair(c, r))
            .collect(),
    ))
}
