//! Corpus text-generation metrics and clinical-efficacy scores.
//!
//! Every metric runs on [`tokenize`]d text. Corpus reductions sum sorted
//! per-pair values, so results do not depend on corpus order.

mod bleu;
mod cider;
mod clinical;
mod meteor;
mod rouge;

pub use bleu::{bleu, bleu_all};
pub use cider::cider;
pub use clinical::{ce_metrics, label_report, Averaging, CeScores, LabelVector, CHEXPERT_CLASSES};
pub use meteor::{meteor, meteor_pair};
pub use rouge::{lcs_len, rouge_l, rouge_l_pair};

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Parameters that differ from common reference tooling.
pub const METRIC_NOTES: &str = "BLEU corpus-level; ROUGE-L beta=1.2; METEOR exact-match (alpha=0.9, beta=3, gamma=0.5); CIDEr (not CIDEr-D)";

/// Lower-case, ASCII punctuation to spaces, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(String::from).collect()
}

pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub(crate) fn check_pairs(cands: usize, refs: usize, op: &'static str) -> Result<()> {
    if cands != refs {
        return Err(Error::dim(op, &[cands], &[refs]));
    }
    if cands == 0 {
        return Err(Error::Contract(alloc::format!("{op} on an empty corpus")));
    }
    Ok(())
}

/// Order-independent mean.
pub(crate) fn sorted_mean(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter().sum::<f64>() / n
}

fn tokenize_all(texts: &[&str]) -> Vec<Vec<String>> {
    texts.iter().map(|t| tokenize(t)).collect()
}

/// Corpus BLEU-`n` of raw strings.
pub fn bleu_text(cands: &[&str], refs: &[&str], n: usize) -> Result<f64> {
    bleu(&tokenize_all(cands), &tokenize_all(refs), n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
}

impl MetricReport {
    pub fn compute(preds: &[&str], refs: &[&str], averaging: Averaging) -> Result<Self> {
        let c = tokenize_all(preds);
        let r = tokenize_all(refs);
        let ce = ce_metrics(
            &preds.iter().map(|p| label_report(p)).collect::<Vec<_>>(),
            &refs.iter().map(|p| label_report(p)).collect::<Vec<_>>(),
            averaging,
        )?;
        Ok(MetricReport {
            bleu: bleu_all(&c, &r)?,
            rouge_l: rouge_l(&c, &r)?,
            meteor: meteor(&c, &r)?,
            cider: cider(&c, &r)?,
            ce_precision: ce.precision,
            ce_recall: ce.recall,
            ce_f1: ce.f1,
        })
    }

    pub const COLUMNS: [&'static str; 10] = [
        "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "METEOR", "CIDEr", "CE-P", "CE-R",
        "CE-F1",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.rouge_l,
            self.meteor,
            self.cider,
            self.ce_precision,
            self.ce_recall,
            self.ce_f1,
        ]
    }
}
