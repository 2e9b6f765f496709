use alloc::string::String;
use alloc::vec::Vec;

use super::{check_pairs, tokenize};
use crate::error::Result;

/// CheXpert label set, in canonical order.
pub const CHEXPERT_CLASSES: [&str; 14] = [
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
];

const KEYWORDS: [&[&str]; 14] = [
    &["unremarkable"],
    &["cardiomediastinum", "mediastinal widening"],
    &["cardiomegaly", "enlarged heart"],
    &["opacity", "opacities"],
    &["nodule", "mass", "lesion"],
    &["edema"],
    &["consolidation"],
    &["pneumonia"],
    &["atelectasis"],
    &["pneumothorax"],
    &["effusion"],
    &["pleural thickening"],
    &["fracture"],
    &["tube", "catheter", "pacemaker"],
];

const NEGATIONS: [&str; 3] = ["no", "without", "negative"];
const NEGATION_WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LabelVector(pub [bool; 14]);

impl LabelVector {
    pub fn positives(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// A class is positive when one of its keyword phrases occurs with none of
/// the three preceding tokens being a negation word.
pub fn label_report(text: &str) -> LabelVector {
    let toks: Vec<String> = tokenize(text);
    let mut out = [false; 14];
    for (class, phrases) in KEYWORDS.iter().enumerate() {
        'phrases: for phrase in phrases.iter() {
            let words: Vec<&str> = phrase.split(' ').collect();
            if words.len() > toks.len() {
                continue;
            }
            for start in 0..=toks.len() - words.len() {
                if toks[start..start + words.len()]
                    .iter()
                    .zip(&words)
                    .all(|(t, w)| t == w)
                {
                    let from = start.saturating_sub(NEGATION_WINDOW);
                    if !toks[from..start]
                        .iter()
                        .any(|t| NEGATIONS.contains(&t.as_str()))
                    {
                        out[class] = true;
                        break 'phrases;
                    }
                }
            }
        }
    }
    LabelVector(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Averaging {
    /// Pooled over every (report, class) cell.
    Micro,
    /// Mean of per-class scores over classes that occur in either side.
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> CeScores {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    CeScores {
        precision,
        recall,
        f1,
    }
}

pub fn ce_metrics(
    preds: &[LabelVector],
    truths: &[LabelVector],
    averaging: Averaging,
) -> Result<CeScores> {
    check_pairs(preds.len(), truths.len(), "ce_metrics")?;
    let mut counts = [(0usize, 0usize, 0usize); 14];
    for (p, t) in preds.iter().zip(truths) {
        for (k, c) in counts.iter_mut().enumerate() {
            match (p.0[k], t.0[k]) {
                (true, true) => c.0 += 1,
                (true, false) => c.1 += 1,
                (false, true) => c.2 += 1,
                (false, false) => {}
            }
        }
    }
    Ok(match averaging {
        Averaging::Micro => {
            let (tp, fp, fn_) = counts
                .iter()
                .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
            prf(tp, fp, fn_)
        }
        Averaging::Macro => {
            let active: Vec<CeScores> = counts
                .iter()
                .filter(|c| c.0 + c.1 + c.2 > 0)
                .map(|c| prf(c.0, c.1, c.2))
                .collect();
            if active.is_empty() {
                return Ok(prf(0, 0, 0));
            }
            let n = active.len() as f64;
            CeScores {
                precision: active.iter().map(|s| s.precision).sum::<f64>() / n,
                recall: active.iter().map(|s| s.recall).sum::<f64>() / n,
                f1: active.iter().map(|s| s.f1).sum::<f64>() / n,
            }
        }
    })
}
