//! Corpus metrics against brute-force oracles that share no code with the
//! crate, and against values frozen by `fixtures/oracle.py`.

use emrrg_core::metrics::{
    bleu, ce_metrics, cider, label_report, meteor, rouge_l, tokenize, Averaging, LabelVector,
    MetricReport,
};
use proptest::prelude::*;

const PAIRS: &str = include_str!("fixtures/golden_pairs.json");
const FROZEN: &str = include_str!("fixtures/golden_metrics.json");

fn fixture() -> (Vec<String>, Vec<String>) {
    let v: serde_json::Value = serde_json::from_str(PAIRS).unwrap();
    v.as_array()
        .unwrap()
        .iter()
        .map(|p| {
            (
                p["prediction"].as_str().unwrap().to_string(),
                p["reference"].as_str().unwrap().to_string(),
            )
        })
        .unzip()
}

fn toks(s: &[String]) -> Vec<Vec<String>> {
    s.iter().map(|t| tokenize(t)).collect()
}

fn all_ngrams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return vec![];
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn oracle_bleu(c: &[Vec<String>], r: &[Vec<String>], n: usize) -> f64 {
    let clen: usize = c.iter().map(Vec::len).sum();
    let rlen: usize = r.iter().map(Vec::len).sum();
    let mut p = 1.0f64;
    for k in 1..=n {
        let (mut num, mut den) = (0usize, 0usize);
        for (a, b) in c.iter().zip(r) {
            let ga = all_ngrams(a, k);
            let gb = all_ngrams(b, k);
            let mut seen: Vec<Vec<String>> = vec![];
            for g in &ga {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g.clone());
                num += count(&ga, g).min(count(&gb, g));
            }
            den += ga.len();
        }
        if num == 0 {
            return 0.0;
        }
        p *= num as f64 / den as f64;
    }
    let bp = if clen < rlen {
        (1.0 - rlen as f64 / clen as f64).exp()
    } else {
        1.0
    };
    bp * p.powf(1.0 / n as f64)
}

fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] {
                1 + t[i + 1][j + 1]
            } else {
                t[i + 1][j].max(t[i][j + 1])
            };
        }
    }
    t[0][0]
}

fn oracle_rouge(c: &[Vec<String>], r: &[Vec<String>]) -> f64 {
    let mut s = 0.0;
    for (a, b) in c.iter().zip(r) {
        let l = oracle_lcs(a, b) as f64;
        if l > 0.0 {
            let (p, rc) = (l / a.len() as f64, l / b.len() as f64);
            s += 2.44 * p * rc / (rc + 1.44 * p);
        }
    }
    s / c.len() as f64
}

fn oracle_meteor(c: &[Vec<String>], r: &[Vec<String>]) -> f64 {
    let mut s = 0.0;
    for (a, b) in c.iter().zip(r) {
        let mut align = vec![];
        for (i, w) in a.iter().enumerate() {
            let k = a[..i].iter().filter(|x| *x == w).count();
            if let Some((j, _)) = b.iter().enumerate().filter(|(_, x)| *x == w).nth(k) {
                align.push((i, j));
            }
        }
        let m = align.len() as f64;
        if m == 0.0 {
            continue;
        }
        let (p, rc) = (m / a.len() as f64, m / b.len() as f64);
        let f = p * rc / (0.9 * p + 0.1 * rc);
        let breaks = align
            .windows(2)
            .filter(|w| w[1] != (w[0].0 + 1, w[0].1 + 1))
            .count();
        s += f * (1.0 - 0.5 * ((breaks + 1) as f64 / m).powi(3));
    }
    s / c.len() as f64
}

fn oracle_cider(c: &[Vec<String>], r: &[Vec<String>]) -> f64 {
    let n_docs = r.len() as f64;
    let mut total = 0.0;
    for (a, b) in c.iter().zip(r) {
        for n in 1..=4 {
            let ga = all_ngrams(a, n);
            let gb = all_ngrams(b, n);
            let idf = |g: &Vec<String>| {
                let df = r.iter().filter(|d| all_ngrams(d, n).contains(g)).count();
                n_docs.ln() - (df.max(1) as f64).ln()
            };
            let mut vocab: Vec<Vec<String>> = ga.iter().chain(&gb).cloned().collect();
            vocab.sort();
            vocab.dedup();
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for g in &vocab {
                let w = idf(g);
                let x = count(&ga, g) as f64 * w;
                let y = count(&gb, g) as f64 * w;
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na > 0.0 && nb > 0.0 {
                total += dot / (na.sqrt() * nb.sqrt()) / 4.0;
            }
        }
    }
    10.0 * total / c.len() as f64
}

fn oracle_ce(p: &[LabelVector], t: &[LabelVector]) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(t) {
        for k in 0..14 {
            tp += (a.0[k] && b.0[k]) as u8 as f64;
            fp += (a.0[k] && !b.0[k]) as u8 as f64;
            fn_ += (!a.0[k] && b.0[k]) as u8 as f64;
        }
    }
    let pr = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let rc = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if pr + rc > 0.0 {
        2.0 * pr * rc / (pr + rc)
    } else {
        0.0
    };
    (pr, rc, f1)
}

fn close(a: f64, b: f64, what: &str) {
    assert!((a - b).abs() < 1e-10, "{what}: {a} vs {b}");
}

#[test]
fn golden_fixture_matches_oracles_and_frozen_values() {
    let (preds, refs) = fixture();
    assert_eq!(preds.len(), 20);
    let (c, r) = (toks(&preds), toks(&refs));
    let p: Vec<&str> = preds.iter().map(String::as_str).collect();
    let q: Vec<&str> = refs.iter().map(String::as_str).collect();
    let m = MetricReport::compute(&p, &q, Averaging::Micro).unwrap();

    let frozen: serde_json::Value = serde_json::from_str(FROZEN).unwrap();
    let f = |k: &str| frozen[k].as_f64().unwrap();
    for n in 1..=4 {
        close(m.bleu[n - 1], oracle_bleu(&c, &r, n), "bleu oracle");
        close(
            m.bleu[n - 1],
            frozen["bleu"][n - 1].as_f64().unwrap(),
            "bleu frozen",
        );
    }
    close(m.rouge_l, oracle_rouge(&c, &r), "rouge oracle");
    close(m.rouge_l, f("rouge_l"), "rouge frozen");
    close(m.meteor, oracle_meteor(&c, &r), "meteor oracle");
    close(m.meteor, f("meteor"), "meteor frozen");
    close(m.cider, oracle_cider(&c, &r), "cider oracle");
    close(m.cider, f("cider"), "cider frozen");
    let lp: Vec<LabelVector> = p.iter().map(|s| label_report(s)).collect();
    let lr: Vec<LabelVector> = q.iter().map(|s| label_report(s)).collect();
    let (pr, rc, f1) = oracle_ce(&lp, &lr);
    close(m.ce_precision, pr, "ce p");
    close(m.ce_recall, rc, "ce r");
    close(m.ce_f1, f1, "ce f1");
    close(m.ce_precision, f("ce_precision"), "ce p frozen");
    close(m.ce_recall, f("ce_recall"), "ce r frozen");
    close(m.ce_f1, f("ce_f1"), "ce f1 frozen");
}

#[test]
fn identity_fixture() {
    let (_, refs) = fixture();
    let q: Vec<&str> = refs.iter().map(String::as_str).collect();
    let m = MetricReport::compute(&q, &q, Averaging::Micro).unwrap();
    assert_eq!(m.bleu, [1.0; 4]);
    assert_eq!(m.rouge_l, 1.0);
    assert_eq!((m.ce_precision, m.ce_recall, m.ce_f1), (1.0, 1.0, 1.0));
    let want: f64 = toks(&refs)
        .iter()
        .map(|t| 1.0 - 0.5 / (t.len() as f64).powi(3))
        .sum::<f64>()
        / 20.0;
    close(m.meteor, want, "meteor single chunk");

    let unique = [
        "there is cardiomegaly and edema today",
        "a support tube sits in the svc now",
        "both lungs look fully clear here",
    ];
    let m = MetricReport::compute(&unique, &unique, Averaging::Micro).unwrap();
    close(m.cider, 10.0, "cider unique");
}

#[test]
fn disjoint_fixture_scores_zero() {
    let c = ["zebra quartz violin", "amber orbit"];
    let r = ["there is cardiomegaly.", "no evidence of effusion."];
    let m = MetricReport::compute(&c, &r, Averaging::Micro).unwrap();
    assert_eq!(m.values(), [0.0; 10]);
}

#[test]
fn ce_arithmetic_fixture() {
    let lv = |pos: &[usize]| {
        let mut v = [false; 14];
        for &p in pos {
            v[p] = true;
        }
        LabelVector(v)
    };
    let s = ce_metrics(
        &[lv(&[2, 5]), lv(&[9])],
        &[lv(&[2, 5]), lv(&[10])],
        Averaging::Micro,
    )
    .unwrap();
    assert_eq!(
        (s.precision, s.recall, s.f1),
        (2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0)
    );
}

#[test]
fn hand_examples() {
    let t = |s: &str| vec![tokenize(s)];
    assert_eq!(
        bleu(&t("the the the"), &t("the cat"), 1).unwrap(),
        1.0 / 3.0
    );
    let rl = rouge_l(&t("a b c d"), &t("a c d")).unwrap();
    let (p, r) = (0.75, 1.0);
    close(rl, 2.44 * p * r / (r + 1.44 * p), "rouge hand");
    let cands = [tokenize("a b c"), tokenize("d e"), tokenize("a d f")];
    let refs = [tokenize("a b"), tokenize("d e e"), tokenize("c f")];
    close(
        cider(&cands, &refs).unwrap(),
        oracle_cider(&cands, &refs),
        "cider toy",
    );
    close(
        meteor(&cands, &refs).unwrap(),
        oracle_meteor(&cands, &refs),
        "meteor toy",
    );
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec!["a", "b", "c", "d", "no", "effusion", "edema", "."]),
        1..12,
    )
    .prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_corpora_match_oracles(pairs in prop::collection::vec((sentence(), sentence()), 2..8)) {
        let (p, r): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
        let (c, t) = (toks(&p), toks(&r));
        prop_assume!(c.iter().all(|x| !x.is_empty()) && t.iter().all(|x| !x.is_empty()));
        for n in 1..=4 {
            let got = bleu(&c, &t, n).unwrap();
            prop_assert!((got - oracle_bleu(&c, &t, n)).abs() < 1e-10);
        }
        prop_assert!((rouge_l(&c, &t).unwrap() - oracle_rouge(&c, &t)).abs() < 1e-10);
        prop_assert!((meteor(&c, &t).unwrap() - oracle_meteor(&c, &t)).abs() < 1e-10);
        prop_assert!((cider(&c, &t).unwrap() - oracle_cider(&c, &t)).abs() < 1e-10);
    }

    #[test]
    fn ranges_and_order_independence(pairs in prop::collection::vec((sentence(), sentence()), 2..8), rot in 0usize..8) {
        let p: Vec<&str> = pairs.iter().map(|x| x.0.as_str()).collect();
        let r: Vec<&str> = pairs.iter().map(|x| x.1.as_str()).collect();
        let m = MetricReport::compute(&p, &r, Averaging::Micro).unwrap();
        for (i, v) in m.values().iter().enumerate() {
            let hi = if i == 6 { 10.0 } else { 1.0 };
            prop_assert!((0.0..=hi).contains(v), "{} = {}", MetricReport::COLUMNS[i], v);
        }
        let k = rot % p.len();
        let (mut p2, mut r2) = (p.clone(), r.clone());
        p2.rotate_left(k);
        r2.rotate_left(k);
        prop_assert_eq!(MetricReport::compute(&p2, &r2, Averaging::Micro).unwrap(), m);
    }

    #[test]
    fn deleting_a_matched_token_never_raises_bleu1(a in sentence(), b in sentence(), i in 0usize..12) {
        let ca = tokenize(&a);
        let rb = tokenize(&b);
        prop_assume!(!ca.is_empty() && !rb.is_empty());
        let i = i % ca.len();
        let occurs = |t: &[String]| t.iter().filter(|w| **w == ca[i]).count();
        prop_assume!(ca.len() > 1 && occurs(&ca) <= occurs(&rb));
        let mut shorter = ca.clone();
        shorter.remove(i);
        let before = bleu(&[ca], std::slice::from_ref(&rb), 1).unwrap();
        let after = bleu(&[shorter], &[rb], 1).unwrap();
        prop_assert!(after <= before + 1e-15);
    }
}
