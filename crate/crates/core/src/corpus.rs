//! Procedural image/report pairs. Each image carries zero to three planted
//! motifs, and its report states each finding class as present or absent,
//! so the image determines the finding sentences.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hash::Fnv64;
use crate::metrics::LabelVector;
use crate::tensor::Tensor;
use crate::train::Example;
use crate::vocab::{Vocabulary, PROMPT};

/// Planted finding classes, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Finding {
    Cardiomegaly,
    Effusion,
    Pneumothorax,
    Nodule,
    Tube,
    Edema,
}

impl Finding {
    pub const ALL: [Finding; 6] = [
        Finding::Cardiomegaly,
        Finding::Effusion,
        Finding::Pneumothorax,
        Finding::Nodule,
        Finding::Tube,
        Finding::Edema,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Finding::Cardiomegaly => "cardiomegaly",
            Finding::Effusion => "effusion",
            Finding::Pneumothorax => "pneumothorax",
            Finding::Nodule => "nodule",
            Finding::Tube => "tube",
            Finding::Edema => "edema",
        }
    }

    /// Index into the 14-class label vector.
    pub fn label_index(self) -> usize {
        match self {
            Finding::Cardiomegaly => 2,
            Finding::Effusion => 10,
            Finding::Pneumothorax => 9,
            Finding::Nodule => 4,
            Finding::Tube => 13,
            Finding::Edema => 5,
        }
    }

    fn positive(self, left: bool) -> String {
        let side = if left { "left" } else { "right" };
        match self {
            Finding::Cardiomegaly => "there is cardiomegaly.".into(),
            Finding::Effusion => "there is a pleural effusion at the base.".into(),
            Finding::Pneumothorax => format!("there is a {side} pneumothorax."),
            Finding::Nodule => format!("there is a nodule in the {side} lung."),
            Finding::Tube => "there is a support tube in place.".into(),
            Finding::Edema => "there is pulmonary edema.".into(),
        }
    }

    fn negative(self) -> String {
        format!("no evidence of {}.", self.name())
    }
}

const OPENINGS: [&str; 3] = [
    "frontal view of the chest.",
    "single frontal radiograph of the chest.",
    "pa and lateral views of the chest.",
];

const CLOSINGS: [&str; 2] = [
    "the osseous structures are intact.",
    "bony structures appear stable.",
];

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Train, validation and test fractions.
    pub split_ratios: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 512,
            image_size: 64,
            seed: 0,
            split_ratios: [0.7, 0.1, 0.2],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|&r| !(r >= 0.0)) || libm::fabs(sum - 1.0) > 1e-9 {
            return Err(Error::Config(format!(
                "split_ratios must be non-negative and sum to 1, got {:?}",
                self.split_ratios
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes; the test split takes the remainder.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_samples as f64;
        let train = libm::floor(n * self.split_ratios[0]) as usize;
        let val = libm::floor(n * self.split_ratios[1]) as usize;
        let val = val.min(self.n_samples - train);
        (train, val, self.n_samples - train - val)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSample {
    pub id: String,
    /// `[1 × S × S]`, values exactly representable in f32.
    pub image: Tensor,
    pub report: String,
    pub labels: LabelVector,
    /// Planted findings with their side flag.
    pub findings: Vec<(Finding, bool)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<ReportSample>,
    pub val: Vec<ReportSample>,
    pub test: Vec<ReportSample>,
}

impl Dataset {
    /// Vocabulary over the prompt and the training reports only.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::build(
            core::iter::once(PROMPT).chain(self.train.iter().map(|s| s.report.as_str())),
        )
    }

    pub fn split(&self, name: &str) -> Option<&[ReportSample]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

fn sample_seed(seed: u64, i: usize) -> u64 {
    let mut h = Fnv64::new();
    h.write_u64(seed);
    h.write_u64(i as u64);
    h.finish()
}

fn add_disc(img: &mut [f64], s: usize, cx: f64, cy: f64, r: f64, v: f64) {
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                img[y * s + x] += v;
            }
        }
    }
}

fn add_rect(img: &mut [f64], s: usize, x0: usize, x1: usize, y0: usize, y1: usize, v: f64) {
    for y in y0..y1.min(s) {
        for x in x0..x1.min(s) {
            img[y * s + x] += v;
        }
    }
}

fn plant(img: &mut [f64], s: usize, f: Finding, left: bool, rng: &mut ChaCha8Rng) {
    let sf = s as f64;
    match f {
        Finding::Cardiomegaly => {
            let j = |rng: &mut ChaCha8Rng| rng.gen_range(-0.05..0.05) * sf;
            let (cx, cy) = (0.5 * sf + j(rng), 0.55 * sf + j(rng));
            add_disc(img, s, cx, cy, 0.22 * sf, 0.6);
        }
        Finding::Effusion => {
            let top = ((0.78 + rng.gen_range(0.0..0.06)) * sf) as usize;
            add_rect(img, s, 0, s, top, s, 0.5);
        }
        Finding::Pneumothorax => {
            let w = (0.1 * sf) as usize;
            let x0 = if left {
                (0.08 * sf) as usize
            } else {
                s - (0.08 * sf) as usize - w
            };
            add_rect(
                img,
                s,
                x0,
                x0 + w,
                (0.1 * sf) as usize,
                (0.7 * sf) as usize,
                0.5,
            );
        }
        Finding::Nodule => {
            let cx = if left {
                rng.gen_range(0.15..0.35)
            } else {
                rng.gen_range(0.65..0.85)
            } * sf;
            let cy = rng.gen_range(0.2..0.45) * sf;
            add_disc(img, s, cx, cy, 0.07 * sf, 0.8);
        }
        Finding::Tube => {
            let x = (0.5 * sf) as usize + rng.gen_range(0..3);
            add_rect(img, s, x, x + 2, 0, (0.6 * sf) as usize, 0.9);
        }
        Finding::Edema => {
            let phase = rng.gen_range(0.0..core::f64::consts::TAU);
            for y in 0..s {
                for x in 0..s {
                    let v = libm::sin(0.9 * x as f64 + phase) * libm::sin(0.9 * y as f64);
                    img[y * s + x] += 0.3 * v;
                }
            }
        }
    }
}

/// One sample from its own derived seed.
pub fn generate_sample(spec: &SyntheticSpec, index: usize) -> Result<ReportSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, index));
    let s = spec.image_size;
    let mut img: Vec<f64> = (0..s * s).map(|_| 0.1 + rng.gen_range(0.0..0.1)).collect();

    let k = rng.gen_range(0..=3usize);
    let mut picked: Vec<usize> = sample(&mut rng, Finding::ALL.len(), k).into_vec();
    picked.sort_unstable();
    let mut findings = Vec::with_capacity(k);
    for i in picked {
        let f = Finding::ALL[i];
        let left = rng.gen_bool(0.5);
        plant(&mut img, s, f, left, &mut rng);
        findings.push((f, left));
    }
    let data: Vec<f64> = img.into_iter().map(|v| v as f32 as f64).collect();
    let image = Tensor::new(&[1, s, s], data)?;

    let mut sentences: Vec<String> = vec![OPENINGS[rng.gen_range(0..OPENINGS.len())].into()];
    let mut labels = [false; 14];
    for f in Finding::ALL {
        match findings.iter().find(|(g, _)| *g == f) {
            Some(&(_, left)) => {
                sentences.push(f.positive(left));
                labels[f.label_index()] = true;
            }
            None => sentences.push(f.negative()),
        }
    }
    sentences.push(CLOSINGS[rng.gen_range(0..CLOSINGS.len())].into());
    Ok(ReportSample {
        id: format!("syn{:03}-{index:05}", spec.seed % 1000),
        image,
        report: sentences.join(" "),
        labels: LabelVector(labels),
        findings,
    })
}

/// Generates every sample and splits them in order.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut all = (0..spec.n_samples)
        .map(|i| generate_sample(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let (tr, va, _) = spec.split_sizes();
    let test = all.split_off(tr + va);
    let val = all.split_off(tr);
    Ok(Dataset {
        train: all,
        val,
        test,
    })
}

/// Pairs samples with encoded reports.
pub fn to_examples(samples: &[ReportSample], vocab: &Vocabulary) -> Vec<Example> {
    samples
        .iter()
        .map(|s| Example {
            id: s.id.clone(),
            image: s.image.clone(),
            report: s.report.clone(),
            report_ids: vocab.encode(&s.report),
        })
        .collect()
}

/// Mean intensity over a `g × g` grid of cells.
pub fn motif_features(image: &Tensor, g: usize) -> Vec<f64> {
    let s = image.shape()[1];
    let cell = s / g;
    let d = image.data();
    let mut out = vec![0.0; g * g];
    for gy in 0..g {
        for gx in 0..g {
            let mut acc = 0.0;
            for y in gy * cell..(gy + 1) * cell {
                for x in gx * cell..(gx + 1) * cell {
                    acc += d[y * s + x];
                }
            }
            out[gy * g + gx] = acc / (cell * cell) as f64;
        }
    }
    out
}
