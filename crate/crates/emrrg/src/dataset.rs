//! On-disk corpus layout:
//!
//! ```text
//! manifest.json      counts, generator spec, split id lists, sha256 per file
//! {split}.jsonl      one {id, report, labels, findings} record per line
//! {split}.img        image stack, see `write_images`
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use emrrg_core::corpus::{Dataset, Finding, ReportSample, SyntheticSpec};
use emrrg_core::metrics::{LabelVector, CHEXPERT_CLASSES};
use emrrg_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{read, write, AppError, Result};
use crate::sha256_hex;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const IMAGE_MAGIC: &[u8; 8] = b"EMRRGIMG";
const IMAGE_VERSION: u32 = 1;
const DTYPE_F32_LE: u32 = 1;
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: u32,
    pub spec: SyntheticSpec,
    pub counts: BTreeMap<String, usize>,
    pub splits: BTreeMap<String, Vec<String>>,
    /// File name to hex sha256.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRecord {
    pub id: String,
    pub report: String,
    /// Positive class names.
    pub labels: Vec<String>,
    /// Planted findings with their side flag.
    #[serde(default)]
    pub findings: Vec<(Finding, bool)>,
}

pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub data: Dataset,
    /// sha256 of the manifest bytes, which pin every other file.
    pub hash: String,
}

pub fn label_names(labels: &LabelVector) -> Vec<String> {
    CHEXPERT_CLASSES
        .iter()
        .zip(labels.0)
        .filter(|(_, on)| *on)
        .map(|(c, _)| c.to_string())
        .collect()
}

pub fn parse_labels(names: &[String]) -> std::result::Result<LabelVector, String> {
    let mut v = [false; 14];
    for n in names {
        let k = CHEXPERT_CLASSES
            .iter()
            .position(|c| c == n)
            .ok_or_else(|| format!("unknown label `{n}`"))?;
        v[k] = true;
    }
    Ok(LabelVector(v))
}

pub fn record(s: &ReportSample) -> ReportRecord {
    ReportRecord {
        id: s.id.clone(),
        report: s.report.clone(),
        labels: label_names(&s.labels),
        findings: s.findings.clone(),
    }
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("plain records serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| AppError::corrupt(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Header: magic, u32 version, u32 dtype tag, u64 count, channels, height,
/// width. Body: little-endian f32 in image-major, row-major order.
pub fn encode_images(images: &[&Tensor], dims: [usize; 3]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(48 + images.len() * dims.iter().product::<usize>() * 4);
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32_LE.to_le_bytes());
    for d in [images.len(), dims[0], dims[1], dims[2]] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for img in images {
        if img.shape() != dims {
            return Err(AppError::Config(format!(
                "image shape {:?} differs from {:?}",
                img.shape(),
                dims
            )));
        }
        for &v in img.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_images(path: &Path, bytes: &[u8]) -> Result<Vec<Tensor>> {
    let bad = |r: &str| AppError::corrupt(path, r.to_string());
    if bytes.len() < 48 || &bytes[..8] != IMAGE_MAGIC {
        return Err(bad("not an image stack"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
    if u32_at(8) != IMAGE_VERSION {
        return Err(bad("unsupported image format version"));
    }
    if u32_at(12) != DTYPE_F32_LE {
        return Err(bad("unsupported dtype tag"));
    }
    let (n, c, h, w) = (u64_at(16), u64_at(24), u64_at(32), u64_at(40));
    let per = c
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| bad("dims overflow"))?;
    if n.checked_mul(per).and_then(|x| x.checked_mul(4)) != Some(bytes.len() - 48) {
        return Err(bad("body length does not match header dims"));
    }
    let body = &bytes[48..];
    (0..n)
        .map(|i| {
            let data = body[i * per * 4..(i + 1) * per * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            Tensor::new(&[c, h, w], data).map_err(AppError::from)
        })
        .collect()
}

pub fn image_dims(samples: &[ReportSample], spec: &SyntheticSpec) -> [usize; 3] {
    match samples.first() {
        Some(s) => [s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]],
        None => [1, spec.image_size, spec.image_size],
    }
}

/// Writes the corpus under `dir` and returns the manifest.
pub fn save(dir: &Path, spec: &SyntheticSpec, data: &Dataset) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest {
        format: FORMAT,
        spec: spec.clone(),
        counts: BTreeMap::new(),
        splits: BTreeMap::new(),
        checksums: BTreeMap::new(),
    };
    for name in SPLITS {
        let samples = data.split(name).expect("known split");
        let records: Vec<ReportRecord> = samples.iter().map(record).collect();
        let jsonl = to_jsonl(&records);
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        let img = encode_images(&images, image_dims(samples, spec))?;
        for (file, bytes) in [
            (format!("{name}.jsonl"), jsonl.as_bytes()),
            (format!("{name}.img"), &img[..]),
        ] {
            write(&dir.join(&file), bytes)?;
            manifest.checksums.insert(file, sha256_hex(bytes));
        }
        manifest.counts.insert(name.to_string(), samples.len());
        manifest.splits.insert(
            name.to_string(),
            samples.iter().map(|s| s.id.clone()).collect(),
        );
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write(&dir.join("manifest.json"), text)?;
    Ok(manifest)
}

fn checked(dir: &Path, manifest: &DatasetManifest, file: &str) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(file);
    let bytes = read(&path)?;
    let want = manifest
        .checksums
        .get(file)
        .ok_or_else(|| AppError::corrupt(&path, "file missing from manifest checksums"))?;
    let got = sha256_hex(&bytes);
    if &got != want {
        return Err(AppError::corrupt(
            &path,
            format!("checksum mismatch: manifest {want}, file {got}"),
        ));
    }
    Ok((path, bytes))
}

pub fn load_split(dir: &Path, manifest: &DatasetManifest, name: &str) -> Result<Vec<ReportSample>> {
    let (jpath, jbytes) = checked(dir, manifest, &format!("{name}.jsonl"))?;
    let (ipath, ibytes) = checked(dir, manifest, &format!("{name}.img"))?;
    let text = String::from_utf8(jbytes).map_err(|_| AppError::corrupt(&jpath, "not UTF-8"))?;
    let records: Vec<ReportRecord> = parse_jsonl(&jpath, &text)?;
    let images = decode_images(&ipath, &ibytes)?;
    if records.len() != images.len() {
        return Err(AppError::corrupt(
            &ipath,
            format!("{} images for {} records", images.len(), records.len()),
        ));
    }
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let listed: Vec<&str> = manifest
        .splits
        .get(name)
        .map(|v| v.iter().map(String::as_str).collect())
        .unwrap_or_default();
    if ids != listed {
        return Err(AppError::corrupt(
            &jpath,
            "record ids differ from the manifest split list",
        ));
    }
    records
        .into_iter()
        .zip(images)
        .map(|(r, image)| {
            let labels = parse_labels(&r.labels).map_err(|e| AppError::corrupt(&jpath, e))?;
            Ok(ReportSample {
                id: r.id,
                image,
                report: r.report,
                labels,
                findings: r.findings,
            })
        })
        .collect()
}

pub fn read_manifest(dir: &Path) -> Result<(DatasetManifest, String)> {
    let path = dir.join("manifest.json");
    let bytes = read(&path)?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| AppError::corrupt(&path, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(AppError::corrupt(
            &path,
            format!("unsupported dataset format {}", manifest.format),
        ));
    }
    Ok((manifest, sha256_hex(&bytes)))
}

pub fn load(dir: &Path) -> Result<LoadedDataset> {
    let (manifest, hash) = read_manifest(dir)?;
    let data = Dataset {
        train: load_split(dir, &manifest, "train")?,
        val: load_split(dir, &manifest, "val")?,
        test: load_split(dir, &manifest, "test")?,
    };
    Ok(LoadedDataset {
        manifest,
        data,
        hash,
    })
}
