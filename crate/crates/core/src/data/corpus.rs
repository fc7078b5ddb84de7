//! Directory-level preprocessing: DICOM tree in, PNG tree and manifests out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dicom::{load_dicom_slice, write_dicom_slice, SeriesKind};
use super::manifest::{build_clinsig_manifest, read_jsonl, split_by_patient, ClinSigRecord, SampleRecord, Split};
use super::phantom::{phantom_slice, PhantomSpec};
use super::pyramid::{build_pyramid, ScalePyramid};
use super::{preprocess_slice, ClaheParams};
use crate::error::{Error, Result};
use crate::image::{Gray8, GrayF};
use crate::util::{sha256_hex, write_atomic};

pub const IMAGES_DIR: &str = "images";
pub const MANIFEST_DIR: &str = "manifests";
pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const TEST_MANIFEST: &str = "test.jsonl";
pub const CLINSIG_MANIFEST: &str = "clinsig.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// DICOM tree laid out as patient/series/slice.
    pub dicom_root: Option<PathBuf>,
    /// Root of the PNG tree and manifests.
    pub output_root: PathBuf,
    /// CSV with `patient_id` and `clinsig` columns; without it no
    /// classification manifest is built.
    pub clinsig_csv: Option<PathBuf>,
    pub clahe: ClaheParams,
    pub n_test_patients: usize,
    pub clinsig_total: usize,
    /// Orientations to keep; empty keeps all.
    pub series: Vec<SeriesKind>,
    /// Parse failures tolerated, as a fraction of files found.
    pub max_failure_fraction: f64,
    /// Train on only the first n rows of the train manifest.
    pub max_train_images: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            dicom_root: None,
            output_root: PathBuf::from("data"),
            clinsig_csv: None,
            clahe: ClaheParams::default(),
            n_test_patients: 9,
            clinsig_total: 4000,
            series: Vec::new(),
            max_failure_fraction: 0.01,
            max_train_images: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub found: usize,
    pub written: usize,
    pub unchanged: usize,
    pub skipped_series: usize,
    pub failed: Vec<(PathBuf, String)>,
    pub train_rows: usize,
    pub test_rows: usize,
    pub clinsig_rows: Option<usize>,
}

/// Files under `root` that look like DICOM: `.dcm` extension or none.
pub fn find_dicom_files(root: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| match p.extension().and_then(|e| e.to_str()) {
            None => !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')),
            Some(e) => e.eq_ignore_ascii_case("dcm"),
        })
        .collect();
    out.sort();
    out
}

/// Write unless the file already holds exactly these bytes. Returns whether
/// anything was written.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if let Ok(existing) = std::fs::read(path) {
        if sha256_hex(&existing) == sha256_hex(bytes) {
            return Ok(false);
        }
    }
    write_atomic(path, bytes)?;
    Ok(true)
}

/// Patient-level labels from a CSV with `patient_id` and `clinsig` columns
/// (`true`/`false` or `1`/`0`).
pub fn read_clinsig_labels(path: &Path) -> Result<BTreeMap<String, bool>> {
    let bad = |reason: String| Error::Config(format!("{}: {reason}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name)).ok_or_else(|| bad(format!("missing column `{name}`")));
    let (pid, sig) = (col("patient_id")?, col("clinsig")?);
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let label = match row.get(sig).map(|s| s.trim().to_ascii_lowercase()).as_deref() {
            Some("true" | "1") => true,
            Some("false" | "0") => false,
            other => return Err(bad(format!("bad clinsig value {other:?}"))),
        };
        out.insert(row.get(pid).unwrap_or_default().trim().to_string(), label);
    }
    Ok(out)
}

fn manifest_bytes(records: &[SampleRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Window, resize and equalize every slice under `dicom_root`, write PNGs
/// mirroring the input tree, split by patient and write the manifests.
/// Unchanged outputs are left untouched.
pub fn preprocess_corpus(cfg: &PreprocessConfig, seed: u64) -> Result<PreprocessSummary> {
    let root = cfg.dicom_root.as_deref().ok_or_else(|| Error::Config("data.dicom_root is not set".into()))?;
    if !root.is_dir() {
        return Err(Error::NoDicomFound(root.to_path_buf()));
    }
    let files = find_dicom_files(root);
    if files.is_empty() {
        return Err(Error::NoDicomFound(root.to_path_buf()));
    }
    let labels = cfg.clinsig_csv.as_deref().map(read_clinsig_labels).transpose()?;
    let mut summary = PreprocessSummary { found: files.len(), ..Default::default() };
    let mut records = Vec::new();
    for path in &files {
        let slice = match load_dicom_slice(path) {
            Ok(s) => s,
            Err(e) => {
                summary.failed.push((path.clone(), e.to_string()));
                continue;
            }
        };
        if !cfg.series.is_empty() && !cfg.series.contains(&slice.series_kind) {
            summary.skipped_series += 1;
            continue;
        }
        let png = match preprocess_slice(&slice, cfg.clahe).and_then(|img| img.encode_png()) {
            Ok(b) => b,
            Err(e) => {
                summary.failed.push((path.clone(), e.to_string()));
                continue;
            }
        };
        let rel = Path::new(IMAGES_DIR).join(path.strip_prefix(root).unwrap_or(path)).with_extension("png");
        if write_if_changed(&cfg.output_root.join(&rel), &png)? {
            summary.written += 1;
        } else {
            summary.unchanged += 1;
        }
        let label = labels.as_ref().and_then(|l| l.get(&slice.patient_id).copied());
        records.push(SampleRecord { path: rel, patient_id: slice.patient_id, series_kind: slice.series_kind, split: Split::Train, label });
    }
    let limit = cfg.max_failure_fraction;
    if summary.failed.len() as f64 > limit * files.len() as f64 {
        return Err(Error::TooManyFailures { failed: summary.failed.len(), total: files.len(), limit: limit * 100.0 });
    }
    let (train, test) = split_by_patient(&records, cfg.n_test_patients, seed)?;
    let dir = cfg.output_root.join(MANIFEST_DIR);
    write_if_changed(&dir.join(TRAIN_MANIFEST), &manifest_bytes(&train.records)?)?;
    write_if_changed(&dir.join(TEST_MANIFEST), &manifest_bytes(&test.records)?)?;
    summary.train_rows = train.len();
    summary.test_rows = test.len();
    if labels.is_some() {
        let labeled: Vec<SampleRecord> = records.into_iter().filter(|r| r.label.is_some()).collect();
        let m = build_clinsig_manifest(&labeled, cfg.clinsig_total, seed)?;
        write_if_changed(&dir.join(CLINSIG_MANIFEST), &manifest_bytes(&m.records)?)?;
        summary.clinsig_rows = Some(m.records.len());
    }
    Ok(summary)
}

/// Read one manifest from `<output_root>/manifests`.
pub fn read_manifest(output_root: &Path, name: &str) -> Result<Vec<SampleRecord>> {
    let path = output_root.join(MANIFEST_DIR).join(name);
    if !path.is_file() {
        return Err(Error::MissingArtifact(path));
    }
    read_jsonl(path)
}

pub fn load_unit_png(path: &Path) -> Result<GrayF> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(Gray8::load_png(path)?.to_unit())
}

/// Pyramids for manifest rows, in order. Paths are relative to `root`.
pub fn load_pyramids(root: &Path, records: &[SampleRecord]) -> Result<Vec<ScalePyramid>> {
    records.iter().map(|r| build_pyramid(&load_unit_png(&root.join(&r.path))?)).collect()
}

/// Ground-truth images and labels for classification rows.
pub fn load_labeled(root: &Path, records: &[ClinSigRecord]) -> Result<Vec<(GrayF, bool)>> {
    records.iter().map(|r| Ok((load_unit_png(&root.join(&r.image_path))?, r.label))).collect()
}

/// Synthetic DICOM tree `root/P###/axial/####.dcm` plus `clinsig.csv`.
/// Odd-numbered patients carry a lesion and are labelled significant.
pub fn write_phantom_corpus(root: &Path, patients: usize, slices: u32, seed: u64, spec: PhantomSpec) -> Result<PathBuf> {
    let mut csv = String::from("patient_id,clinsig\n");
    for p in 0..patients {
        let id = format!("P{p:03}");
        let positive = p % 2 == 1;
        for s in 0..slices {
            let mut slice = phantom_slice(seed, &id, s, PhantomSpec { lesion: positive, ..spec });
            slice.series_kind = SeriesKind::Axial;
            write_dicom_slice(root.join(&id).join("axial").join(format!("{s:04}.dcm")), &slice, true)?;
        }
        csv.push_str(&format!("{id},{positive}\n"));
    }
    let labels = root.join("clinsig.csv");
    std::fs::write(&labels, csv)?;
    Ok(labels)
}
