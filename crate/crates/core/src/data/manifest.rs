//! Sample manifests: patient-level train/test splits and the balanced
//! ClinSig classification set, persisted as JSON lines.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dicom::SeriesKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub patient_id: String,
    pub series_kind: SeriesKind,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub split: Split,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn patients(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.patient_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Hold out `n_test_patients` whole patients. Record order is preserved
/// within each side.
pub fn split_by_patient(
    records: &[SampleRecord],
    n_test_patients: usize,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let patients: BTreeSet<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    if patients.len() <= n_test_patients || patients.len() < 2 {
        return Err(Error::TooFewPatients { needed: n_test_patients.max(1), found: patients.len() });
    }
    let mut order: Vec<&str> = patients.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test: BTreeSet<&str> = order[..n_test_patients].iter().copied().collect();
    let (mut train_rows, mut test_rows) = (Vec::new(), Vec::new());
    for r in records {
        let mut r = r.clone();
        if test.contains(r.patient_id.as_str()) {
            r.split = Split::Test;
            test_rows.push(r);
        } else {
            r.split = Split::Train;
            train_rows.push(r);
        }
    }
    Ok((
        DatasetManifest { records: train_rows, split: Split::Train, seed },
        DatasetManifest { records: test_rows, split: Split::Test, seed },
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinSigRecord {
    pub image_path: PathBuf,
    pub label: bool,
}

/// Balanced classification set with an 80/20 split inside each class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClinSigManifest {
    pub records: Vec<SampleRecord>,
    /// A class smaller than half the request was drawn with replacement.
    pub positives_resampled: bool,
    pub negatives_resampled: bool,
    pub seed: u64,
}

impl ClinSigManifest {
    pub fn split(&self, split: Split) -> Vec<ClinSigRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| ClinSigRecord { image_path: r.path.clone(), label: r.label.unwrap_or(false) })
            .collect()
    }
}

pub const CLINSIG_TRAIN_FRACTION: f64 = 0.8;

fn draw_class(pool: &[&SampleRecord], k: usize, rng: &mut ChaCha8Rng) -> (Vec<SampleRecord>, bool) {
    let n_train = (k as f64 * CLINSIG_TRAIN_FRACTION).round() as usize;
    let mut shuffled: Vec<&SampleRecord> = pool.to_vec();
    shuffled.shuffle(rng);
    let tag = |r: &SampleRecord, split| SampleRecord { split, ..r.clone() };
    if shuffled.len() >= k {
        let out = shuffled[..k]
            .iter()
            .enumerate()
            .map(|(i, r)| tag(r, if i < n_train { Split::Train } else { Split::Test }))
            .collect();
        return (out, false);
    }
    // Undersized class: split the unique images first so no image lands on
    // both sides, then draw each side with replacement.
    let cut = ((shuffled.len() as f64 * CLINSIG_TRAIN_FRACTION).round() as usize).clamp(1, shuffled.len());
    let (train_pool, test_pool) = shuffled.split_at(cut);
    let test_pool = if test_pool.is_empty() { train_pool } else { test_pool };
    let mut out = Vec::with_capacity(k);
    for _ in 0..n_train {
        out.push(tag(train_pool[rng.random_range(0..train_pool.len())], Split::Train));
    }
    for _ in n_train..k {
        out.push(tag(test_pool[rng.random_range(0..test_pool.len())], Split::Test));
    }
    (out, true)
}

/// `metadata` rows must carry a label. Positives come first in the output,
/// then negatives.
pub fn build_clinsig_manifest(metadata: &[SampleRecord], n_total: usize, seed: u64) -> Result<ClinSigManifest> {
    let pos: Vec<&SampleRecord> = metadata.iter().filter(|r| r.label == Some(true)).collect();
    let neg: Vec<&SampleRecord> = metadata.iter().filter(|r| r.label == Some(false)).collect();
    if pos.is_empty() {
        return Err(Error::EmptyClass("positive"));
    }
    if neg.is_empty() {
        return Err(Error::EmptyClass("negative"));
    }
    let k = n_total / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut records, positives_resampled) = draw_class(&pos, k, &mut rng);
    let (negs, negatives_resampled) = draw_class(&neg, k, &mut rng);
    records.extend(negs);
    Ok(ClinSigManifest { records, positives_resampled, negatives_resampled, seed })
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[SampleRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n")?;
    }
    crate::util::write_atomic(path.as_ref(), &buf)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(patients: usize, per: usize) -> Vec<SampleRecord> {
        (0..patients)
            .flat_map(|p| {
                (0..per).map(move |s| SampleRecord {
                    path: format!("P{p:03}/{s}.png").into(),
                    patient_id: format!("P{p:03}"),
                    series_kind: SeriesKind::Axial,
                    split: Split::Train,
                    label: None,
                })
            })
            .collect()
    }

    fn labeled(n_pos: usize, n_neg: usize) -> Vec<SampleRecord> {
        let mut r = rows(1, n_pos + n_neg);
        for (i, x) in r.iter_mut().enumerate() {
            x.label = Some(i < n_pos);
        }
        r
    }

    #[test]
    fn full_corpus_patient_counts() {
        let (train, test) = split_by_patient(&rows(329, 2), 9, 1).unwrap();
        assert_eq!(train.patients().len(), 320);
        assert_eq!(test.patients().len(), 9);
        assert_eq!(train.len() + test.len(), 658);
    }

    #[test]
    fn deterministic_for_seed() {
        let a = split_by_patient(&rows(40, 3), 9, 5).unwrap();
        let b = split_by_patient(&rows(40, 3), 9, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_patients() {
        assert!(matches!(split_by_patient(&rows(5, 2), 9, 0), Err(Error::TooFewPatients { .. })));
    }

    #[test]
    fn no_leakage_across_many_seeds() {
        let data = rows(30, 2);
        for seed in 0..1000 {
            let (train, test) = split_by_patient(&data, 9, seed).unwrap();
            assert!(train.patients().is_disjoint(&test.patients()));
        }
    }

    #[test]
    fn balanced_4000() {
        let m = build_clinsig_manifest(&labeled(3000, 9000), 4000, 3).unwrap();
        let count = |split, label| m.records.iter().filter(|r| r.split == split && r.label == Some(label)).count();
        assert_eq!(count(Split::Train, true), 1600);
        assert_eq!(count(Split::Train, false), 1600);
        assert_eq!(count(Split::Test, true), 400);
        assert_eq!(count(Split::Test, false), 400);
        assert!(!m.positives_resampled && !m.negatives_resampled);
    }

    #[test]
    fn only_positives_is_empty_class() {
        assert!(matches!(build_clinsig_manifest(&labeled(10, 0), 4000, 0), Err(Error::EmptyClass("negative"))));
    }

    #[test]
    fn undersized_class_drawn_with_replacement() {
        let m = build_clinsig_manifest(&labeled(500, 10000), 4000, 9).unwrap();
        assert!(m.positives_resampled);
        assert!(!m.negatives_resampled);
        let pos: Vec<_> = m.records.iter().filter(|r| r.label == Some(true)).collect();
        assert_eq!(pos.len(), 2000);
        let train: BTreeSet<_> = pos.iter().filter(|r| r.split == Split::Train).map(|r| &r.path).collect();
        let test: BTreeSet<_> = pos.iter().filter(|r| r.split == Split::Test).map(|r| &r.path).collect();
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = rows(2, 2);
        data[1].label = Some(true);
        let p = dir.path().join("m.jsonl");
        write_jsonl(&p, &data).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), data);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().next().unwrap().contains("\"series_kind\":\"axial\""));
    }
}
