//! Write a small synthetic DICOM tree, preprocess it into PNGs and
//! manifests, then run again to show the second pass changes nothing.
//!
//!     cargo run --release --example preprocess_dicom

use msrgan::data::phantom::PhantomSpec;
use msrgan::data::corpus::TEST_MANIFEST;
use msrgan::data::{preprocess_corpus, read_manifest, write_phantom_corpus, PreprocessConfig};

fn main() -> msrgan::Result<()> {
    let dir = tempfile::tempdir()?;
    let labels = write_phantom_corpus(&dir.path().join("dicom"), 4, 3, 1, PhantomSpec::default())?;
    let cfg = PreprocessConfig {
        dicom_root: Some(dir.path().join("dicom")),
        output_root: dir.path().join("data"),
        clinsig_csv: Some(labels),
        n_test_patients: 1,
        clinsig_total: 12,
        ..PreprocessConfig::default()
    };
    for pass in 1..=2 {
        let s = preprocess_corpus(&cfg, 0)?;
        println!(
            "pass {pass}: {} files, {} written, {} unchanged, {} train / {} test rows",
            s.found, s.written, s.unchanged, s.train_rows, s.test_rows
        );
    }
    for r in read_manifest(&cfg.output_root, TEST_MANIFEST)? {
        println!("test: {} ({}, label {:?})", r.path.display(), r.patient_id, r.label);
    }
    Ok(())
}
