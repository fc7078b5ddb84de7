//! DICOM ingestion, display windowing, CLAHE, resampling, multi-scale
//! pyramids and dataset manifests.

pub mod clahe;
pub mod corpus;
pub mod dicom;
pub mod manifest;
pub mod phantom;
pub mod pyramid;
pub mod resize;
pub mod window;

pub use clahe::{apply_clahe, ClaheParams};
pub use corpus::{
    load_labeled, load_pyramids, preprocess_corpus, read_manifest, write_phantom_corpus, PreprocessConfig, PreprocessSummary,
};
pub use dicom::{load_dicom_slice, write_dicom_slice, RawSlice, SeriesKind};
pub use manifest::{
    build_clinsig_manifest, read_jsonl, split_by_patient, write_jsonl, ClinSigManifest, ClinSigRecord,
    DatasetManifest, SampleRecord, Split,
};
pub use pyramid::{augment_flip, build_pyramid, ScalePyramid, HR_SIZE, LR_SIZE};
pub use resize::{resize_image, ResizeMethod};
pub use window::apply_window;

use crate::error::Result;
use crate::image::Gray8;

/// Window, resize to 224×224 and equalize one slice: the image that gets
/// persisted as PNG.
pub fn preprocess_slice(slice: &RawSlice, clahe: ClaheParams) -> Result<Gray8> {
    let windowed = apply_window(slice)?;
    let method = resize::auto_method(windowed.dims(), (HR_SIZE, HR_SIZE));
    let resized = resize_image(&windowed, HR_SIZE, HR_SIZE, method)?;
    Ok(apply_clahe(&resized, clahe))
}

/// Preprocessed phantom pyramids for patient `P000`, slices `0..n`: the
/// in-memory stand-in for a PNG training set.
pub fn phantom_pyramids(seed: u64, n: usize, spec: phantom::PhantomSpec) -> Result<Vec<ScalePyramid>> {
    (0..n as u32)
        .map(|i| {
            let raw = phantom::phantom_slice(seed, "P000", i, spec);
            build_pyramid(&preprocess_slice(&raw, ClaheParams::default())?.to_unit())
        })
        .collect()
}
