//! Single-frame DICOM ingestion (and a small writer used for synthetic
//! corpora and tests).

use std::path::Path;

use dicom_core::{DataElement, PrimitiveValue, VR};
use dicom_dictionary_std::tags;
use dicom_object::{open_file, FileMetaTableBuilder, InMemDicomObject};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MR_IMAGE_STORAGE: &str = "1.2.840.10008.5.1.4.1.1.4";
const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesKind {
    Coronal,
    Sagittal,
    Axial,
}

impl SeriesKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SeriesKind::Coronal => "coronal",
            SeriesKind::Sagittal => "sagittal",
            SeriesKind::Axial => "axial",
        }
    }

    /// Keyword match on a series description or directory name.
    pub fn from_label(s: &str) -> Option<Self> {
        let s = s.to_ascii_lowercase();
        if s.contains("cor") {
            Some(SeriesKind::Coronal)
        } else if s.contains("sag") {
            Some(SeriesKind::Sagittal)
        } else if s.contains("ax") || s.contains("tra") {
            Some(SeriesKind::Axial)
        } else {
            None
        }
    }

    /// Orientation from the slice normal of ImageOrientationPatient.
    fn from_orientation(iop: &[f64]) -> Option<Self> {
        if iop.len() != 6 {
            return None;
        }
        let n = [
            iop[1] * iop[5] - iop[2] * iop[4],
            iop[2] * iop[3] - iop[0] * iop[5],
            iop[0] * iop[4] - iop[1] * iop[3],
        ];
        let (i, _) = n.iter().map(|v| v.abs()).enumerate().fold((0, -1.0), |a, (i, v)| if v > a.1 { (i, v) } else { a });
        Some([SeriesKind::Sagittal, SeriesKind::Coronal, SeriesKind::Axial][i])
    }
}

/// One 16-bit slice with its display window and identity.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSlice {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u16>,
    pub wl: f64,
    pub ww: f64,
    pub patient_id: String,
    pub series_kind: SeriesKind,
    pub slice_index: u32,
}

impl RawSlice {
    pub fn new(height: usize, width: usize, pixels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!("{height}x{width} slice with {} pixels", pixels.len())));
        }
        let (wl, ww) = full_range_window(&pixels);
        Ok(Self {
            height,
            width,
            pixels,
            wl,
            ww,
            patient_id: String::new(),
            series_kind: SeriesKind::Axial,
            slice_index: 0,
        })
    }
}

/// Window covering the observed intensity range. A constant image gets
/// width 1 so the window stays valid.
pub fn full_range_window(pixels: &[u16]) -> (f64, f64) {
    let min = pixels.iter().copied().min().unwrap_or(0) as f64;
    let max = pixels.iter().copied().max().unwrap_or(0) as f64;
    ((min + max) / 2.0, (max - min).max(1.0))
}

fn parse_err(path: &Path, reason: impl ToString) -> Error {
    Error::Parse { path: path.to_path_buf(), reason: reason.to_string() }
}

pub fn load_dicom_slice(path: impl AsRef<Path>) -> Result<RawSlice> {
    let path = path.as_ref();
    let obj = open_file(path).map_err(|e| parse_err(path, e))?;
    let int = |tag| -> Result<Option<u32>> {
        match obj.element_opt(tag).map_err(|e| parse_err(path, e))? {
            Some(e) => Ok(Some(e.to_int::<u32>().map_err(|e| parse_err(path, e))?)),
            None => Ok(None),
        }
    };
    let text = |tag| -> Option<String> {
        obj.element_opt(tag).ok().flatten().and_then(|e| e.to_str().ok()).map(|s| s.trim().to_string())
    };
    let floats = |tag| -> Option<Vec<f64>> {
        obj.element_opt(tag).ok().flatten().and_then(|e| e.to_multi_float64().ok())
    };

    let rows = int(tags::ROWS)?.ok_or_else(|| parse_err(path, "missing Rows"))? as usize;
    let cols = int(tags::COLUMNS)?.ok_or_else(|| parse_err(path, "missing Columns"))? as usize;
    let bits = int(tags::BITS_ALLOCATED)?.unwrap_or(16);
    let frames = text(tags::NUMBER_OF_FRAMES).and_then(|s| s.parse::<u32>().ok()).unwrap_or(1);
    if frames != 1 {
        return Err(parse_err(path, format!("{frames} frames; only single-frame images are supported")));
    }
    let samples = int(tags::SAMPLES_PER_PIXEL)?.unwrap_or(1);
    if samples != 1 {
        return Err(parse_err(path, format!("{samples} samples per pixel; expected grayscale")));
    }
    let elem = obj
        .element_opt(tags::PIXEL_DATA)
        .map_err(|e| parse_err(path, e))?
        .ok_or_else(|| Error::MissingPixelData(path.to_path_buf()))?;
    let bytes = elem.to_bytes().map_err(|_| Error::MissingPixelData(path.to_path_buf()))?;
    let n = rows * cols;
    let pixels: Vec<u16> = match bits {
        16 if bytes.len() >= 2 * n => bytes.chunks_exact(2).take(n).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
        8 if bytes.len() >= n => bytes.iter().take(n).map(|&b| b as u16).collect(),
        16 | 8 => return Err(Error::MissingPixelData(path.to_path_buf())),
        other => return Err(parse_err(path, format!("unsupported BitsAllocated {other}"))),
    };
    if pixels.is_empty() {
        return Err(Error::MissingPixelData(path.to_path_buf()));
    }

    let (default_wl, default_ww) = full_range_window(&pixels);
    let wl = floats(tags::WINDOW_CENTER).and_then(|v| v.first().copied());
    let ww = floats(tags::WINDOW_WIDTH).and_then(|v| v.first().copied());
    let (wl, ww) = match (wl, ww) {
        (Some(l), Some(w)) => (l, w),
        _ => (default_wl, default_ww),
    };

    let series_kind = floats(tags::IMAGE_ORIENTATION_PATIENT)
        .and_then(|v| SeriesKind::from_orientation(&v))
        .or_else(|| text(tags::SERIES_DESCRIPTION).and_then(|s| SeriesKind::from_label(&s)))
        .or_else(|| {
            path.parent().and_then(|p| p.file_name()).and_then(|n| n.to_str()).and_then(SeriesKind::from_label)
        })
        .unwrap_or(SeriesKind::Axial);
    let patient_id = text(tags::PATIENT_ID).filter(|s| !s.is_empty()).unwrap_or_else(|| {
        // patient/series/slice.dcm layout
        path.ancestors().nth(2).and_then(|p| p.file_name()).and_then(|n| n.to_str()).unwrap_or("unknown").to_string()
    });
    let slice_index = int(tags::INSTANCE_NUMBER).ok().flatten().unwrap_or(0);

    Ok(RawSlice { height: rows, width: cols, pixels, wl, ww, patient_id, series_kind, slice_index })
}

/// Write `slice` as an uncompressed single-frame MR image. Window tags are
/// only emitted when `with_window` is set.
pub fn write_dicom_slice(path: impl AsRef<Path>, slice: &RawSlice, with_window: bool) -> Result<()> {
    let path = path.as_ref();
    let digest = crate::util::sha256_hex(path.to_string_lossy().as_bytes());
    let uid = format!("2.25.{}", u64::from_str_radix(&digest[..15], 16).expect("hex digest"));
    let mut elems = vec![
        DataElement::new(tags::SOP_CLASS_UID, VR::UI, PrimitiveValue::from(MR_IMAGE_STORAGE)),
        DataElement::new(tags::SOP_INSTANCE_UID, VR::UI, PrimitiveValue::from(uid.as_str())),
        DataElement::new(tags::MODALITY, VR::CS, PrimitiveValue::from("MR")),
        DataElement::new(tags::PATIENT_ID, VR::LO, PrimitiveValue::from(slice.patient_id.as_str())),
        DataElement::new(tags::SERIES_DESCRIPTION, VR::LO, PrimitiveValue::from(slice.series_kind.as_str())),
        DataElement::new(tags::INSTANCE_NUMBER, VR::IS, PrimitiveValue::from(slice.slice_index.to_string().as_str())),
        DataElement::new(tags::SAMPLES_PER_PIXEL, VR::US, PrimitiveValue::from(1u16)),
        DataElement::new(tags::PHOTOMETRIC_INTERPRETATION, VR::CS, PrimitiveValue::from("MONOCHROME2")),
        DataElement::new(tags::ROWS, VR::US, PrimitiveValue::from(slice.height as u16)),
        DataElement::new(tags::COLUMNS, VR::US, PrimitiveValue::from(slice.width as u16)),
        DataElement::new(tags::BITS_ALLOCATED, VR::US, PrimitiveValue::from(16u16)),
        DataElement::new(tags::BITS_STORED, VR::US, PrimitiveValue::from(16u16)),
        DataElement::new(tags::HIGH_BIT, VR::US, PrimitiveValue::from(15u16)),
        DataElement::new(tags::PIXEL_REPRESENTATION, VR::US, PrimitiveValue::from(0u16)),
        DataElement::new(tags::PIXEL_DATA, VR::OW, PrimitiveValue::U16(slice.pixels.iter().copied().collect())),
    ];
    if with_window {
        elems.push(DataElement::new(tags::WINDOW_CENTER, VR::DS, PrimitiveValue::from(format!("{}", slice.wl).as_str())));
        elems.push(DataElement::new(tags::WINDOW_WIDTH, VR::DS, PrimitiveValue::from(format!("{}", slice.ww).as_str())));
    }
    let obj = InMemDicomObject::from_element_iter(elems)
        .with_meta(FileMetaTableBuilder::new().transfer_syntax(EXPLICIT_VR_LE))
        .map_err(|e| parse_err(path, e))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    obj.write_to_file(path).map_err(|e| parse_err(path, e))?;
    Ok(())
}
