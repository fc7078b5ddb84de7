//! Metrics reports, their text tables and distribution plots.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::generator::ParamCounts;
use crate::image::GrayF;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub psnr_x4: f64,
    pub ssim_x4: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTable {
    pub generator: ParamCounts,
    pub discriminator: ParamCounts,
}

/// Mean similarity over a test manifest plus optional classifier and
/// parameter figures. ×8 metrics are unsuffixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub psnr_x4: f64,
    pub ssim_x4: f64,
    pub tssa: Option<f64>,
    pub classifier_accuracy_gt: Option<f64>,
    pub classifier_accuracy_sr: Option<f64>,
    pub classifier_loss_gt: Option<f64>,
    pub classifier_loss_sr: Option<f64>,
    pub param_counts: Option<ParamTable>,
    pub n_images: usize,
    pub per_image: Vec<ImageMetrics>,
}

fn opt(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map_or_else(|| "-".to_string(), f)
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Left-aligned first column, right-aligned rest, widths from content.
pub fn render_table(title: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (k, cell) in r.iter().enumerate().take(cols) {
            widths[k] = widths[k].max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (k, c) in cells.iter().enumerate() {
            if k == 0 {
                let _ = write!(s, "{c:<w$}", w = widths[0]);
            } else {
                let _ = write!(s, "  {c:>w$}", w = widths[k]);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = format!("{title}\n");
    out.push_str(&line(header.to_vec()));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// The four comparison tables: ×8 similarity, ×4 similarity, classifier
/// performance with TSSA, and parameter counts.
pub fn render_tables(reports: &[MetricsReport]) -> String {
    let t1: Vec<Vec<String>> = reports
        .iter()
        .map(|r| vec![r.model.clone(), format!("{:.2}", r.psnr), format!("{:.2}", r.ssim), format!("{:.2}", r.ms_ssim)])
        .collect();
    let t2: Vec<Vec<String>> =
        reports.iter().map(|r| vec![r.model.clone(), format!("{:.2}", r.psnr_x4), format!("{:.2}", r.ssim_x4)]).collect();
    let mut t3 = Vec::new();
    if let Some(r) = reports.iter().find(|r| r.classifier_accuracy_gt.is_some()) {
        t3.push(vec![
            "Classifier".to_string(),
            opt(r.classifier_loss_gt, |v| format!("{v:.2}")),
            opt(r.classifier_accuracy_gt, |v| format!("{:.0}%", v * 100.0)),
            "-".to_string(),
        ]);
    }
    for r in reports.iter().filter(|r| r.tssa.is_some()) {
        t3.push(vec![
            r.model.clone(),
            opt(r.classifier_loss_sr, |v| format!("{v:.2}")),
            opt(r.classifier_accuracy_sr, |v| format!("{:.0}%", v * 100.0)),
            opt(r.tssa, |v| format!("{v:.2}")),
        ]);
    }
    let t4: Vec<Vec<String>> = reports
        .iter()
        .filter_map(|r| r.param_counts.map(|p| (r, p)))
        .map(|(r, p)| {
            vec![
                r.model.clone(),
                thousands(p.generator.trainable),
                thousands(p.generator.non_trainable),
                thousands(p.generator.total),
                thousands(p.discriminator.trainable),
                thousands(p.discriminator.non_trainable),
                thousands(p.discriminator.total),
            ]
        })
        .collect();
    let n = reports.first().map_or(0, |r| r.n_images);
    let mut out = String::new();
    out.push_str(&render_table(&format!("8x super-resolution ({n} images)"), &["Model", "PSNR", "SSIM", "MS-SSIM"], &t1));
    out.push('\n');
    out.push_str(&render_table("4x super-resolution", &["Model", "PSNR", "SSIM"], &t2));
    if !t3.is_empty() {
        out.push('\n');
        out.push_str(&render_table("Task-specific similarity", &["Model", "Loss", "Accuracy", "TSSA"], &t3));
    }
    if !t4.is_empty() {
        out.push('\n');
        out.push_str(&render_table(
            "Parameters",
            &["Model", "G trainable", "G non-trainable", "G total", "D trainable", "D non-trainable", "D total"],
            &t4,
        ));
    }
    out
}

/// Strip plot: one column per series, one dot per value, on a shared
/// vertical axis spanning the data range. White background, tick marks
/// every tenth of the range on the left edge.
pub fn strip_plot(series: &[(String, Vec<f64>)]) -> GrayF {
    let (h, col_w, margin) = (240usize, 80usize, 20usize);
    let w = margin * 2 + col_w * series.len().max(1);
    let mut img = GrayF::filled(h, w, 1.0);
    let vals = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) };
    let to_y = |v: f64| margin + ((hi - v) / (hi - lo) * (h - 2 * margin) as f64).round() as usize;
    for y in margin..=h - margin {
        img.set(y, margin / 2, 0.0);
    }
    for k in 0..=10 {
        let y = to_y(lo + (hi - lo) * k as f64 / 10.0);
        for x in 0..margin / 2 {
            img.set(y, x + margin / 4, 0.0);
        }
    }
    for (s, (_, values)) in series.iter().enumerate() {
        let x0 = margin + s * col_w + col_w / 2;
        for (i, &v) in values.iter().enumerate().filter(|(_, v)| v.is_finite()) {
            let y = to_y(v);
            let x = x0 + (i % 9) * 3 - 12;
            for dy in 0..3 {
                for dx in 0..3 {
                    if y + dy >= 1 && y + dy - 1 < h && x + dx >= 1 && x + dx - 1 < w {
                        img.set(y + dy - 1, x + dx - 1, 0.0);
                    }
                }
            }
        }
        let y = to_y(values.iter().copied().filter(|v| v.is_finite()).sum::<f64>() / values.len().max(1) as f64);
        for x in x0 - 20..x0 + 20 {
            img.set(y, x, 0.5);
        }
    }
    img
}

/// PNG strip plots of per-image PSNR, SSIM and MS-SSIM for every report.
pub fn write_plots(reports: &[MetricsReport], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let pick: [(&str, fn(&ImageMetrics) -> f64); 3] = [("psnr", |m| m.psnr), ("ssim", |m| m.ssim), ("ms_ssim", |m| m.ms_ssim)];
    let mut written = Vec::new();
    for (name, f) in pick {
        let series: Vec<(String, Vec<f64>)> = reports.iter().map(|r| (r.model.clone(), r.per_image.iter().map(f).collect())).collect();
        let path = dir.join(format!("{name}_distribution.png"));
        strip_plot(&series).to_u8().save_png(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Side-by-side panel with 4-pixel white gutters; inputs smaller than the
/// first image are nearest-neighbour enlarged to its height.
pub fn panel(images: &[&GrayF]) -> GrayF {
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let gutter = 4;
    let fitted: Vec<GrayF> = images
        .iter()
        .map(|img| {
            let f = (h / img.height().max(1)).max(1);
            GrayF::from_fn(img.height() * f, img.width() * f, |y, x| img.get(y / f, x / f))
        })
        .collect();
    let w = fitted.iter().map(|i| i.width()).sum::<usize>() + gutter * fitted.len().saturating_sub(1);
    let mut out = GrayF::filled(h, w, 1.0);
    let mut x0 = 0;
    for img in &fitted {
        for y in 0..img.height().min(h) {
            for x in 0..img.width() {
                out.set(y, x0 + x, img.get(y, x));
            }
        }
        x0 += img.width() + gutter;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(model: &str, psnr: f64) -> MetricsReport {
        MetricsReport {
            model: model.into(),
            psnr,
            ssim: 0.5,
            ms_ssim: 0.69,
            psnr_x4: 21.0,
            ssim_x4: 0.7,
            tssa: Some(0.82),
            classifier_accuracy_gt: Some(0.86),
            classifier_accuracy_sr: Some(0.71),
            classifier_loss_gt: Some(3.73),
            classifier_loss_sr: Some(9.98),
            param_counts: Some(ParamTable { generator: ParamCounts::new(10, 20), discriminator: ParamCounts::new(1_234_567, 0) }),
            n_images: 3,
            per_image: vec![ImageMetrics { psnr, ssim: 0.5, ms_ssim: 0.69, psnr_x4: 21.0, ssim_x4: 0.7 }; 3],
        }
    }

    #[test]
    fn tables_follow_the_column_layout() {
        let text = render_tables(&[report("Bicubic", 17.92), report("Proposed model", 19.77)]);
        assert!(text.contains("Model            PSNR  SSIM  MS-SSIM"), "{text}");
        assert!(text.contains("Bicubic         17.92  0.50     0.69"), "{text}");
        assert!(text.contains("Classifier"));
        assert!(text.contains("86%"));
        assert!(text.contains("1,234,567"));
        assert!(text.contains("Loss  Accuracy  TSSA"));
    }

    #[test]
    fn report_round_trips_through_json() {
        let r = report("x", 20.0);
        let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn plots_and_panels_have_expected_geometry() {
        let img = strip_plot(&[("a".into(), vec![1.0, 2.0]), ("b".into(), vec![3.0])]);
        assert_eq!(img.dims(), (240, 200));
        assert!(img.data().iter().any(|&v| v == 0.0));
        let big = GrayF::filled(224, 224, 0.2);
        let small = GrayF::filled(28, 28, 0.8);
        let p = panel(&[&big, &big, &small]);
        assert_eq!(p.dims(), (224, 224 * 3 + 8));
        assert_eq!(p.get(100, 224 * 2 + 8 + 100), 0.8);
    }
}
