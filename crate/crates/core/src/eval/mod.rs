//! Similarity metrics, the clinical-significance classifier, task-specific
//! similarity and report rendering.

pub mod classifier;
pub mod metrics;
pub mod report;
pub mod tssa;

use std::path::Path;

pub use classifier::{
    binary_cross_entropy, blob_task, train_clinsig_classifier, ClassifierConfig, ClassifierScore, ClinSigClassifier,
    LabeledImage,
};
pub use metrics::{ms_ssim, ms_ssim_with, psnr, ssim, ssim_with, SsimParams, PSNR_CAP};
pub use report::{panel, render_tables, write_plots, ImageMetrics, MetricsReport, ParamTable};
pub use tssa::{
    tssa, tssa_protocol, tssa_ratio, Bicubic, GeneratorSr, Identity, LabelShuffling, MetricDirection, Oracle, SrImages,
    SuperResolver, TaskMetric, TssaResult,
};

use crate::data::ScalePyramid;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{Generator, ParamCounts};
use crate::nn::Archive;

/// Per-image metrics of one reconstruction against its pyramid.
pub fn image_metrics(p: &ScalePyramid, sr: &SrImages) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        psnr: psnr(&sr.x8, &p.x8, 1.0)?,
        ssim: ssim(&sr.x8, &p.x8)?,
        ms_ssim: ms_ssim(&sr.x8, &p.x8)?,
        psnr_x4: psnr(&sr.x4, &p.x4, 1.0)?,
        ssim_x4: ssim(&sr.x4, &p.x4)?,
    })
}

/// Classifier and its held-out ground-truth split, for the TSSA columns.
#[derive(Clone, Copy)]
pub struct TaskEval<'a> {
    pub classifier: &'a ClinSigClassifier,
    pub test: &'a [LabeledImage],
    pub metric: TaskMetric,
}

/// Mean metrics of `sr` over `test` (in manifest order), plus TSSA when a
/// classifier is supplied.
pub fn evaluate_model(
    sr: &dyn SuperResolver,
    test: &[ScalePyramid],
    task: Option<TaskEval<'_>>,
    param_counts: Option<ParamTable>,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let outputs = sr.super_resolve(test)?;
    let per_image = test.iter().zip(&outputs).map(|(p, o)| image_metrics(p, o)).collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let t = task.map(|t| tssa_protocol(t.classifier, t.test, sr, t.metric)).transpose()?;
    Ok(MetricsReport {
        model: sr.name(),
        psnr: mean(|m| m.psnr),
        ssim: mean(|m| m.ssim),
        ms_ssim: mean(|m| m.ms_ssim),
        psnr_x4: mean(|m| m.psnr_x4),
        ssim_x4: mean(|m| m.ssim_x4),
        tssa: t.as_ref().map(|t| t.tssa),
        classifier_accuracy_gt: t.as_ref().map(|t| t.accuracy_gt),
        classifier_accuracy_sr: t.as_ref().map(|t| t.accuracy_sr),
        classifier_loss_gt: t.as_ref().map(|t| t.cross_entropy_gt),
        classifier_loss_sr: t.as_ref().map(|t| t.cross_entropy_sr),
        param_counts,
        n_images: per_image.len(),
        per_image,
    })
}

/// Generator and discriminator counts in table form. The discriminator is
/// all trainable.
pub fn param_table(generator: &Generator, discriminator: Option<&Discriminator>) -> ParamTable {
    ParamTable {
        generator: generator.count_parameters(),
        discriminator: ParamCounts::new(discriminator.map_or(0, Discriminator::num_params), 0),
    }
}

/// Load a generator archive and evaluate it. The manifest is checked before
/// the checkpoint is touched; a discriminator archive, if given, only feeds
/// the parameter table.
pub fn evaluate_checkpoint(
    gen_ckpt: &Path,
    disc_ckpt: Option<&Path>,
    test: &[ScalePyramid],
    task: Option<TaskEval<'_>>,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let generator = Generator::from_archive(&Archive::load(gen_ckpt)?)?;
    let disc = disc_ckpt.map(|p| Discriminator::from_archive(&Archive::load(p)?)).transpose()?;
    let params = param_table(&generator, disc.as_ref());
    evaluate_model(&GeneratorSr::new(&generator), test, task, Some(params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_pyramid;
    use crate::image::GrayF;

    fn pyramids(n: usize) -> Vec<ScalePyramid> {
        (0..n)
            .map(|i| build_pyramid(&GrayF::from_fn(224, 224, |y, x| ((y * 3 + x * (i + 1)) % 97) as f32 / 96.0)).unwrap())
            .collect()
    }

    #[test]
    fn oracle_hits_the_upper_bound() {
        let test = pyramids(3);
        let train = blob_task(24, 224, 8);
        let held = blob_task(8, 224, 9);
        let cfg = ClassifierConfig { epochs: 2, ..ClassifierConfig::default() };
        let (clf, _) = train_clinsig_classifier(&train, &held, cfg).unwrap();
        let task = TaskEval { classifier: &clf, test: &held, metric: TaskMetric::Accuracy };
        let r = evaluate_model(&Oracle, &test, Some(task), None).unwrap();
        assert_eq!(r.psnr, PSNR_CAP);
        assert_eq!((r.ssim, r.ms_ssim, r.ssim_x4), (1.0, 1.0, 1.0));
        assert_eq!(r.tssa, Some(1.0));
        assert_eq!(r.n_images, 3);
    }

    #[test]
    fn bicubic_is_below_the_oracle() {
        let r = evaluate_model(&Bicubic, &pyramids(2), None, None).unwrap();
        assert!(r.psnr < PSNR_CAP && r.ssim < 1.0 && r.tssa.is_none());
    }

    #[test]
    fn empty_manifest_wins_over_a_bad_checkpoint() {
        let missing = Path::new("/nonexistent/generator.ckpt");
        assert!(matches!(evaluate_checkpoint(missing, None, &[], None), Err(Error::EmptyManifest)));
        let dir = tempfile::tempdir().unwrap();
        let wrong = dir.path().join("x.ckpt");
        Archive::new().with_meta("kind", "classifier").save(&wrong).unwrap();
        assert!(matches!(evaluate_checkpoint(&wrong, None, &pyramids(1), None), Err(Error::CheckpointMismatch(_))));
    }
}
