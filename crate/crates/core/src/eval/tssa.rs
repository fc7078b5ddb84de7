//! Task-specific similarity: how much of a downstream classifier's
//! performance survives super-resolution.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::classifier::{ClinSigClassifier, LabeledImage};
use crate::data::{build_pyramid, ScalePyramid};
use crate::error::{Error, Result};
use crate::generator::{bicubic_upsample, Generator};
use crate::image::GrayF;
use crate::util::derived_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricDirection {
    HigherIsBetter,
    LowerIsBetter,
}

/// Ratio oriented so that 1 means no change and values below 1 mean the
/// super-resolved inputs did worse.
pub fn tssa_ratio(m_gt: f64, m_sr: f64, direction: MetricDirection) -> Result<f64> {
    let (num, den) = match direction {
        MetricDirection::HigherIsBetter => (m_sr, m_gt),
        MetricDirection::LowerIsBetter => (m_gt, m_sr),
    };
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMetric {
    Accuracy,
    CrossEntropy,
}

impl TaskMetric {
    pub fn direction(self) -> MetricDirection {
        match self {
            Self::Accuracy => MetricDirection::HigherIsBetter,
            Self::CrossEntropy => MetricDirection::LowerIsBetter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TssaResult {
    pub metric: TaskMetric,
    pub m_gt: f64,
    pub m_sr: f64,
    pub tssa: f64,
    pub accuracy_gt: f64,
    pub accuracy_sr: f64,
    pub cross_entropy_gt: f64,
    pub cross_entropy_sr: f64,
    pub n: usize,
}

/// Score the classifier on ground truth and on the matching super-resolved
/// images, then form the ratio for `metric`.
pub fn tssa(classifier: &ClinSigClassifier, gt_set: &[LabeledImage], sr_set: &[GrayF], metric: TaskMetric) -> Result<TssaResult> {
    if gt_set.len() != sr_set.len() {
        return Err(Error::ShapeMismatch(format!("{} ground-truth vs {} super-resolved images", gt_set.len(), sr_set.len())));
    }
    let labels: Vec<bool> = gt_set.iter().map(|s| s.label).collect();
    let gt = classifier.score(&gt_set.iter().map(|s| &s.image).collect::<Vec<_>>(), &labels)?;
    let sr = classifier.score(&sr_set.iter().collect::<Vec<_>>(), &labels)?;
    let (m_gt, m_sr) = match metric {
        TaskMetric::Accuracy => (gt.accuracy, sr.accuracy),
        TaskMetric::CrossEntropy => (gt.cross_entropy, sr.cross_entropy),
    };
    Ok(TssaResult {
        metric,
        m_gt,
        m_sr,
        tssa: tssa_ratio(m_gt, m_sr, metric.direction())?,
        accuracy_gt: gt.accuracy,
        accuracy_sr: sr.accuracy,
        cross_entropy_gt: gt.cross_entropy,
        cross_entropy_sr: sr.cross_entropy,
        n: gt.n,
    })
}

/// Full protocol: downsample each ground-truth image, super-resolve it and
/// compare classifier performance.
pub fn tssa_protocol(
    classifier: &ClinSigClassifier,
    test: &[LabeledImage],
    sr: &dyn SuperResolver,
    metric: TaskMetric,
) -> Result<TssaResult> {
    let pyramids = test.iter().map(|s| build_pyramid(&s.image)).collect::<Result<Vec<_>>>()?;
    let out: Vec<GrayF> = sr.super_resolve(&pyramids)?.into_iter().map(|o| o.x8).collect();
    tssa(classifier, test, &out, metric)
}

/// ×4 and ×8 reconstructions of one sample.
#[derive(Clone, Debug)]
pub struct SrImages {
    pub x4: GrayF,
    pub x8: GrayF,
}

/// Anything that maps pyramids to reconstructions. Implementations other
/// than [`Oracle`] and [`LabelShuffling`] read only the 28×28 level.
pub trait SuperResolver {
    fn name(&self) -> String;
    fn super_resolve(&self, set: &[ScalePyramid]) -> Result<Vec<SrImages>>;
}

pub struct GeneratorSr<'a> {
    pub generator: &'a Generator,
    pub label: String,
    pub batch: usize,
}

impl<'a> GeneratorSr<'a> {
    pub fn new(generator: &'a Generator) -> Self {
        Self { generator, label: "Proposed model".into(), batch: 4 }
    }
}

impl SuperResolver for GeneratorSr<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn super_resolve(&self, set: &[ScalePyramid]) -> Result<Vec<SrImages>> {
        let mut out = Vec::with_capacity(set.len());
        for chunk in set.chunks(self.batch.max(1)) {
            let lr = GrayF::batch_to_tensor(&chunk.iter().map(|p| &p.lr).collect::<Vec<_>>(), &candle_core::Device::Cpu)?;
            let sr = self.generator.forward(&lr)?;
            let x4 = GrayF::batch_from_tensor(&sr.sr4)?;
            let x8 = GrayF::batch_from_tensor(&sr.sr8)?;
            out.extend(x4.into_iter().zip(x8).map(|(x4, x8)| SrImages { x4, x8 }));
        }
        Ok(out)
    }
}

/// Bicubic interpolation of the 28×28 input, clamped to [0, 1].
pub struct Bicubic;

impl SuperResolver for Bicubic {
    fn name(&self) -> String {
        "Bicubic".into()
    }

    fn super_resolve(&self, set: &[ScalePyramid]) -> Result<Vec<SrImages>> {
        set.iter()
            .map(|p| {
                let lr = p.lr.to_tensor(&candle_core::Device::Cpu)?;
                let up = |s| -> Result<GrayF> {
                    let t = bicubic_upsample(&lr, s)?.clamp(0f32, 1f32)?;
                    Ok(GrayF::batch_from_tensor(&t)?.remove(0))
                };
                Ok(SrImages { x4: up(4)?, x8: up(8)? })
            })
            .collect()
    }
}

/// Returns the ground truth unchanged: the identity on high-resolution
/// images and the upper bound of every metric.
pub struct Oracle;

pub type Identity = Oracle;

impl SuperResolver for Oracle {
    fn name(&self) -> String {
        "Oracle".into()
    }

    fn super_resolve(&self, set: &[ScalePyramid]) -> Result<Vec<SrImages>> {
        Ok(set.iter().map(|p| SrImages { x4: p.x4.clone(), x8: p.x8.clone() }).collect())
    }
}

/// Degradation stub: every output is the ground truth of a different case
/// (a seeded cyclic shift of a random order), so images keep their
/// statistics but lose their labels.
pub struct LabelShuffling {
    pub seed: u64,
}

impl SuperResolver for LabelShuffling {
    fn name(&self) -> String {
        "Label shuffling".into()
    }

    fn super_resolve(&self, set: &[ScalePyramid]) -> Result<Vec<SrImages>> {
        let n = set.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derived_rng(self.seed, 13, 0));
        let mut source = vec![0; n];
        for k in 0..n {
            source[order[k]] = order[(k + 1) % n];
        }
        Ok(source.into_iter().map(|j| SrImages { x4: set[j].x4.clone(), x8: set[j].x8.clone() }).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::classifier::{blob_task, ClassifierConfig};
    use proptest::prelude::*;

    #[test]
    fn ratio_examples() {
        assert_eq!(tssa_ratio(0.86, 0.86, MetricDirection::HigherIsBetter).unwrap(), 1.0);
        let r = tssa_ratio(0.86, 0.71, MetricDirection::HigherIsBetter).unwrap();
        assert!((r - 0.826).abs() < 5e-4, "{r}");
        assert_eq!((r * 100.0).floor() / 100.0, 0.82);
        assert_eq!(tssa_ratio(0.86, 0.0, MetricDirection::HigherIsBetter).unwrap(), 0.0);
        assert!(matches!(tssa_ratio(0.0, 0.5, MetricDirection::HigherIsBetter), Err(Error::ZeroDenominator)));
        assert!(matches!(tssa_ratio(0.5, 0.0, MetricDirection::LowerIsBetter), Err(Error::ZeroDenominator)));
        // Lower-is-better losses: a larger loss on SR input gives a ratio below one.
        assert!((tssa_ratio(3.73, 7.25, MetricDirection::LowerIsBetter).unwrap() - 3.73 / 7.25).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn equal_metrics_give_exactly_one(m in 1e-6f64..1e6) {
            prop_assert_eq!(tssa_ratio(m, m, MetricDirection::HigherIsBetter).unwrap(), 1.0);
            prop_assert_eq!(tssa_ratio(m, m, MetricDirection::LowerIsBetter).unwrap(), 1.0);
        }
    }

    #[test]
    fn label_shuffling_moves_every_image() {
        let set: Vec<ScalePyramid> = (0..7)
            .map(|i| build_pyramid(&GrayF::filled(224, 224, i as f32 / 10.0)).unwrap())
            .collect();
        let out = LabelShuffling { seed: 3 }.super_resolve(&set).unwrap();
        for (p, o) in set.iter().zip(&out) {
            assert_ne!(p.x8, o.x8);
        }
    }

    #[test]
    fn stubs_bracket_the_protocol() {
        let train = blob_task(40, 224, 4);
        let test = blob_task(20, 224, 5);
        let cfg = ClassifierConfig { epochs: 4, ..ClassifierConfig::default() };
        let (clf, _) = crate::eval::classifier::train_clinsig_classifier(&train, &test, cfg).unwrap();
        for metric in [TaskMetric::Accuracy, TaskMetric::CrossEntropy] {
            let id = tssa_protocol(&clf, &test, &Identity {}, metric).unwrap();
            assert_eq!(id.tssa, 1.0);
        }
        let bic = tssa_protocol(&clf, &test, &Bicubic, TaskMetric::Accuracy).unwrap();
        assert!(bic.tssa.is_finite());
    }
}
