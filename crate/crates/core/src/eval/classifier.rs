//! Clinical-significance classifier: four stride-2 convolutions, global
//! average pooling and one logistic unit on 224×224 grayscale input.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayF;
use crate::nn::{global_avg_pool, leaky_relu, load_into, scalar, sigmoid, Adam, AdamConfig, Archive, Conv2d, ConvSpec, Linear, ParamStore};
use crate::util::derived_rng;

const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub widths: [usize; 4],
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { widths: [8, 16, 32, 64], epochs: 10, batch: 8, lr: 1e-3, seed: 0 }
    }
}

/// A ground-truth image and its binary label.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: GrayF,
    pub label: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierScore {
    pub accuracy: f64,
    /// Mean binary cross-entropy in nats.
    pub cross_entropy: f64,
    pub n: usize,
}

/// Mean binary cross-entropy of probabilities `p` against 0/1 `targets`,
/// both `(b,)`, in f64 with `p` clamped away from 0 and 1.
pub fn binary_cross_entropy(p: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let p = p.to_dtype(DType::F64)?.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let t = targets.to_dtype(DType::F64)?;
    let ll = ((&t * p.log()?)? + ((1.0 - &t)? * (1.0 - &p)?.log()?)?)?;
    Ok(ll.mean_all()?.neg()?)
}

pub struct ClinSigClassifier {
    pub config: ClassifierConfig,
    store: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl ClinSigClassifier {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        let mut store = ParamStore::new(config.seed, DType::F32);
        let mut root = store.root();
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (k, &c) in config.widths.iter().enumerate() {
            convs.push(Conv2d::new(root.pp(format!("conv{k}")), ConvSpec::same(c_in, c, 3).stride(2))?);
            c_in = c;
        }
        let head = Linear::new(root.pp("head"), c_in, 1)?;
        Ok(Self { config, store, convs, head })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Probabilities `(b,)` for a `(b, 1, h, w)` batch in [0, 1].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = ((x - 0.5)? * 2.0)?;
        for c in &self.convs {
            h = leaky_relu(&c.forward(&h)?)?;
        }
        let logits = self.head.forward(&global_avg_pool(&h)?)?;
        Ok(sigmoid(&logits)?.flatten_all()?)
    }

    pub fn predict(&self, images: &[&GrayF]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.config.batch.max(1)) {
            let p = self.forward(&GrayF::batch_to_tensor(chunk, &Device::Cpu)?)?;
            out.extend(p.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }

    /// Accuracy at threshold 0.5 and cross-entropy of `images` against
    /// `labels`.
    pub fn score(&self, images: &[&GrayF], labels: &[bool]) -> Result<ClassifierScore> {
        if images.is_empty() {
            return Err(Error::EmptyManifest);
        }
        if images.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!("{} images but {} labels", images.len(), labels.len())));
        }
        let p = self.predict(images)?;
        let correct = p.iter().zip(labels).filter(|(p, l)| (**p >= 0.5) == **l).count();
        let ce = p
            .iter()
            .zip(labels)
            .map(|(&p, &l)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -if l { p.ln() } else { (1.0 - p).ln() }
            })
            .sum::<f64>()
            / p.len() as f64;
        Ok(ClassifierScore { accuracy: correct as f64 / p.len() as f64, cross_entropy: ce, n: p.len() })
    }

    pub fn evaluate(&self, set: &[LabeledImage]) -> Result<ClassifierScore> {
        let images: Vec<&GrayF> = set.iter().map(|s| &s.image).collect();
        let labels: Vec<bool> = set.iter().map(|s| s.label).collect();
        self.score(&images, &labels)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new().with_meta("kind", "classifier").with_meta("classifier_config", serde_json::to_string(&self.config)?);
        for (name, t) in self.store.snapshot()? {
            a.insert(name, t);
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.meta("kind") != Some("classifier") {
            return Err(Error::CheckpointMismatch("not a classifier archive".into()));
        }
        let cfg = a.meta("classifier_config").ok_or_else(|| Error::CheckpointMismatch("classifier archive lacks its config".into()))?;
        let c = Self::new(serde_json::from_str(cfg)?)?;
        load_into(&c.store, a, "").map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        Ok(c)
    }
}

/// Train on ground-truth images only and report held-out performance.
pub fn train_clinsig_classifier(
    train: &[LabeledImage],
    test: &[LabeledImage],
    config: ClassifierConfig,
) -> Result<(ClinSigClassifier, ClassifierScore)> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let model = ClinSigClassifier::new(config.clone())?;
    let mut opt = Adam::new(AdamConfig { lr: config.lr, beta1: 0.9, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut derived_rng(config.seed, 7, epoch as u64));
        for chunk in order.chunks(config.batch.max(1)) {
            let imgs: Vec<&GrayF> = chunk.iter().map(|&i| &train[i].image).collect();
            let targets: Vec<f32> = chunk.iter().map(|&i| if train[i].label { 1.0 } else { 0.0 }).collect();
            let x = GrayF::batch_to_tensor(&imgs, &Device::Cpu)?;
            let t = Tensor::from_vec(targets, chunk.len(), &Device::Cpu)?;
            let loss = binary_cross_entropy(&model.forward(&x)?, &t)?;
            if !scalar(&loss)?.is_finite() {
                return Err(Error::NonFiniteLoss { step: epoch as u64, what: "classifier".into() });
            }
            opt.step(&model.store, &loss.backward()?)?;
        }
    }
    let score = model.evaluate(test)?;
    Ok((model, score))
}

/// Noisy backgrounds, half of them with one bright Gaussian blob: a task
/// any working classifier separates.
pub fn blob_task(n: usize, size: usize, seed: u64) -> Vec<LabeledImage> {
    use rand::Rng;
    (0..n)
        .map(|i| {
            let mut rng = derived_rng(seed, 11, i as u64);
            let label = i % 2 == 0;
            let (cy, cx) = (rng.random_range(0.25..0.75) * size as f64, rng.random_range(0.25..0.75) * size as f64);
            let r = size as f64 * 0.06;
            let image = GrayF::from_fn(size, size, |y, x| {
                let noise = rng.random_range(-0.1..0.1);
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let blob = if label { 0.5 * (-d2 / (2.0 * r * r)).exp() } else { 0.0 };
                (0.3 + noise + blob).clamp(0.0, 1.0) as f32
            });
            LabeledImage { image, label }
        })
        .collect()
}
