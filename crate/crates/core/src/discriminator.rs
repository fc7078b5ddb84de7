//! Multi-scale capsule patch discriminator.
//!
//! A stride-2 conv trunk starts at the 224 image; the 112 and 56 images are
//! concatenated into the trunk where its resolution matches. The last stage
//! feeds primary capsules, one routed capsule layer and a 625-unit logistic
//! layer read as a 25×25 patch map.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::capsule::{capsule_norms, primary_capsules, RoutedCapsuleLayer};
use crate::error::{Error, Result};
use crate::generator::MultiScaleOutput;
use crate::nn::{leaky_relu, load_into, sigmoid, Archive, Conv2d, ConvSpec, Linear, ParamStore};

pub const PATCH_GRID: usize = 25;
pub const BCE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    /// Output channels of the four stride-2 trunk stages.
    pub widths: [usize; 4],
    pub capsule_types: usize,
    pub capsule_dim: usize,
    pub out_capsules: usize,
    pub out_dim: usize,
    pub routing_iterations: usize,
    /// Also concatenate the 28×28 input at the 28×28 stage.
    pub inject_lr: bool,
    pub weights_seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128, 256],
            capsule_types: 8,
            capsule_dim: 32,
            out_capsules: 10,
            out_dim: 16,
            routing_iterations: 3,
            inject_lr: false,
            weights_seed: 1,
        }
    }
}

impl DiscriminatorConfig {
    /// Narrow trunk and fewer primary capsules for quick desk runs.
    pub fn toy() -> Self {
        Self { widths: [8, 16, 16, 32], capsule_types: 4, capsule_dim: 8, ..Self::default() }
    }
}

/// One set of images at every scale, `(b, 1, s, s)` each. Either all real
/// (a pyramid) or all generated.
#[derive(Clone, Debug)]
pub struct DiscriminatorInput {
    pub i2: Tensor,
    pub i4: Tensor,
    pub i8: Tensor,
    pub lr: Option<Tensor>,
}

impl DiscriminatorInput {
    pub fn from_generated(out: &MultiScaleOutput, lr: Option<Tensor>) -> Self {
        Self { i2: out.sr2.clone(), i4: out.sr4.clone(), i8: out.sr8.clone(), lr }
    }

    fn check(&self, need_lr: bool) -> Result<usize> {
        let b = self.i8.dim(0)?;
        let mut items = vec![("i2", &self.i2, 56), ("i4", &self.i4, 112), ("i8", &self.i8, 224)];
        if need_lr {
            let lr = self.lr.as_ref().ok_or_else(|| Error::ScaleMismatch("28x28 input required when inject_lr is set".into()))?;
            items.push(("lr", lr, 28));
        }
        for (name, t, s) in items {
            let dims = t.dims();
            if dims != [b, 1, s, s] {
                return Err(Error::ScaleMismatch(format!("{name} should be {b}x1x{s}x{s}, got {dims:?}")));
            }
        }
        Ok(b)
    }
}

/// Patch scores plus the routed capsule lengths that produced them.
pub struct PatchOutput {
    /// `(b, 25, 25)` in [0, 1].
    pub scores: Tensor,
    /// `(b, out_capsules)`.
    pub capsule_norms: Tensor,
}

pub struct Discriminator {
    pub config: DiscriminatorConfig,
    store: ParamStore,
    stages: [Conv2d; 4],
    primary: Conv2d,
    caps: RoutedCapsuleLayer,
    head: Linear,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        let [w1, w2, w3, w4] = config.widths;
        let mut store = ParamStore::new(config.weights_seed, candle_core::DType::F32);
        let mut root = store.root();
        let down = |i, o| ConvSpec::same(i, o, 3).stride(2);
        let stages = [
            Conv2d::new(root.pp("stage1"), down(1, w1))?,
            Conv2d::new(root.pp("stage2"), down(w1 + 1, w2))?,
            Conv2d::new(root.pp("stage3"), down(w2 + 1, w3))?,
            Conv2d::new(root.pp("stage4"), down(w3 + usize::from(config.inject_lr), w4))?,
        ];
        let caps_channels = config.capsule_types * config.capsule_dim;
        let primary = Conv2d::new(root.pp("primary"), down(w4, caps_channels))?;
        // 224 / 2^5 = 7 positions per side.
        let in_caps = config.capsule_types * 7 * 7;
        let caps = RoutedCapsuleLayer::new(
            root.pp("capsules"),
            in_caps,
            config.capsule_dim,
            config.out_capsules,
            config.out_dim,
            config.routing_iterations,
        )?;
        let head = Linear::new(root.pp("head"), config.out_capsules * config.out_dim, PATCH_GRID * PATCH_GRID)?;
        Ok(Self { config, store, stages, primary, caps, head })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new()
            .with_meta("kind", "discriminator")
            .with_meta("discriminator_config", serde_json::to_string(&self.config)?);
        for (name, t) in self.store.snapshot()? {
            a.insert(format!("disc.{name}"), t);
        }
        Ok(a)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        if archive.meta("kind") != Some("discriminator") {
            return Err(Error::CheckpointMismatch("not a discriminator archive".into()));
        }
        let cfg = archive
            .meta("discriminator_config")
            .ok_or_else(|| Error::CheckpointMismatch("discriminator archive lacks its config".into()))?;
        let disc = Self::new(serde_json::from_str(cfg)?)?;
        load_into(&disc.store, archive, "disc").map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        Ok(disc)
    }

    pub fn forward(&self, input: &DiscriminatorInput) -> Result<PatchOutput> {
        let b = input.check(self.config.inject_lr)?;
        let h = leaky_relu(&self.stages[0].forward(&input.i8)?)?;
        let h = Tensor::cat(&[&h, &input.i4], 1)?;
        let h = leaky_relu(&self.stages[1].forward(&h)?)?;
        let h = Tensor::cat(&[&h, &input.i2], 1)?;
        let mut h = leaky_relu(&self.stages[2].forward(&h)?)?;
        if self.config.inject_lr {
            h = Tensor::cat(&[&h, input.lr.as_ref().expect("checked")], 1)?;
        }
        let h = leaky_relu(&self.stages[3].forward(&h)?)?;
        let u = primary_capsules(&self.primary.forward(&h)?, self.config.capsule_types, self.config.capsule_dim)?;
        let v = self.caps.forward(&u)?.v;
        let logits = self.head.forward(&v.flatten_from(1)?)?;
        Ok(PatchOutput {
            scores: sigmoid(&logits)?.reshape((b, PATCH_GRID, PATCH_GRID))?,
            capsule_norms: capsule_norms(&v)?,
        })
    }
}

/// Mean binary cross-entropy over every patch of every sample, with the
/// prediction clamped to `[eps, 1 - eps]`. Accumulated in f64.
pub fn patch_bce_loss(pred: &Tensor, target: f64) -> Result<Tensor> {
    let p = pred.to_dtype(candle_core::DType::F64)?.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = p.log()?;
    let neg = (1.0 - &p)?.log()?;
    let ll = ((pos * target)? + (neg * (1.0 - target))?)?;
    Ok(ll.mean_all()?.neg()?)
}
