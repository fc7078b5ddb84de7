//! Multi-scale residual generator: 28×28 in, 56/112/224 out.
//!
//! Each scale stage doubles the trunk resolution, fuses frozen backbone
//! features, refines with residual blocks and exports a one-filter detail
//! image that is added to the bicubic upsample of the input.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_from_archive, Backbone, BackboneConfig, Provenance};
use crate::data::resize::{auto_method, ResizeMethod};
use crate::data::LR_SIZE;
use crate::error::{Error, Result};
use crate::nn::{
    clamp_op, conv2d, leaky_relu, load_into, resize_tensor, sigmoid, upsample_nearest2x, Archive, Builder, Conv2d, ConvSpec, Init, ParamStore,
};

pub const SCALES: [usize; 3] = [2, 4, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub residual_blocks: usize,
    pub weights_seed: u64,
    /// Backbone tap feeding the ×2, ×4 and ×8 stages.
    pub taps: [String; 3],
    pub backbone: BackboneConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            residual_blocks: 1,
            weights_seed: 0,
            taps: ["stem".into(), "block1".into(), "block2".into()],
            backbone: BackboneConfig::desk(),
        }
    }
}

impl GeneratorConfig {
    /// Narrow trunk for quick desk runs.
    pub fn toy() -> Self {
        Self { base_channels: 8, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 8 {
            return Err(Error::Config(format!("base_channels must be at least 8, got {}", self.base_channels)));
        }
        for t in &self.taps {
            self.backbone.tap_stride(t)?;
        }
        Ok(())
    }
}

/// Separable bicubic upsampling of `(b, c, h, w)` by 2, 4 or 8.
pub fn bicubic_upsample(img: &Tensor, scale: usize) -> Result<Tensor> {
    if !matches!(scale, 2 | 4 | 8) {
        return Err(Error::Config(format!("scale must be 2, 4 or 8, got {scale}")));
    }
    let (_, _, h, w) = img.dims4()?;
    resize_tensor(img, h * scale, w * scale, ResizeMethod::Bicubic)
}

/// Nearest ×2 → 3×3 conv → activation, plus the upsampled input through a
/// bypass (identity, or 1×1 projection when the widths differ).
#[derive(Clone, Debug)]
pub struct UpsamplingUnit {
    conv: Conv2d,
    bypass: Option<Conv2d>,
}

impl UpsamplingUnit {
    pub fn new(mut b: Builder<'_>, in_c: usize, out_c: usize) -> Result<Self> {
        let conv = Conv2d::new(b.pp("conv"), ConvSpec::same(in_c, out_c, 3))?;
        let bypass = if in_c != out_c { Some(Conv2d::new(b.pp("bypass"), ConvSpec::same(in_c, out_c, 1))?) } else { None };
        Ok(Self { conv, bypass })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let up = upsample_nearest2x(x)?;
        let skip = match &self.bypass {
            Some(p) => p.forward(&up)?,
            None => up.clone(),
        };
        Ok((leaky_relu(&self.conv.forward(&up)?)? + skip)?)
    }
}

/// `x + conv(act(conv(x)))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualBlock {
    pub fn new(mut b: Builder<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(b.pp("conv1"), ConvSpec::same(channels, channels, 3))?,
            conv2: Conv2d::new(b.pp("conv2"), ConvSpec::same(channels, channels, 3))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&leaky_relu(&self.conv1.forward(x)?)?)?;
        Ok((x + h)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    /// Logistic squashing into (0, 1).
    Logistic,
    /// Raw single-channel map; used for the detail heads whose sum with the
    /// bicubic base is clamped to [0, 1].
    Linear,
}

/// One-filter 3×3 conv turning a feature map into an image.
#[derive(Clone, Debug)]
pub struct ToImage {
    conv: Conv2d,
    pub activation: OutputActivation,
}

impl ToImage {
    pub fn new(mut b: Builder<'_>, channels: usize, activation: OutputActivation) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(b.pp("conv"), ConvSpec::same(channels, 1, 3))?, activation })
    }

    pub fn preactivation(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(x)
    }

    pub fn activate(&self, pre: &Tensor) -> Result<Tensor> {
        match self.activation {
            OutputActivation::Logistic => sigmoid(pre),
            OutputActivation::Linear => Ok(pre.clone()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.activate(&self.preactivation(x)?)
    }
}

/// 1×1 conv over `concat(trunk, backbone features)`. The weight is stored
/// for the concatenated input; the forward pass splits it so the backbone
/// half is applied at the feature map's native resolution before
/// resampling. Resampling is linear and preserves constants, so this equals
/// resampling the features first.
#[derive(Clone, Debug)]
pub struct Fusion {
    weight: Tensor,
    bias: Tensor,
    trunk_channels: usize,
    feature_channels: usize,
}

impl Fusion {
    pub fn new(mut b: Builder<'_>, trunk_channels: usize, feature_channels: usize) -> Result<Self> {
        let fan_in = trunk_channels + feature_channels;
        let weight = b.param(
            "weight",
            &[trunk_channels, fan_in, 1, 1],
            Init::Kaiming { fan_in, slope: crate::nn::layers::LEAKY_SLOPE },
        )?;
        let bias = b.param("bias", &[trunk_channels], Init::Zeros)?;
        Ok(Self { weight, bias, trunk_channels, feature_channels })
    }

    fn resample(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (_, _, fh, fw) = x.dims4()?;
        resize_tensor(x, h, w, auto_method((fh, fw), (h, w)))
    }

    pub fn forward(&self, trunk: &Tensor, features: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = trunk.dims4()?;
        let w_trunk = self.weight.narrow(1, 0, self.trunk_channels)?;
        let w_feat = self.weight.narrow(1, self.trunk_channels, self.feature_channels)?;
        let projected = Self::resample(&conv2d(features, &w_feat, 1, 0)?, h, w)?;
        let y = (conv2d(trunk, &w_trunk, 1, 0)? + projected)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }

    /// Literal form: resample, concatenate, convolve.
    pub fn forward_concat(&self, trunk: &Tensor, features: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = trunk.dims4()?;
        let cat = Tensor::cat(&[trunk, &Self::resample(features, h, w)?], 1)?;
        let y = conv2d(&cat, &self.weight, 1, 0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
struct ScaleStage {
    up: UpsamplingUnit,
    fuse: Fusion,
    res: Vec<ResidualBlock>,
    to_image: ToImage,
}

/// Generator outputs, each `(b, 1, 28·s, 28·s)` in [0, 1].
#[derive(Clone, Debug)]
pub struct MultiScaleOutput {
    pub sr2: Tensor,
    pub sr4: Tensor,
    pub sr8: Tensor,
}

impl MultiScaleOutput {
    pub fn scales(&self) -> [&Tensor; 3] {
        [&self.sr2, &self.sr4, &self.sr8]
    }

    pub fn detach(&self) -> Self {
        Self { sr2: self.sr2.detach(), sr4: self.sr4.detach(), sr8: self.sr8.detach() }
    }
}

/// Backbone activations for one batch, one per scale stage.
#[derive(Clone, Debug)]
pub struct StageFeatures(pub [Tensor; 3]);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub trainable: usize,
    pub non_trainable: usize,
    pub total: usize,
}

impl ParamCounts {
    pub fn new(trainable: usize, non_trainable: usize) -> Self {
        Self { trainable, non_trainable, total: trainable + non_trainable }
    }
}

pub struct Generator {
    pub config: GeneratorConfig,
    store: ParamStore,
    backbone: Backbone,
    head: Conv2d,
    stages: Vec<ScaleStage>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, backbone: Backbone) -> Result<Self> {
        config.validate()?;
        if !backbone.is_loaded() {
            return Err(Error::WeightsNotLoaded);
        }
        if backbone.config != config.backbone {
            return Err(Error::ArchitectureMismatch("backbone geometry differs from the generator config".into()));
        }
        let c = config.base_channels;
        let mut store = ParamStore::new(config.weights_seed, DType::F32);
        let mut root = store.root();
        let head = Conv2d::new(root.pp("head"), ConvSpec::same(1, c, 3))?;
        let mut stages = Vec::new();
        for (k, s) in SCALES.iter().enumerate() {
            let mut b = root.pp(format!("scale{s}"));
            let fc = config.backbone.tap_channels(&config.taps[k])?;
            stages.push(ScaleStage {
                up: UpsamplingUnit::new(b.pp("up"), c, c)?,
                fuse: Fusion::new(b.pp("fuse"), c, fc)?,
                res: (0..config.residual_blocks).map(|r| ResidualBlock::new(b.pp(format!("res{r}")), c)).collect::<Result<_>>()?,
                to_image: ToImage::new(b.pp("to_image"), c, OutputActivation::Linear)?,
            });
        }
        Ok(Self { config, store, backbone, head, stages })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn count_parameters(&self) -> ParamCounts {
        ParamCounts::new(self.store.num_elements(), self.backbone.num_params())
    }

    /// Names of the trainable parameters on the path to scale `s`'s output.
    pub fn scale_path_params(&self, s: usize) -> Vec<String> {
        let k = SCALES.iter().position(|&x| x == s).expect("valid scale");
        self.store
            .vars()
            .map(|(n, _)| n.to_string())
            .filter(|n| {
                n.starts_with("head.")
                    || SCALES[..=k].iter().any(|&t| {
                        n.starts_with(&format!("scale{t}.")) && (t == s || !n.starts_with(&format!("scale{t}.to_image")))
                    })
            })
            .collect()
    }

    fn check_input(lr: &Tensor) -> Result<()> {
        let (_, c, h, w) = lr.dims4()?;
        if (h, w) != (LR_SIZE, LR_SIZE) || c != 1 {
            return Err(Error::WrongInputShape(h, w));
        }
        Ok(())
    }

    /// Backbone features for a batch of LR inputs, computed on the bicubic
    /// ×8 upsample. Cacheable: depends only on the input.
    pub fn features(&self, lr: &Tensor) -> Result<StageFeatures> {
        Self::check_input(lr)?;
        let big = bicubic_upsample(&lr.detach(), 8)?;
        let taps: Vec<&str> = self.config.taps.iter().map(String::as_str).collect();
        let mut f = self.backbone.extract_many(&big, &taps)?.into_iter();
        Ok(StageFeatures([f.next().expect("3 taps"), f.next().expect("3 taps"), f.next().expect("3 taps")]))
    }

    pub fn forward(&self, lr: &Tensor) -> Result<MultiScaleOutput> {
        let feats = self.features(lr)?;
        self.forward_with_features(lr, &feats)
    }

    pub fn forward_with_features(&self, lr: &Tensor, feats: &StageFeatures) -> Result<MultiScaleOutput> {
        Self::check_input(lr)?;
        let lr = lr.detach();
        let mut h = leaky_relu(&self.head.forward(&lr)?)?;
        let mut outs = Vec::with_capacity(3);
        for ((stage, &s), f) in self.stages.iter().zip(&SCALES).zip(&feats.0) {
            h = stage.up.forward(&h)?;
            h = leaky_relu(&stage.fuse.forward(&h, f)?)?;
            for r in &stage.res {
                h = r.forward(&h)?;
            }
            let detail = stage.to_image.forward(&h)?;
            let base = bicubic_upsample(&lr, s)?;
            outs.push(clamp_op(&(base + detail)?, 0.0, 1.0)?);
        }
        let mut it = outs.into_iter();
        Ok(MultiScaleOutput { sr2: it.next().expect("3"), sr4: it.next().expect("3"), sr8: it.next().expect("3") })
    }

    /// Trainable weights under `gen.`, the frozen backbone under
    /// `backbone.`, config and provenance as metadata.
    pub fn to_archive(&self) -> Result<Archive> {
        let provenance = self.backbone.provenance().ok_or(Error::WeightsNotLoaded)?;
        let mut a = Archive::new()
            .with_meta("kind", "generator")
            .with_meta("generator_config", serde_json::to_string(&self.config)?)
            .with_meta("backbone_provenance", serde_json::to_string(provenance)?)
            .with_meta("backbone_sha256", self.backbone.checksum()?);
        for (name, t) in self.store.snapshot()? {
            a.insert(format!("gen.{name}"), t);
        }
        for (name, t) in self.backbone.to_archive()?.tensors {
            a.insert(format!("backbone.{name}"), t);
        }
        Ok(a)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta = |k: &str| {
            archive.meta(k).ok_or_else(|| Error::CheckpointMismatch(format!("generator archive lacks `{k}` metadata")))
        };
        if meta("kind")? != "generator" {
            return Err(Error::CheckpointMismatch(format!("expected a generator archive, got `{}`", meta("kind")?)));
        }
        let config: GeneratorConfig = serde_json::from_str(meta("generator_config")?)?;
        let provenance: Provenance = serde_json::from_str(meta("backbone_provenance")?)?;
        let mismatch = |e: Error| Error::CheckpointMismatch(e.to_string());
        let backbone = backbone_from_archive(config.backbone.clone(), archive, "backbone", provenance).map_err(mismatch)?;
        if backbone.checksum()? != meta("backbone_sha256")? {
            return Err(Error::CheckpointMismatch("backbone tensors do not match their recorded checksum".into()));
        }
        let gen = Self::new(config, backbone)?;
        load_into(&gen.store, archive, "gen").map_err(mismatch)?;
        Ok(gen)
    }

    /// Zero every detail head, making each output the clamped bicubic
    /// upsample.
    pub fn zero_detail_heads(&self) -> Result<()> {
        for (name, var) in self.store.vars() {
            if name.contains(".to_image.") {
                var.set(&var.zeros_like()?)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{load_backbone_weights, WeightSource};
    use crate::data::resize::resize_image;
    use crate::image::GrayF;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dev() -> Device {
        Device::Cpu
    }

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 8,
            backbone: BackboneConfig { growth_rate: 4, block_layers: vec![2, 2], init_features: 8, ..BackboneConfig::desk() },
            ..Default::default()
        }
    }

    fn generator(cfg: GeneratorConfig) -> Generator {
        let bb = load_backbone_weights(cfg.backbone.clone(), WeightSource::Random { seed: 1 }).unwrap();
        Generator::new(cfg, bb).unwrap()
    }

    fn random_lr(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * 28 * 28).map(|_| rng.random::<f32>()).collect();
        Tensor::from_vec(data, (n, 1, 28, 28), &dev()).unwrap()
    }

    /// Cubic convolution kernel for a = -1/2 written out as polynomials.
    fn keys(x: f64) -> f64 {
        let x = x.abs();
        if x < 1.0 {
            1.5 * x * x * x - 2.5 * x * x + 1.0
        } else if x < 2.0 {
            -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
        } else {
            0.0
        }
    }

    /// Direct 2-D kernel sum over the replicated-border input.
    fn bicubic_oracle(img: &[Vec<f64>], scale: usize) -> Vec<Vec<f64>> {
        let (h, w) = (img.len(), img[0].len());
        let at = |y: i64, x: i64| img[y.clamp(0, h as i64 - 1) as usize][x.clamp(0, w as i64 - 1) as usize];
        (0..h * scale)
            .map(|oy| {
                (0..w * scale)
                    .map(|ox| {
                        let sy = (oy as f64 + 0.5) / scale as f64 - 0.5;
                        let sx = (ox as f64 + 0.5) / scale as f64 - 0.5;
                        let mut acc = 0.0;
                        for y in (sy.floor() as i64 - 2)..=(sy.floor() as i64 + 3) {
                            for x in (sx.floor() as i64 - 2)..=(sx.floor() as i64 + 3) {
                                acc += keys(sy - y as f64) * keys(sx - x as f64) * at(y, x);
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn bicubic_constant_preserved() {
        let x = (Tensor::ones((1, 1, 28, 28), DType::F32, &dev()).unwrap() * 0.3).unwrap();
        let y = bicubic_upsample(&x, 8).unwrap();
        assert_eq!(y.dims(), &[1, 1, 224, 224]);
        let diff = (y - 0.3).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-6);
    }

    #[test]
    fn bicubic_matches_kernel_oracle() {
        let img = vec![vec![0.1, 0.9], vec![0.4, 0.25]];
        let t = Tensor::new(&[[[[0.1f64, 0.9], [0.4, 0.25]]]], &dev()).unwrap();
        let y = bicubic_upsample(&t, 2).unwrap().squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let o = bicubic_oracle(&img, 2);
        for (ry, ro) in y.iter().zip(&o) {
            for (a, b) in ry.iter().zip(ro) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.random()).collect()).collect();
        let t = Tensor::new(img.clone(), &dev()).unwrap().reshape((1, 1, 5, 6)).unwrap();
        let y = bicubic_upsample(&t, 4).unwrap().squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let o = bicubic_oracle(&img, 4);
        for (ry, ro) in y.iter().zip(&o) {
            for (a, b) in ry.iter().zip(ro) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    /// Away from the replicated border the cubic kernel reproduces linear
    /// functions exactly.
    #[test]
    fn bicubic_reproduces_ramps_in_the_interior() {
        let t = Tensor::from_vec((0..16 * 16).map(|i| (i / 16) as f32 * 0.02 + (i % 16) as f32 * 0.03).collect::<Vec<_>>(), (1, 1, 16, 16), &dev()).unwrap();
        let y = bicubic_upsample(&t, 2).unwrap().squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        for oy in 4..28 {
            for ox in 4..28 {
                let sy = (oy as f32 + 0.5) / 2.0 - 0.5;
                let sx = (ox as f32 + 0.5) / 2.0 - 0.5;
                assert!((y[oy][ox] - (sy * 0.02 + sx * 0.03)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn bicubic_rejects_other_scales() {
        assert!(bicubic_upsample(&random_lr(0, 1), 3).is_err());
    }

    #[test]
    fn upsampling_unit_contracts() {
        let mut store = ParamStore::new(0, DType::F32);
        let unit = UpsamplingUnit::new(store.root().pp("u"), 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
            let x = Tensor::randn(0f32, 1.0, (2, 4, h, w), &dev()).unwrap();
            assert_eq!(unit.forward(&x).unwrap().dims(), &[2, 4, 2 * h, 2 * w]);
        }
        for (_, v) in store.vars() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let x = Tensor::randn(0f32, 1.0, (1, 4, 5, 3), &dev()).unwrap();
        let y = unit.forward(&x).unwrap();
        let expect = upsample_nearest2x(&x).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap(), expect.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let z = unit.forward(&x.zeros_like().unwrap()).unwrap();
        assert_eq!(z.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn residual_block_identity_and_unit_gradient() {
        let mut store = ParamStore::new(0, DType::F64);
        let block = ResidualBlock::new(store.root().pp("r"), 3).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 3, 6, 7), &dev()).unwrap();
        assert_eq!(block.forward(&x).unwrap().dims(), x.dims());
        for (_, v) in store.vars() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
        let y = block.forward(&x).unwrap();
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), x.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        // Central differences of sum(out) with respect to each input.
        let base = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let f = |v: &[f64]| -> f64 {
            let t = Tensor::from_vec(v.to_vec(), (1, 3, 6, 7), &dev()).unwrap();
            block.forward(&t).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        for i in (0..base.len()).step_by(11) {
            let (mut a, mut b) = (base.clone(), base.clone());
            a[i] += 1e-6;
            b[i] -= 1e-6;
            assert!((f(&a) - f(&b)) / 2e-6 >= 1.0 - 1e-6);
        }
    }

    #[test]
    fn to_image_contracts() {
        let mut store = ParamStore::new(0, DType::F32);
        let head = ToImage::new(store.root().pp("t"), 5, OutputActivation::Logistic).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 5, 4, 4), &dev()).unwrap();
        assert_eq!(head.forward(&x).unwrap().dims(), &[2, 1, 4, 4]);
        let z = head.forward(&x.zeros_like().unwrap()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(z.iter().all(|&v| v == 0.5));
        let pre: Vec<f32> = (-40..=40).map(|i| i as f32 * 0.25).collect();
        let out = head.activate(&Tensor::new(pre.as_slice(), &dev()).unwrap()).unwrap().to_vec1::<f32>().unwrap();
        assert!(out.windows(2).all(|w| w[1] >= w[0]));
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn fusion_matches_literal_concatenation() {
        let mut store = ParamStore::new(3, DType::F64);
        let fuse = Fusion::new(store.root().pp("f"), 4, 6).unwrap();
        let trunk = Tensor::randn(0f64, 1.0, (2, 4, 16, 16), &dev()).unwrap();
        for &side in &[4usize, 16, 32] {
            let feats = Tensor::randn(0f64, 1.0, (2, 6, side, side), &dev()).unwrap();
            let a = fuse.forward(&trunk, &feats).unwrap();
            let b = fuse.forward_concat(&trunk, &feats).unwrap();
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-10, "side {side}: {d}");
        }
    }

    #[test]
    fn output_shapes_and_range() {
        let g = generator(small_config());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..100 {
            let scale: f32 = rng.random_range(0.1..3.0);
            let lr = (random_lr(i, 1) * scale as f64).unwrap();
            let out = g.forward(&lr).unwrap();
            for (t, s) in out.scales().iter().zip([56, 112, 224]) {
                assert_eq!(t.dims(), &[1, 1, s, s]);
                let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                assert!(v.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn wrong_input_shape() {
        let g = generator(small_config());
        let x = Tensor::zeros((1, 1, 32, 32), DType::F32, &dev()).unwrap();
        assert!(matches!(g.forward(&x), Err(Error::WrongInputShape(32, 32))));
    }

    #[test]
    fn zero_detail_is_clamped_bicubic() {
        let g = generator(small_config());
        g.zero_detail_heads().unwrap();
        let lr = (random_lr(4, 1) * 1.2).unwrap();
        let out = g.forward(&lr).unwrap();
        let img = GrayF::batch_from_tensor(&lr).unwrap().remove(0);
        for (t, s) in out.scales().iter().zip(SCALES) {
            let reference = resize_image(&img.map(|v| v as f64), 28 * s, 28 * s, ResizeMethod::Bicubic).unwrap();
            let got = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            for (a, b) in got.iter().zip(reference.data()) {
                assert!((*a as f64 - b.clamp(0.0, 1.0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn every_scale_path_receives_gradient() {
        let g = generator(small_config());
        let lr = random_lr(5, 2);
        let out = g.forward(&lr).unwrap();
        for (t, s) in out.scales().iter().zip(SCALES) {
            let grads = t.sum_all().unwrap().backward().unwrap();
            let on_path = g.scale_path_params(s);
            for (name, var) in g.store().vars() {
                let norm = grads
                    .get(var.as_tensor())
                    .map(|gr| gr.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap())
                    .unwrap_or(0.0);
                if on_path.iter().any(|n| n == name) {
                    assert!(norm > 0.0, "scale {s}: `{name}` has no gradient");
                } else {
                    assert_eq!(norm, 0.0, "scale {s}: `{name}` is off-path");
                }
            }
            for (_, var) in g.backbone().store().unwrap().vars() {
                assert!(grads.get(var.as_tensor()).is_none());
            }
        }
    }

    #[test]
    fn parameter_partition() {
        let g = generator(small_config());
        let c = g.count_parameters();
        assert_eq!(c.trainable + c.non_trainable, c.total);
        assert_eq!(c.non_trainable, g.backbone().num_params());
        assert_eq!(c.trainable, g.store().num_elements());
    }

    #[test]
    fn deterministic_outputs() {
        let g = generator(small_config());
        let lr = random_lr(9, 1);
        let a = g.forward(&lr).unwrap().sr8.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = g.forward(&lr).unwrap().sr8.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn input_var_does_not_leak_into_graph() {
        let g = generator(small_config());
        let v = Var::from_tensor(&random_lr(1, 1)).unwrap();
        let out = g.forward(v.as_tensor()).unwrap();
        let grads = out.sr8.sum_all().unwrap().backward().unwrap();
        assert!(grads.get(v.as_tensor()).is_none());
    }
}
