//! Frozen DenseNet feature extractor.
//!
//! Parameter names follow the common DenseNet checkpoint layout
//! (`features.denseblock1.denselayer1.conv1.weight`, ...), so converted
//! radiograph-pretrained weights load without renaming. Inputs are
//! grayscale images in [0, 1]; they are replicated to three channels and
//! normalized with the usual ImageNet statistics.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, load_into, Archive, BatchNorm, Builder, Conv2d, ConvSpec, Linear, ParamStore};

const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub growth_rate: usize,
    pub block_layers: Vec<usize>,
    pub init_features: usize,
    /// Bottleneck width multiplier of the 1×1 conv in each dense layer.
    pub bn_size: usize,
    pub num_classes: usize,
    pub tap_points: Vec<String>,
    pub frozen: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// Four dense blocks of four layers, growth rate 12.
    pub fn desk() -> Self {
        Self {
            growth_rate: 12,
            block_layers: vec![4, 4, 4, 4],
            init_features: 24,
            bn_size: 4,
            num_classes: 14,
            tap_points: vec!["stem".into(), "block1".into(), "block2".into()],
            frozen: true,
        }
    }

    /// DenseNet-121 geometry.
    pub fn densenet121() -> Self {
        Self {
            growth_rate: 32,
            block_layers: vec![6, 12, 24, 16],
            init_features: 64,
            ..Self::desk()
        }
    }

    /// Every tap this geometry offers, shallowest first.
    pub fn available_taps(&self) -> Vec<String> {
        let mut taps = vec!["stem".to_string(), "pool0".to_string()];
        for k in 1..=self.block_layers.len() {
            taps.push(format!("block{k}"));
            if k < self.block_layers.len() {
                taps.push(format!("transition{k}"));
            }
        }
        taps
    }

    fn tap_index(&self, tap: &str) -> Result<usize> {
        self.available_taps().iter().position(|t| t == tap).ok_or_else(|| Error::UnknownTap(tap.to_string()))
    }

    /// Spatial downsampling factor of a tap relative to the input.
    pub fn tap_stride(&self, tap: &str) -> Result<usize> {
        let i = self.tap_index(tap)?;
        Ok(match i {
            0 => 2,
            1 => 4,
            // block1 at 4, transition1 and block2 at 8, ...
            _ => 4 << ((i - 1) / 2),
        })
    }

    /// Channel count at a tap, from the concatenation and compression
    /// arithmetic.
    pub fn tap_channels(&self, tap: &str) -> Result<usize> {
        let i = self.tap_index(tap)?;
        let mut c = self.init_features;
        if i <= 1 {
            return Ok(c);
        }
        let mut idx = 1;
        for (k, &layers) in self.block_layers.iter().enumerate() {
            c += layers * self.growth_rate;
            idx += 1;
            if idx == i {
                return Ok(c);
            }
            if k + 1 < self.block_layers.len() {
                c /= 2;
                idx += 1;
                if idx == i {
                    return Ok(c);
                }
            }
        }
        unreachable!("tap index within range")
    }

    /// Channels after the last block (input of the classifier).
    pub fn final_channels(&self) -> usize {
        self.tap_channels(&format!("block{}", self.block_layers.len())).expect("last block exists")
    }
}

/// BN → ReLU → 1×1 conv → BN → ReLU → 3×3 conv.
#[derive(Clone, Debug)]
struct DenseLayer {
    norm1: BatchNorm,
    conv1: Conv2d,
    norm2: BatchNorm,
    conv2: Conv2d,
}

impl DenseLayer {
    fn new(mut b: Builder<'_>, in_c: usize, growth: usize, bn_size: usize) -> Result<Self> {
        let mid = bn_size * growth;
        Ok(Self {
            norm1: BatchNorm::new(b.pp("norm1"), in_c)?,
            conv1: Conv2d::new(b.pp("conv1"), ConvSpec::same(in_c, mid, 1).no_bias())?,
            norm2: BatchNorm::new(b.pp("norm2"), mid)?,
            conv2: Conv2d::new(b.pp("conv2"), ConvSpec::same(mid, growth, 3).no_bias())?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.relu()?)?;
        self.conv2.forward(&self.norm2.forward(&h)?.relu()?)
    }
}

/// Densely connected block: layer `k` sees the block input and the outputs
/// of layers `0..k`.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    layers: Vec<DenseLayer>,
    pub in_channels: usize,
    pub growth_rate: usize,
}

/// Per-layer inputs recorded during a block pass.
pub struct DenseTrace {
    pub output: Tensor,
    pub layer_inputs: Vec<Tensor>,
}

impl DenseBlock {
    pub fn new(mut b: Builder<'_>, in_channels: usize, layers: usize, growth_rate: usize, bn_size: usize) -> Result<Self> {
        let layers = (0..layers)
            .map(|k| DenseLayer::new(b.pp(format!("denselayer{}", k + 1)), in_channels + k * growth_rate, growth_rate, bn_size))
            .collect::<Result<_>>()?;
        Ok(Self { layers, in_channels, growth_rate })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth_rate
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(x, None)?.output)
    }

    /// Forward pass that records every layer's input. `ablate = Some(k)`
    /// replaces layer `k`'s output with zeros.
    pub fn forward_traced(&self, x: &Tensor, ablate: Option<usize>) -> Result<DenseTrace> {
        let mut features = vec![x.clone()];
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let input = Tensor::cat(&features, 1)?;
            let mut out = layer.forward(&input)?;
            if ablate == Some(k) {
                out = out.zeros_like()?;
            }
            layer_inputs.push(input);
            features.push(out);
        }
        Ok(DenseTrace { output: Tensor::cat(&features, 1)?, layer_inputs })
    }
}

#[derive(Clone, Debug)]
struct Transition {
    norm: BatchNorm,
    conv: Conv2d,
}

impl Transition {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv.forward(&self.norm.forward(x)?.relu()?)?;
        Ok(h.avg_pool2d(2)?)
    }
}

#[derive(Clone, Debug)]
struct DenseNet {
    conv0: Conv2d,
    norm0: BatchNorm,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Transition>,
    norm5: BatchNorm,
    classifier: Linear,
}

impl DenseNet {
    fn new(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        let mut root = store.root();
        let mut f = root.pp("features");
        let conv0 = Conv2d::new(f.pp("conv0"), ConvSpec { padding: 3, ..ConvSpec::same(3, cfg.init_features, 7).stride(2).no_bias() })?;
        let norm0 = BatchNorm::new(f.pp("norm0"), cfg.init_features)?;
        let mut c = cfg.init_features;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (k, &layers) in cfg.block_layers.iter().enumerate() {
            let block = DenseBlock::new(f.pp(format!("denseblock{}", k + 1)), c, layers, cfg.growth_rate, cfg.bn_size)?;
            c = block.out_channels();
            blocks.push(block);
            if k + 1 < cfg.block_layers.len() {
                let mut t = f.pp(format!("transition{}", k + 1));
                transitions.push(Transition {
                    norm: BatchNorm::new(t.pp("norm"), c)?,
                    conv: Conv2d::new(t.pp("conv"), ConvSpec::same(c, c / 2, 1).no_bias())?,
                });
                c /= 2;
            }
        }
        let norm5 = BatchNorm::new(f.pp("norm5"), c)?;
        let classifier = Linear::new(root.pp("classifier"), c, cfg.num_classes)?;
        Ok(Self { conv0, norm0, blocks, transitions, norm5, classifier })
    }

    /// Run until the deepest requested tap index, collecting activations.
    fn forward_until(&self, x: &Tensor, wanted: &[usize]) -> Result<Vec<Tensor>> {
        let deepest = wanted.iter().copied().max().unwrap_or(0);
        let mut taps: Vec<Tensor> = Vec::with_capacity(deepest + 1);
        let stem = self.norm0.forward(&self.conv0.forward(x)?)?.relu()?;
        taps.push(stem);
        if deepest >= 1 {
            // 3×3/2 max pool with one pixel of padding; replicating the
            // border gives the same maxima as -inf padding.
            let padded = taps[0].pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
            taps.push(padded.max_pool2d_with_stride(3, 2)?);
        }
        let mut h = taps.last().expect("stem").clone();
        for (k, block) in self.blocks.iter().enumerate() {
            if taps.len() > deepest {
                break;
            }
            h = block.forward(&h)?;
            taps.push(h.clone());
            if let Some(t) = self.transitions.get(k) {
                if taps.len() > deepest {
                    break;
                }
                h = t.forward(&h)?;
                taps.push(h.clone());
            }
        }
        Ok(wanted.iter().map(|&i| taps[i].clone()).collect())
    }
}

/// Where the backbone weights came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum Provenance {
    Random { seed: u64 },
    Pretrained { path: PathBuf, sha256: String },
}

#[derive(Clone, Debug)]
pub enum WeightSource {
    Random { seed: u64 },
    /// Archive file, optionally pinned to a SHA-256 of its bytes.
    Pretrained { path: PathBuf, expected_sha256: Option<String> },
}

pub struct Backbone {
    pub config: BackboneConfig,
    loaded: Option<(ParamStore, DenseNet)>,
    provenance: Option<Provenance>,
}

impl Backbone {
    /// Architecture without weights; feature extraction fails until
    /// weights are loaded.
    pub fn unloaded(config: BackboneConfig) -> Self {
        Self { config, loaded: None, provenance: None }
    }

    pub fn is_loaded(&self) -> bool {
        self.loaded.is_some()
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn store(&self) -> Option<&ParamStore> {
        self.loaded.as_ref().map(|(s, _)| s)
    }

    pub fn num_params(&self) -> usize {
        self.store().map_or(0, ParamStore::num_elements)
    }

    pub fn checksum(&self) -> Result<String> {
        self.store().ok_or(Error::WeightsNotLoaded)?.checksum()
    }

    fn net(&self) -> Result<&DenseNet> {
        self.loaded.as_ref().map(|(_, n)| n).ok_or(Error::WeightsNotLoaded)
    }

    /// Replicate `(b, 1, h, w)` to three normalized channels.
    fn prepare(&self, img: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = img.dims4()?;
        if c != 1 {
            return Err(Error::ShapeMismatch(format!("backbone expects 1-channel input, got {c}")));
        }
        let img = img.detach().to_dtype(DType::F32)?;
        let x = img.broadcast_as((b, 3, h, w))?;
        let mean = Tensor::new(&MEAN, img.device())?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&STD, img.device())?.reshape((1, 3, 1, 1))?;
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    /// Activations at `tap` for a `(b, 1, h, w)` batch. The result never
    /// carries gradient into the backbone.
    pub fn extract_features(&self, img: &Tensor, tap: &str) -> Result<Tensor> {
        Ok(self.extract_many(img, &[tap])?.remove(0))
    }

    /// Several taps from one pass.
    pub fn extract_many(&self, img: &Tensor, taps: &[&str]) -> Result<Vec<Tensor>> {
        let idx = taps.iter().map(|t| self.config.tap_index(t)).collect::<Result<Vec<_>>>()?;
        let net = self.net()?;
        let feats = net.forward_until(&self.prepare(img)?, &idx)?;
        Ok(feats.into_iter().map(|t| t.detach()).collect())
    }

    /// Global-average-pooled final features and the classifier logits.
    pub fn embed(&self, img: &Tensor) -> Result<(Tensor, Tensor)> {
        let net = self.net()?;
        let last = self.config.available_taps().len() - 1;
        let h = net.forward_until(&self.prepare(img)?, &[last])?.remove(0);
        let pooled = global_avg_pool(&net.norm5.forward(&h)?.relu()?)?;
        let logits = net.classifier.forward(&pooled)?;
        Ok((pooled.detach(), logits.detach()))
    }

    /// All parameters as an archive, with names relative to the backbone.
    pub fn to_archive(&self) -> Result<Archive> {
        let store = self.store().ok_or(Error::WeightsNotLoaded)?;
        let mut a = Archive::new().with_meta("kind", "backbone");
        for (name, t) in store.snapshot()? {
            a.insert(name, t);
        }
        Ok(a)
    }
}

fn build(config: &BackboneConfig, seed: u64) -> Result<(ParamStore, DenseNet)> {
    let mut store = ParamStore::new(seed, DType::F32);
    if config.frozen {
        store = store.frozen();
    }
    let net = DenseNet::new(&mut store, config)?;
    Ok((store, net))
}

/// Seed-initialize or load a backbone. Pretrained files must match the
/// declared geometry tensor for tensor.
pub fn load_backbone_weights(config: BackboneConfig, source: WeightSource) -> Result<Backbone> {
    if config.tap_points.is_empty() {
        return Err(Error::Config("backbone needs at least one tap point".into()));
    }
    for t in &config.tap_points {
        config.tap_index(t)?;
    }
    match source {
        WeightSource::Random { seed } => {
            let loaded = build(&config, seed)?;
            Ok(Backbone { config, loaded: Some(loaded), provenance: Some(Provenance::Random { seed }) })
        }
        WeightSource::Pretrained { path, expected_sha256 } => {
            let bytes = std::fs::read(&path)?;
            let sha = crate::util::sha256_hex(&bytes);
            if let Some(expected) = expected_sha256 {
                if !expected.eq_ignore_ascii_case(&sha) {
                    return Err(Error::ChecksumMismatch { what: path.display().to_string(), stored: expected, computed: sha });
                }
            }
            let archive = Archive::from_bytes(&bytes, &path.display().to_string())?;
            let (store, net) = build(&config, 0)?;
            load_into(&store, &archive, "")?;
            Ok(Backbone { config, loaded: Some((store, net)), provenance: Some(Provenance::Pretrained { path, sha256: sha }) })
        }
    }
}

/// Load a backbone whose tensors live under `prefix` in a larger archive
/// (e.g. a generator checkpoint).
pub fn backbone_from_archive(config: BackboneConfig, archive: &Archive, prefix: &str, provenance: Provenance) -> Result<Backbone> {
    let (store, net) = build(&config, 0)?;
    load_into(&store, archive, prefix)?;
    Ok(Backbone { config, loaded: Some((store, net)), provenance: Some(provenance) })
}

/// Provenance of a weights file: path plus SHA-256 of its bytes.
pub fn file_provenance(path: &Path) -> Result<Provenance> {
    Ok(Provenance::Pretrained { path: path.to_path_buf(), sha256: crate::util::sha256_file(path)? })
}
