//! Alternating adversarial training.
//!
//! Every cycle runs one discriminator step on `disc_batch` real pyramids
//! and as many generated ones, then one generator step on `gen_batch`
//! pyramids. Batches, flips and therefore whole runs are a pure function
//! of the seed and the step index, which is what makes resume exact.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ScalePyramid;
use crate::discriminator::{patch_bce_loss, Discriminator, DiscriminatorConfig, DiscriminatorInput};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, MultiScaleOutput, StageFeatures};
use crate::image::GrayF;
use crate::nn::{scalar, Adam, AdamConfig, Archive};
use crate::util::{derived_rng, write_atomic};

const STREAM_DISC: u64 = 1;
const STREAM_GEN: u64 = 2;
const STREAM_FLIP: u64 = 100;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const GENERATOR_CKPT: &str = "generator.ckpt";
pub const DISCRIMINATOR_CKPT: &str = "discriminator.ckpt";
pub const LEDGER_FILE: &str = "ledger.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adv: f64,
    /// Content weight for the ×2, ×4 and ×8 outputs.
    pub content: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { adv: 1e-3, content: [1.0; 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gen_batch: usize,
    pub disc_batch: usize,
    pub steps: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Random horizontal flips of whole pyramids.
    pub flip_augment: bool,
    /// Keep backbone features per (sample, flip) in memory. Only sensible
    /// for small training sets.
    pub cache_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gen_batch: 32,
            disc_batch: 8,
            steps: 10_000,
            lr_g: 1e-4,
            lr_d: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            loss_weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 1_000,
            flip_augment: true,
            cache_features: false,
        }
    }
}

impl TrainConfig {
    /// Small batches, a faster learning rate and cached features, for
    /// overfitting a handful of slices on a laptop.
    pub fn toy() -> Self {
        Self {
            gen_batch: 2,
            disc_batch: 1,
            steps: 2_000,
            lr_g: 1e-3,
            lr_d: 1e-4,
            checkpoint_every: 500,
            cache_features: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gen_batch == 0 || self.disc_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        let w = &self.loss_weights;
        let all = [w.adv, w.content[0], w.content[1], w.content[2]];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) || all.iter().all(|x| *x == 0.0) {
            return Err(Error::Config("loss weights must be non-negative with at least one positive".into()));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }

    /// Everything that must agree between a checkpoint and a resumed run.
    fn resume_key(&self) -> Self {
        Self { steps: 0, ..self.clone() }
    }
}

/// One cycle of telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub step: u64,
    pub g_loss: f64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub d_real: f64,
    pub d_fake: f64,
    /// Unweighted mean absolute error at ×2, ×4, ×8.
    pub content: [f64; 3],
    pub grad_norm_g: f64,
    pub grad_norm_d: f64,
    pub g_samples: usize,
    pub d_real_samples: usize,
    pub d_fake_samples: usize,
}

/// Append-only list of cycle records with strictly increasing steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLedger {
    records: Vec<LedgerRecord>,
}

impl RunLedger {
    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn last_step(&self) -> u64 {
        self.records.last().map_or(0, |r| r.step)
    }

    pub fn push(&mut self, rec: LedgerRecord) -> Result<()> {
        if rec.step <= self.last_step() && !self.records.is_empty() {
            return Err(Error::Config(format!("ledger step {} does not follow {}", rec.step, self.last_step())));
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut ledger = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            ledger.push(serde_json::from_str(line)?)?;
        }
        Ok(ledger)
    }
}

/// A batch of pyramids as `(b, 1, s, s)` tensors.
#[derive(Clone, Debug)]
pub struct PyramidBatch {
    pub lr: Tensor,
    pub x2: Tensor,
    pub x4: Tensor,
    pub x8: Tensor,
}

impl PyramidBatch {
    pub fn from_pyramids(items: &[&ScalePyramid]) -> Result<Self> {
        let dev = Device::Cpu;
        let level = |f: fn(&ScalePyramid) -> &GrayF| {
            let imgs: Vec<&GrayF> = items.iter().map(|p| f(p)).collect();
            GrayF::batch_to_tensor(&imgs, &dev)
        };
        Ok(Self { lr: level(|p| &p.lr)?, x2: level(|p| &p.x2)?, x4: level(|p| &p.x4)?, x8: level(|p| &p.x8)? })
    }

    pub fn len(&self) -> usize {
        self.lr.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn targets(&self) -> [&Tensor; 3] {
        [&self.x2, &self.x4, &self.x8]
    }

    pub fn disc_input(&self, with_lr: bool) -> DiscriminatorInput {
        DiscriminatorInput {
            i2: self.x2.clone(),
            i4: self.x4.clone(),
            i8: self.x8.clone(),
            lr: with_lr.then(|| self.lr.clone()),
        }
    }
}

/// Weighted content loss and its unweighted per-scale terms.
pub struct ContentLoss {
    pub total: Tensor,
    pub per_scale: [f64; 3],
}

/// `Σ_s w_s · mean|output_s − target_s|`, accumulated in f64.
pub fn content_loss(output: &MultiScaleOutput, target: &PyramidBatch, weights: [f64; 3]) -> Result<ContentLoss> {
    let mut total: Option<Tensor> = None;
    let mut per_scale = [0.0; 3];
    for (k, (o, t)) in output.scales().into_iter().zip(target.targets()).enumerate() {
        if o.dims() != t.dims() {
            return Err(Error::ShapeMismatch(format!("output {:?} vs target {:?}", o.dims(), t.dims())));
        }
        let mae = (o.to_dtype(DType::F64)? - t.to_dtype(DType::F64)?)?.abs()?.mean_all()?;
        per_scale[k] = scalar(&mae)?;
        let term = (mae * weights[k])?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(ContentLoss { total: total.expect("three scales"), per_scale })
}

/// Which sample a batch slot holds and whether it is mirrored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Draw {
    pub index: usize,
    pub flip: bool,
}

/// Seeded sampler: sample positions are consumed in order, each epoch is
/// a fresh permutation and the dataset wraps forever.
#[derive(Clone, Debug)]
pub struct EpochLoader {
    pub n: usize,
    pub seed: u64,
    pub stream: u64,
    pub batch: usize,
    pub flip: bool,
}

impl EpochLoader {
    pub fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut p: Vec<usize> = (0..self.n).collect();
        p.shuffle(&mut derived_rng(self.seed, self.stream, epoch));
        p
    }

    /// Slots for the `k`-th batch (0-based).
    pub fn batch(&self, k: u64) -> Result<Vec<Draw>> {
        if self.n == 0 {
            return Err(Error::DataExhausted);
        }
        let n = self.n as u64;
        let start = k * self.batch as u64;
        let mut perm: Option<(u64, Vec<usize>)> = None;
        (start..start + self.batch as u64)
            .map(|pos| {
                let epoch = pos / n;
                if perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    perm = Some((epoch, self.permutation(epoch)));
                }
                let index = perm.as_ref().expect("set above").1[(pos % n) as usize];
                let flip = self.flip && derived_rng(self.seed, self.stream + STREAM_FLIP, pos).random_bool(0.5);
                Ok(Draw { index, flip })
            })
            .collect()
    }
}

pub struct DiscStep {
    pub loss: f64,
    pub real: f64,
    pub fake: f64,
    pub grad_norm: f64,
}

pub struct GenStep {
    pub loss: f64,
    pub adv: f64,
    pub content: [f64; 3],
    pub grad_norm: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    gen: Generator,
    disc: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    data: Vec<ScalePyramid>,
    step: u64,
    ledger: RunLedger,
    cache: HashMap<Draw, StageFeatures>,
}

impl Trainer {
    pub fn new(config: TrainConfig, gen: Generator, disc: Discriminator, data: Vec<ScalePyramid>) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::DataExhausted);
        }
        Ok(Self {
            opt_g: Adam::new(config.adam(config.lr_g)),
            opt_d: Adam::new(config.adam(config.lr_d)),
            config,
            gen,
            disc,
            data,
            step: 0,
            ledger: RunLedger::default(),
            cache: HashMap::new(),
        })
    }

    /// Rebuild a trainer from the newest checkpoint under `run_dir`.
    pub fn resume(config: TrainConfig, data: Vec<ScalePyramid>, run_dir: &Path) -> Result<Self> {
        let step = latest_checkpoint(run_dir)?
            .ok_or_else(|| Error::CheckpointMismatch(format!("no checkpoint under {}", run_dir.display())))?;
        let dir = checkpoint_dir(run_dir, step);
        let ga = Archive::load(dir.join(GENERATOR_CKPT))?;
        let da = Archive::load(dir.join(DISCRIMINATOR_CKPT))?;
        let saved: TrainConfig = serde_json::from_str(
            ga.meta("train_config").ok_or_else(|| Error::CheckpointMismatch("checkpoint lacks its training config".into()))?,
        )?;
        if saved.resume_key() != config.resume_key() {
            return Err(Error::CheckpointMismatch("training config differs from the checkpointed run".into()));
        }
        let gen = Generator::from_archive(&ga)?;
        let disc = Discriminator::from_archive(&da)?;
        let mut t = Self::new(config, gen, disc, data)?;
        t.opt_g = restore_adam(&ga, t.config.adam(t.config.lr_g))?;
        t.opt_d = restore_adam(&da, t.config.adam(t.config.lr_d))?;
        t.ledger = RunLedger::from_jsonl(&std::fs::read_to_string(dir.join(LEDGER_FILE))?)?;
        if t.ledger.last_step() != step {
            return Err(Error::CheckpointMismatch(format!("ledger ends at {} but checkpoint is {step}", t.ledger.last_step())));
        }
        t.step = step;
        Ok(t)
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.disc
    }

    pub fn ledger(&self) -> &RunLedger {
        &self.ledger
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn loader(&self, stream: u64) -> EpochLoader {
        let batch = if stream == STREAM_GEN { self.config.gen_batch } else { self.config.disc_batch };
        EpochLoader { n: self.data.len(), seed: self.config.seed, stream, batch, flip: self.config.flip_augment }
    }

    /// Pyramids and backbone features for a list of draws.
    pub fn assemble(&mut self, draws: &[Draw]) -> Result<(PyramidBatch, StageFeatures)> {
        let pyramids: Vec<ScalePyramid> = draws
            .iter()
            .map(|d| {
                let p = &self.data[d.index];
                if d.flip {
                    p.flip_horizontal()
                } else {
                    p.clone()
                }
            })
            .collect();
        let batch = PyramidBatch::from_pyramids(&pyramids.iter().collect::<Vec<_>>())?;
        if !self.config.cache_features {
            let feats = self.gen.features(&batch.lr)?;
            return Ok((batch, feats));
        }
        for (d, p) in draws.iter().zip(&pyramids) {
            if !self.cache.contains_key(d) {
                let f = self.gen.features(&p.lr.to_tensor(&Device::Cpu)?)?;
                self.cache.insert(*d, f);
            }
        }
        let mut stacked = Vec::with_capacity(3);
        for k in 0..3 {
            let parts: Vec<&Tensor> = draws.iter().map(|d| &self.cache[d].0[k]).collect();
            stacked.push(Tensor::cat(&parts, 0)?);
        }
        let mut it = stacked.into_iter();
        let feats = StageFeatures([it.next().expect("3"), it.next().expect("3"), it.next().expect("3")]);
        Ok((batch, feats))
    }

    fn disc_input(&self, out: &MultiScaleOutput, lr: &Tensor) -> DiscriminatorInput {
        DiscriminatorInput::from_generated(out, self.disc.config.inject_lr.then(|| lr.clone()))
    }

    /// One discriminator update on real pyramids and their generated
    /// counterparts. Generator weights are read but never updated.
    pub fn train_step_discriminator(&mut self, real: &PyramidBatch, feats: &StageFeatures) -> Result<DiscStep> {
        let fake = self.gen.forward_with_features(&real.lr, feats)?.detach();
        let real_scores = self.disc.forward(&real.disc_input(self.disc.config.inject_lr))?.scores;
        let fake_scores = self.disc.forward(&self.disc_input(&fake, &real.lr))?.scores;
        let real_loss = patch_bce_loss(&real_scores, 1.0)?;
        let fake_loss = patch_bce_loss(&fake_scores, 0.0)?;
        let loss = (&real_loss + &fake_loss)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step + 1, what: "discriminator".into() });
        }
        let grads = loss.backward()?;
        let grad_norm = self.opt_d.step(self.disc.store(), &grads)?;
        Ok(DiscStep { loss: value, real: scalar(&real_loss)?, fake: scalar(&fake_loss)?, grad_norm })
    }

    /// One generator update. The discriminator is only read; the frozen
    /// backbone never enters the optimizer.
    pub fn train_step_generator(&mut self, batch: &PyramidBatch, feats: &StageFeatures) -> Result<GenStep> {
        let w = self.config.loss_weights;
        let out = self.gen.forward_with_features(&batch.lr, feats)?;
        let content = content_loss(&out, batch, w.content)?;
        let adv = patch_bce_loss(&self.disc.forward(&self.disc_input(&out, &batch.lr))?.scores, 1.0)?;
        let loss = ((&adv * w.adv)? + &content.total)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step + 1, what: "generator".into() });
        }
        let grads = loss.backward()?;
        let grad_norm = self.opt_g.step(self.gen.store(), &grads)?;
        Ok(GenStep { loss: value, adv: scalar(&adv)?, content: content.per_scale, grad_norm })
    }

    /// Run one discriminator step then one generator step and record them.
    pub fn cycle(&mut self) -> Result<LedgerRecord> {
        let k = self.step;
        let d_draws = self.loader(STREAM_DISC).batch(k)?;
        let (d_batch, d_feats) = self.assemble(&d_draws)?;
        let d = self.train_step_discriminator(&d_batch, &d_feats)?;
        let g_draws = self.loader(STREAM_GEN).batch(k)?;
        let (g_batch, g_feats) = self.assemble(&g_draws)?;
        let g = self.train_step_generator(&g_batch, &g_feats)?;
        self.step += 1;
        let rec = LedgerRecord {
            step: self.step,
            g_loss: g.loss,
            d_loss: d.loss,
            g_adv: g.adv,
            d_real: d.real,
            d_fake: d.fake,
            content: g.content,
            grad_norm_g: g.grad_norm,
            grad_norm_d: d.grad_norm,
            g_samples: g_batch.len(),
            d_real_samples: d_batch.len(),
            d_fake_samples: d_batch.len(),
        };
        self.ledger.push(rec.clone())?;
        Ok(rec)
    }

    /// Train until `until` cycles have completed (capped at the configured
    /// step count), checkpointing into `run_dir` when given. A fresh run
    /// also checkpoints its initialization as step 0.
    pub fn run_until(&mut self, until: u64, run_dir: Option<&Path>, mut on_step: impl FnMut(&LedgerRecord)) -> Result<()> {
        let until = until.min(self.config.steps);
        if let Some(dir) = run_dir {
            if self.step == 0 && latest_checkpoint(dir)?.is_none() {
                self.save_checkpoint(dir)?;
            }
        }
        while self.step < until {
            let rec = self.cycle()?;
            on_step(&rec);
            if let Some(dir) = run_dir {
                if self.step % self.config.checkpoint_every == 0 || self.step == self.config.steps {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        Ok(())
    }

    pub fn run(&mut self, run_dir: Option<&Path>, on_step: impl FnMut(&LedgerRecord)) -> Result<()> {
        self.run_until(self.config.steps, run_dir, on_step)
    }

    /// Write `{step}/generator.ckpt`, `{step}/discriminator.ckpt` and
    /// `{step}/ledger.jsonl`, each atomically, plus the config snapshot.
    pub fn save_checkpoint(&self, run_dir: &Path) -> Result<PathBuf> {
        let root = run_dir.join(CHECKPOINT_DIR);
        let snapshot = serde_json::json!({
            "training": self.config,
            "generator": self.gen.config,
            "discriminator": self.disc.config,
        });
        write_atomic(&root.join(CONFIG_SNAPSHOT), serde_json::to_string_pretty(&snapshot)?.as_bytes())?;
        let dir = checkpoint_dir(run_dir, self.step);
        let train_cfg = serde_json::to_string(&self.config)?;
        let mut ga = self.gen.to_archive()?.with_meta("step", self.step.to_string()).with_meta("train_config", &train_cfg);
        add_adam(&mut ga, &self.opt_g);
        ga.save(dir.join(GENERATOR_CKPT))?;
        let mut da = self.disc.to_archive()?.with_meta("step", self.step.to_string()).with_meta("train_config", &train_cfg);
        add_adam(&mut da, &self.opt_d);
        da.save(dir.join(DISCRIMINATOR_CKPT))?;
        write_atomic(&dir.join(LEDGER_FILE), self.ledger.to_jsonl()?.as_bytes())?;
        Ok(dir)
    }
}

fn add_adam(a: &mut Archive, opt: &Adam) {
    a.metadata.insert("adam_steps".into(), opt.steps().to_string());
    for (name, t) in opt.state_tensors() {
        a.insert(name, t);
    }
}

fn restore_adam(a: &Archive, cfg: AdamConfig) -> Result<Adam> {
    let t = a
        .meta("adam_steps")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::CheckpointMismatch("checkpoint lacks optimizer state".into()))?;
    let state = a.tensors.iter().filter(|(k, _)| k.starts_with("adam.")).map(|(k, v)| (k.clone(), v.clone()));
    Ok(Adam::restore(cfg, t, state))
}

pub fn checkpoint_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(step.to_string())
}

/// Highest step with a complete checkpoint under `run_dir`, if any.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<u64>> {
    let root = run_dir.join(CHECKPOINT_DIR);
    if !root.is_dir() {
        return Ok(None);
    }
    let mut best = None;
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        let Some(step) = entry.file_name().to_str().and_then(|s| s.parse::<u64>().ok()) else { continue };
        let p = entry.path();
        let complete = [GENERATOR_CKPT, DISCRIMINATOR_CKPT, LEDGER_FILE].iter().all(|f| p.join(f).is_file());
        if complete && best.is_none_or(|b| step > b) {
            best = Some(step);
        }
    }
    Ok(best)
}

/// Train from scratch or, when `run_dir` already holds a checkpoint, resume
/// from the newest one. On resume the given models only fix the expected
/// configuration; weights come from the checkpoint.
pub fn run_training(
    config: TrainConfig,
    gen: Generator,
    disc: Discriminator,
    data: Vec<ScalePyramid>,
    run_dir: &Path,
    on_step: impl FnMut(&LedgerRecord),
) -> Result<Trainer> {
    let mut trainer = if latest_checkpoint(run_dir)?.is_some() {
        let (gc, dc): (GeneratorConfig, DiscriminatorConfig) = (gen.config.clone(), disc.config.clone());
        let t = Trainer::resume(config, data, run_dir)?;
        if t.gen.config != gc || t.disc.config != dc {
            return Err(Error::CheckpointMismatch("model configs differ from the checkpointed run".into()));
        }
        t
    } else {
        Trainer::new(config, gen, disc, data)?
    };
    trainer.run(Some(run_dir), on_step)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{load_backbone_weights, BackboneConfig, WeightSource};
    use crate::data::phantom::PhantomSpec;
    use crate::data::phantom_pyramids;
    use crate::discriminator::BCE_EPS;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_backbone() -> BackboneConfig {
        BackboneConfig { growth_rate: 4, block_layers: vec![2, 2], init_features: 8, ..BackboneConfig::desk() }
    }

    fn models() -> (Generator, Discriminator) {
        let cfg = GeneratorConfig { backbone: small_backbone(), ..GeneratorConfig::toy() };
        let bb = load_backbone_weights(cfg.backbone.clone(), WeightSource::Random { seed: 3 }).unwrap();
        (Generator::new(cfg, bb).unwrap(), Discriminator::new(DiscriminatorConfig::toy()).unwrap())
    }

    fn data(n: usize) -> Vec<ScalePyramid> {
        phantom_pyramids(11, n, PhantomSpec::default()).unwrap()
    }

    fn trainer(cfg: TrainConfig, n: usize) -> Trainer {
        let (g, d) = models();
        Trainer::new(cfg, g, d, data(n)).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig { gen_batch: 2, disc_batch: 1, steps: 6, checkpoint_every: 3, ..TrainConfig::toy() }
    }

    fn const_batch(v: [f32; 3]) -> PyramidBatch {
        let t = |s: usize, x: f32| Tensor::full(x, (1, 1, s, s), &Device::Cpu).unwrap();
        PyramidBatch { lr: t(28, 0.5), x2: t(56, v[0]), x4: t(112, v[1]), x8: t(224, v[2]) }
    }

    fn as_output(b: &PyramidBatch) -> MultiScaleOutput {
        MultiScaleOutput { sr2: b.x2.clone(), sr4: b.x4.clone(), sr8: b.x8.clone() }
    }

    #[test]
    fn content_loss_closed_forms() {
        let target = const_batch([0.2, 0.4, 0.6]);
        let same = content_loss(&as_output(&target), &target, [1.0; 3]).unwrap();
        assert_eq!(scalar(&same.total).unwrap(), 0.0);

        let shifted = as_output(&const_batch([0.3, 0.5, 0.7]));
        let l = scalar(&content_loss(&shifted, &target, [1.0; 3]).unwrap().total).unwrap();
        assert!((l - 0.3).abs() < 1e-6, "{l}");

        let only8 = as_output(&const_batch([0.2, 0.4, 0.9]));
        let a = scalar(&content_loss(&only8, &target, [1.0, 1.0, 1.0]).unwrap().total).unwrap();
        let b = scalar(&content_loss(&only8, &target, [7.0, 0.0, 1.0]).unwrap().total).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn content_loss_rejects_mismatched_shapes() {
        let target = const_batch([0.2, 0.4, 0.6]);
        let mut out = as_output(&target);
        out.sr4 = Tensor::zeros((1, 1, 100, 100), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(content_loss(&out, &target, [1.0; 3]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!((TrainConfig::default().gen_batch, TrainConfig::default().disc_batch), (32, 8));
        let zero = TrainConfig { loss_weights: LossWeights { adv: 0.0, content: [0.0; 3] }, ..TrainConfig::default() };
        assert!(zero.validate().is_err());
        let neg = TrainConfig { loss_weights: LossWeights { adv: -1.0, content: [1.0; 3] }, ..TrainConfig::default() };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn empty_dataset_is_exhausted() {
        let (g, d) = models();
        assert!(matches!(Trainer::new(quick(), g, d, vec![]), Err(Error::DataExhausted)));
        let l = EpochLoader { n: 0, seed: 0, stream: 1, batch: 2, flip: false };
        assert!(matches!(l.batch(0), Err(Error::DataExhausted)));
    }

    proptest! {
        #[test]
        fn every_epoch_visits_each_sample_once(n in 1usize..20, batch in 1usize..7, seed in any::<u64>()) {
            let l = EpochLoader { n, seed, stream: 1, batch, flip: true };
            let draws: Vec<usize> = (0..(3 * n) as u64).flat_map(|k| l.batch(k).unwrap()).map(|d| d.index).collect();
            for epoch in draws.chunks(n).take(3 * batch) {
                if epoch.len() == n {
                    let mut e = epoch.to_vec();
                    e.sort_unstable();
                    prop_assert_eq!(e, (0..n).collect::<Vec<_>>());
                }
            }
            prop_assert_eq!(l.batch(5).unwrap(), l.batch(5).unwrap());
        }
    }

    #[test]
    fn initial_discriminator_loss_is_near_two_ln2() {
        let mut t = trainer(quick(), 4);
        let rec = t.cycle().unwrap();
        let expect = 2.0 * std::f64::consts::LN_2;
        assert!((rec.d_loss - expect).abs() < 0.2 * expect, "{}", rec.d_loss);
    }

    #[test]
    fn steps_only_touch_their_own_network() {
        let mut t = trainer(quick(), 4);
        let sums = |t: &Trainer| {
            (
                t.gen.store().checksum().unwrap(),
                t.disc.store().checksum().unwrap(),
                t.gen.backbone().checksum().unwrap(),
            )
        };
        let (g0, d0, b0) = sums(&t);
        let draws = t.loader(STREAM_DISC).batch(0).unwrap();
        let (batch, feats) = t.assemble(&draws).unwrap();
        t.train_step_discriminator(&batch, &feats).unwrap();
        let (g1, d1, b1) = sums(&t);
        assert_eq!((&g0, &b0), (&g1, &b1));
        assert_ne!(d0, d1);
        t.train_step_generator(&batch, &feats).unwrap();
        let (g2, d2, b2) = sums(&t);
        assert_eq!((&d1, &b1), (&d2, &b2));
        assert_ne!(g1, g2);
    }

    #[test]
    fn ledger_records_asymmetric_batches() {
        let mut t = trainer(TrainConfig { gen_batch: 3, disc_batch: 2, ..quick() }, 4);
        let rec = t.cycle().unwrap();
        assert_eq!((rec.g_samples, rec.d_real_samples, rec.d_fake_samples), (3, 2, 2));
        assert_eq!(rec.step, 1);
    }

    fn mean(xs: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = xs.collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn discriminator_loss_falls_on_a_toy_set() {
        let mut t = trainer(TrainConfig { steps: 200, gen_batch: 1, disc_batch: 2, ..TrainConfig::toy() }, 4);
        t.run(None, |_| {}).unwrap();
        let r = t.ledger().records();
        let (first, last) = (r[0].d_loss, mean(r[190..].iter().map(|r| r.d_loss)));
        assert!(last < first, "d_loss {first} -> {last}");
    }

    #[test]
    fn content_only_generator_loss_falls() {
        let cfg = TrainConfig {
            steps: 200,
            gen_batch: 2,
            disc_batch: 1,
            loss_weights: LossWeights { adv: 0.0, content: [1.0; 3] },
            ..TrainConfig::toy()
        };
        let mut t = trainer(cfg, 4);
        t.run(None, |_| {}).unwrap();
        let r = t.ledger().records();
        let (first, last) = (mean(r[..10].iter().map(|r| r.g_loss)), mean(r[190..].iter().map(|r| r.g_loss)));
        assert!(last < first, "g_loss {first} -> {last}");
        // With w_a = 0 the generator loss is exactly the content sum.
        for rec in r {
            assert!((rec.g_loss - rec.content.iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_steps_checkpoints_the_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let (g, d) = models();
        let (gsum, dsum) = (g.store().checksum().unwrap(), d.store().checksum().unwrap());
        let t = run_training(TrainConfig { steps: 0, ..quick() }, g, d, data(2), dir.path(), |_| {}).unwrap();
        assert_eq!(t.step(), 0);
        assert_eq!(latest_checkpoint(dir.path()).unwrap(), Some(0));
        let ck = checkpoint_dir(dir.path(), 0);
        let g2 = Generator::from_archive(&Archive::load(ck.join(GENERATOR_CKPT)).unwrap()).unwrap();
        let d2 = Discriminator::from_archive(&Archive::load(ck.join(DISCRIMINATOR_CKPT)).unwrap()).unwrap();
        assert_eq!(g2.store().checksum().unwrap(), gsum);
        assert_eq!(d2.store().checksum().unwrap(), dsum);
        assert!(dir.path().join(CHECKPOINT_DIR).join(CONFIG_SNAPSHOT).is_file());
        assert_eq!(std::fs::read_to_string(ck.join(LEDGER_FILE)).unwrap(), "");
    }

    fn ledger_file(run_dir: &Path, step: u64) -> Vec<u8> {
        std::fs::read(checkpoint_dir(run_dir, step).join(LEDGER_FILE)).unwrap()
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let cfg = quick();
        let a = tempfile::tempdir().unwrap();
        let (g, d) = models();
        run_training(cfg.clone(), g, d, data(3), a.path(), |_| {}).unwrap();

        let b = tempfile::tempdir().unwrap();
        let (g, d) = models();
        let mut t = Trainer::new(cfg.clone(), g, d, data(3)).unwrap();
        t.run_until(4, Some(b.path()), |_| {}).unwrap();
        // Interrupted after step 4: the newest checkpoint is step 3.
        drop(t);
        assert_eq!(latest_checkpoint(b.path()).unwrap(), Some(3));
        let (g, d) = models();
        let t = run_training(cfg, g, d, data(3), b.path(), |_| {}).unwrap();
        assert_eq!(t.step(), 6);
        assert_eq!(ledger_file(a.path(), 6), ledger_file(b.path(), 6));
        // Same tensors (weights and optimizer moments) and metadata.
        for f in [GENERATOR_CKPT, DISCRIMINATOR_CKPT] {
            let ka = Archive::load(checkpoint_dir(a.path(), 6).join(f)).unwrap();
            let kb = Archive::load(checkpoint_dir(b.path(), 6).join(f)).unwrap();
            assert_eq!(ka.metadata, kb.metadata);
            assert_eq!(ka.tensors.keys().collect::<Vec<_>>(), kb.tensors.keys().collect::<Vec<_>>());
            for (x, y) in ka.tensors.values().zip(kb.tensors.values()) {
                let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                assert_eq!(flat(x), flat(y));
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_ledgers() {
        let run = || {
            let mut t = trainer(TrainConfig { steps: 3, ..quick() }, 3);
            t.run(None, |_| {}).unwrap();
            t.ledger().to_jsonl().unwrap()
        };
        assert_eq!(run(), run());
        let mut other = trainer(TrainConfig { steps: 3, seed: 1, ..quick() }, 3);
        other.run(None, |_| {}).unwrap();
        assert_ne!(run(), other.ledger().to_jsonl().unwrap());
    }

    #[test]
    fn resume_rejects_a_different_config() {
        let dir = tempfile::tempdir().unwrap();
        let (g, d) = models();
        run_training(TrainConfig { steps: 0, ..quick() }, g, d, data(2), dir.path(), |_| {}).unwrap();
        let other = TrainConfig { lr_g: 0.5, ..quick() };
        assert!(matches!(Trainer::resume(other, data(2), dir.path()), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn non_finite_data_stops_training_and_keeps_the_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = data(1);
        bad[0].x8.data_mut()[0] = f32::NAN;
        let (g, d) = models();
        let err = run_training(quick(), g, d, bad, dir.path(), |_| {}).err().unwrap();
        assert!(matches!(err, Error::NonFiniteLoss { step: 1, .. }), "{err}");
        assert_eq!(latest_checkpoint(dir.path()).unwrap(), Some(0));
    }

    #[test]
    fn ledger_is_append_only() {
        let rec = |step| LedgerRecord {
            step,
            g_loss: 0.0,
            d_loss: 0.0,
            g_adv: 0.0,
            d_real: 0.0,
            d_fake: 0.0,
            content: [0.0; 3],
            grad_norm_g: 0.0,
            grad_norm_d: 0.0,
            g_samples: 0,
            d_real_samples: 0,
            d_fake_samples: 0,
        };
        let mut l = RunLedger::default();
        l.push(rec(1)).unwrap();
        l.push(rec(2)).unwrap();
        assert!(l.push(rec(2)).is_err());
        assert_eq!(RunLedger::from_jsonl(&l.to_jsonl().unwrap()).unwrap(), l);
    }

    #[test]
    fn losses_stay_finite_on_random_inputs() {
        // Saturated, random and exactly-0/1 predictions against both labels,
        // plus content losses on random images.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = const_batch([0.2, 0.4, 0.6]);
        for i in 0..10_000 {
            let p: Vec<f32> = (0..PATCH_CELLS)
                .map(|_| match rng.random_range(0..4) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => rng.random::<f32>(),
                })
                .collect();
            let pred = Tensor::from_vec(p, (1, 25, 25), &Device::Cpu).unwrap();
            let label = if i % 2 == 0 { 1.0 } else { 0.0 };
            let l = scalar(&patch_bce_loss(&pred, label).unwrap()).unwrap();
            assert!(l.is_finite() && l >= 0.0 && l <= -(BCE_EPS.ln()) + 1e-9, "{l}");
            if i % 100 == 0 {
                let mut img = |s: usize| {
                    let v: Vec<f32> = (0..s * s).map(|_| rng.random::<f32>()).collect();
                    Tensor::from_vec(v, (1, 1, s, s), &Device::Cpu).unwrap()
                };
                let out = MultiScaleOutput { sr2: img(56), sr4: img(112), sr8: img(224) };
                let c = content_loss(&out, &target, [1.0; 3]).unwrap();
                assert!(scalar(&c.total).unwrap().is_finite());
            }
        }
    }

    const PATCH_CELLS: usize = 625;
}
