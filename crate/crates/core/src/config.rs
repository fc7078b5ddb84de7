//! Run configuration: one TOML file with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::WeightSource;
use crate::data::PreprocessConfig;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::eval::{ClassifierConfig, TaskMetric};
use crate::generator::GeneratorConfig;
use crate::train::TrainConfig;

pub const DATA_ROOT_ENV: &str = "MSRGAN_DATA_ROOT";

/// Fixed run-directory layout.
pub const REPORTS_DIR: &str = "reports";
pub const SAMPLES_DIR: &str = "samples";
pub const SNAPSHOTS_DIR: &str = "snapshots";
pub const CLASSIFIER_CKPT: &str = "classifier.ckpt";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSection {
    #[serde(flatten)]
    pub model: GeneratorConfig,
    /// Backbone archive; seeded random weights when absent.
    pub backbone_weights: Option<PathBuf>,
    pub backbone_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub classifier: ClassifierConfig,
    pub tssa_metric: TaskMetric,
    /// Evaluate only the first n test rows.
    pub max_images: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { classifier: ClassifierConfig::default(), tssa_metric: TaskMetric::Accuracy, max_images: None }
    }
}

/// The top-level `seed` drives every seeded component; per-section seeds
/// are overwritten by [`RunConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub data: PreprocessConfig,
    pub generator: GeneratorSection,
    pub discriminator: DiscriminatorConfig,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            data: PreprocessConfig::default(),
            generator: GeneratorSection::default(),
            discriminator: DiscriminatorConfig::default(),
            training: TrainConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Narrow models and a short schedule for laptop runs.
    pub fn toy() -> Self {
        Self {
            generator: GeneratorSection { model: GeneratorConfig::toy(), ..Default::default() },
            discriminator: DiscriminatorConfig::toy(),
            training: TrainConfig::toy(),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copy the top-level seed into every seeded section and fill the DICOM
    /// root from the environment when unset.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.training.seed = c.seed;
        c.generator.model.weights_seed = c.seed;
        c.discriminator.weights_seed = c.seed.wrapping_add(1);
        c.evaluation.classifier.seed = c.seed;
        if c.data.dicom_root.is_none() {
            c.data.dicom_root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.model.validate()?;
        self.training.validate()?;
        if !(0.0..=1.0).contains(&self.data.max_failure_fraction) {
            return Err(Error::Config("data.max_failure_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn backbone_source(&self) -> WeightSource {
        match &self.generator.backbone_weights {
            Some(path) => WeightSource::Pretrained { path: path.clone(), expected_sha256: self.generator.backbone_sha256.clone() },
            None => WeightSource::Random { seed: self.seed },
        }
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.run_dir.join(REPORTS_DIR)
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.run_dir.join(SAMPLES_DIR)
    }

    pub fn snapshots_dir(&self) -> PathBuf {
        self.run_dir.join(SNAPSHOTS_DIR)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for c in [RunConfig::default(), RunConfig::toy()] {
            let text = c.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), c, "{text}");
        }
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml("seed = 7\n[training]\nsteps = 3\n[generator]\nbase_channels = 16\n").unwrap();
        assert_eq!(c.training.steps, 3);
        assert_eq!(c.training.gen_batch, TrainConfig::default().gen_batch);
        assert_eq!(c.generator.model.base_channels, 16);
        let r = c.resolved();
        assert_eq!((r.training.seed, r.generator.model.weights_seed, r.discriminator.weights_seed), (7, 7, 8));
    }

    #[test]
    fn shipped_toy_config_matches_the_preset() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
        let c = RunConfig::load(&path).unwrap();
        let toy = RunConfig::toy();
        assert_eq!(c.generator, toy.generator);
        assert_eq!(c.discriminator, toy.discriminator);
        assert_eq!(c.training, toy.training);
    }

    #[test]
    fn unknown_top_level_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sede = 1\n"), Err(Error::Config(_))));
    }
}
