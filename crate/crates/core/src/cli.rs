//! `msrgan` command line: preprocess, train, evaluate, tssa, infer, report.
//!
//! Every command resolves its configuration (file, then flags), writes a
//! snapshot plus an input hash under `<run_dir>/snapshots`, and only then
//! touches anything else. Exit status is 0 on success, 2 for input errors
//! and 3 for numeric failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::backbone::load_backbone_weights;
use crate::config::{RunConfig, CLASSIFIER_CKPT};
use crate::data::corpus::{find_dicom_files, load_unit_png, write_if_changed, CLINSIG_MANIFEST, TEST_MANIFEST, TRAIN_MANIFEST};
use crate::data::manifest::ClinSigRecord;
use crate::data::{build_pyramid, load_labeled, load_pyramids, preprocess_corpus, read_manifest, resize_image, Split, HR_SIZE, LR_SIZE};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_model, panel, param_table, render_tables, train_clinsig_classifier, tssa_protocol, write_plots, Bicubic,
    ClinSigClassifier, GeneratorSr, LabelShuffling, LabeledImage, MetricsReport, Oracle, SuperResolver, TaskEval,
    TssaResult,
};
use crate::generator::{bicubic_upsample, Generator};
use crate::image::GrayF;
use crate::nn::Archive;
use crate::train::{checkpoint_dir, latest_checkpoint, run_training, CHECKPOINT_DIR, DISCRIMINATOR_CKPT, GENERATOR_CKPT};
use crate::util::{sha256_file, sha256_hex, write_atomic};

#[derive(Debug, Parser)]
#[command(name = "msrgan", version, about = "8x MRI super-resolution with a multi-scale capsule GAN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Top-level seed, overriding the file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Generator checkpoint file or checkpoint directory.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Run directory, overriding `run_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SrChoice {
    Generator,
    Bicubic,
    /// Ground truth passed through unchanged.
    #[value(alias = "identity")]
    Oracle,
    /// Every output is another case's ground truth.
    Shuffle,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// DICOM tree to PNG tree and manifests.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// DICOM root; falls back to data.dicom_root, then MSRGAN_DATA_ROOT.
        #[arg(long)]
        dicom_root: Option<PathBuf>,
    },
    /// Adversarial training, resuming from the latest checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Stop at this step instead of `training.steps`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Similarity metrics on the test manifest.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "generator")]
        sr: SrChoice,
    },
    /// Task-specific similarity with the clinical-significance classifier.
    Tssa {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "generator")]
        sr: SrChoice,
    },
    /// Super-resolve one PNG and write the ×2/×4/×8 outputs and a panel.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Tables and distribution plots from the evaluation reports.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Preprocess { common, .. }
            | Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Tssa { common, .. }
            | Command::Infer { common, .. }
            | Command::Report { common } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Preprocess { .. } => "preprocess",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Tssa { .. } => "tssa",
            Command::Infer { .. } => "infer",
            Command::Report { .. } => "report",
        }
    }
}

/// Parse arguments, run one command and return the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// File settings first, then flags.
pub fn resolve_config(cmd: &Command) -> Result<RunConfig> {
    let c = cmd.common();
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.run_dir = o.clone();
    }
    match cmd {
        Command::Preprocess { dicom_root: Some(d), .. } => cfg.data.dicom_root = Some(d.clone()),
        Command::Train { steps: Some(n), .. } => cfg.training.steps = *n,
        _ => {}
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct InputRecord {
    path: PathBuf,
    sha256: String,
}

#[derive(Serialize)]
struct InputSnapshot {
    command: String,
    inputs: Vec<InputRecord>,
    /// SHA-256 over the `sha256  path` lines of all inputs.
    input_hash: String,
}

/// Write `<run_dir>/snapshots/<command>.toml` (a loadable config) and the
/// hashes of `inputs`. Returns the combined input hash.
pub fn write_snapshot(cfg: &RunConfig, command: &str, inputs: &[PathBuf]) -> Result<String> {
    let dir = cfg.snapshots_dir();
    write_atomic(&dir.join(format!("{command}.toml")), cfg.to_toml()?.as_bytes())?;
    let mut records = Vec::new();
    for p in inputs.iter().filter(|p| p.is_file()) {
        records.push(InputRecord { path: p.clone(), sha256: sha256_file(p)? });
    }
    let lines: String = records.iter().map(|r| format!("{}  {}\n", r.sha256, r.path.display())).collect();
    let input_hash = sha256_hex(lines.as_bytes());
    let snap = InputSnapshot { command: command.into(), inputs: records, input_hash: input_hash.clone() };
    write_atomic(&dir.join(format!("{command}.inputs.json")), serde_json::to_string_pretty(&snap)?.as_bytes())?;
    Ok(input_hash)
}

pub fn execute(cmd: &Command) -> Result<()> {
    let cfg = resolve_config(cmd)?;
    match cmd {
        Command::Preprocess { .. } => cmd_preprocess(&cfg),
        Command::Train { .. } => cmd_train(&cfg),
        Command::Evaluate { common, sr } => cmd_evaluate(&cfg, common.ckpt.as_deref(), *sr),
        Command::Tssa { common, sr } => cmd_tssa(&cfg, common.ckpt.as_deref(), *sr),
        Command::Infer { common, input } => cmd_infer(&cfg, common.ckpt.as_deref(), input),
        Command::Report { .. } => cmd_report(&cfg),
    }
    .map_err(|e| annotate(cmd.name(), e))
}

fn annotate(command: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{command}: {m}")),
        other => other,
    }
}

pub fn cmd_preprocess(cfg: &RunConfig) -> Result<()> {
    let root = cfg.data.dicom_root.clone().ok_or_else(|| Error::Config("no DICOM root: set data.dicom_root, --dicom-root or MSRGAN_DATA_ROOT".into()))?;
    let mut inputs = if root.is_dir() { find_dicom_files(&root) } else { Vec::new() };
    inputs.extend(cfg.data.clinsig_csv.clone());
    let hash = write_snapshot(cfg, "preprocess", &inputs)?;
    let s = preprocess_corpus(&cfg.data, cfg.seed)?;
    println!("input hash {hash}");
    println!("found {} DICOM files, {} failed, {} skipped by series filter", s.found, s.failed.len(), s.skipped_series);
    for (p, why) in &s.failed {
        eprintln!("warning: {}: {why}", p.display());
    }
    println!("wrote {} PNGs, {} unchanged", s.written, s.unchanged);
    println!("manifest rows: {} train, {} test", s.train_rows, s.test_rows);
    if let Some(n) = s.clinsig_rows {
        println!("classification manifest: {n} rows");
    }
    Ok(())
}

fn train_pyramids(cfg: &RunConfig) -> Result<Vec<crate::data::ScalePyramid>> {
    let mut rows = read_manifest(&cfg.data.output_root, TRAIN_MANIFEST)?;
    if let Some(n) = cfg.data.max_train_images {
        rows.truncate(n);
    }
    if rows.is_empty() {
        return Err(Error::EmptyManifest);
    }
    load_pyramids(&cfg.data.output_root, &rows)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let manifest = cfg.data.output_root.join(crate::data::corpus::MANIFEST_DIR).join(TRAIN_MANIFEST);
    if !manifest.is_file() {
        return Err(Error::MissingArtifact(manifest));
    }
    let mut inputs = vec![manifest];
    inputs.extend(cfg.generator.backbone_weights.clone());
    let hash = write_snapshot(cfg, "train", &inputs)?;
    println!("input hash {hash}");
    let data = train_pyramids(cfg)?;
    let backbone = load_backbone_weights(cfg.generator.model.backbone.clone(), cfg.backbone_source())?;
    let gen = Generator::new(cfg.generator.model.clone(), backbone)?;
    let disc = Discriminator::new(cfg.discriminator.clone())?;
    let every = (cfg.training.steps / 20).max(1);
    println!("training on {} slices for {} steps", data.len(), cfg.training.steps);
    let result = run_training(cfg.training.clone(), gen, disc, data, &cfg.run_dir, |r| {
        if r.step % every == 0 {
            println!("step {:>6}  g {:.5}  d {:.5}", r.step, r.g_loss, r.d_loss);
        }
    });
    let trainer = match result {
        Ok(t) => t,
        Err(e @ Error::NonFiniteLoss { .. }) => {
            if let Some(step) = latest_checkpoint(&cfg.run_dir)? {
                eprintln!("last good checkpoint: {}", checkpoint_dir(&cfg.run_dir, step).display());
            }
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let recs = trainer.ledger().records();
    println!("ledger tail:");
    for r in &recs[recs.len().saturating_sub(5)..] {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}

/// Explicit `--ckpt` (file or directory) or the latest checkpoint of the run.
pub fn generator_checkpoint(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<PathBuf> {
    let path = match ckpt {
        Some(p) if p.is_dir() => p.join(GENERATOR_CKPT),
        Some(p) => p.to_path_buf(),
        None => match latest_checkpoint(&cfg.run_dir)? {
            Some(step) => checkpoint_dir(&cfg.run_dir, step).join(GENERATOR_CKPT),
            None => return Err(Error::MissingArtifact(cfg.run_dir.join(CHECKPOINT_DIR))),
        },
    };
    if !path.is_file() {
        return Err(Error::MissingArtifact(path));
    }
    Ok(path)
}

fn load_generator(path: &Path) -> Result<Generator> {
    Generator::from_archive(&Archive::load(path)?)
}

fn classifier_path(cfg: &RunConfig) -> PathBuf {
    cfg.run_dir.join(CHECKPOINT_DIR).join(CLASSIFIER_CKPT)
}

fn labeled_split(cfg: &RunConfig, split: Split) -> Result<Vec<LabeledImage>> {
    let rows: Vec<ClinSigRecord> = read_manifest(&cfg.data.output_root, CLINSIG_MANIFEST)?
        .into_iter()
        .filter(|r| r.split == split)
        .map(|r| ClinSigRecord { image_path: r.path, label: r.label.unwrap_or(false) })
        .collect();
    Ok(load_labeled(&cfg.data.output_root, &rows)?.into_iter().map(|(image, label)| LabeledImage { image, label }).collect())
}

fn test_pyramids(cfg: &RunConfig) -> Result<(PathBuf, Vec<crate::data::ScalePyramid>)> {
    let manifest = cfg.data.output_root.join(crate::data::corpus::MANIFEST_DIR).join(TEST_MANIFEST);
    let mut rows = read_manifest(&cfg.data.output_root, TEST_MANIFEST)?;
    if let Some(n) = cfg.evaluation.max_images {
        rows.truncate(n);
    }
    Ok((manifest, load_pyramids(&cfg.data.output_root, &rows)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn cmd_evaluate(cfg: &RunConfig, ckpt: Option<&Path>, sr: SrChoice) -> Result<()> {
    let manifest = cfg.data.output_root.join(crate::data::corpus::MANIFEST_DIR).join(TEST_MANIFEST);
    if !manifest.is_file() {
        return Err(Error::MissingArtifact(manifest));
    }
    let gen_path = match sr {
        SrChoice::Generator => Some(generator_checkpoint(cfg, ckpt)?),
        _ => None,
    };
    let clf_path = classifier_path(cfg);
    let mut inputs = vec![manifest];
    inputs.extend(gen_path.clone());
    inputs.push(clf_path.clone());
    let hash = write_snapshot(cfg, "evaluate", &inputs)?;
    println!("input hash {hash}");
    let (_, test) = test_pyramids(cfg)?;
    if test.is_empty() {
        return Err(Error::EmptyManifest);
    }

    let classifier = if clf_path.is_file() { Some(ClinSigClassifier::from_archive(&Archive::load(&clf_path)?)?) } else { None };
    let held = match &classifier {
        Some(_) => labeled_split(cfg, Split::Test)?,
        None => Vec::new(),
    };
    let task = classifier.as_ref().map(|c| TaskEval { classifier: c, test: &held, metric: cfg.evaluation.tssa_metric });

    let mut reports: Vec<MetricsReport> = Vec::new();
    if sr != SrChoice::Bicubic {
        reports.push(evaluate_model(&Bicubic, &test, task, None)?);
    }
    match sr {
        SrChoice::Generator => {
            let path = gen_path.expect("resolved above");
            let generator = load_generator(&path)?;
            let disc_path = path.with_file_name(DISCRIMINATOR_CKPT);
            let disc = if disc_path.is_file() { Some(Discriminator::from_archive(&Archive::load(&disc_path)?)?) } else { None };
            let params = param_table(&generator, disc.as_ref());
            reports.push(evaluate_model(&GeneratorSr::new(&generator), &test, task, Some(params))?);
        }
        SrChoice::Bicubic => reports.push(evaluate_model(&Bicubic, &test, task, None)?),
        SrChoice::Oracle => reports.push(evaluate_model(&Oracle, &test, task, None)?),
        SrChoice::Shuffle => reports.push(evaluate_model(&LabelShuffling { seed: cfg.seed }, &test, task, None)?),
    }
    let dir = cfg.reports_dir();
    write_json(&dir.join("evaluate.json"), &reports)?;
    let tables = render_tables(&reports);
    write_atomic(&dir.join("evaluate.txt"), tables.as_bytes())?;
    print!("{tables}");
    Ok(())
}

#[derive(Serialize)]
struct TssaReport<'a> {
    model: String,
    #[serde(flatten)]
    result: &'a TssaResult,
}

pub fn cmd_tssa(cfg: &RunConfig, ckpt: Option<&Path>, sr: SrChoice) -> Result<()> {
    let manifest = cfg.data.output_root.join(crate::data::corpus::MANIFEST_DIR).join(CLINSIG_MANIFEST);
    if !manifest.is_file() {
        return Err(Error::MissingArtifact(manifest));
    }
    let gen_path = match sr {
        SrChoice::Generator => Some(generator_checkpoint(cfg, ckpt)?),
        _ => None,
    };
    let clf_path = classifier_path(cfg);
    let mut inputs = vec![manifest, clf_path.clone()];
    inputs.extend(gen_path.clone());
    let hash = write_snapshot(cfg, "tssa", &inputs)?;
    println!("input hash {hash}");

    let test = labeled_split(cfg, Split::Test)?;
    let classifier = if clf_path.is_file() {
        ClinSigClassifier::from_archive(&Archive::load(&clf_path)?)?
    } else {
        let train = labeled_split(cfg, Split::Train)?;
        println!("training the classifier on {} ground-truth images", train.len());
        let (c, score) = train_clinsig_classifier(&train, &test, cfg.evaluation.classifier.clone())?;
        println!("held-out accuracy {:.4}", score.accuracy);
        c.to_archive()?.save(&clf_path)?;
        c
    };
    let generator = gen_path.as_deref().map(load_generator).transpose()?;
    let resolver: Box<dyn SuperResolver + '_> = match sr {
        SrChoice::Generator => Box::new(GeneratorSr::new(generator.as_ref().expect("loaded above"))),
        SrChoice::Bicubic => Box::new(Bicubic),
        SrChoice::Oracle => Box::new(Oracle),
        SrChoice::Shuffle => Box::new(LabelShuffling { seed: cfg.seed }),
    };
    let r = tssa_protocol(&classifier, &test, resolver.as_ref(), cfg.evaluation.tssa_metric)?;
    println!("accuracy: ground truth {:.4}, super-resolved {:.4}", r.accuracy_gt, r.accuracy_sr);
    println!("cross-entropy: ground truth {:.4}, super-resolved {:.4}", r.cross_entropy_gt, r.cross_entropy_sr);
    println!("TSSA ({}): {:.6}", resolver.name(), r.tssa);
    write_json(&cfg.reports_dir().join("tssa.json"), &TssaReport { model: resolver.name(), result: &r })?;
    Ok(())
}

/// A 28×28 PNG is used as is; anything else is brought to 224×224 and
/// downsampled, keeping the 224×224 image as ground truth.
pub fn infer_inputs(img: &GrayF) -> Result<(GrayF, Option<GrayF>)> {
    if img.dims() == (LR_SIZE, LR_SIZE) {
        return Ok((img.clone(), None));
    }
    let hr = if img.dims() == (HR_SIZE, HR_SIZE) {
        img.clone()
    } else {
        let method = crate::data::resize::auto_method(img.dims(), (HR_SIZE, HR_SIZE));
        resize_image(img, HR_SIZE, HR_SIZE, method)?
    };
    let p = build_pyramid(&hr)?;
    Ok((p.lr, Some(p.x8)))
}

pub fn cmd_infer(cfg: &RunConfig, ckpt: Option<&Path>, input: &Path) -> Result<()> {
    if !input.is_file() {
        return Err(Error::MissingArtifact(input.to_path_buf()));
    }
    let gen_path = generator_checkpoint(cfg, ckpt)?;
    write_snapshot(cfg, "infer", &[input.to_path_buf(), gen_path.clone()])?;
    let generator = load_generator(&gen_path)?;
    let (lr, gt) = infer_inputs(&load_unit_png(input)?)?;
    let lr_t = lr.to_tensor(&candle_core::Device::Cpu)?;
    let out = generator.forward(&lr_t)?;
    let bicubic = GrayF::batch_from_tensor(&bicubic_upsample(&lr_t, 8)?.clamp(0f32, 1f32)?)?.remove(0);
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
    let dir = cfg.samples_dir();
    std::fs::create_dir_all(&dir)?;
    let mut sr8 = None;
    for (name, t) in [("sr2", &out.sr2), ("sr4", &out.sr4), ("sr8", &out.sr8)] {
        let img = GrayF::batch_from_tensor(t)?.remove(0);
        let path = dir.join(format!("{stem}_{name}.png"));
        write_if_changed(&path, &img.to_u8().encode_png()?)?;
        println!("wrote {}", path.display());
        sr8 = Some(img);
    }
    let sr8 = sr8.expect("three outputs");
    let mut cols: Vec<&GrayF> = gt.iter().collect();
    cols.extend([&sr8, &bicubic, &lr]);
    let path = dir.join(format!("{stem}_panel.png"));
    write_if_changed(&path, &panel(&cols).to_u8().encode_png()?)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let src = cfg.reports_dir().join("evaluate.json");
    if !src.is_file() {
        return Err(Error::MissingArtifact(src));
    }
    write_snapshot(cfg, "report", std::slice::from_ref(&src))?;
    let reports: Vec<MetricsReport> = serde_json::from_str(&std::fs::read_to_string(&src)?)?;
    let tables = render_tables(&reports);
    write_atomic(&cfg.reports_dir().join("tables.txt"), tables.as_bytes())?;
    print!("{tables}");
    for p in write_plots(&reports, &cfg.reports_dir())? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\nrun_dir = \"a\"\n[training]\nsteps = 9\n").unwrap();
        let cli = Cli::try_parse_from(["msrgan", "train", "--config", p.to_str().unwrap(), "--seed", "5", "--steps", "2", "--out", "b"]).unwrap();
        let cfg = resolve_config(&cli.command).unwrap();
        assert_eq!((cfg.seed, cfg.training.steps, cfg.training.seed), (5, 2, 5));
        assert_eq!(cfg.run_dir, PathBuf::from("b"));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["msrgan", "bogus"]), 2);
        assert_eq!(run(["msrgan", "--help"]), 0);
    }

    #[test]
    fn infer_inputs_by_size() {
        let (lr, gt) = infer_inputs(&GrayF::filled(28, 28, 0.5)).unwrap();
        assert!(gt.is_none() && lr.dims() == (28, 28));
        let (lr, gt) = infer_inputs(&GrayF::filled(300, 260, 0.5)).unwrap();
        assert_eq!((lr.dims(), gt.unwrap().dims()), ((28, 28), (224, 224)));
    }
}
