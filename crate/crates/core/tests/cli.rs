//! End-to-end runs of the `msrgan` binary on a synthetic DICOM tree.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msrgan::data::phantom::PhantomSpec;
use msrgan::data::write_phantom_corpus;
use msrgan::eval::MetricsReport;
use msrgan::train::{RunLedger, CHECKPOINT_DIR, LEDGER_FILE};

fn msrgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msrgan")).args(args).env_remove("MSRGAN_DATA_ROOT").output().expect("spawn msrgan")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let labels = write_phantom_corpus(&root.join("dicom"), 3, 4, 2, PhantomSpec { size: 96, ..PhantomSpec::default() }).unwrap();
        let config = root.join("run.toml");
        let text = format!(
            r#"seed = 4
run_dir = "{run}"
{extra}
[data]
dicom_root = "{dicom}"
output_root = "{out}"
clinsig_csv = "{labels}"
n_test_patients = 1
clinsig_total = 12

[generator]
base_channels = 8

[generator.backbone]
growth_rate = 4
block_layers = [2, 2]
init_features = 8

[discriminator]
widths = [8, 8, 8, 8]
capsule_types = 2
capsule_dim = 4

[training]
gen_batch = 2
disc_batch = 1
steps = 2
checkpoint_every = 1
cache_features = true

[evaluation.classifier]
widths = [4, 4, 4, 4]
epochs = 1
"#,
            run = root.join("run").display(),
            dicom = root.join("dicom").display(),
            out = root.join("data").display(),
            labels = labels.display(),
        );
        std::fs::write(&config, text).unwrap();
        Self { _dir: dir, root, config }
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all: Vec<&str> = args.to_vec();
        all.extend(["--config", self.config.to_str().unwrap()]);
        msrgan(&all)
    }

    fn run_dir(&self) -> PathBuf {
        self.root.join("run")
    }
}

fn ok(o: &Output) {
    assert!(o.status.success(), "status {:?}\nstdout:\n{}\nstderr:\n{}", o.status, stdout(o), stderr(o));
}

fn exists(p: &Path) {
    assert!(p.exists(), "missing {}", p.display());
}

#[test]
fn full_pipeline() {
    let f = Fixture::new("");

    // Training before preprocessing has no manifest to read.
    let o = f.run(&["train"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = f.run(&["preprocess"]);
    ok(&o);
    assert!(stdout(&o).contains("wrote 12 PNGs, 0 unchanged"), "{}", stdout(&o));
    assert!(stdout(&o).contains("manifest rows: 8 train, 4 test"), "{}", stdout(&o));
    let o = f.run(&["preprocess"]);
    ok(&o);
    assert!(stdout(&o).contains("wrote 0 PNGs, 12 unchanged"), "{}", stdout(&o));
    exists(&f.run_dir().join("snapshots/preprocess.toml"));
    exists(&f.run_dir().join("snapshots/preprocess.inputs.json"));

    // Evaluation needs a checkpoint.
    let o = f.run(&["evaluate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing artifact"), "{}", stderr(&o));

    ok(&f.run(&["train", "--steps", "1"]));
    let ckpts = f.run_dir().join(CHECKPOINT_DIR);
    let ledger = RunLedger::from_jsonl(&std::fs::read_to_string(ckpts.join("1").join(LEDGER_FILE)).unwrap()).unwrap();
    assert_eq!(ledger.records().len(), 1);
    // Resume to the configured two steps.
    let o = f.run(&["train"]);
    ok(&o);
    assert!(stdout(&o).contains("ledger tail"));
    exists(&ckpts.join("2").join("generator.ckpt"));

    let o = f.run(&["evaluate"]);
    ok(&o);
    let json = f.run_dir().join("reports/evaluate.json");
    let first = std::fs::read(&json).unwrap();
    let reports: Vec<MetricsReport> = serde_json::from_slice(&first).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0].model, "Bicubic");
    assert_eq!(reports[1].n_images, 4);
    assert!(reports[1].param_counts.is_some());
    // Re-running from the written snapshot reproduces the metrics exactly.
    let snap = f.run_dir().join("snapshots/evaluate.toml");
    ok(&msrgan(&["evaluate", "--config", snap.to_str().unwrap()]));
    assert_eq!(std::fs::read(&json).unwrap(), first);

    let o = f.run(&["report"]);
    ok(&o);
    assert!(stdout(&o).contains("PSNR"));
    for name in ["tables.txt", "psnr_distribution.png", "ssim_distribution.png", "ms_ssim_distribution.png"] {
        exists(&f.run_dir().join("reports").join(name));
    }

    let o = f.run(&["evaluate", "--sr", "oracle"]);
    ok(&o);
    let reports: Vec<MetricsReport> = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    let oracle = &reports[1];
    assert_eq!((oracle.psnr, oracle.ssim, oracle.ms_ssim), (100.0, 1.0, 1.0));

    let o = f.run(&["tssa", "--sr", "identity"]);
    ok(&o);
    assert!(stdout(&o).contains("TSSA (Oracle): 1.000000"), "{}", stdout(&o));
    exists(&f.run_dir().join("checkpoints/classifier.ckpt"));
    ok(&f.run(&["tssa"]));

    let png = f.root.join("data/images/P000/axial/0000.png");
    let o = f.run(&["infer", "--input", png.to_str().unwrap()]);
    ok(&o);
    for name in ["0000_sr2.png", "0000_sr4.png", "0000_sr8.png", "0000_panel.png"] {
        exists(&f.run_dir().join("samples").join(name));
    }
    let panel = image::open(f.run_dir().join("samples/0000_panel.png")).unwrap();
    assert_eq!((panel.width(), panel.height()), (4 * 224 + 3 * 4, 224));

    let o = f.run(&["infer", "--input", "/nonexistent.png"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empty_input_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = msrgan(&["preprocess", "--dicom-root", dir.path().to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no DICOM found"), "{}", stderr(&o));
}

#[test]
fn data_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_msrgan"))
        .args(["preprocess", "--out", dir.path().join("run").to_str().unwrap()])
        .env("MSRGAN_DATA_ROOT", dir.path().join("absent"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent"), "{}", stderr(&o));
}

#[test]
fn diverging_run_exits_three() {
    let f = Fixture::new("");
    ok(&f.run(&["preprocess"]));
    let cfg = std::fs::read_to_string(&f.config).unwrap().replace("steps = 2", "steps = 4\nlr_g = 1e38\nlr_d = 1e38");
    std::fs::write(&f.config, cfg).unwrap();
    let o = f.run(&["train"]);
    assert_eq!(o.status.code(), Some(3), "{}\n{}", stdout(&o), stderr(&o));
    assert!(stderr(&o).contains("non-finite loss"), "{}", stderr(&o));
    exists(&f.run_dir().join("checkpoints/0/generator.ckpt"));
}
