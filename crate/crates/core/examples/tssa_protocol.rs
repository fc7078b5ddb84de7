//! Train the significance classifier on a synthetic blob task, then score
//! three degradations with the task-specific similarity ratio.
//!
//!     cargo run --release --example tssa_protocol

use msrgan::eval::{
    blob_task, train_clinsig_classifier, tssa_protocol, Bicubic, ClassifierConfig, LabelShuffling, Oracle, SuperResolver,
    TaskMetric,
};

fn main() -> msrgan::Result<()> {
    let train = blob_task(80, 224, 1);
    let test = blob_task(40, 224, 2);
    let (clf, score) = train_clinsig_classifier(&train, &test, ClassifierConfig::default())?;
    println!("classifier: accuracy {:.3}, cross-entropy {:.3} on {} test images", score.accuracy, score.cross_entropy, score.n);

    let models: [&dyn SuperResolver; 3] = [&Oracle, &Bicubic, &LabelShuffling { seed: 0 }];
    for sr in models {
        for metric in [TaskMetric::Accuracy, TaskMetric::CrossEntropy] {
            let r = tssa_protocol(&clf, &test, sr, metric)?;
            println!("{:>16} {metric:?}: gt {:.4}, sr {:.4}, TSSA {:.4}", sr.name(), r.m_gt, r.m_sr, r.tssa);
        }
    }
    Ok(())
}
