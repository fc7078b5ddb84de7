//! Train the toy preset on ten phantom slices and compare ×8 PSNR/SSIM
//! against bicubic interpolation.
//!
//!     cargo run --release --example train_toy [steps]

use std::time::Instant;

use msrgan::backbone::{load_backbone_weights, WeightSource};
use msrgan::data::phantom::PhantomSpec;
use msrgan::data::phantom_pyramids;
use msrgan::discriminator::{Discriminator, DiscriminatorConfig};
use msrgan::eval::{evaluate_model, Bicubic, GeneratorSr};
use msrgan::generator::{Generator, GeneratorConfig};
use msrgan::train::{TrainConfig, Trainer};

fn main() -> msrgan::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let cfg = GeneratorConfig::toy();
    let g = Generator::new(cfg.clone(), load_backbone_weights(cfg.backbone, WeightSource::Random { seed: 0 })?)?;
    let d = Discriminator::new(DiscriminatorConfig::toy())?;
    let data = phantom_pyramids(0, 10, PhantomSpec::default())?;

    let mut t = Trainer::new(TrainConfig { steps, ..TrainConfig::toy() }, g, d, data.clone())?;
    let start = Instant::now();
    t.run(None, |r| {
        if r.step % 50 == 0 {
            println!(
                "step {:5}  g {:.4}  d {:.4}  content {:.4?}  {:.0}s",
                r.step,
                r.g_loss,
                r.d_loss,
                r.content,
                start.elapsed().as_secs_f64()
            );
        }
    })?;

    for report in [evaluate_model(&Bicubic, &data, None, None)?, evaluate_model(&GeneratorSr::new(t.generator()), &data, None, None)?] {
        println!("{:>10}: PSNR {:.2} dB, SSIM {:.4}", report.model, report.psnr, report.ssim);
    }
    Ok(())
}
