//! Score a real pyramid and a generated one with the capsule patch
//! discriminator and print the patch maps' summary.
//!
//!     cargo run --release --example patch_discriminator

use msrgan::backbone::{load_backbone_weights, WeightSource};
use msrgan::data::phantom::PhantomSpec;
use msrgan::data::phantom_pyramids;
use msrgan::discriminator::{patch_bce_loss, Discriminator, DiscriminatorConfig, DiscriminatorInput};
use msrgan::generator::{Generator, GeneratorConfig};
use msrgan::nn::scalar;
use msrgan::train::PyramidBatch;

fn main() -> msrgan::Result<()> {
    let d = Discriminator::new(DiscriminatorConfig::toy())?;
    println!("discriminator: {} parameters", d.num_params());
    let cfg = GeneratorConfig::toy();
    let g = Generator::new(cfg.clone(), load_backbone_weights(cfg.backbone, WeightSource::Random { seed: 0 })?)?;

    let data = phantom_pyramids(1, 2, PhantomSpec::default())?;
    let batch = PyramidBatch::from_pyramids(&data.iter().collect::<Vec<_>>())?;
    let real = DiscriminatorInput { i2: batch.x2.clone(), i4: batch.x4.clone(), i8: batch.x8.clone(), lr: None };
    let fake = DiscriminatorInput::from_generated(&g.forward(&batch.lr)?, None);
    for (name, input, target) in [("real", real, 1.0), ("generated", fake, 0.0)] {
        let out = d.forward(&input)?;
        let mean = scalar(&out.scores.mean_all()?)?;
        let loss = scalar(&patch_bce_loss(&out.scores, target)?)?;
        println!("{name:>9}: patch map {:?}, mean {mean:.4}, BCE against {target} = {loss:.4}", out.scores.dims());
    }
    Ok(())
}
