//! Parameter counts of the full-size generator and discriminator, printed
//! as the report's parameter table.
//!
//!     cargo run --release --example parameter_table

use msrgan::backbone::{load_backbone_weights, BackboneConfig, WeightSource};
use msrgan::discriminator::{Discriminator, DiscriminatorConfig};
use msrgan::eval::param_table;
use msrgan::generator::{Generator, GeneratorConfig};

fn main() -> msrgan::Result<()> {
    let cfg = GeneratorConfig { backbone: BackboneConfig::densenet121(), ..GeneratorConfig::default() };
    let g = Generator::new(cfg.clone(), load_backbone_weights(cfg.backbone, WeightSource::Random { seed: 0 })?)?;
    let d = Discriminator::new(DiscriminatorConfig::default())?;
    let t = param_table(&g, Some(&d));
    println!("{:<14}{:>12}{:>16}{:>12}", "", "trainable", "non-trainable", "total");
    for (name, c) in [("Generator", t.generator), ("Discriminator", t.discriminator)] {
        println!("{name:<14}{:>12}{:>16}{:>12}", c.trainable, c.non_trainable, c.total);
    }
    Ok(())
}
