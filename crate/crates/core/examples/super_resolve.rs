//! Super-resolve one 28×28 phantom slice with an untrained generator and
//! write the three outputs plus a comparison panel.
//!
//!     cargo run --release --example super_resolve [out_dir]

use std::path::PathBuf;

use candle_core::Device;
use msrgan::backbone::{load_backbone_weights, WeightSource};
use msrgan::data::phantom::PhantomSpec;
use msrgan::data::phantom_pyramids;
use msrgan::eval::panel;
use msrgan::generator::{bicubic_upsample, Generator, GeneratorConfig};
use msrgan::image::GrayF;

fn main() -> msrgan::Result<()> {
    let out_dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "sr_example".into()));
    std::fs::create_dir_all(&out_dir)?;
    let cfg = GeneratorConfig::toy();
    let bb = load_backbone_weights(cfg.backbone.clone(), WeightSource::Random { seed: 0 })?;
    let g = Generator::new(cfg, bb)?;

    let p = &phantom_pyramids(3, 1, PhantomSpec::default())?[0];
    let lr = p.lr.to_tensor(&Device::Cpu)?;
    let out = g.forward(&lr)?;
    let mut images = Vec::new();
    for (t, s) in out.scales().iter().zip(["sr2", "sr4", "sr8"]) {
        let img = GrayF::batch_from_tensor(t)?.remove(0);
        img.to_u8().save_png(out_dir.join(format!("{s}.png")))?;
        println!("{s}: {}x{}", img.height(), img.width());
        images.push(img);
    }
    let bicubic = GrayF::batch_from_tensor(&bicubic_upsample(&lr, 8)?.clamp(0f32, 1f32)?)?.remove(0);
    let strip = panel(&[&p.x8, &images[2], &bicubic, &p.lr]);
    strip.to_u8().save_png(out_dir.join("panel.png"))?;
    println!("wrote {}", out_dir.display());
    Ok(())
}
