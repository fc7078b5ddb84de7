//! Build the frozen dense backbone, list its tap points and pull feature
//! maps for one phantom slice.
//!
//!     cargo run --release --example backbone_features [densenet121]

use candle_core::Device;
use msrgan::backbone::{load_backbone_weights, BackboneConfig, WeightSource};
use msrgan::data::phantom::PhantomSpec;
use msrgan::data::phantom_pyramids;

fn main() -> msrgan::Result<()> {
    let config = match std::env::args().nth(1).as_deref() {
        Some("densenet121") => BackboneConfig::densenet121(),
        _ => BackboneConfig::desk(),
    };
    let bb = load_backbone_weights(config.clone(), WeightSource::Random { seed: 0 })?;
    println!("{} parameters, sha256 {}", bb.num_params(), bb.checksum()?);

    let p = &phantom_pyramids(0, 1, PhantomSpec::default())?[0];
    let x = p.x8.to_tensor(&Device::Cpu)?;
    let taps = config.available_taps();
    let names: Vec<&str> = taps.iter().map(String::as_str).collect();
    for (name, f) in names.iter().zip(bb.extract_many(&x, &names)?) {
        println!("{name:>12}: {:?} (stride {})", f.dims(), config.tap_stride(name)?);
    }
    Ok(())
}
