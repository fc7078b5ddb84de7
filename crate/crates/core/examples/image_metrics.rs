//! PSNR, SSIM and MS-SSIM of two simple ×8 baselines against the
//! ground-truth slice.
//!
//!     cargo run --release --example image_metrics

use msrgan::data::phantom::PhantomSpec;
use msrgan::data::{phantom_pyramids, resize_image, ResizeMethod};
use msrgan::eval::{ms_ssim, psnr, ssim};

fn main() -> msrgan::Result<()> {
    for p in phantom_pyramids(0, 3, PhantomSpec::default())? {
        for method in [ResizeMethod::Bicubic, ResizeMethod::Area] {
            let up = resize_image(&p.lr, 224, 224, method)?.map(|v| v.clamp(0.0, 1.0));
            println!(
                "{method:?}: PSNR {:.2} dB, SSIM {:.4}, MS-SSIM {:.4}",
                psnr(&up, &p.x8, 1.0)?,
                ssim(&up, &p.x8)?,
                ms_ssim(&up, &p.x8)?
            );
        }
    }
    Ok(())
}
