//! Squash a few vectors and trace routing-by-agreement on random
//! predictions, printing the coupling coefficients after each iteration.
//!
//!     cargo run --release --example capsule_routing

use candle_core::{Device, Tensor};
use msrgan::capsule::{capsule_norms, dynamic_routing, squash};

fn main() -> msrgan::Result<()> {
    let dev = Device::Cpu;
    let s = Tensor::new(&[[0.1f32, 0.0], [1.0, 0.0], [3.0, 4.0], [30.0, 40.0]], &dev)?;
    let norms = capsule_norms(&squash(&s)?)?.to_vec1::<f32>()?;
    println!("input norms 0.1, 1, 5, 50 squash to {norms:.4?}");

    // Three input capsules voting for two output capsules of dimension 4.
    let u_hat = Tensor::randn(0f32, 1.0, (1, 3, 2, 4), &dev)?;
    let routed = dynamic_routing(&u_hat, 3)?;
    for (it, c) in routed.couplings.iter().enumerate() {
        println!("iteration {it}: couplings {:.3?}", c.squeeze(0)?.to_vec2::<f32>()?);
    }
    println!("output lengths {:.4?}", capsule_norms(&routed.v)?.squeeze(0)?.to_vec1::<f32>()?);
    Ok(())
}
