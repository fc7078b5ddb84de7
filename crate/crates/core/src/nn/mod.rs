//! Minimal neural-network toolkit on top of candle: a GEMM-backed conv op,
//! seeded parameter stores, layers, an archivable Adam and tensor archives.

pub mod adam;
pub mod archive;
pub mod conv;
pub mod layers;
pub mod params;
pub mod pointwise;
pub mod resample;

pub use adam::{Adam, AdamConfig};
pub use archive::Archive;
pub use conv::conv2d;
pub use layers::{global_avg_pool, leaky_relu, sigmoid, softmax, upsample_nearest2x, BatchNorm, Conv2d, ConvSpec, Linear};
pub use params::{Builder, Init, ParamStore};
pub use pointwise::clamp_op;
pub use resample::resize_tensor;

use crate::error::Result;

/// Load every tensor of `archive` under `prefix` into `store`, requiring an
/// exact name and shape match.
pub fn load_into(store: &ParamStore, archive: &Archive, prefix: &str) -> Result<()> {
    let tensors = archive.scoped(prefix);
    if tensors.len() != store.len() {
        return Err(crate::Error::ArchitectureMismatch(format!(
            "archive has {} `{prefix}` tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        store.assign(&name, &t)?;
    }
    Ok(())
}

pub fn scalar(t: &candle_core::Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
