//! Deterministic dense-tensor primitives every higher module is built on.

mod conv;
mod linalg;
mod pool;

pub use conv::{conv3d, conv3d_shape, Kernel3};
pub use linalg::{psd_sqrt, sym_eig};
pub use pool::{avg_pool3d, max_pool3d, upsample_nearest3d};
